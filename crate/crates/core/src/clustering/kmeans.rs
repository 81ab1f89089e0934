use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Hard-assignment centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansModel {
    centers: DenseArray,
}

/// Outcome of [`lloyd_fit`].
#[derive(Debug, Clone)]
pub struct LloydReport {
    pub model: KmeansModel,
    /// Inertia after each assignment step, then after the final update.
    pub inertia: Vec<f64>,
    pub rounds_run: usize,
    pub reseeded: usize,
}

impl KmeansModel {
    pub fn new(centers: DenseArray) -> Result<Self> {
        let (k, _) = centers
            .dims2()
            .ok_or_else(|| Error::shape("KmeansModel", format!("{:?}", centers.shape())))?;
        if k == 0 {
            return Err(Error::invalid("k-means needs at least one center"));
        }
        if !centers.is_finite() {
            return Err(Error::NonFinite { op: "KmeansModel" });
        }
        Ok(Self { centers })
    }

    pub fn k(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn centers(&self) -> &DenseArray {
        &self.centers
    }

    /// Nearest center and its squared distance; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        nearest(&self.centers, x)
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &DenseArray, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn check_data(x: &DenseArray, k: usize) -> Result<(usize, usize)> {
    let (n, d) = x
        .dims2()
        .ok_or_else(|| Error::shape("kmeans", format!("expected N x D, got {:?}", x.shape())))?;
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if n < k {
        return Err(Error::invalid(format!("need N >= K, got N={n}, K={k}")));
    }
    Ok((n, d))
}

/// k-means++ seeding: first row uniform, then rows drawn with probability
/// proportional to squared distance to the nearest chosen center.
pub fn kmeanspp_init(x: &DenseArray, k: usize, rng: &mut impl Rng) -> Result<DenseArray> {
    let (n, d) = check_data(x, k)?;
    let mut centers = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(x.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &w) in dist.iter().enumerate() {
                if w > 0.0 {
                    if u < w {
                        pick = Some(i);
                        break;
                    }
                    u -= w;
                }
            }
            // Round-off can leave `u` just past the last positive weight.
            pick.unwrap_or_else(|| dist.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Every row coincides with a chosen center.
            rng.random_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(x.row(i), &c));
        }
        centers.extend_from_slice(&c);
    }
    DenseArray::new(&[k, d], centers)
}

/// Nearest-center IDs, ties broken toward the lowest index.
pub fn hard_labels(model: &KmeansModel, x: &DenseArray) -> Result<Vec<u32>> {
    if x.ndim() != 2 || x.shape()[1] != model.d() {
        return Err(Error::shape(
            "hard_labels",
            format!("data {:?} vs centers {:?}", x.shape(), model.centers.shape()),
        ));
    }
    Ok(x.rows().map(|r| model.nearest(r).0 as u32).collect())
}

/// Lloyd's algorithm from a k-means++ start. Stops after `iters` rounds or
/// once assignments no longer change. Empty clusters are re-seeded at the
/// point farthest from its assigned center.
pub fn lloyd_fit(x: &DenseArray, k: usize, iters: usize, rng: &mut impl Rng) -> Result<LloydReport> {
    let init = kmeanspp_init(x, k, rng)?;
    lloyd_from(x, init, iters)
}

pub fn lloyd_from(x: &DenseArray, init: DenseArray, iters: usize) -> Result<LloydReport> {
    let k = init.shape()[0];
    let (n, d) = check_data(x, k)?;
    if init.shape() != [k, d] {
        return Err(Error::shape("lloyd", format!("init {:?} for D={d}", init.shape())));
    }
    let mut centers = init;
    let mut assign = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    let mut rounds = 0;
    let mut reseeded = 0;
    for _ in 0..iters {
        let mut dists = vec![0.0; n];
        let mut changed = false;
        for i in 0..n {
            let (j, dd) = nearest(&centers, x.row(i));
            changed |= assign[i] != j;
            assign[i] = j;
            dists[i] = dd;
        }
        inertia.push(dists.iter().sum());
        if !changed {
            break;
        }
        rounds += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * d..(assign[i] + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let c = centers.data_mut();
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..d {
                    c[j * d + t] = sums[j * d + t] / counts[j] as f64;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("N >= K leaves a candidate");
                taken[far] = true;
                dists[far] = 0.0;
                c[j * d..(j + 1) * d].copy_from_slice(x.row(far));
                reseeded += 1;
                log::debug!("k-means: re-seeded empty cluster {j} at row {far}");
            }
        }
    }
    if rounds == iters && iters > 0 {
        let total = (0..n).map(|i| nearest(&centers, x.row(i)).1).sum();
        inertia.push(total);
    }
    Ok(LloydReport {
        model: KmeansModel::new(centers)?,
        inertia,
        rounds_run: rounds,
        reseeded,
    })
}
