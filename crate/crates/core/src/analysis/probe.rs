//! Linear probe: multinomial logistic regression on frozen embeddings,
//! trained by full-batch gradient descent.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::DenseArray;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Held-out fraction for [`probe_over_seeds`].
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            epochs: 300,
            lr: 0.5,
            test_frac: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

/// Per-column mean and standard deviation of the training rows; constant
/// columns get unit scale.
fn standardizer(x: &DenseArray) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.dims2().unwrap();
    let mut mean = vec![0.0; d];
    for r in x.rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for r in x.rows() {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let std = var.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, std)
}

fn check_xy(x: &DenseArray, y: &[u32], what: &str) -> Result<usize> {
    let (n, d) = x
        .dims2()
        .ok_or_else(|| Error::shape("linear_probe", format!("{what} features {:?}", x.shape())))?;
    if n != y.len() || n == 0 {
        return Err(Error::shape("linear_probe", format!("{what}: {n} rows, {} labels", y.len())));
    }
    Ok(d)
}

/// Trains on `(train_x, train_y)` and returns accuracy on the test set.
/// Features are standardised with training statistics.
pub fn linear_probe(
    train_x: &DenseArray,
    train_y: &[u32],
    test_x: &DenseArray,
    test_y: &[u32],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let d = check_xy(train_x, train_y, "train")?;
    if check_xy(test_x, test_y, "test")? != d {
        return Err(Error::shape("linear_probe", "train and test widths differ"));
    }
    let first = train_y[0];
    if train_y.iter().all(|&y| y == first) {
        return Err(Error::invalid("linear probe needs at least two classes in the training set"));
    }
    let c = train_y.iter().chain(test_y).copied().max().unwrap() as usize + 1;
    let n = train_y.len();
    let (mean, std) = standardizer(train_x);
    let norm = |x: &DenseArray| -> Vec<Vec<f64>> {
        x.rows()
            .map(|r| r.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
            .collect()
    };
    let xs = norm(train_x);

    let mut rng = rng_for(cfg.seed, stream::PROBE, 0);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut w: Vec<f64> = (0..d * c).map(|_| init.sample(&mut rng)).collect();
    let mut b = vec![0.0; c];
    let mut gw = vec![0.0; d * c];
    let mut gb = vec![0.0; c];
    let mut p = vec![0.0; c];

    let scores = |w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]| {
        out.copy_from_slice(b);
        for (j, xj) in x.iter().enumerate() {
            for k in 0..c {
                out[k] += xj * w[j * c + k];
            }
        }
    };

    for _ in 0..cfg.epochs {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for (x, &y) in xs.iter().zip(train_y) {
            scores(&w, &b, x, &mut p);
            let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in p.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for (k, v) in p.iter_mut().enumerate() {
                *v /= z;
                if k == y as usize {
                    *v -= 1.0;
                }
            }
            for (j, xj) in x.iter().enumerate() {
                for k in 0..c {
                    gw[j * c + k] += xj * p[k];
                }
            }
            for k in 0..c {
                gb[k] += p[k];
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * (gi / n as f64 + cfg.l2 * *wi);
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= cfg.lr * gi / n as f64;
        }
    }

    let correct = norm(test_x)
        .iter()
        .zip(test_y)
        .filter(|(x, &y)| {
            scores(&w, &b, x, &mut p);
            super::argmax(&p) == y
        })
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

/// Shuffled `(train, test)` row indices with `round(test_frac·n)` test rows
/// (at least one of each).
pub fn split_indices(n: usize, test_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid("need at least two rows to split"));
    }
    let n_test = ((test_frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, stream::SPLIT, 0));
    let test = idx.split_off(n - n_test);
    Ok((idx, test))
}

fn take_rows(x: &DenseArray, rows: &[usize]) -> Result<DenseArray> {
    let d = x.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    DenseArray::new(&[rows.len(), d], data)
}

/// One probe per seed, each with its own random split and initialisation.
pub fn probe_over_seeds(x: &DenseArray, y: &[u32], cfg: &ProbeConfig, seeds: &[u64]) -> Result<ProbeSummary> {
    check_xy(x, y, "probe")?;
    if seeds.is_empty() {
        return Err(Error::invalid("no probe seeds"));
    }
    let mut accuracies = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let (tr, te) = split_indices(y.len(), cfg.test_frac, s)?;
        let ytr: Vec<u32> = tr.iter().map(|&i| y[i]).collect();
        let yte: Vec<u32> = te.iter().map(|&i| y[i]).collect();
        let run = ProbeConfig { seed: s, ..cfg.clone() };
        accuracies.push(linear_probe(&take_rows(x, &tr)?, &ytr, &take_rows(x, &te)?, &yte, &run)?);
    }
    let m = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / m;
    let std = if accuracies.len() > 1 {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(ProbeSummary { accuracies, mean, std })
}
