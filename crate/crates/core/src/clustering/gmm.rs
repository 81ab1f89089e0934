//! Diagonal-covariance Gaussian mixture with log-space posteriors.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeanspp_init, sq_dist};
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

pub const DEFAULT_VAR_FLOOR: f64 = 1e-4;

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    log_pi: Vec<f64>,
    mu: DenseArray,
    log_var: DenseArray,
    frozen: bool,
    // Derived per component: 1/var and -(D/2)log(2pi) - (1/2)sum log var.
    inv_var: Vec<f64>,
    log_norm: Vec<f64>,
}

/// Row-stochastic posteriors, kept alongside their logs.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSeq {
    pub q: DenseArray,
    pub log_q: DenseArray,
}

impl PosteriorSeq {
    pub fn empty(k: usize) -> Self {
        Self {
            q: DenseArray::zeros(&[0, k]),
            log_q: DenseArray::zeros(&[0, k]),
        }
    }

    /// Builds one-hot rows for hard labels; `log_q` uses `-inf` off the hot
    /// entry, which the KL loss treats as zero probability.
    pub fn one_hot(ids: &[u32], k: usize) -> Self {
        let mut q = vec![0.0; ids.len() * k];
        let mut log_q = vec![f64::NEG_INFINITY; ids.len() * k];
        for (t, &c) in ids.iter().enumerate() {
            q[t * k + c as usize] = 1.0;
            log_q[t * k + c as usize] = 0.0;
        }
        Self {
            q: DenseArray::new(&[ids.len(), k], q).expect("sized above"),
            log_q: DenseArray::new(&[ids.len(), k], log_q).expect("sized above"),
        }
    }

    pub fn len(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn k(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn argmax(&self) -> Vec<u32> {
        self.q
            .rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0 as u32
            })
            .collect()
    }

    pub fn concat(parts: &[&PosteriorSeq]) -> Result<Self> {
        let k = parts.first().map_or(0, |p| p.k());
        let mut q = Vec::new();
        let mut lq = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.k() != k {
                return Err(Error::shape("PosteriorSeq::concat", format!("K {} vs {k}", p.k())));
            }
            q.extend_from_slice(p.q.data());
            lq.extend_from_slice(p.log_q.data());
            n += p.len();
        }
        Ok(Self {
            q: DenseArray::new(&[n, k], q)?,
            log_q: DenseArray::new(&[n, k], lq)?,
        })
    }
}

impl GmmModel {
    /// `log_pi` is renormalised; variances must be positive.
    pub fn new(log_pi: Vec<f64>, mu: DenseArray, log_var: DenseArray) -> Result<Self> {
        let k = log_pi.len();
        if k == 0 {
            return Err(Error::invalid("GMM needs at least one component"));
        }
        let d = match mu.dims2() {
            Some((kk, d)) if kk == k => d,
            _ => return Err(Error::shape("GmmModel", format!("mu {:?} for K={k}", mu.shape()))),
        };
        if log_var.shape() != [k, d] {
            return Err(Error::shape(
                "GmmModel",
                format!("log_var {:?} vs mu {:?}", log_var.shape(), mu.shape()),
            ));
        }
        if !mu.is_finite() || !log_var.is_finite() || log_pi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "GmmModel" });
        }
        let lse = logsumexp(&log_pi);
        let log_pi = if lse.abs() > 1e-12 {
            log_pi.iter().map(|v| v - lse).collect()
        } else {
            log_pi
        };
        let mut m = Self {
            log_pi,
            mu,
            log_var,
            frozen: false,
            inv_var: Vec::new(),
            log_norm: Vec::new(),
        };
        m.refresh();
        Ok(m)
    }

    fn refresh(&mut self) {
        let d = self.d();
        self.inv_var = self.log_var.data().iter().map(|lv| (-lv).exp()).collect();
        let c = -0.5 * d as f64 * (2.0 * PI).ln();
        self.log_norm = self.log_var.rows().map(|r| c - 0.5 * r.iter().sum::<f64>()).collect();
    }

    pub fn k(&self) -> usize {
        self.log_pi.len()
    }

    pub fn d(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn log_pi(&self) -> &[f64] {
        &self.log_pi
    }

    pub fn mu(&self) -> &DenseArray {
        &self.mu
    }

    pub fn log_var(&self) -> &DenseArray {
        &self.log_var
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the model constant; later mutation attempts fail.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn set_params(&mut self, log_pi: Vec<f64>, mu: DenseArray, log_var: DenseArray) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        *self = GmmModel::new(log_pi, mu, log_var)?;
        Ok(())
    }

    /// `log pi_k + log N(m | mu_k, diag var_k)` for component `k`.
    #[inline]
    fn joint(&self, m: &[f64], k: usize) -> f64 {
        let d = self.d();
        let mu = &self.mu.data()[k * d..(k + 1) * d];
        let iv = &self.inv_var[k * d..(k + 1) * d];
        let mut mahal = 0.0;
        for t in 0..d {
            let diff = m[t] - mu[t];
            mahal += diff * diff * iv[t];
        }
        self.log_pi[k] + self.log_norm[k] - 0.5 * mahal
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.d() {
            return Err(Error::shape(
                "gmm_log_posterior",
                format!("feature dim {n} vs model dim {}", self.d()),
            ));
        }
        Ok(())
    }

    /// Normalised log-posteriors over components for one frame.
    pub fn log_posterior(&self, m: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(m.len())?;
        let mut lp: Vec<f64> = (0..self.k()).map(|k| self.joint(m, k)).collect();
        let lse = logsumexp(&lp);
        lp.iter_mut().for_each(|v| *v -= lse);
        Ok(lp)
    }

    /// `log p(m)` under the mixture.
    pub fn log_likelihood(&self, m: &[f64]) -> Result<f64> {
        self.check_dim(m.len())?;
        let lp: Vec<f64> = (0..self.k()).map(|k| self.joint(m, k)).collect();
        Ok(logsumexp(&lp))
    }

    pub fn mean_log_likelihood(&self, x: &DenseArray) -> Result<f64> {
        let n = x.shape()[0];
        if n == 0 {
            return Err(Error::invalid("mean log-likelihood of no rows"));
        }
        let mut s = 0.0;
        for r in x.rows() {
            s += self.log_likelihood(r)?;
        }
        Ok(s / n as f64)
    }

    pub fn posteriors(&self, x: &DenseArray) -> Result<PosteriorSeq> {
        let n = x.shape()[0];
        chunked_soft_assign(self, x, n.max(1), self.k())
    }
}

/// Posteriors computed over data batches and component chunks, the
/// per-component log densities being assembled before one softmax per row.
pub fn chunked_soft_assign(
    model: &GmmModel,
    x: &DenseArray,
    batch_size: usize,
    chunk_k: usize,
) -> Result<PosteriorSeq> {
    if batch_size == 0 || chunk_k == 0 {
        return Err(Error::invalid("batch_size and chunk_k must be at least 1"));
    }
    let (n, d) = x
        .dims2()
        .ok_or_else(|| Error::shape("chunked_soft_assign", format!("{:?}", x.shape())))?;
    let k = model.k();
    if n == 0 {
        return Ok(PosteriorSeq::empty(k));
    }
    model.check_dim(d)?;
    let mut log_q = vec![0.0; n * k];
    for start in (0..n).step_by(batch_size) {
        let end = (start + batch_size).min(n);
        for ks in (0..k).step_by(chunk_k) {
            let ke = (ks + chunk_k).min(k);
            for i in start..end {
                let row = x.row(i);
                for c in ks..ke {
                    log_q[i * k + c] = model.joint(row, c);
                }
            }
        }
        for i in start..end {
            let r = &mut log_q[i * k..(i + 1) * k];
            let lse = logsumexp(r);
            r.iter_mut().for_each(|v| *v -= lse);
        }
    }
    let q: Vec<f64> = log_q.iter().map(|v| v.exp()).collect();
    Ok(PosteriorSeq {
        q: DenseArray::new(&[n, k], q)?,
        log_q: DenseArray::new(&[n, k], log_q)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmFitConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub var_floor: f64,
    /// Fraction of rows held out to monitor log-likelihood.
    pub holdout_frac: f64,
    /// Rows sampled for k-means++ seeding.
    pub init_sample: usize,
    pub seed: u64,
}

impl Default for GmmFitConfig {
    fn default() -> Self {
        Self {
            k: 16,
            epochs: 30,
            batch_size: 32,
            lr_start: 1e-2,
            lr_end: 1e-4,
            var_floor: DEFAULT_VAR_FLOOR,
            holdout_frac: 0.05,
            init_sample: 20_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFitReport {
    pub model: GmmModel,
    /// Held-out mean log-likelihood before training and after each epoch.
    pub heldout_ll: Vec<f64>,
    pub var_floor_clamps: usize,
    pub steps: usize,
}

impl GmmFitReport {
    pub fn final_heldout_ll(&self) -> f64 {
        *self.heldout_ll.last().unwrap_or(&f64::NAN)
    }
}

/// Cosine decay from `start` to `end` over `total` steps.
pub fn cosine_lr(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return start;
    }
    let p = step.min(total - 1) as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (PI * p).cos())
}

/// k-means++ means, per-cluster variances of the seeding sample, uniform
/// weights.
pub fn gmm_init(x: &DenseArray, k: usize, sample: usize, var_floor: f64, rng: &mut impl Rng) -> Result<GmmModel> {
    let (n, d) = x
        .dims2()
        .ok_or_else(|| Error::shape("gmm_init", format!("{:?}", x.shape())))?;
    let rows: Vec<usize> = if n > sample {
        rand::seq::index::sample(rng, n, sample).into_vec()
    } else {
        (0..n).collect()
    };
    let sub: Vec<Vec<f64>> = rows.iter().map(|&i| x.row(i).to_vec()).collect();
    let sub = DenseArray::from_rows(&sub)?;
    let mu = kmeanspp_init(&sub, k, rng)?;

    let mut global = vec![0.0; d];
    let mean: Vec<f64> = (0..d)
        .map(|t| sub.rows().map(|r| r[t]).sum::<f64>() / sub.shape()[0] as f64)
        .collect();
    for r in sub.rows() {
        for t in 0..d {
            global[t] += (r[t] - mean[t]).powi(2) / sub.shape()[0] as f64;
        }
    }
    let mut sum = vec![0.0; k * d];
    let mut sq = vec![0.0; k * d];
    let mut count = vec![0usize; k];
    for r in sub.rows() {
        let mut best = (0, f64::INFINITY);
        for (j, c) in mu.rows().enumerate() {
            let dd = sq_dist(r, c);
            if dd < best.1 {
                best = (j, dd);
            }
        }
        let j = best.0;
        count[j] += 1;
        for t in 0..d {
            sum[j * d + t] += r[t];
            sq[j * d + t] += r[t] * r[t];
        }
    }
    let mut log_var = vec![0.0; k * d];
    for j in 0..k {
        for t in 0..d {
            let v = if count[j] >= 2 {
                let m = sum[j * d + t] / count[j] as f64;
                (sq[j * d + t] / count[j] as f64 - m * m).max(0.0)
            } else {
                global[t]
            };
            log_var[j * d + t] = v.max(var_floor).ln();
        }
    }
    GmmModel::new(vec![-(k as f64).ln(); k], mu, DenseArray::new(&[k, d], log_var)?)
}

/// Seeds with [`gmm_init`] and runs [`gmm_fit_from`].
pub fn gmm_fit_minibatch(x: &DenseArray, cfg: &GmmFitConfig, rng: &mut impl Rng) -> Result<GmmFitReport> {
    let (train, held) = split_holdout(x, cfg.holdout_frac, rng)?;
    let init = gmm_init(&train, cfg.k, cfg.init_sample, cfg.var_floor, rng)?;
    fit_loop(init, &train, &held, cfg, rng)
}

/// Mini-batch gradient ascent on mean log-likelihood from `init`, with
/// free logits for the weights and log variances.
pub fn gmm_fit_from(init: GmmModel, x: &DenseArray, cfg: &GmmFitConfig, rng: &mut impl Rng) -> Result<GmmFitReport> {
    if init.is_frozen() {
        return Err(Error::Frozen);
    }
    let (train, held) = split_holdout(x, cfg.holdout_frac, rng)?;
    fit_loop(init, &train, &held, cfg, rng)
}

fn split_holdout(x: &DenseArray, frac: f64, rng: &mut impl Rng) -> Result<(DenseArray, DenseArray)> {
    let (n, _) = x
        .dims2()
        .ok_or_else(|| Error::shape("gmm_fit", format!("expected N x D, got {:?}", x.shape())))?;
    if n == 0 {
        return Err(Error::invalid("GMM fit needs at least one row"));
    }
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::invalid("holdout_frac must be in [0, 1)"));
    }
    let n_held = ((n as f64 * frac) as usize).min(n - 1);
    if n_held == 0 {
        return Ok((x.clone(), x.clone()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let take = |ids: &[usize]| DenseArray::from_rows(&ids.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
    Ok((take(&idx[n_held..])?, take(&idx[..n_held])?))
}

fn fit_loop(
    mut model: GmmModel,
    x: &DenseArray,
    held: &DenseArray,
    cfg: &GmmFitConfig,
    rng: &mut impl Rng,
) -> Result<GmmFitReport> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let (n, d) = x.dims2().unwrap();
    model.check_dim(d)?;
    let k = model.k();
    let floor = cfg.var_floor.ln();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut heldout_ll = vec![model.mean_log_likelihood(held)?];
    let mut clamps = 0;
    let mut step = 0;
    let mut declines = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total, cfg.lr_start, cfg.lr_end);
            step += 1;
            let b = batch.len() as f64;
            let mut g_logit = vec![0.0; k];
            let mut g_mu = vec![0.0; k * d];
            let mut g_lv = vec![0.0; k * d];
            for &i in batch {
                let row = x.row(i);
                let post = model.log_posterior(row)?;
                for (c, lp) in post.iter().enumerate() {
                    let r = lp.exp();
                    g_logit[c] += r;
                    if r == 0.0 {
                        continue;
                    }
                    let mu = &model.mu.data()[c * d..(c + 1) * d];
                    let iv = &model.inv_var[c * d..(c + 1) * d];
                    for t in 0..d {
                        let z = (row[t] - mu[t]) * iv[t];
                        g_mu[c * d + t] += r * z;
                        g_lv[c * d + t] += r * 0.5 * ((row[t] - mu[t]) * z - 1.0);
                    }
                }
            }
            if lr == 0.0 {
                continue;
            }
            // d/d logit_k of mean log p = mean responsibility - pi_k.
            let mut logits = model.log_pi.clone();
            for c in 0..k {
                logits[c] += lr * (g_logit[c] / b - model.log_pi[c].exp());
            }
            let mut mu = model.mu.clone();
            for (m, g) in mu.data_mut().iter_mut().zip(&g_mu) {
                *m += lr * g / b;
            }
            let mut lv = model.log_var.clone();
            for (v, g) in lv.data_mut().iter_mut().zip(&g_lv) {
                *v += lr * g / b;
                if *v < floor {
                    *v = floor;
                    clamps += 1;
                }
            }
            model = GmmModel::new(logits, mu, lv)?;
        }
        let ll = model.mean_log_likelihood(held)?;
        if ll < *heldout_ll.last().unwrap() {
            declines += 1;
            if declines >= 3 {
                log::warn!("GMM held-out log-likelihood fell for {declines} epochs (epoch {epoch}: {ll:.4})");
            }
        } else {
            declines = 0;
        }
        log::debug!("GMM epoch {epoch}: held-out LL {ll:.4}");
        heldout_ll.push(ll);
    }
    if clamps > 0 {
        log::info!("GMM fit: {clamps} variance entries clamped at the floor");
    }
    Ok(GmmFitReport {
        model,
        heldout_ll,
        var_floor_clamps: clamps,
        steps: step,
    })
}
