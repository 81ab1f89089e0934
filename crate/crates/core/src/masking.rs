//! Block-wise temporal masks over latent frames and mask-token substitution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub span_min: usize,
    pub span_max: usize,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            span_min: 10,
            span_max: 25,
            ratio_min: 0.40,
            ratio_max: 0.65,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.ratio_min && self.ratio_min <= self.ratio_max && self.ratio_max <= 1.0) {
            return Err(Error::Config(format!(
                "mask ratios need 0 < min <= max <= 1, got [{}, {}]",
                self.ratio_min, self.ratio_max
            )));
        }
        if !(1 <= self.span_min && self.span_min <= self.span_max) {
            return Err(Error::Config(format!(
                "mask spans need 1 <= min <= max, got [{}, {}]",
                self.span_min, self.span_max
            )));
        }
        Ok(())
    }
}

/// A sampled span before trimming: `start..start + len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

/// `keep[t]` is true for visible frames and false for masked ones.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVector {
    keep: Vec<bool>,
    spans: Vec<Span>,
    target_ratio: f64,
    trimmed: usize,
}

impl MaskVector {
    pub fn from_keep(keep: Vec<bool>) -> Self {
        Self {
            keep,
            spans: Vec::new(),
            target_ratio: f64::NAN,
            trimmed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_masked(&self, t: usize) -> bool {
        !self.keep[t]
    }

    /// The masked index set, ascending.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&t| !self.keep[t]).collect()
    }

    pub fn n_masked(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.n_masked() as f64 / self.keep.len() as f64
    }

    /// Spans as sampled, before the last one was trimmed.
    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn target_ratio(&self) -> f64 {
        self.target_ratio
    }

    /// Frames removed from the last span to respect the ratio ceiling.
    pub fn trimmed(&self) -> usize {
        self.trimmed
    }
}

/// Draws a target ratio r, then unions spans of uniform length and start
/// until at least r·T frames are masked. Frames newly covered by the last
/// span are released from its end until the count is at most
/// floor(ratio_max·T). When T is shorter than `span_min` a single span of
/// ceil(r·T) frames is used.
pub fn sample_block_mask(t: usize, spec: &MaskSpec, rng: &mut impl Rng) -> Result<MaskVector> {
    spec.validate()?;
    if t == 0 {
        return Err(Error::invalid("cannot mask an empty sequence"));
    }
    let r = if spec.ratio_min == spec.ratio_max {
        spec.ratio_min
    } else {
        rng.random_range(spec.ratio_min..spec.ratio_max)
    };
    let mut keep = vec![true; t];
    let mut spans = Vec::new();

    if t < spec.span_min {
        let len = ((r * t as f64).ceil() as usize).clamp(1, t);
        let start = rng.random_range(0..=t - len);
        keep[start..start + len].iter_mut().for_each(|k| *k = false);
        spans.push(Span { start, len });
        return Ok(MaskVector {
            keep,
            spans,
            target_ratio: r,
            trimmed: 0,
        });
    }

    let ceiling = (spec.ratio_max * t as f64).floor() as usize;
    let mut masked = 0usize;
    let mut last_new = Vec::new();
    while (masked as f64) < r * t as f64 {
        let len = rng.random_range(spec.span_min..=spec.span_max).min(t);
        let start = rng.random_range(0..=t - len);
        spans.push(Span { start, len });
        last_new.clear();
        for (i, k) in keep[start..start + len].iter_mut().enumerate() {
            if *k {
                *k = false;
                last_new.push(start + i);
            }
        }
        masked += last_new.len();
    }
    let mut trimmed = 0;
    while masked > ceiling {
        let i = last_new.pop().expect("earlier spans stay below the ceiling");
        keep[i] = true;
        masked -= 1;
        trimmed += 1;
    }
    Ok(MaskVector {
        keep,
        spans,
        target_ratio: r,
        trimmed,
    })
}

fn check_dims(op: &'static str, z: &[usize], m: &MaskVector, t_mask: &[usize]) -> Result<()> {
    if z.len() != 2 || z[0] != m.len() || t_mask != [z[1]] {
        return Err(Error::shape(
            op,
            format!("latents {z:?}, mask of {}, token {t_mask:?}", m.len()),
        ));
    }
    Ok(())
}

/// `m ⊙ z + (1 − m) ⊙ t_mask` on plain arrays.
pub fn apply_mask_array(z: &DenseArray, m: &MaskVector, t_mask: &DenseArray) -> Result<DenseArray> {
    check_dims("apply_mask", z.shape(), m, t_mask.shape())?;
    let c = z.shape()[1];
    let mut out = z.clone();
    for (t, row) in out.data_mut().chunks_exact_mut(c).enumerate() {
        if !m.keep[t] {
            row.copy_from_slice(t_mask.data());
        }
    }
    Ok(out)
}

/// Differentiable substitution; the token only receives gradient from
/// masked rows.
pub fn apply_mask(g: &mut Graph, z: Var, m: &MaskVector, t_mask: Var) -> Result<Var> {
    check_dims("apply_mask", g.shape(z), m, g.shape(t_mask))?;
    let c = g.shape(z)[1];
    let mut keep = Vec::with_capacity(m.len() * c);
    for &k in &m.keep {
        keep.extend(std::iter::repeat_n(if k { 1.0 } else { 0.0 }, c));
    }
    let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
    let keep = g.constant(DenseArray::new(&[m.len(), c], keep)?);
    let drop = g.constant(DenseArray::new(&[m.len(), c], drop)?);
    let kept = g.mul(z, keep)?;
    let filled = g.mul(drop, t_mask)?;
    g.add(kept, filled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_ratio_masks_everything() {
        let spec = MaskSpec {
            span_min: 30,
            span_max: 30,
            ratio_min: 1.0,
            ratio_max: 1.0,
            seed: 0,
        };
        let m = sample_block_mask(30, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.n_masked(), 30);
    }

    #[test]
    fn same_seed_same_mask() {
        let spec = MaskSpec::default();
        let a = sample_block_mask(200, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_block_mask(200, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = MaskVector::from_keep(vec![true, false]);
        let z = DenseArray::zeros(&[3, 2]);
        assert!(apply_mask_array(&z, &m, &DenseArray::zeros(&[2])).is_err());
        let z = DenseArray::zeros(&[2, 2]);
        assert!(apply_mask_array(&z, &m, &DenseArray::zeros(&[3])).is_err());
    }

    #[test]
    fn token_gradient_counts_masked_rows() {
        let m = MaskVector::from_keep(vec![true, false, false, true]);
        let mut g = Graph::new();
        let z = g.variable(DenseArray::ones(&[4, 3]));
        let tok = g.variable(DenseArray::zeros(&[3]));
        let out = apply_mask(&mut g, z, &m, tok).unwrap();
        let s = g.sum(out).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(tok).unwrap().data(), &[2.0, 2.0, 2.0]);
        let gz = g.grad(z).unwrap();
        assert_eq!(gz.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(gz.row(3), &[1.0, 1.0, 1.0]);
    }
}
