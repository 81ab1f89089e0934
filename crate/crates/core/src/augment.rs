//! Denoising augmentation: noise at a target SNR, energy-weighted
//! cross-utterance mixing, and the buffer of recent utterances both draw from.
//!
//! The student encoder sees the augmented waveform; the teacher sees the
//! clean one.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::WaveBuffer;
use crate::error::{Error, Result};

/// Attempts at finding a non-silent secondary region before mixing is skipped.
const MIX_RETRIES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub snr_range_db: [f64; 2],
    pub mix_ratio_range_db: [f64; 2],
    pub noise_prob: f64,
    pub mix_prob: f64,
    pub max_overlap: f64,
    pub buffer_size: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            snr_range_db: [-5.0, 20.0],
            mix_ratio_range_db: [-5.0, 5.0],
            noise_prob: 0.25,
            mix_prob: 0.25,
            max_overlap: 0.5,
            buffer_size: 64,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Both probabilities zero; `augment_pair` then returns the input unchanged.
    pub fn disabled() -> Self {
        Self {
            noise_prob: 0.0,
            mix_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("noise_prob", self.noise_prob), ("mix_prob", self.mix_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.max_overlap > 0.0 && self.max_overlap <= 1.0) {
            return Err(Error::Config(format!(
                "max_overlap must lie in (0, 1], got {}",
                self.max_overlap
            )));
        }
        for (name, [lo, hi]) in [
            ("snr_range_db", self.snr_range_db),
            ("mix_ratio_range_db", self.mix_ratio_range_db),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} must be an ordered finite range")));
            }
        }
        Ok(())
    }
}

/// Ring of recent clean utterances; the oldest is evicted first.
#[derive(Debug, Clone)]
pub struct AugmentorBuffer {
    items: VecDeque<WaveBuffer>,
    capacity: usize,
}

impl AugmentorBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, x: WaveBuffer) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(x);
    }

    pub fn get(&self, i: usize) -> Option<&WaveBuffer> {
        self.items.get(i)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }
}

pub fn energy_of(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Mean squared sample value.
pub fn energy(x: &WaveBuffer) -> f64 {
    energy_of(x.samples())
}

/// Noise gain that puts `e_noise` at `snr_db` below `e_clean`.
pub fn snr_scale(e_clean: f64, e_noise: f64, snr_db: f64) -> Result<f64> {
    if !(e_noise > 0.0) {
        return Err(Error::invalid("zero-energy noise source"));
    }
    Ok((e_clean / (10f64.powf(snr_db / 10.0) * e_noise)).sqrt())
}

/// Secondary gain so that its energy sits `ratio_db` relative to the primary.
pub fn mix_scale(e1: f64, e2: f64, ratio_db: f64) -> Result<f64> {
    if !(e2 > 0.0) {
        return Err(Error::invalid("zero-energy secondary region"));
    }
    Ok((e1 * 10f64.powf(ratio_db / 10.0) / e2).sqrt())
}

/// Crops `n` when longer than `len`, loops it when shorter.
pub fn fit_length(n: &[f64], len: usize) -> Vec<f64> {
    n.iter().copied().cycle().take(len).collect()
}

/// `x_clean + α·n` with α chosen for the requested SNR. The noise is
/// length-matched first and its energy measured after matching.
pub fn mix_noise(x_clean: &WaveBuffer, n: &WaveBuffer, snr_db: f64) -> Result<WaveBuffer> {
    let noise = fit_length(n.samples(), x_clean.len());
    let alpha = snr_scale(energy(x_clean), energy_of(&noise), snr_db)?;
    let out = x_clean
        .samples()
        .iter()
        .zip(&noise)
        .map(|(c, v)| c + alpha * v)
        .collect();
    Ok(WaveBuffer::from_mixed(out, x_clean.sample_rate()))
}

/// Where a secondary segment landed and how it was scaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixRegion {
    pub start: usize,
    pub source_start: usize,
    pub len: usize,
    pub beta: f64,
}

/// Adds a β-scaled segment of `x2` onto a random region of `x1`. The region
/// length is uniform on `1..=floor(max_overlap·|x1|)` (and at most `|x2|`).
/// Returns `None` for the region when every sampled secondary segment was
/// silent, in which case `x1` comes back unchanged.
pub fn mix_utterance(
    x1: &WaveBuffer,
    x2: &WaveBuffer,
    ratio_db: f64,
    max_overlap: f64,
    rng: &mut impl Rng,
) -> Result<(WaveBuffer, Option<MixRegion>)> {
    let max_len = ((max_overlap * x1.len() as f64).floor() as usize).min(x2.len());
    if max_len == 0 {
        return Err(Error::invalid(format!(
            "primary of {} samples too short to mix",
            x1.len()
        )));
    }
    let len = rng.random_range(1..=max_len);
    let start = rng.random_range(0..=x1.len() - len);
    let r1 = &x1.samples()[start..start + len];
    let e1 = energy_of(r1);
    for _ in 0..MIX_RETRIES {
        let source_start = rng.random_range(0..=x2.len() - len);
        let r2 = &x2.samples()[source_start..source_start + len];
        let e2 = energy_of(r2);
        if e2 <= 0.0 {
            continue;
        }
        let beta = mix_scale(e1, e2, ratio_db)?;
        let mut out = x1.samples().to_vec();
        for (o, s) in out[start..start + len].iter_mut().zip(r2) {
            *o += beta * s;
        }
        let region = MixRegion {
            start,
            source_start,
            len,
            beta,
        };
        return Ok((WaveBuffer::from_mixed(out, x1.sample_rate()), Some(region)));
    }
    log::debug!("mixing skipped: secondary segment silent after {MIX_RETRIES} tries");
    Ok((x1.clone(), None))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseEvent {
    pub source: usize,
    pub snr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixEvent {
    pub source: usize,
    pub ratio_db: f64,
    pub region: MixRegion,
}

/// One augmented view plus the clean original.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub aug: WaveBuffer,
    pub clean: WaveBuffer,
    pub noise: Option<NoiseEvent>,
    pub mix: Option<MixEvent>,
}

/// Draws the noise and mixing decisions independently, applies mixing then
/// noise, and finally pushes the clean input into the buffer. Sources come
/// from the buffer as it stood before this call, so an utterance never
/// mixes with itself. The two coin flips are always drawn first so the
/// decision stream does not depend on buffer contents.
pub fn augment_pair(
    x: &WaveBuffer,
    buffer: &mut AugmentorBuffer,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedPair> {
    let do_noise = rng.random::<f64>() < cfg.noise_prob;
    let do_mix = rng.random::<f64>() < cfg.mix_prob;
    let mut aug = x.clone();
    let mut mix = None;
    let mut noise = None;

    if do_mix && !buffer.is_empty() && x.len() >= 2 {
        let source = rng.random_range(0..buffer.len());
        let [lo, hi] = cfg.mix_ratio_range_db;
        let ratio_db = rng.random_range(lo..=hi);
        let x2 = buffer.get(source).expect("index in range");
        let (mixed, region) = mix_utterance(&aug, x2, ratio_db, cfg.max_overlap, rng)?;
        if let Some(region) = region {
            aug = mixed;
            mix = Some(MixEvent {
                source,
                ratio_db,
                region,
            });
        }
    }

    if do_noise && !buffer.is_empty() {
        let source = rng.random_range(0..buffer.len());
        let [lo, hi] = cfg.snr_range_db;
        let snr_db = rng.random_range(lo..=hi);
        let n = buffer.get(source).expect("index in range");
        match mix_noise(&aug, n, snr_db) {
            Ok(noisy) => {
                aug = noisy;
                noise = Some(NoiseEvent { source, snr_db });
            }
            Err(_) => log::debug!("noise skipped: buffered source {source} is silent"),
        }
    }

    buffer.push(x.clone());
    Ok(AugmentedPair {
        aug,
        clean: x.clone(),
        noise,
        mix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn wave(v: Vec<f64>) -> WaveBuffer {
        WaveBuffer::new(v, 16_000).unwrap()
    }

    #[test]
    fn energy_basics() {
        assert_eq!(energy(&wave(vec![0.0; 10])), 0.0);
        assert_eq!(energy(&wave(vec![0.5; 10])), 0.25);
    }

    #[test]
    fn buffer_evicts_oldest() {
        let mut b = AugmentorBuffer::new(2);
        for i in 0..3 {
            b.push(wave(vec![i as f64 * 0.1 + 0.1]));
        }
        assert_eq!(b.len(), 2);
        assert_eq!(b.get(0).unwrap().samples(), &[0.2]);
        assert_eq!(b.get(1).unwrap().samples(), &[0.30000000000000004]);
    }

    #[test]
    fn silent_noise_is_an_error() {
        let err = mix_noise(&wave(vec![0.1; 8]), &wave(vec![0.0; 8]), 0.0).unwrap_err();
        assert!(err.to_string().contains("zero-energy noise source"));
    }

    #[test]
    fn noise_is_tiled_and_cropped() {
        assert_eq!(fit_length(&[1.0, 2.0], 5), vec![1.0, 2.0, 1.0, 2.0, 1.0]);
        assert_eq!(fit_length(&[1.0, 2.0, 3.0], 2), vec![1.0, 2.0]);
    }

    #[test]
    fn silent_secondary_skips_mixing() {
        let x1 = wave(vec![0.3; 100]);
        let x2 = wave(vec![0.0; 100]);
        let (out, region) = mix_utterance(&x1, &x2, 0.0, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(region.is_none());
        assert_eq!(out, x1);
    }

    #[test]
    fn one_sample_primary_cannot_mix() {
        let r = mix_utterance(&wave(vec![0.3]), &wave(vec![0.3; 4]), 0.0, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(r.is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            noise_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            snr_range_db: [20.0, -5.0],
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
