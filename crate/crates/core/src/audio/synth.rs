//! Synthetic speech-like corpus: labelled segments of formant-filtered
//! glottal pulse trains.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mel::MelConfig;
use super::wav::{WaveBuffer, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhoneClass {
    /// Formant centre frequencies in Hz.
    pub formants: [f64; 3],
    /// Formant bandwidths in Hz.
    pub bandwidths: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthCorpusSpec {
    pub n_utterances: usize,
    pub duration_s: [f64; 2],
    pub n_phone_classes: usize,
    /// Explicit classes; drawn from `seed` when empty.
    pub classes: Vec<PhoneClass>,
    pub segment_ms: [f64; 2],
    pub f0_hz: [f64; 2],
    /// Standard deviation of additive white noise.
    pub noise_floor: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthCorpusSpec {
    fn default() -> Self {
        Self {
            n_utterances: 200,
            duration_s: [0.6, 1.0],
            n_phone_classes: 16,
            classes: Vec::new(),
            segment_ms: [50.0, 200.0],
            f0_hz: [90.0, 250.0],
            noise_floor: 0.003,
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed: 0,
        }
    }
}

/// One generated utterance with a phone label per feature frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub wave: WaveBuffer,
    pub labels: Vec<u32>,
}

impl SynthCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("corpus: {m}")));
        if self.n_phone_classes < 1 {
            return bad("n_phone_classes must be at least 1");
        }
        if !self.classes.is_empty() && self.classes.len() != self.n_phone_classes {
            return bad("classes must list n_phone_classes entries");
        }
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !ordered(self.duration_s) {
            return bad("duration_s must be a positive ordered range");
        }
        if !ordered(self.segment_ms) || !ordered(self.f0_hz) {
            return bad("segment_ms and f0_hz must be positive ordered ranges");
        }
        if self.noise_floor < 0.0 {
            return bad("noise_floor must be non-negative");
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        let nyq = self.sample_rate as f64 / 2.0;
        if self.classes.iter().flat_map(|c| c.formants).any(|f| f <= 0.0 || f >= nyq) {
            return bad("formants must lie in (0, Nyquist)");
        }
        Ok(())
    }

    /// The phone inventory: `classes` if given, else drawn from the seed.
    pub fn resolved_classes(&self) -> Vec<PhoneClass> {
        if !self.classes.is_empty() {
            return self.classes.clone();
        }
        random_classes(self.n_phone_classes, self.seed)
    }
}

fn mel(f: f64) -> f64 {
    super::mel::hz_to_mel(f)
}

/// Classes with formants drawn from typical vowel ranges, rejecting
/// candidates too close (in mel) to an accepted class.
fn random_classes(n: usize, seed: u64) -> Vec<PhoneClass> {
    let mut rng = rng_for(seed, stream::CLASSES, 0);
    let mut out: Vec<PhoneClass> = Vec::with_capacity(n);
    let mut min_dist = 150.0;
    let mut tries = 0;
    while out.len() < n {
        let f1 = rng.random_range(250.0..900.0);
        let f2 = rng.random_range((f1 + 250.0f64).max(800.0)..2500.0);
        let f3 = rng.random_range((f2 + 250.0f64).max(2000.0)..3500.0);
        let cand = PhoneClass {
            formants: [f1, f2, f3],
            bandwidths: [0; 3].map(|_| rng.random_range(50.0..200.0)),
        };
        let far = out.iter().all(|c| {
            c.formants
                .iter()
                .zip(&cand.formants)
                .map(|(a, b)| (mel(*a) - mel(*b)).powi(2))
                .sum::<f64>()
                .sqrt()
                >= min_dist
        });
        tries += 1;
        if far {
            out.push(cand);
        } else if tries % 2000 == 0 {
            min_dist *= 0.8;
        }
    }
    out
}

/// Two-pole resonator whose impulse response is a damped sinusoid.
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bw: f64, sr: f64) -> f64 {
        let r = (-PI * bw / sr).exp();
        let theta = 2.0 * PI * freq / sr;
        // Unit gain at the resonance peak, approximately.
        let gain = (1.0 - r) * (1.0 + r * r - 2.0 * r * (2.0 * theta).cos()).sqrt().max(1e-9);
        let y = gain * x + 2.0 * r * theta.cos() * self.y1 - r * r * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

const FORMANT_GAIN: [f64; 3] = [1.0, 0.6, 0.35];

/// Generates the corpus; labels are taken at each feature frame's centre.
pub fn synth_corpus(spec: &SynthCorpusSpec, frames: &MelConfig) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let classes = spec.resolved_classes();
    (0..spec.n_utterances)
        .map(|u| synth_utterance(spec, &classes, frames, u as u64))
        .collect()
}

fn synth_utterance(
    spec: &SynthCorpusSpec,
    classes: &[PhoneClass],
    frames: &MelConfig,
    index: u64,
) -> Result<Utterance> {
    let mut rng = rng_for(spec.seed, stream::CORPUS, index);
    let sr = spec.sample_rate as f64;
    let dur = rng.random_range(spec.duration_s[0]..=spec.duration_s[1]);
    let n = ((dur * sr).round() as usize).max(frames.frame_len);
    let f0 = rng.random_range(spec.f0_hz[0]..=spec.f0_hz[1]);
    let period = sr / f0;

    // Segment layout: (end sample, class).
    let mut segments = Vec::new();
    let mut pos = 0;
    while pos < n {
        let ms = rng.random_range(spec.segment_ms[0]..=spec.segment_ms[1]);
        let len = ((ms / 1000.0 * sr).round() as usize).max(1);
        pos = (pos + len).min(n);
        segments.push((pos, rng.random_range(0..classes.len())));
    }

    let mut res = [0; 3].map(|_| Resonator { y1: 0.0, y2: 0.0 });
    let mut samples = Vec::with_capacity(n);
    let mut seg = 0;
    let mut next_pulse = rng.random_range(0.0..period);
    for i in 0..n {
        while i >= segments[seg].0 {
            seg += 1;
        }
        let class = &classes[segments[seg].1];
        let x = if i as f64 >= next_pulse {
            // Slight jitter keeps pulse trains from being perfectly periodic.
            next_pulse += period * rng.random_range(0.97..1.03);
            1.0
        } else {
            0.0
        };
        let mut y = 0.0;
        for (k, r) in res.iter_mut().enumerate() {
            y += FORMANT_GAIN[k] * r.step(x, class.formants[k], class.bandwidths[k], sr);
        }
        samples.push(y);
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target = rng.random_range(0.3..0.8);
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v *= target / peak);
    }
    if spec.noise_floor > 0.0 {
        let noise = Normal::new(0.0, spec.noise_floor).map_err(|e| Error::invalid(e.to_string()))?;
        samples.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    let t = frames.n_frames(n);
    let mut labels = Vec::with_capacity(t);
    let mut seg = 0;
    for f in 0..t {
        let c = frames.frame_center(f).min(n - 1);
        while c >= segments[seg].0 {
            seg += 1;
        }
        labels.push(segments[seg].1 as u32);
    }
    Ok(Utterance {
        wave: WaveBuffer::new(samples, spec.sample_rate)?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthCorpusSpec {
        SynthCorpusSpec {
            n_utterances: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let m = MelConfig::default();
        assert_eq!(synth_corpus(&small(), &m).unwrap(), synth_corpus(&small(), &m).unwrap());
    }

    #[test]
    fn single_class_has_constant_labels() {
        let spec = SynthCorpusSpec {
            n_phone_classes: 1,
            ..small()
        };
        for u in synth_corpus(&spec, &MelConfig::default()).unwrap() {
            assert!(u.labels.iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn labels_match_frame_count() {
        let m = MelConfig::default();
        for u in synth_corpus(&small(), &m).unwrap() {
            assert_eq!(u.labels.len(), m.n_frames(u.wave.len()));
        }
    }

    #[test]
    fn zero_classes_rejected() {
        let spec = SynthCorpusSpec {
            n_phone_classes: 0,
            ..small()
        };
        assert!(synth_corpus(&spec, &MelConfig::default()).is_err());
    }
}
