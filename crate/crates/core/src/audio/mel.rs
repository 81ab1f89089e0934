use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::wav::WaveBuffer;
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub n_mels: usize,
    pub frame_len: usize,
    pub frame_hop: usize,
    pub n_fft: usize,
    pub eps: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            frame_len: 400,
            frame_hop: 320,
            n_fft: 512,
            eps: 1e-6,
        }
    }
}

impl MelConfig {
    /// Number of frames produced for `len` samples (0 if shorter than a frame).
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.frame_hop + 1
        }
    }

    /// Sample index at the centre of frame `t`.
    pub fn frame_center(&self, t: usize) -> usize {
        t * self.frame_hop + self.frame_len / 2
    }
}

/// Log-mel features, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFrameSeq {
    pub frames: DenseArray,
    pub frame_hop: usize,
    pub frame_len: usize,
}

impl MelFrameSeq {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.frames.shape()[1]
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale spanning 0 Hz to Nyquist.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `[n_mels, n_fft / 2 + 1]`.
    weights: DenseArray,
    centers_hz: Vec<f64>,
    /// First and last non-zero bin per filter, for a sparse product.
    support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Result<Self> {
        if n_mels == 0 || n_fft < 2 {
            return Err(Error::invalid("filterbank needs n_mels >= 1 and n_fft >= 2"));
        }
        let nyq = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyq);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut w = vec![0.0; n_mels * n_bins];
        let mut support = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut lo = n_bins;
            let mut hi = 0;
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let v = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
                if v > 0.0 {
                    w[m * n_bins + k] = v;
                    lo = lo.min(k);
                    hi = hi.max(k);
                }
            }
            support.push(if lo <= hi { (lo, hi + 1) } else { (0, 0) });
        }
        Ok(Self {
            weights: DenseArray::new(&[n_mels, n_bins], w)?,
            centers_hz: edges[1..=n_mels].to_vec(),
            support,
        })
    }

    pub fn weights(&self) -> &DenseArray {
        &self.weights
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        let n_bins = power.len();
        for (m, o) in out.iter_mut().enumerate() {
            let (lo, hi) = self.support[m];
            let row = &self.weights.data()[m * n_bins..(m + 1) * n_bins];
            *o = (lo..hi).map(|k| row[k] * power[k]).sum();
        }
    }
}

/// Reusable log-mel extractor (caches the FFT plan, window and filters).
pub struct LogMel {
    cfg: MelConfig,
    sample_rate: u32,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: MelFilterbank,
}

impl LogMel {
    pub fn new(cfg: &MelConfig, sample_rate: u32) -> Result<Self> {
        if cfg.frame_len < cfg.frame_hop || cfg.frame_hop == 0 {
            return Err(Error::invalid(format!(
                "need frame_len >= frame_hop > 0, got {} and {}",
                cfg.frame_len, cfg.frame_hop
            )));
        }
        if cfg.n_fft < cfg.frame_len {
            return Err(Error::invalid("n_fft must be at least frame_len"));
        }
        if cfg.eps <= 0.0 {
            return Err(Error::invalid("eps must be positive"));
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        // Periodic Hann.
        let n = cfg.frame_len as f64;
        let window = (0..cfg.frame_len)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect();
        Ok(Self {
            bank: MelFilterbank::new(cfg.n_mels, cfg.n_fft, sample_rate)?,
            cfg: cfg.clone(),
            sample_rate,
            fft,
            window,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn compute(&self, x: &WaveBuffer) -> Result<MelFrameSeq> {
        if x.sample_rate() != self.sample_rate {
            return Err(Error::invalid(format!(
                "sample rate {} does not match extractor rate {}",
                x.sample_rate(),
                self.sample_rate
            )));
        }
        self.compute_samples(x.samples())
    }

    pub fn compute_samples(&self, samples: &[f64]) -> Result<MelFrameSeq> {
        let cfg = &self.cfg;
        let t = cfg.n_frames(samples.len());
        if t == 0 {
            return Err(Error::invalid(format!(
                "signal of {} samples is shorter than one frame ({})",
                samples.len(),
                cfg.frame_len
            )));
        }
        let n_bins = cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        let mut out = vec![0.0; t * cfg.n_mels];
        for (f, row) in out.chunks_mut(cfg.n_mels).enumerate() {
            let frame = &samples[f * cfg.frame_hop..f * cfg.frame_hop + cfg.frame_len];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < cfg.frame_len {
                    Complex::new(frame[i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.bank.apply(&power, row);
            for v in row.iter_mut() {
                *v = (*v + cfg.eps).ln();
            }
        }
        Ok(MelFrameSeq {
            frames: DenseArray::new(&[t, cfg.n_mels], out)?,
            frame_hop: cfg.frame_hop,
            frame_len: cfg.frame_len,
        })
    }
}

/// One-shot convenience wrapper around [`LogMel`].
pub fn log_mel(x: &WaveBuffer, cfg: &MelConfig) -> Result<MelFrameSeq> {
    LogMel::new(cfg, x.sample_rate())?.compute(x)
}
