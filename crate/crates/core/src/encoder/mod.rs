//! Student/teacher network: a convolutional frontend with Snake-Beta and
//! density-adaptive attention, a conformer stack with gated relative
//! position bias, layer aggregation, the cluster head and the predictor.

mod checkpoint;
pub mod layers;
mod model;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use layers::{
    cluster_head, conformer_block, daam, gated_rel_pos_bias, layer_aggregate, predictor, rel_pos_bucket,
    snake_beta, RelPos,
};
pub use model::{ema_update, Encoded, FeatureNorm, ModelBundle, REL_POS_TABLE};

/// Input path into the conformer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frontend {
    /// Stride-1 convolutions over normalised log-mel frames.
    Mel,
    /// Strided convolutions over the raw waveform.
    Wave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub frontend: Frontend,
    pub n_mels: usize,
    pub channels: Vec<usize>,
    /// Waveform frontend only; the mel frontend runs at stride 1.
    pub strides: Vec<usize>,
    /// Kernel of the mel frontend's stage convolutions.
    pub mel_kernel: usize,
    pub dilations: Vec<usize>,
    pub n_layers: usize,
    pub latent_dim: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub conv_kernel: usize,
    pub rel_pos_buckets: usize,
    pub rel_pos_max_distance: usize,
    pub daam_gaussians: usize,
    pub daam_heads: usize,
    pub head_hidden: usize,
    pub head_blocks: usize,
    pub cluster_k: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            frontend: Frontend::Mel,
            n_mels: 80,
            channels: vec![8, 16, 32],
            strides: vec![8, 8, 5],
            mel_kernel: 3,
            dilations: vec![1, 3, 5],
            n_layers: 2,
            latent_dim: 32,
            n_heads: 4,
            ffn_mult: 4,
            conv_kernel: 31,
            rel_pos_buckets: 64,
            rel_pos_max_distance: 160,
            daam_gaussians: 2,
            daam_heads: 4,
            head_hidden: 64,
            head_blocks: 2,
            cluster_k: 16,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be non-empty and positive".into());
        }
        if self.frontend == Frontend::Wave && self.strides.len() != self.channels.len() {
            return bad(format!(
                "{} strides for {} channel stages",
                self.strides.len(),
                self.channels.len()
            ));
        }
        if self.strides.contains(&0) {
            return bad("strides must be positive".into());
        }
        if self.latent_dim == 0 || self.n_heads == 0 || !self.latent_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "latent_dim {} must be a positive multiple of n_heads {}",
                self.latent_dim, self.n_heads
            ));
        }
        if self.daam_heads == 0 || self.channels.iter().any(|c| c % self.daam_heads != 0) {
            return bad(format!(
                "every channel count must be divisible by daam_heads {}",
                self.daam_heads
            ));
        }
        if self.daam_gaussians == 0 || self.mel_kernel.is_multiple_of(2) || self.conv_kernel.is_multiple_of(2) {
            return bad("need at least one Gaussian and odd kernels".into());
        }
        if self.rel_pos_buckets < 4 || self.rel_pos_max_distance <= self.rel_pos_buckets / 4 {
            return bad("need B >= 4 and D_max > B/4".into());
        }
        if self.cluster_k < 2 {
            return bad("cluster_k must be at least 2".into());
        }
        if self.frontend == Frontend::Mel && self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        match self.frontend {
            Frontend::Mel => 1,
            Frontend::Wave => self.strides.iter().product(),
        }
    }
}
