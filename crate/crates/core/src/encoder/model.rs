use serde::{Deserialize, Serialize};

use super::layers::{
    cluster_head, conformer_block, conv, daam, init_aggregate, init_cluster_head, init_conformer,
    init_conv, init_linear, layer_aggregate, linear, predictor, rel_pos_table_shape, snake_beta, RelPos,
};
use super::{EncoderConfig, Frontend};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::{Conv1dCfg, DenseArray, Graph, ParamStore, Var};

/// Relative position table shared by every attention layer and the predictor.
pub const REL_POS_TABLE: &str = "enc.relpos.table";
const RES_KERNEL: usize = 3;
const WAVE_IN_KERNEL: usize = 7;
const MASK_TOKEN: &str = "t_mask";

/// Per-dimension standardisation of log-mel input, fixed before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Mean and standard deviation of every column over all rows of all
    /// arrays; columns with zero spread keep unit scale.
    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a DenseArray>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for f in frames {
            let (_, d) = f
                .dims2()
                .ok_or_else(|| Error::shape("FeatureNorm::fit", format!("{:?}", f.shape())))?;
            if sum.is_empty() {
                sum = vec![0.0; d];
                sq = vec![0.0; d];
            } else if sum.len() != d {
                return Err(Error::shape("FeatureNorm::fit", "inconsistent widths"));
            }
            for row in f.rows() {
                for (j, v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid("no frames to fit input normalisation"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let v = (s / n as f64 - m * m).max(0.0).sqrt();
                if v > 1e-8 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &DenseArray) -> Result<DenseArray> {
        let (_, d) = x
            .dims2()
            .ok_or_else(|| Error::shape("FeatureNorm::apply", format!("{:?}", x.shape())))?;
        if d != self.mean.len() {
            return Err(Error::shape(
                "FeatureNorm::apply",
                format!("{d} columns vs {} statistics", self.mean.len()),
            ));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }
}

/// Encoder output: aggregated latents, every layer fed to the aggregation,
/// and the aggregation weights `[1, L + 1]`.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub z: Var,
    pub layers: Vec<Var>,
    pub weights: Var,
}

/// Online parameters (encoder, cluster head, predictor, mask token), the
/// EMA target encoder and the fixed input normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub cfg: EncoderConfig,
    pub online: ParamStore,
    pub target: ParamStore,
    pub norm: FeatureNorm,
}

fn stage_inputs(cfg: &EncoderConfig) -> Vec<(usize, usize)> {
    let mut prev = cfg.channels[0];
    cfg.channels
        .iter()
        .map(|&c| {
            let io = (prev, c);
            prev = c;
            io
        })
        .collect()
}

fn stage_conv_cfg(cfg: &EncoderConfig, i: usize) -> (usize, Conv1dCfg) {
    match cfg.frontend {
        Frontend::Mel => (
            cfg.mel_kernel,
            Conv1dCfg {
                padding: cfg.mel_kernel / 2,
                ..Conv1dCfg::default()
            },
        ),
        Frontend::Wave => {
            let s = cfg.strides[i];
            (
                2 * s,
                Conv1dCfg {
                    stride: s,
                    padding: s.div_ceil(2),
                    ..Conv1dCfg::default()
                },
            )
        }
    }
}

fn input_conv(cfg: &EncoderConfig) -> (usize, usize, Conv1dCfg) {
    match cfg.frontend {
        Frontend::Mel => (
            cfg.n_mels,
            cfg.mel_kernel,
            Conv1dCfg {
                padding: cfg.mel_kernel / 2,
                ..Conv1dCfg::default()
            },
        ),
        Frontend::Wave => (
            1,
            WAVE_IN_KERNEL,
            Conv1dCfg {
                padding: WAVE_IN_KERNEL / 2,
                ..Conv1dCfg::default()
            },
        ),
    }
}

/// Evenly spaced in `[-1, 1]`, or `[0]` for a single Gaussian.
fn daam_offsets(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
}

impl ModelBundle {
    pub fn new(cfg: EncoderConfig, norm: FeatureNorm) -> Result<Self> {
        cfg.validate()?;
        if cfg.frontend == Frontend::Mel && norm.mean.len() != cfg.n_mels {
            return Err(Error::Config(format!(
                "input normalisation has {} dims, encoder expects {}",
                norm.mean.len(),
                cfg.n_mels
            )));
        }
        let mut rng = rng_for(cfg.seed, stream::INIT, 0);
        let mut s = ParamStore::new(cfg.seed);
        let (cin, k_in, _) = input_conv(&cfg);
        init_conv(&mut s, &mut rng, "enc.fe.in", cin, cfg.channels[0], k_in)?;
        for (i, (ci, co)) in stage_inputs(&cfg).into_iter().enumerate() {
            let (k, _) = stage_conv_cfg(&cfg, i);
            let pre = format!("enc.fe.s{i}");
            init_conv(&mut s, &mut rng, &format!("{pre}.conv"), ci, co, k)?;
            s.insert(format!("{pre}.snake"), DenseArray::zeros(&[co]))?;
            for j in 0..cfg.dilations.len() {
                s.insert(format!("{pre}.res{j}.snake"), DenseArray::zeros(&[co]))?;
                init_conv(&mut s, &mut rng, &format!("{pre}.res{j}.conv"), co, co, RES_KERNEL)?;
            }
            let offsets: Vec<f64> = (0..cfg.daam_heads)
                .flat_map(|_| daam_offsets(cfg.daam_gaussians))
                .collect();
            s.insert(
                format!("{pre}.daam.delta"),
                DenseArray::new(&[cfg.daam_heads, cfg.daam_gaussians], offsets)?,
            )?;
            s.insert(
                format!("{pre}.daam.scale"),
                DenseArray::ones(&[cfg.daam_heads, cfg.daam_gaussians]),
            )?;
        }
        let c = cfg.latent_dim;
        init_linear(&mut s, &mut rng, "enc.proj", *cfg.channels.last().unwrap(), c)?;
        s.insert(
            REL_POS_TABLE,
            DenseArray::zeros(&rel_pos_table_shape(cfg.rel_pos_buckets, cfg.n_heads)),
        )?;
        for l in 0..cfg.n_layers {
            init_conformer(&mut s, &mut rng, &format!("enc.conf{l}"), c, cfg.n_heads, cfg.ffn_mult, cfg.conv_kernel)?;
        }
        init_aggregate(&mut s, &mut rng, "enc.agg", c)?;
        init_cluster_head(&mut s, &mut rng, "head", c, cfg.head_hidden, cfg.head_blocks, cfg.cluster_k)?;
        init_predictor(&mut s, &mut rng, &cfg, c)?;
        s.insert_normal(MASK_TOKEN, &[c], 0.02, &mut rng)?;
        let target = s.subset(&["enc."]);
        Ok(Self {
            cfg,
            online: s,
            target,
            norm,
        })
    }

    pub fn rel_pos(&self) -> RelPos<'static> {
        RelPos {
            table: REL_POS_TABLE,
            buckets: self.cfg.rel_pos_buckets,
            max_distance: self.cfg.rel_pos_max_distance,
        }
    }

    /// Output frames of the convolutional frontend for an input of `len`
    /// rows (mel frames or samples).
    pub fn frontend_frames(&self, len: usize) -> Option<usize> {
        let (_, k_in, cfg_in) = input_conv(&self.cfg);
        let mut t = cfg_in.out_len(len, k_in)?;
        for i in 0..self.cfg.channels.len() {
            let (k, c) = stage_conv_cfg(&self.cfg, i);
            t = c.out_len(t, k)?;
        }
        Some(t)
    }

    /// Runs the encoder stored in `store` (online or target) on `input`:
    /// `[T, n_mels]` log-mel frames for the mel frontend (normalised here),
    /// `[N, 1]` samples for the waveform frontend. `crop_to` trims the
    /// frontend output to a frame count, for aligning waveform frames with
    /// mel frames; it may remove at most one frame.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &DenseArray,
        crop_to: Option<usize>,
    ) -> Result<Encoded> {
        let cfg = &self.cfg;
        let x = match cfg.frontend {
            Frontend::Mel => self.norm.apply(input)?,
            Frontend::Wave => {
                if input.ndim() != 2 || input.shape()[1] != 1 {
                    return Err(Error::shape("encode", format!("waveform input {:?}", input.shape())));
                }
                input.clone()
            }
        };
        let len = x.shape()[0];
        if self.frontend_frames(len).is_none_or(|t| t == 0) {
            return Err(Error::invalid(format!("input of {len} rows is too short to encode")));
        }
        let x = g.constant(x);
        let (_, _, cfg_in) = input_conv(cfg);
        let mut h = conv(g, store, "enc.fe.in", x, cfg_in)?;
        for i in 0..cfg.channels.len() {
            let pre = format!("enc.fe.s{i}");
            let (_, cc) = stage_conv_cfg(cfg, i);
            h = conv(g, store, &format!("{pre}.conv"), h, cc)?;
            let a = g.param(store, &format!("{pre}.snake"))?;
            h = snake_beta(g, h, a)?;
            for (j, &d) in cfg.dilations.iter().enumerate() {
                let a = g.param(store, &format!("{pre}.res{j}.snake"))?;
                let r = snake_beta(g, h, a)?;
                let rc = Conv1dCfg {
                    dilation: d,
                    padding: d * (RES_KERNEL / 2),
                    ..Conv1dCfg::default()
                };
                let r = conv(g, store, &format!("{pre}.res{j}.conv"), r, rc)?;
                h = g.add(h, r)?;
            }
            let delta = g.param(store, &format!("{pre}.daam.delta"))?;
            let scale = g.param(store, &format!("{pre}.daam.scale"))?;
            h = daam(g, h, delta, scale, cfg.daam_heads)?;
        }
        if let Some(t) = crop_to {
            let have = g.shape(h)[0];
            if t == 0 || t > have || have - t > 1 {
                return Err(Error::shape(
                    "encode",
                    format!("frontend produced {have} frames, expected {t}"),
                ));
            }
            if t < have {
                h = g.slice(h, 0, 0, t)?;
            }
        }
        let mut z = linear(g, store, "enc.proj", h)?;
        let rel = self.rel_pos();
        let mut layers = vec![z];
        for l in 0..cfg.n_layers {
            z = conformer_block(g, store, &format!("enc.conf{l}"), z, cfg.n_heads, rel)?;
            layers.push(z);
        }
        let (z, weights) = layer_aggregate(g, store, "enc.agg", &layers)?;
        Ok(Encoded { z, layers, weights })
    }

    pub fn cluster_logits(&self, g: &mut Graph, z: Var) -> Result<Var> {
        cluster_head(g, &self.online, "head", z, self.cfg.head_blocks)
    }

    pub fn predict(&self, g: &mut Graph, z_tilde: Var) -> Result<Var> {
        predictor(g, &self.online, "pred", z_tilde, self.cfg.n_heads, self.rel_pos())
    }

    pub fn mask_token(&self, g: &mut Graph) -> Result<Var> {
        g.param(&self.online, MASK_TOKEN)
    }
}

fn init_predictor(s: &mut ParamStore, rng: &mut impl rand::Rng, cfg: &EncoderConfig, c: usize) -> Result<()> {
    super::layers::init_predictor(s, rng, "pred", c, cfg.n_heads, cfg.ffn_mult, cfg.conv_kernel)
}

/// `target ← τ·target + (1 − τ)·online` for every target parameter.
pub fn ema_update(online: &ParamStore, target: &mut ParamStore, tau: f64) -> Result<()> {
    for (name, t) in target.iter_mut() {
        let o = online
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if o.shape() != t.shape() {
            return Err(Error::shape(
                "ema_update",
                format!("{name}: {:?} vs {:?}", o.shape(), t.shape()),
            ));
        }
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = tau * *tv + (1.0 - tau) * ov;
        }
    }
    Ok(())
}
