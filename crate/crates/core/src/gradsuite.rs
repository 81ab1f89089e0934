//! Finite-difference checks of every differentiable block on small random
//! inputs. Inputs are registered as parameters so their gradients are
//! checked too.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::clustering::PosteriorSeq;
use crate::encoder::layers::{
    cluster_head, conformer_block, daam, gated_rel_pos_bias, init_aggregate, init_cluster_head, init_conformer,
    init_predictor, layer_aggregate, predictor, rel_pos_table_shape, snake_beta, RelPos,
};
use crate::encoder::{EncoderConfig, FeatureNorm, Frontend, ModelBundle};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::{grad_check_with, DenseArray, GradCheckOptions, GradEntry, Graph, ParamStore, Var};
use crate::trainer::{cluster_kl_loss, jepa_loss};

/// Block names in suite order.
pub const BLOCKS: [&str; 11] = [
    "snake_beta",
    "daam",
    "gated_rel_pos_bias",
    "conformer_block",
    "layer_aggregate",
    "cluster_head",
    "predictor",
    "encoder_mel",
    "encoder_wave",
    "jepa_loss",
    "cluster_kl_loss",
];

/// Deliberate gradient bugs for exercising the failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Snake-Beta with its `sin²` term cut out of the tape: same forward
    /// value, wrong gradient.
    DetachSnakeSine,
}

#[derive(Debug, Clone)]
pub struct BlockResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
    pub worst: Option<GradEntry>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub check: GradCheckOptions,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            check: GradCheckOptions {
                max_per_param: None,
                ..GradCheckOptions::default()
            },
            seed: 0,
        }
    }
}

/// Whether block `name` is selected by `filter`: exact match, or `filter`
/// followed by `_` as a prefix (`encoder` selects both encoders).
pub fn matches(name: &str, filter: &str) -> bool {
    name == filter || name.strip_prefix(filter).is_some_and(|rest| rest.starts_with('_'))
}

/// Runs the selected blocks. An unknown filter is an error.
pub fn run_suite(filter: Option<&str>, fault: Option<Fault>, opts: SuiteOptions) -> Result<Vec<BlockResult>> {
    let selected: Vec<(usize, &'static str)> = BLOCKS
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, b)| filter.is_none_or(|f| matches(b, f)))
        .collect();
    if selected.is_empty() {
        return Err(Error::invalid(format!(
            "no gradcheck block named `{}`; known: {}",
            filter.unwrap_or(""),
            BLOCKS.join(", ")
        )));
    }
    selected
        .into_iter()
        .map(|(i, name)| {
            let start = Instant::now();
            let mut rng = rng_for(opts.seed, stream::INIT, 1000 + i as u64);
            let rep = run_block(name, fault, opts.check, &mut rng)?;
            Ok(BlockResult {
                name,
                max_rel_err: rep.max_rel_err,
                checked: rep.checked,
                passed: rep.passed(),
                worst: rep.worst_param,
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect()
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> DenseArray {
    let d = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    DenseArray::new(shape, (0..n).map(|_| d.sample(rng)).collect()).expect("shape matches")
}

/// Moves every parameter off its initial value so gates and norms sit at
/// generic points.
fn jitter(s: &mut ParamStore, rng: &mut impl Rng, std: f64) {
    let d = Normal::new(0.0, std).expect("positive std");
    for (_, v) in s.iter_mut() {
        v.data_mut().iter_mut().for_each(|x| *x += d.sample(rng));
    }
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element matters.
fn probe(g: &mut Graph, y: Var, r: &DenseArray) -> Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn snake_detached(g: &mut Graph, x: Var, a: Var) -> Result<Var> {
    let sp = g.softplus(a)?;
    let alpha = g.add_scalar(sp, 0.01)?;
    let ax = g.mul(x, alpha)?;
    let s = g.sin(ax)?;
    let s2 = g.square(s)?;
    let frozen = g.value(s2).clone();
    let s2 = g.constant(frozen);
    let t = g.div(s2, alpha)?;
    g.add(x, t)
}

const TABLE: &str = "relpos";

fn rel() -> RelPos<'static> {
    RelPos {
        table: TABLE,
        buckets: 8,
        max_distance: 16,
    }
}

fn tiny_encoder(frontend: Frontend, n_mels: usize) -> EncoderConfig {
    EncoderConfig {
        frontend,
        n_mels,
        channels: vec![4, 4],
        strides: vec![2, 3],
        dilations: vec![1, 2],
        n_layers: 1,
        latent_dim: 4,
        n_heads: 2,
        ffn_mult: 2,
        conv_kernel: 3,
        rel_pos_buckets: 8,
        rel_pos_max_distance: 16,
        daam_gaussians: 2,
        daam_heads: 2,
        head_hidden: 4,
        head_blocks: 1,
        cluster_k: 3,
        seed: 0,
        ..EncoderConfig::default()
    }
}

fn run_block(
    name: &str,
    fault: Option<Fault>,
    opts: GradCheckOptions,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<crate::tensor::GradCheckReport> {
    let mut s = ParamStore::new(0);
    match name {
        "snake_beta" => {
            s.insert("x", normal(rng, &[6, 4], 1.0))?;
            s.insert("a", normal(rng, &[4], 0.5))?;
            let r = normal(rng, &[6, 4], 1.0);
            let detach = fault == Some(Fault::DetachSnakeSine);
            grad_check_with(
                |g, ps| {
                    let x = g.param(ps, "x")?;
                    let a = g.param(ps, "a")?;
                    let y = if detach { snake_detached(g, x, a)? } else { snake_beta(g, x, a)? };
                    probe(g, y, &r)
                },
                &s,
                opts,
            )
        }
        "daam" => {
            s.insert("x", normal(rng, &[10, 4], 1.0))?;
            s.insert("delta", normal(rng, &[2, 2], 0.5))?;
            let scale = normal(rng, &[2, 2], 0.2).map(|v| 1.0 + v);
            s.insert("scale", scale)?;
            let r = normal(rng, &[10, 4], 1.0);
            grad_check_with(
                |g, ps| {
                    let x = g.param(ps, "x")?;
                    let d = g.param(ps, "delta")?;
                    let sc = g.param(ps, "scale")?;
                    let y = daam(g, x, d, sc, 2)?;
                    probe(g, y, &r)
                },
                &s,
                opts,
            )
        }
        "gated_rel_pos_bias" => {
            s.insert("q", normal(rng, &[5, 3], 1.0))?;
            s.insert("dt", normal(rng, &[5, 5], 1.0))?;
            s.insert("u", normal(rng, &[3], 0.5))?;
            s.insert("w", normal(rng, &[3], 0.5))?;
            s.insert("s", normal(rng, &[1], 0.3).map(|v| 1.0 + v))?;
            let r = normal(rng, &[5, 5], 1.0);
            grad_check_with(
                |g, ps| {
                    let q = g.param(ps, "q")?;
                    let dt = g.param(ps, "dt")?;
                    let u = g.param(ps, "u")?;
                    let w = g.param(ps, "w")?;
                    let sc = g.param(ps, "s")?;
                    let y = gated_rel_pos_bias(g, q, dt, u, w, sc)?;
                    probe(g, y, &r)
                },
                &s,
                opts,
            )
        }
        "conformer_block" => {
            init_conformer(&mut s, rng, "blk", 4, 2, 2, 3)?;
            s.insert(TABLE, DenseArray::zeros(&rel_pos_table_shape(8, 2)))?;
            jitter(&mut s, rng, 0.1);
            s.insert("x", normal(rng, &[6, 4], 1.0))?;
            let r = normal(rng, &[6, 4], 1.0);
            grad_check_with(
                |g, ps| {
                    let x = g.param(ps, "x")?;
                    let y = conformer_block(g, ps, "blk", x, 2, rel())?;
                    probe(g, y, &r)
                },
                &s,
                opts,
            )
        }
        "layer_aggregate" => {
            init_aggregate(&mut s, rng, "agg", 4)?;
            jitter(&mut s, rng, 0.1);
            for l in 0..3 {
                s.insert(format!("h{l}"), normal(rng, &[5, 4], 1.0))?;
            }
            let r = normal(rng, &[5, 4], 1.0);
            let rw = normal(rng, &[1, 3], 1.0);
            grad_check_with(
                |g, ps| {
                    let layers = (0..3).map(|l| g.param(ps, &format!("h{l}"))).collect::<Result<Vec<_>>>()?;
                    let (z, w) = layer_aggregate(g, ps, "agg", &layers)?;
                    let a = probe(g, z, &r)?;
                    let b = probe(g, w, &rw)?;
                    g.add(a, b)
                },
                &s,
                opts,
            )
        }
        "cluster_head" => {
            init_cluster_head(&mut s, rng, "head", 4, 6, 1, 3)?;
            jitter(&mut s, rng, 0.1);
            s.insert("z", normal(rng, &[5, 4], 1.0))?;
            let r = normal(rng, &[5, 3], 1.0);
            grad_check_with(
                |g, ps| {
                    let z = g.param(ps, "z")?;
                    let y = cluster_head(g, ps, "head", z, 1)?;
                    probe(g, y, &r)
                },
                &s,
                opts,
            )
        }
        "predictor" => {
            init_predictor(&mut s, rng, "pred", 4, 2, 2, 3)?;
            s.insert(TABLE, DenseArray::zeros(&rel_pos_table_shape(8, 2)))?;
            jitter(&mut s, rng, 0.1);
            s.insert("z", normal(rng, &[6, 4], 1.0))?;
            let r = normal(rng, &[6, 4], 1.0);
            grad_check_with(
                |g, ps| {
                    let z = g.param(ps, "z")?;
                    let y = predictor(g, ps, "pred", z, 2, rel())?;
                    probe(g, y, &r)
                },
                &s,
                opts,
            )
        }
        "encoder_mel" | "encoder_wave" => {
            let (cfg, input) = if name == "encoder_mel" {
                (tiny_encoder(Frontend::Mel, 6), normal(rng, &[9, 6], 1.0))
            } else {
                (tiny_encoder(Frontend::Wave, 6), normal(rng, &[60, 1], 0.5))
            };
            let norm = FeatureNorm::identity(cfg.n_mels);
            let model = ModelBundle::new(cfg, norm)?;
            let mut enc = model.online.subset(&["enc."]);
            jitter(&mut enc, rng, 0.05);
            let out_shape = {
                let mut g = Graph::inference();
                let e = model.encode(&mut g, &enc, &input, None)?;
                g.shape(e.z).to_vec()
            };
            let r = normal(rng, &out_shape, 1.0);
            grad_check_with(
                |g, ps| {
                    let e = model.encode(g, ps, &input, None)?;
                    probe(g, e.z, &r)
                },
                &enc,
                opts,
            )
        }
        "jepa_loss" => {
            s.insert("pred", normal(rng, &[6, 4], 1.0))?;
            let target = normal(rng, &[6, 4], 1.0);
            grad_check_with(
                |g, ps| {
                    let p = g.param(ps, "pred")?;
                    jepa_loss(g, p, &target, &[1, 2, 4])
                },
                &s,
                opts,
            )
        }
        "cluster_kl_loss" => {
            s.insert("logits", normal(rng, &[5, 4], 1.0))?;
            let raw = normal(rng, &[5, 4], 1.0);
            let mut q = Vec::new();
            for row in raw.rows() {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                q.extend(e.into_iter().map(|v| v / z));
            }
            let q = DenseArray::new(&[5, 4], q)?;
            let post = PosteriorSeq {
                log_q: q.map(f64::ln),
                q,
            };
            grad_check_with(
                |g, ps| {
                    let l = g.param(ps, "logits")?;
                    cluster_kl_loss(g, &post, l, &[0, 2, 3])
                },
                &s,
                opts,
            )
        }
        other => Err(Error::invalid(format!("unknown gradcheck block `{other}`"))),
    }
}
