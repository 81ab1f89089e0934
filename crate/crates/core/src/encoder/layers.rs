//! Differentiable blocks shared by the frontends, conformer stack, heads and
//! predictor. Every block reads its weights from a [`ParamStore`] under a
//! name prefix, so the same code runs the online and the target encoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Conv1dCfg, DenseArray, Graph, ParamStore, Var};

pub(crate) const LN_EPS: f64 = 1e-5;
/// Guard added to the standard deviation in density-adaptive attention.
pub const DAAM_EPS: f64 = 1e-5;

// ---- initialisation -------------------------------------------------------

pub(crate) fn init_linear(
    s: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    s.insert_uniform(format!("{name}.w"), &[fan_in, fan_out], bound, rng)?;
    s.insert(format!("{name}.b"), DenseArray::zeros(&[fan_out]))
}

pub(crate) fn init_conv(
    s: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    cin_per_group: usize,
    cout: usize,
    kernel: usize,
) -> Result<()> {
    let bound = 1.0 / ((cin_per_group * kernel) as f64).sqrt();
    s.insert_uniform(format!("{name}.w"), &[cout, cin_per_group, kernel], bound, rng)?;
    s.insert(format!("{name}.b"), DenseArray::zeros(&[cout]))
}

pub(crate) fn init_layer_norm(s: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    s.insert(format!("{name}.g"), DenseArray::ones(&[dim]))?;
    s.insert(format!("{name}.b"), DenseArray::zeros(&[dim]))
}

// ---- primitives -----------------------------------------------------------

fn p(g: &mut Graph, store: &ParamStore, name: String) -> Result<Var> {
    g.param(store, &name)
}

/// `x @ W + b` for `x[T, in]`.
pub fn linear(g: &mut Graph, s: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = p(g, s, format!("{name}.w"))?;
    let b = p(g, s, format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn layer_norm(g: &mut Graph, s: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gain = p(g, s, format!("{name}.g"))?;
    let bias = p(g, s, format!("{name}.b"))?;
    let n = g.layer_norm(x, LN_EPS)?;
    let n = g.mul(n, gain)?;
    g.add(n, bias)
}

pub fn conv(g: &mut Graph, s: &ParamStore, name: &str, x: Var, cfg: Conv1dCfg) -> Result<Var> {
    let w = p(g, s, format!("{name}.w"))?;
    let b = p(g, s, format!("{name}.b"))?;
    let y = g.conv1d(x, w, cfg)?;
    g.add(y, b)
}

/// Snake-Beta over the channel axis of `x[T, C]`:
/// `x + sin²(αx)/α` with `α = softplus(a) + 0.01` per channel.
pub fn snake_beta(g: &mut Graph, x: Var, a: Var) -> Result<Var> {
    let sp = g.softplus(a)?;
    let alpha = g.add_scalar(sp, 0.01)?;
    let ax = g.mul(x, alpha)?;
    let s = g.sin(ax)?;
    let s2 = g.square(s)?;
    let t = g.div(s2, alpha)?;
    g.add(x, t)
}

/// Density-adaptive attention over time for `x[T, C]`.
///
/// Each channel is standardised along time, scored by a product of
/// `N_g` Gaussian kernels with per-head offsets `delta[H, N_g]` and scales
/// `scale[H, N_g]`, and the softmax over time of the summed log densities
/// re-weights the input: `out = x ⊙ softmax(log w) + x`.
pub fn daam(g: &mut Graph, x: Var, delta: Var, scale: Var, n_heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = match shape.as_slice() {
        [_, c] => *c,
        _ => return Err(Error::shape("daam", format!("expected [T, C], got {shape:?}"))),
    };
    let ng_shape = g.shape(delta).to_vec();
    if n_heads == 0 || c % n_heads != 0 || ng_shape.len() != 2 || ng_shape[0] != n_heads {
        return Err(Error::shape(
            "daam",
            format!("{c} channels, {n_heads} heads, offsets {ng_shape:?}"),
        ));
    }
    if g.shape(scale) != ng_shape.as_slice() {
        return Err(Error::shape("daam", "offset and scale shapes differ"));
    }
    let ng = ng_shape[1];
    let per_head = c / n_heads;

    let mean = g.mean_axis(x, 0)?;
    let xc = g.sub(x, mean)?;
    let sq = g.square(xc)?;
    let var = g.mean_axis(sq, 0)?;
    let std = g.sqrt(var)?;
    let denom = g.add_scalar(std, DAAM_EPS)?;
    let xbar = g.div(xc, denom)?;

    let mut log_w: Option<Var> = None;
    for i in 0..ng {
        let idx: Vec<usize> = (0..c).map(|ch| (ch / per_head) * ng + i).collect();
        let d = g.take(delta, idx.clone(), &[c])?;
        let sc = g.take(scale, idx, &[c])?;
        let c2 = g.square(sc)?;
        let diff = g.sub(xbar, d)?;
        let num = g.square(diff)?;
        let two_c2 = g.scale(c2, 2.0)?;
        let quad = g.div(num, two_c2)?;
        let quad = g.neg(quad)?;
        let norm_arg = g.scale(c2, 2.0 * std::f64::consts::PI)?;
        let log_norm = g.log(norm_arg)?;
        let half_log_norm = g.scale(log_norm, 0.5)?;
        let term = g.sub(quad, half_log_norm)?;
        log_w = Some(match log_w {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let log_w = log_w.ok_or_else(|| Error::invalid("daam needs at least one Gaussian"))?;
    let w = g.softmax(log_w, 0)?;
    let xw = g.mul(x, w)?;
    g.add(xw, x)
}

// ---- relative position bias ----------------------------------------------

/// Bucket for the signed relative distance `d = i − j`.
///
/// `|d| < B/4` maps to itself; larger distances are log-spaced up to
/// `D_max`, which lands on `B/2`. Negative distances use a second bank
/// offset by `B/2`, so the table holds `B + 1` rows.
pub fn rel_pos_bucket(d: isize, buckets: usize, max_distance: usize) -> usize {
    let q = buckets / 4;
    let a = d.unsigned_abs().min(max_distance);
    let half = buckets / 2;
    let b = if a < q {
        a
    } else {
        let r = (a as f64 / q as f64).ln() / (max_distance as f64 / q as f64).ln();
        ((q as f64 + q as f64 * r).floor() as usize).min(half)
    };
    if d < 0 && b > 0 {
        b + half
    } else {
        b
    }
}

/// Shape of the shared bias table, `[B + 1, H]`.
pub fn rel_pos_table_shape(buckets: usize, n_heads: usize) -> [usize; 2] {
    [buckets + 1, n_heads]
}

/// Table lookups for head `h`, arranged transposed: entry `[j, i]` holds
/// the bias for query `i` and key `j`.
fn bias_index_transposed(t: usize, h: usize, n_heads: usize, buckets: usize, dmax: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(t * t);
    for j in 0..t {
        for i in 0..t {
            let b = rel_pos_bucket(i as isize - j as isize, buckets, dmax);
            idx.push(b * n_heads + h);
        }
    }
    idx
}

/// Relative position settings passed down the attention stack.
#[derive(Debug, Clone, Copy)]
pub struct RelPos<'a> {
    pub table: &'a str,
    pub buckets: usize,
    pub max_distance: usize,
}

/// Gated relative position bias `r[T, T]` for one head.
///
/// `q[T, d]` are the head's queries, `u` and `w` the head's gate vectors
/// `[d]`, `s` the learnable scale `[1]`, and `dt[j, i]` the transposed raw
/// table lookups. Per query position: `g_u = σ(q·u)`, `g_r = σ(q·w)`, and
/// `r = d + g_u·d + (1 − g_u)·s·g_r·d`.
pub fn gated_rel_pos_bias(g: &mut Graph, q: Var, dt: Var, u: Var, w: Var, s: Var) -> Result<Var> {
    let t = g.shape(q)[0];
    let dh = g.shape(q)[1];
    let u = g.reshape(u, &[dh, 1])?;
    let w = g.reshape(w, &[dh, 1])?;
    let qu = g.matmul(q, u)?;
    let qw = g.matmul(q, w)?;
    let qu = g.reshape(qu, &[t])?;
    let qw = g.reshape(qw, &[t])?;
    let gu = g.sigmoid(qu)?;
    let gr = g.sigmoid(qw)?;
    let one_minus = g.neg(gu)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let reset = g.mul(gr, s)?;
    let reset = g.mul(one_minus, reset)?;
    let factor = g.add(gu, reset)?;
    let factor = g.add_scalar(factor, 1.0)?;
    // factor[i] scales column i of dt, i.e. row i of the bias.
    let rt = g.mul(dt, factor)?;
    g.transpose(rt)
}

// ---- conformer ------------------------------------------------------------

pub(crate) fn init_conformer(
    s: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    c: usize,
    n_heads: usize,
    ffn_mult: usize,
    kernel: usize,
) -> Result<()> {
    let dh = c / n_heads;
    for ffn in ["ffn1", "ffn2"] {
        init_layer_norm(s, &format!("{name}.{ffn}.ln"), c)?;
        init_linear(s, rng, &format!("{name}.{ffn}.up"), c, ffn_mult * c)?;
        init_linear(s, rng, &format!("{name}.{ffn}.down"), ffn_mult * c, c)?;
    }
    init_layer_norm(s, &format!("{name}.mhsa.ln"), c)?;
    for proj in ["q", "k", "v", "o"] {
        init_linear(s, rng, &format!("{name}.mhsa.{proj}"), c, c)?;
    }
    s.insert(format!("{name}.mhsa.gate_u"), DenseArray::zeros(&[n_heads, dh]))?;
    s.insert(format!("{name}.mhsa.gate_w"), DenseArray::zeros(&[n_heads, dh]))?;
    s.insert(format!("{name}.mhsa.gate_s"), DenseArray::ones(&[1]))?;
    init_layer_norm(s, &format!("{name}.conv.ln"), c)?;
    init_linear(s, rng, &format!("{name}.conv.pw1"), c, 2 * c)?;
    init_conv(s, rng, &format!("{name}.conv.dw"), 1, c, kernel)?;
    init_layer_norm(s, &format!("{name}.conv.ln2"), c)?;
    init_linear(s, rng, &format!("{name}.conv.pw2"), c, c)
}

fn feed_forward(g: &mut Graph, s: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let h = layer_norm(g, s, &format!("{name}.ln"), x)?;
    let h = linear(g, s, &format!("{name}.up"), h)?;
    let h = g.silu(h)?;
    linear(g, s, &format!("{name}.down"), h)
}

/// Multi-head self-attention with gated relative position bias.
pub fn mhsa(
    g: &mut Graph,
    s: &ParamStore,
    name: &str,
    x: Var,
    n_heads: usize,
    rel: RelPos<'_>,
) -> Result<Var> {
    let (t, c) = (g.shape(x)[0], g.shape(x)[1]);
    if n_heads == 0 || c % n_heads != 0 {
        return Err(Error::shape("mhsa", format!("{c} channels, {n_heads} heads")));
    }
    let dh = c / n_heads;
    let h = layer_norm(g, s, &format!("{name}.ln"), x)?;
    let q = linear(g, s, &format!("{name}.q"), h)?;
    let k = linear(g, s, &format!("{name}.k"), h)?;
    let v = linear(g, s, &format!("{name}.v"), h)?;
    let table = g.param(s, rel.table)?;
    let gate_u = p(g, s, format!("{name}.gate_u"))?;
    let gate_w = p(g, s, format!("{name}.gate_w"))?;
    let gate_s = p(g, s, format!("{name}.gate_s"))?;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for hd in 0..n_heads {
        let qh = g.slice(q, 1, hd * dh, (hd + 1) * dh)?;
        let kh = g.slice(k, 1, hd * dh, (hd + 1) * dh)?;
        let vh = g.slice(v, 1, hd * dh, (hd + 1) * dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, inv_sqrt)?;
        let idx = bias_index_transposed(t, hd, n_heads, rel.buckets, rel.max_distance);
        let dt = g.take(table, idx, &[t, t])?;
        let u = g.slice(gate_u, 0, hd, hd + 1)?;
        let w = g.slice(gate_w, 0, hd, hd + 1)?;
        let bias = gated_rel_pos_bias(g, qh, dt, u, w, gate_s)?;
        let scores = g.add(scores, bias)?;
        let attn = g.softmax(scores, 1)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat(&heads, 1)?;
    linear(g, s, &format!("{name}.o"), cat)
}

/// LayerNorm → pointwise to 2C → GLU → depthwise conv → LayerNorm → SiLU →
/// pointwise.
fn conv_module(g: &mut Graph, s: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let c = g.shape(x)[1];
    let h = layer_norm(g, s, &format!("{name}.ln"), x)?;
    let h = linear(g, s, &format!("{name}.pw1"), h)?;
    let h = g.glu(h)?;
    let k = s
        .get(&format!("{name}.dw.w"))
        .ok_or_else(|| Error::UnknownParam(format!("{name}.dw.w")))?
        .shape()[2];
    let cfg = Conv1dCfg {
        padding: k / 2,
        groups: c,
        ..Conv1dCfg::default()
    };
    let h = conv(g, s, &format!("{name}.dw"), h, cfg)?;
    let h = layer_norm(g, s, &format!("{name}.ln2"), h)?;
    let h = g.silu(h)?;
    linear(g, s, &format!("{name}.pw2"), h)
}

/// `x + ½FFN₁(x)`, then `+ MHSA`, then `+ ConvModule`, then `+ ½FFN₂`.
pub fn conformer_block(
    g: &mut Graph,
    s: &ParamStore,
    name: &str,
    x: Var,
    n_heads: usize,
    rel: RelPos<'_>,
) -> Result<Var> {
    let f = feed_forward(g, s, &format!("{name}.ffn1"), x)?;
    let f = g.scale(f, 0.5)?;
    let x = g.add(x, f)?;
    let a = mhsa(g, s, &format!("{name}.mhsa"), x, n_heads, rel)?;
    let x = g.add(x, a)?;
    let cm = conv_module(g, s, &format!("{name}.conv"), x)?;
    let x = g.add(x, cm)?;
    let f = feed_forward(g, s, &format!("{name}.ffn2"), x)?;
    let f = g.scale(f, 0.5)?;
    g.add(x, f)
}

// ---- aggregation and heads --------------------------------------------------

pub(crate) fn init_aggregate(s: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize) -> Result<()> {
    init_linear(s, rng, &format!("{name}.q"), c, c)?;
    init_linear(s, rng, &format!("{name}.k"), c, c)
}

/// Attention over layers: a query from the time-pooled last layer scores
/// each time-pooled layer, and the softmax weights combine the full layer
/// outputs. Returns the combined `[T, C]` and the weights `[1, L]`.
pub fn layer_aggregate(g: &mut Graph, s: &ParamStore, name: &str, layers: &[Var]) -> Result<(Var, Var)> {
    let last = *layers
        .last()
        .ok_or_else(|| Error::invalid("layer aggregation needs at least one layer"))?;
    let shape = g.shape(last).to_vec();
    let (t, c) = (shape[0], shape[1]);
    for &l in layers {
        if g.shape(l) != shape.as_slice() {
            return Err(Error::shape("layer_aggregate", format!("{:?} vs {shape:?}", g.shape(l))));
        }
    }
    let mut pooled = Vec::with_capacity(layers.len());
    for &l in layers {
        let m = g.mean_axis(l, 0)?;
        pooled.push(g.reshape(m, &[1, c])?);
    }
    let stacked = g.concat(&pooled, 0)?;
    let q = linear(g, s, &format!("{name}.q"), pooled[pooled.len() - 1])?;
    let k = linear(g, s, &format!("{name}.k"), stacked)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let weights = g.softmax(scores, 1)?;
    let mut flat = Vec::with_capacity(layers.len());
    for &l in layers {
        flat.push(g.reshape(l, &[1, t * c])?);
    }
    let z = g.concat(&flat, 0)?;
    let agg = g.matmul(weights, z)?;
    Ok((g.reshape(agg, &[t, c])?, weights))
}

pub(crate) fn init_cluster_head(
    s: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    c: usize,
    hidden: usize,
    blocks: usize,
    k: usize,
) -> Result<()> {
    init_linear(s, rng, &format!("{name}.in"), c, hidden)?;
    init_layer_norm(s, &format!("{name}.in_ln"), hidden)?;
    for b in 0..blocks {
        init_layer_norm(s, &format!("{name}.block{b}.ln"), hidden)?;
        init_linear(s, rng, &format!("{name}.block{b}.fc1"), hidden, hidden)?;
        init_linear(s, rng, &format!("{name}.block{b}.fc2"), hidden, hidden)?;
    }
    init_layer_norm(s, &format!("{name}.out_ln"), hidden)?;
    init_linear(s, rng, &format!("{name}.out"), hidden, k)
}

/// Residual MLP from latents `[T, C]` to cluster logits `[T, K]`.
pub fn cluster_head(g: &mut Graph, s: &ParamStore, name: &str, z: Var, blocks: usize) -> Result<Var> {
    let h = linear(g, s, &format!("{name}.in"), z)?;
    let h = layer_norm(g, s, &format!("{name}.in_ln"), h)?;
    let mut h = g.gelu(h)?;
    for b in 0..blocks {
        let r = layer_norm(g, s, &format!("{name}.block{b}.ln"), h)?;
        let r = linear(g, s, &format!("{name}.block{b}.fc1"), r)?;
        let r = g.gelu(r)?;
        let r = linear(g, s, &format!("{name}.block{b}.fc2"), r)?;
        h = g.add(h, r)?;
    }
    let h = layer_norm(g, s, &format!("{name}.out_ln"), h)?;
    linear(g, s, &format!("{name}.out"), h)
}

pub(crate) fn init_predictor(
    s: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    c: usize,
    n_heads: usize,
    ffn_mult: usize,
    kernel: usize,
) -> Result<()> {
    init_conv(s, rng, &format!("{name}.in"), c, c, 1)?;
    init_conformer(s, rng, &format!("{name}.block"), c, n_heads, ffn_mult, kernel)?;
    init_conv(s, rng, &format!("{name}.out"), c, c, 1)
}

/// Pointwise conv → GELU → conformer block → pointwise conv, with an outer
/// residual from the input.
pub fn predictor(
    g: &mut Graph,
    s: &ParamStore,
    name: &str,
    z: Var,
    n_heads: usize,
    rel: RelPos<'_>,
) -> Result<Var> {
    let h = conv(g, s, &format!("{name}.in"), z, Conv1dCfg::default())?;
    let h = g.gelu(h)?;
    let h = conformer_block(g, s, &format!("{name}.block"), h, n_heads, rel)?;
    let h = conv(g, s, &format!("{name}.out"), h, Conv1dCfg::default())?;
    g.add(z, h)
}
