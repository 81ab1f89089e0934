//! Tape-style reverse-mode differentiation over [`DenseArray`] values.
//!
//! A [`Graph`] records every operation as a node whose parents have strictly
//! smaller indices, so the node vector is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to two forms: an operand with one element acts as
//! a scalar, and an operand whose shape is a suffix of the other's shape is
//! repeated along the leading axes. Anything else needs an explicit
//! [`Graph::reshape`] or [`Graph::take`].

use std::rc::Rc;

use indexmap::IndexMap;

use super::array::{matmul_at_raw, matmul_bt_raw, matmul_raw, round_to_precision, DenseArray};
use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Take {
        x: Var,
        idx: Rc<[usize]>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Exp(Var),
    Log(Var),
    Sin(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    Glu(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        cfg: Conv1dCfg,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Take { .. } => "take",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sin(..) => "sin",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Softplus(..) => "softplus",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Glu(..) => "glu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Conv1d { .. } => "conv1d",
        }
    }
}

/// Geometry of a 1-D convolution over time-major `[T, C]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dCfg {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv1dCfg {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv1dCfg {
    pub fn out_len(&self, t: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = t + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Operation identifiers for generic dispatch through [`Graph::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    Take { idx: Vec<usize>, shape: Vec<usize> },
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    Exp,
    Log,
    Sin,
    Sigmoid,
    Tanh,
    Gelu,
    Softplus,
    Sqrt,
    Square,
    Glu,
    LayerNorm { eps: f64 },
    Sum,
    Mean,
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
    Conv1d(Conv1dCfg),
}

struct Node {
    value: DenseArray,
    grad: Option<DenseArray>,
    op: Op,
    requires_grad: bool,
}

/// A computation graph. Build one per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    track: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            track: true,
        }
    }

    /// A graph that records no gradient information; parameters bind as
    /// constants. Used for frozen/target forward passes.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, if `v` was reached by a backward pass.
    pub fn grad(&self, v: Var) -> Option<&DenseArray> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push_leaf(value, false)
    }

    /// A free leaf that receives gradients without belonging to a store.
    pub fn variable(&mut self, value: DenseArray) -> Var {
        let track = self.track;
        self.push_leaf(value, track)
    }

    /// Binds the named parameter of `store`. Repeated calls with the same
    /// name return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let track = self.track;
        let v = self.push_leaf(value, track);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every parameter of `store`, zero for parameters that
    /// were not bound or not reached.
    pub fn param_grads(&self, store: &ParamStore) -> Gradients {
        let mut grads = Gradients::zeros_like(store);
        for (name, v) in &self.params {
            if let (Some(g), Some(slot)) = (self.nodes[v.0].grad.as_ref(), grads.get_mut(name)) {
                slot.add_assign(g);
            }
        }
        grads
    }

    fn push_leaf(&mut self, value: DenseArray, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, mut value: DenseArray, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.tag() });
        }
        round_to_precision(value.data_mut());
        let requires_grad = self.track && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    /// Generic dispatch over the supported op set.
    pub fn apply(&mut self, op: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(Error::invalid(format!(
                    "{op:?} takes {n} inputs, got {}",
                    inputs.len()
                )))
            } else {
                Ok(())
            }
        };
        match op {
            OpKind::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(Error::invalid("concat of zero inputs"));
                }
                return self.concat(inputs, *axis);
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => arity(2)?,
            OpKind::Conv1d(_) => arity(2)?,
            _ => arity(1)?,
        }
        let a = inputs[0];
        match op {
            OpKind::Add => self.add(a, inputs[1]),
            OpKind::Sub => self.sub(a, inputs[1]),
            OpKind::Mul => self.mul(a, inputs[1]),
            OpKind::Div => self.div(a, inputs[1]),
            OpKind::MatMul => self.matmul(a, inputs[1]),
            OpKind::Conv1d(cfg) => self.conv1d(a, inputs[1], *cfg),
            OpKind::Scale(s) => self.scale(a, *s),
            OpKind::AddScalar(s) => self.add_scalar(a, *s),
            OpKind::Transpose => self.transpose(a),
            OpKind::Reshape(s) => self.reshape(a, s),
            OpKind::Slice { axis, start, end } => self.slice(a, *axis, *start, *end),
            OpKind::Take { idx, shape } => self.take(a, idx.clone(), shape),
            OpKind::Softmax { axis } => self.softmax(a, *axis),
            OpKind::LogSoftmax { axis } => self.log_softmax(a, *axis),
            OpKind::Exp => self.exp(a),
            OpKind::Log => self.log(a),
            OpKind::Sin => self.sin(a),
            OpKind::Sigmoid => self.sigmoid(a),
            OpKind::Tanh => self.tanh(a),
            OpKind::Gelu => self.gelu(a),
            OpKind::Softplus => self.softplus(a),
            OpKind::Sqrt => self.sqrt(a),
            OpKind::Square => self.square(a),
            OpKind::Glu => self.glu(a),
            OpKind::LayerNorm { eps } => self.layer_norm(a, *eps),
            OpKind::Sum => self.sum(a),
            OpKind::Mean => self.mean(a),
            OpKind::SumAxis { axis } => self.sum_axis(a, *axis),
            OpKind::MeanAxis { axis } => self.mean_axis(a, *axis),
            OpKind::Concat { .. } => unreachable!(),
        }
    }

    // ---- elementwise binary -------------------------------------------

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.val(a).len(), self.val(b).len());
        if sa == sb {
            return Ok(sa.to_vec());
        }
        if nb == 1 {
            return Ok(sa.to_vec());
        }
        if na == 1 {
            return Ok(sb.to_vec());
        }
        if sa.len() > sb.len() && sa.ends_with(sb) {
            return Ok(sa.to_vec());
        }
        if sb.len() > sa.len() && sb.ends_with(sa) {
            return Ok(sb.to_vec());
        }
        Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
    }

    fn binary(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let shape = self.broadcast(op.tag(), a, b)?;
        let (av, bv) = (self.val(a).data(), self.val(b).data());
        let n: usize = shape.iter().product();
        let (na, nb) = (av.len(), bv.len());
        let mut out = Vec::with_capacity(n);
        if na == n && nb == n {
            out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        } else if na == n {
            for chunk in av.chunks(nb) {
                out.extend(chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)));
            }
        } else {
            for chunk in bv.chunks(na) {
                out.extend(av.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        let value = DenseArray::new(&shape, out)?;
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.val(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Division by a constant.
    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if s == 0.0 {
            return Err(Error::invalid("div_scalar by zero"));
        }
        self.scale(a, 1.0 / s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.val(a).map(|v| v + s);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    // ---- linear algebra and shape ------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}"))),
        };
        let out = matmul_raw(self.val(a).data(), self.val(b).data(), m, k, n);
        let value = DenseArray::new(&[m, n], out)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a).transpose()?;
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a), &[a])
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{shape:?} axis {axis} range {start}..{end}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let w = end - start;
        let src = self.val(x).data();
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = w;
        let value = DenseArray::new(&oshape, out)?;
        self.push(value, Op::Slice { x, axis, start }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let src = self.val(x).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        let value = DenseArray::new(&oshape, out)?;
        self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Flat gather: `out[i] = x.flat[idx[i]]`, reshaped to `shape`.
    /// Doubles as masked row selection and explicit broadcasting.
    pub fn take(&mut self, x: Var, idx: impl Into<Rc<[usize]>>, shape: &[usize]) -> Result<Var> {
        let idx: Rc<[usize]> = idx.into();
        let src = self.val(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(
                "take",
                format!("index {bad} out of range for {} elements", src.len()),
            ));
        }
        let out: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let value = DenseArray::new(shape, out)?;
        self.push(value, Op::Take { x, idx }, &[x])
    }

    /// Rows `rows` of a 2-D array, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self
            .val(x)
            .dims2()
            .ok_or_else(|| Error::shape("select_rows", format!("{:?}", self.shape(x))))?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("select_rows", format!("row {bad} of {r}")));
        }
        let idx: Vec<usize> = rows
            .iter()
            .flat_map(|&i| (i * c..(i + 1) * c).collect::<Vec<_>>())
            .collect();
        self.take(x, idx, &[rows.len(), c])
    }

    // ---- normalisation along an axis -----------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(op, format!("axis {axis} for {:?}", self.shape(x))));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let value = softmax_along(self.val(x), axis, false);
        self.push(value, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let value = softmax_along(self.val(x), axis, true);
        self.push(value, Op::LogSoftmax { x, axis }, &[x])
    }

    /// Normalisation over the last axis without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        let src = self.val(x).data();
        let mut out = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(src.len() / n.max(1));
        for row in src.chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|v| (v - mu) * r));
            rstd.push(r);
        }
        let value = DenseArray::new(&shape, out)?;
        self.push(value, Op::LayerNorm { x, rstd }, &[x])
    }

    // ---- elementwise unary ------------------------------------------------

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.val(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.val(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sin(x), f64::sin)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.val(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    /// Gated linear unit over the last axis: first half times sigmoid of the
    /// second half.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("glu", "scalar input"))?;
        if n % 2 != 0 {
            return Err(Error::shape("glu", format!("odd last axis in {shape:?}")));
        }
        let h = n / 2;
        let src = self.val(x).data();
        let mut out = Vec::with_capacity(src.len() / 2);
        for row in src.chunks(n) {
            out.extend((0..h).map(|j| row[j] * sigmoid(row[h + j])));
        }
        *shape.last_mut().unwrap() = h;
        let value = DenseArray::new(&shape, out)?;
        self.push(value, Op::Glu(x), &[x])
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = DenseArray::scalar(self.val(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.val(x);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let value = DenseArray::scalar(v.sum() / v.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    fn reduce_axis(&self, x: Var, axis: usize, scale_by_len: bool) -> Result<DenseArray> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.val(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if scale_by_len {
            let s = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= s);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        DenseArray::new(&oshape, out)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let value = self.reduce_axis(x, axis, false)?;
        self.push(value, Op::SumAxis { x, axis }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        if self.shape(x)[axis] == 0 {
            return Err(Error::shape("mean_axis", "empty axis"));
        }
        let value = self.reduce_axis(x, axis, true)?;
        self.push(value, Op::MeanAxis { x, axis }, &[x])
    }

    // ---- convolution ----------------------------------------------------

    /// 1-D convolution of a time-major input `x[T, C_in]` with
    /// `w[C_out, C_in / groups, K]`, zero padded, producing `[T_out, C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, cfg: Conv1dCfg) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let err = || Error::shape("conv1d", format!("input {sx:?}, weight {sw:?}, {cfg:?}"));
        let (t, cin) = match sx.as_slice() {
            [t, c] => (*t, *c),
            _ => return Err(err()),
        };
        let (cout, cpg, k) = match sw.as_slice() {
            [o, i, k] => (*o, *i, *k),
            _ => return Err(err()),
        };
        let g = cfg.groups;
        if g == 0 || k == 0 || cin % g != 0 || cout % g != 0 || cin / g != cpg || cfg.dilation == 0 {
            return Err(err());
        }
        let to = cfg.out_len(t, k).ok_or_else(err)?;
        let opg = cout / g;
        let xs = self.val(x).data();
        let ws = self.val(w).data();
        let mut out = vec![0.0; to * cout];
        for ot in 0..to {
            let orow = &mut out[ot * cout..(ot + 1) * cout];
            for kk in 0..k {
                let pos = (ot * cfg.stride + kk * cfg.dilation) as isize - cfg.padding as isize;
                if pos < 0 || pos as usize >= t {
                    continue;
                }
                let xrow = &xs[pos as usize * cin..(pos as usize + 1) * cin];
                for (co, o) in orow.iter_mut().enumerate() {
                    let gi = co / opg;
                    let xin = &xrow[gi * cpg..(gi + 1) * cpg];
                    let wbase = co * cpg * k;
                    let mut acc = 0.0;
                    for (ci, &xv) in xin.iter().enumerate() {
                        acc += ws[wbase + ci * k + kk] * xv;
                    }
                    *o += acc;
                }
            }
        }
        let value = DenseArray::new(&[to, cout], out)?;
        self.push(value, Op::Conv1d { x, w, cfg }, &[x, w])
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d`loss`/d`node` into every node on a path from the
    /// parameters to `loss`. Gradients from earlier calls are kept and added
    /// to, never cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseArray::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(mut g) = g else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            round_to_precision(g.data_mut());
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<DenseArray>], v: Var, delta: DenseArray) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reduces an output-shaped gradient onto a (possibly broadcast) operand.
    fn unbroadcast(&self, v: Var, g: Vec<f64>) -> DenseArray {
        let target = self.val(v);
        let n = target.len();
        let data = if n == g.len() {
            g
        } else {
            let mut out = vec![0.0; n];
            for chunk in g.chunks(n) {
                for (o, x) in out.iter_mut().zip(chunk) {
                    *o += x;
                }
            }
            out
        };
        DenseArray::new(target.shape(), data).expect("unbroadcast keeps operand shape")
    }

    /// Operand values expanded to the output length (by repetition).
    fn expanded(&self, v: Var, n: usize) -> Vec<f64> {
        let d = self.val(v).data();
        if d.len() == n {
            d.to_vec()
        } else {
            d.iter().copied().cycle().take(n).collect()
        }
    }

    fn propagate(&self, i: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
        let out = &self.nodes[i].value;
        let gd = g.data();
        let n = gd.len();
        let like = |x: Var, data: Vec<f64>| {
            DenseArray::new(self.val(x).shape(), data).expect("gradient keeps operand shape")
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, self.unbroadcast(*a, gd.to_vec()));
                }
                if self.needs(*b) {
                    self.accum(grads, *b, self.unbroadcast(*b, gd.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, self.unbroadcast(*a, gd.to_vec()));
                }
                if self.needs(*b) {
                    let neg = gd.iter().map(|v| -v).collect();
                    self.accum(grads, *b, self.unbroadcast(*b, neg));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.expanded(*b, n);
                    let d = gd.iter().zip(&bv).map(|(g, y)| g * y).collect();
                    self.accum(grads, *a, self.unbroadcast(*a, d));
                }
                if self.needs(*b) {
                    let av = self.expanded(*a, n);
                    let d = gd.iter().zip(&av).map(|(g, x)| g * x).collect();
                    self.accum(grads, *b, self.unbroadcast(*b, d));
                }
            }
            Op::Div(a, b) => {
                let bv = self.expanded(*b, n);
                if self.needs(*a) {
                    let d = gd.iter().zip(&bv).map(|(g, y)| g / y).collect();
                    self.accum(grads, *a, self.unbroadcast(*a, d));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -out/b
                    let d = gd
                        .iter()
                        .zip(out.data())
                        .zip(&bv)
                        .map(|((g, o), y)| -g * o / y)
                        .collect();
                    self.accum(grads, *b, self.unbroadcast(*b, d));
                }
            }
            Op::Scale(a, s) => {
                self.accum(grads, *a, like(*a, gd.iter().map(|v| v * s).collect()));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accum(grads, *a, like(*a, gd.to_vec()));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.val(*a).dims2().unwrap();
                let nn = self.val(*b).dims2().unwrap().1;
                if self.needs(*a) {
                    let d = matmul_bt_raw(gd, self.val(*b).data(), m, nn, k);
                    self.accum(grads, *a, like(*a, d));
                }
                if self.needs(*b) {
                    let d = matmul_at_raw(self.val(*a).data(), gd, m, k, nn);
                    self.accum(grads, *b, like(*b, d));
                }
            }
            Op::Transpose(a) => {
                let d = g.transpose().expect("transpose grad is 2-D");
                self.accum(grads, *a, like(*a, d.into_data()));
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                let w = out.shape()[*axis];
                let mut d = vec![0.0; self.val(*x).len()];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    d[dst..dst + w * inner].copy_from_slice(&gd[o * w * inner..(o + 1) * w * inner]);
                }
                self.accum(grads, *x, like(*x, d));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.needs(x) {
                        let mut d = Vec::with_capacity(self.val(x).len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accum(grads, x, like(x, d));
                    }
                    offset += len;
                }
            }
            Op::Take { x, idx } => {
                let mut d = vec![0.0; self.val(*x).len()];
                for (&j, gv) in idx.iter().zip(gd) {
                    d[j] += gv;
                }
                self.accum(grads, *x, like(*x, d));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![0.0; n];
                for o in 0..outer {
                    for q in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + q;
                        let dot: f64 = (0..len).map(|a| gd[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] = y[at(a)] * (gd[at(a)] - dot);
                        }
                    }
                }
                self.accum(grads, *x, like(*x, d));
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![0.0; n];
                for o in 0..outer {
                    for q in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + q;
                        let gs: f64 = (0..len).map(|a| gd[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] = gd[at(a)] - y[at(a)].exp() * gs;
                        }
                    }
                }
                self.accum(grads, *x, like(*x, d));
            }
            Op::Exp(x) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.accum(grads, *x, like(*x, d));
            }
            Op::Log(x) => {
                let xv = self.val(*x).data();
                let d = gd.iter().zip(xv).map(|(g, v)| g / v).collect();
                self.accum(grads, *x, like(*x, d));
            }
            Op::Sin(x) => {
                let xv = self.val(*x).data();
                let d = gd.iter().zip(xv).map(|(g, v)| g * v.cos()).collect();
                self.accum(grads, *x, like(*x, d));
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accum(grads, *x, like(*x, d));
            }
            Op::Tanh(x) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accum(grads, *x, like(*x, d));
            }
            Op::Gelu(x) => {
                let xv = self.val(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })
                    .collect();
                self.accum(grads, *x, like(*x, d));
            }
            Op::Softplus(x) => {
                let xv = self.val(*x).data();
                let d = gd.iter().zip(xv).map(|(g, &v)| g * sigmoid(v)).collect();
                self.accum(grads, *x, like(*x, d));
            }
            Op::Sqrt(x) => {
                // Zero subgradient at the origin.
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, &y)| if y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect();
                self.accum(grads, *x, like(*x, d));
            }
            Op::Square(x) => {
                let xv = self.val(*x).data();
                let d = gd.iter().zip(xv).map(|(g, v)| 2.0 * g * v).collect();
                self.accum(grads, *x, like(*x, d));
            }
            Op::Glu(x) => {
                let xv = self.val(*x).data();
                let full = *self.shape(*x).last().unwrap();
                let h = full / 2;
                let mut d = vec![0.0; xv.len()];
                for (r, (row, grow)) in xv.chunks(full).zip(gd.chunks(h)).enumerate() {
                    for j in 0..h {
                        let s = sigmoid(row[h + j]);
                        d[r * full + j] = grow[j] * s;
                        d[r * full + h + j] = grow[j] * row[j] * s * (1.0 - s);
                    }
                }
                self.accum(grads, *x, like(*x, d));
            }
            Op::LayerNorm { x, rstd } => {
                let last = *out.shape().last().unwrap();
                let y = out.data();
                let mut d = Vec::with_capacity(n);
                for ((yr, gr), &r) in y.chunks(last).zip(gd.chunks(last)).zip(rstd) {
                    let gm = gr.iter().sum::<f64>() / last as f64;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / last as f64;
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| r * (gv - gm - yv * gym)));
                }
                self.accum(grads, *x, like(*x, d));
            }
            Op::Sum(x) => {
                let len = self.val(*x).len();
                self.accum(grads, *x, like(*x, vec![gd[0]; len]));
            }
            Op::Mean(x) => {
                let len = self.val(*x).len();
                self.accum(grads, *x, like(*x, vec![gd[0] / len as f64; len]));
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                let s = if matches!(self.nodes[i].op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let grow = &gd[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        d.extend(grow.iter().map(|v| v * s));
                    }
                }
                self.accum(grads, *x, like(*x, d));
            }
            Op::Conv1d { x, w, cfg } => {
                let (t, cin) = self.val(*x).dims2().unwrap();
                let sw = self.shape(*w);
                let (cout, cpg, k) = (sw[0], sw[1], sw[2]);
                let opg = cout / cfg.groups;
                let to = out.shape()[0];
                let xs = self.val(*x).data();
                let ws = self.val(*w).data();
                let (nx, nw) = (self.needs(*x), self.needs(*w));
                let mut dx = vec![0.0; if nx { xs.len() } else { 0 }];
                let mut dw = vec![0.0; if nw { ws.len() } else { 0 }];
                for ot in 0..to {
                    let grow = &gd[ot * cout..(ot + 1) * cout];
                    for kk in 0..k {
                        let pos = (ot * cfg.stride + kk * cfg.dilation) as isize - cfg.padding as isize;
                        if pos < 0 || pos as usize >= t {
                            continue;
                        }
                        let p = pos as usize;
                        for (co, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let gi = co / opg;
                            let wbase = co * cpg * k;
                            let xbase = p * cin + gi * cpg;
                            for ci in 0..cpg {
                                if nx {
                                    dx[xbase + ci] += gv * ws[wbase + ci * k + kk];
                                }
                                if nw {
                                    dw[wbase + ci * k + kk] += gv * xs[xbase + ci];
                                }
                            }
                        }
                    }
                }
                if nx {
                    self.accum(grads, *x, like(*x, dx));
                }
                if nw {
                    self.accum(grads, *w, like(*w, dw));
                }
            }
        }
    }
}

fn softmax_along(x: &DenseArray, axis: usize, log: bool) -> DenseArray {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for q in 0..inner {
            let at = |a: usize| (o * len + a) * inner + q;
            let m = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|a| (src[at(a)] - m).exp()).sum();
            let lz = z.ln();
            for a in 0..len {
                out[at(a)] = if log {
                    src[at(a)] - m - lz
                } else {
                    (src[at(a)] - m).exp() / z
                };
            }
        }
    }
    DenseArray::new(x.shape(), out).expect("softmax keeps shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> DenseArray {
        DenseArray::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(arr(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_shape_contract() {
        let mut g = Graph::new();
        let a = g.constant(DenseArray::zeros(&[2, 3]));
        let b = g.constant(DenseArray::zeros(&[3, 4]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        let err = g.matmul(b, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[3, 4]"), "{err}");
    }

    #[test]
    fn strided_conv_output_length() {
        let mut g = Graph::new();
        let x = g.constant(DenseArray::ones(&[10, 1]));
        let w = g.constant(DenseArray::ones(&[1, 1, 2]));
        let y = g
            .conv1d(x, w, Conv1dCfg { stride: 2, ..Default::default() })
            .unwrap();
        assert_eq!(g.shape(y), &[5, 1]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let p = g.variable(arr(&[3], &[1.0, -2.0, 5.0]));
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_error_gradient_vanishes_at_minimum() {
        let mut g = Graph::new();
        let c = g.constant(arr(&[3], &[0.5, 1.5, -2.0]));
        let p = g.variable(arr(&[3], &[0.5, 1.5, -2.0]));
        let d = g.sub(p, c).unwrap();
        let s = g.square(d).unwrap();
        let l = g.mean(s).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::new();
        let p = g.variable(arr(&[2], &[1.0, 2.0]));
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.variable(arr(&[2], &[1.0, 2.0]));
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn unreached_nodes_have_no_grad() {
        let mut g = Graph::new();
        let p = g.variable(arr(&[2], &[1.0, 2.0]));
        let q = g.variable(arr(&[2], &[3.0, 4.0]));
        let _unused = g.exp(q).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(q).is_none());
    }

    #[test]
    fn broadcasting_rules() {
        let mut g = Graph::new();
        let a = g.constant(DenseArray::zeros(&[4, 3]));
        let row = g.constant(DenseArray::ones(&[3]));
        let s = g.constant(DenseArray::scalar(2.0));
        let col = g.constant(DenseArray::ones(&[4]));
        let ar = g.add(a, row).unwrap();
        let sa = g.mul(s, a).unwrap();
        assert_eq!(g.shape(ar), &[4, 3]);
        assert_eq!(g.shape(sa), &[4, 3]);
        assert!(g.add(a, col).is_err());
    }

    #[test]
    fn log_of_nonpositive_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(arr(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut store = ParamStore::new(0);
        store.insert("w", DenseArray::ones(&[2])).unwrap();
        let mut g = Graph::inference();
        let w = g.param(&store, "w").unwrap();
        let l = g.sum(w).unwrap();
        assert!(!g.requires_grad(l));
        g.backward(l).unwrap();
        assert!(g.grad(w).is_none());
    }
}
