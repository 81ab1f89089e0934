//! Finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Denominator floor: gradients smaller than this are compared by
    /// absolute error `floor * tol`, below central-difference round-off.
    pub floor: f64,
    /// Check at most this many (evenly spaced) elements per parameter.
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-4,
            max_per_param: None,
        }
    }
}

/// Location of one compared gradient element.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Element with the largest relative error, `None` if nothing was checked.
    pub worst_param: Option<GradEntry>,
    /// Worst entry per parameter, in store order.
    pub per_param: Vec<GradEntry>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval<F>(f: &mut F, params: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::inference();
    let l = f(&mut g, params)?;
    let v = g.value(l);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", format!("loss shape {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences, with default options apart from `eps` and `tol`.
pub fn grad_check<F>(f: F, params: &ParamStore, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_with(
        f,
        params,
        GradCheckOptions {
            eps,
            tol,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(
    mut f: F,
    params: &ParamStore,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let first = g.value(loss).clone();
    let again = eval(&mut f, params)?;
    if first.data()[0].to_bits() != again.to_bits() {
        return Err(Error::invalid(format!(
            "grad_check: loss builder is not deterministic ({} vs {again})",
            first.data()[0]
        )));
    }
    g.backward(loss)?;
    let analytic = g.param_grads(params);

    let mut work = params.clone();
    let mut per_param = Vec::new();
    let mut checked = 0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |p| p.len());
        if n == 0 {
            continue;
        }
        let stride = match opts.max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let grad = analytic.get(&name).expect("gradients mirror the store");
        let mut worst: Option<GradEntry> = None;
        for idx in (0..n).step_by(stride) {
            let orig = params.get(&name).unwrap().data()[idx];
            work.get_mut(&name).unwrap().data_mut()[idx] = orig + opts.eps;
            let lp = eval(&mut f, &work)?;
            work.get_mut(&name).unwrap().data_mut()[idx] = orig - opts.eps;
            let lm = eval(&mut f, &work)?;
            work.get_mut(&name).unwrap().data_mut()[idx] = orig;
            let numeric = (lp - lm) / (2.0 * opts.eps);
            let a = grad.data()[idx];
            let e = rel_err(a, numeric, opts.floor);
            checked += 1;
            if worst.as_ref().is_none_or(|w| e > w.rel_err) {
                worst = Some(GradEntry {
                    param: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
        }
        per_param.extend(worst);
    }
    let worst_param = per_param
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .cloned();
    Ok(GradCheckReport {
        max_rel_err: worst_param.as_ref().map_or(0.0, |w| w.rel_err),
        worst_param,
        per_param,
        checked,
        tol: opts.tol,
    })
}
