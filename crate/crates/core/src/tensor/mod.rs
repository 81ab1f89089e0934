//! Dense arrays and a reverse-mode differentiation engine.

mod array;
mod gradcheck;
mod graph;
mod params;

pub use array::{precision, set_precision, DenseArray, Precision};
pub use gradcheck::{grad_check, grad_check_with, rel_err, GradCheckOptions, GradCheckReport, GradEntry};
pub use graph::{Conv1dCfg, Graph, OpKind, Var};
pub use params::{Gradients, ParamStore};
