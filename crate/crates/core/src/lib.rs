//! GMM-anchored JEPA pretraining for speech-like signals.
//!
//! Phase one fits a diagonal Gaussian mixture to log-mel frames. Phase two
//! trains a masked latent predictor against an EMA teacher, with a KL term
//! pulling a cluster head toward the frozen mixture posteriors. The
//! [`analysis`] module measures whether the learned clusters collapse.

pub mod analysis;
pub mod audio;
pub mod augment;
pub mod clustering;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod masking;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DenseArray, Graph, ParamStore, Var};
