//! Phase-one targets: diagonal GMM and the k-means baseline.

mod gmm;
mod io;
mod kmeans;

pub use gmm::{
    chunked_soft_assign, cosine_lr, gmm_fit_from, gmm_fit_minibatch, gmm_init, GmmFitConfig,
    GmmFitReport, GmmModel, PosteriorSeq, DEFAULT_VAR_FLOOR,
};
pub use io::{
    decode_targets, encode_targets, read_target_meta, read_targets, sidecar_path, write_targets,
    TargetMeta, TargetModel,
};
pub use kmeans::{hard_labels, kmeanspp_init, lloyd_fit, lloyd_from, KmeansModel, LloydReport};

/// Soft targets for `x`: GMM posteriors, or one-hot nearest-center labels.
pub fn target_posteriors(model: &TargetModel, x: &crate::tensor::DenseArray) -> crate::Result<PosteriorSeq> {
    match model {
        TargetModel::Gmm(g) => g.posteriors(x),
        TargetModel::Kmeans(k) => Ok(PosteriorSeq::one_hot(&hard_labels(k, x)?, k.k())),
    }
}
