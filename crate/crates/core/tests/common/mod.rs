//! Small shared fixtures: a synthetic corpus, phase-one targets and a toy
//! encoder sized for fast tests.
#![allow(dead_code)]

use gmmjepa::audio::{synth_corpus, MelConfig, SynthCorpusSpec, Utterance};
use gmmjepa::clustering::{gmm_fit_minibatch, lloyd_fit, GmmFitConfig, TargetModel};
use gmmjepa::encoder::{EncoderConfig, Frontend, ModelBundle};
use gmmjepa::rng::{rng_for, stream};
use gmmjepa::trainer::{TrainConfig, TrainingData};

pub const K: usize = 8;

pub fn corpus(n: usize, seed: u64) -> Vec<Utterance> {
    let spec = SynthCorpusSpec {
        n_utterances: n,
        n_phone_classes: K,
        seed,
        ..SynthCorpusSpec::default()
    };
    synth_corpus(&spec, &MelConfig::default()).unwrap()
}

pub fn tiny_encoder(frontend: Frontend, seed: u64) -> EncoderConfig {
    EncoderConfig {
        frontend,
        channels: vec![4, 8],
        n_layers: 1,
        latent_dim: 16,
        n_heads: 2,
        ffn_mult: 2,
        conv_kernel: 7,
        rel_pos_buckets: 16,
        rel_pos_max_distance: 64,
        daam_heads: 2,
        head_hidden: 16,
        head_blocks: 1,
        cluster_k: K,
        seed,
        ..EncoderConfig::default()
    }
}

pub fn gmm_targets(data: &TrainingData, seed: u64) -> TargetModel {
    let x = data.stacked_frames().unwrap();
    let cfg = GmmFitConfig {
        k: K,
        epochs: 3,
        init_sample: 2000,
        seed,
        ..GmmFitConfig::default()
    };
    TargetModel::Gmm(gmm_fit_minibatch(&x, &cfg, &mut rng_for(seed, stream::GMM, 0)).unwrap().model)
}

pub fn kmeans_targets(data: &TrainingData, seed: u64) -> TargetModel {
    let x = data.stacked_frames().unwrap();
    TargetModel::Kmeans(lloyd_fit(&x, K, 20, &mut rng_for(seed, stream::KMEANS, 0)).unwrap().model)
}

/// Corpus, GMM targets and a fresh toy mel-frontend model.
pub fn setup(n: usize, seed: u64) -> (TrainingData, ModelBundle) {
    let utts = corpus(n, seed);
    let mel = MelConfig::default();
    let bare = TrainingData::prepare(&utts, &mel, None).unwrap();
    let targets = gmm_targets(&bare, seed);
    let data = TrainingData::prepare(&utts, &mel, Some(&targets)).unwrap();
    let model = ModelBundle::new(tiny_encoder(Frontend::Mel, seed), data.feature_norm().unwrap()).unwrap();
    (data, model)
}

pub fn train_cfg(t_max: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        t_max,
        seed,
        ..TrainConfig::default()
    }
}
