mod common;

use gmmjepa::clustering::PosteriorSeq;
use gmmjepa::encoder::{ema_update, encode_checkpoint, read_checkpoint, ModelBundle};
use gmmjepa::augment::AugmentConfig;
use gmmjepa::masking::MaskSpec;
use gmmjepa::tensor::{DenseArray, Gradients, Graph, ParamStore};
use gmmjepa::trainer::{
    clip_global_norm, cluster_kl_loss, jepa_loss, lambda_at, lr_at, optimizer_step, read_metrics,
    run_pretraining, warmup_steps, AdamHyper, AdamState, TrainConfig, Trainer, TrainingData,
};
use gmmjepa::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg_with(t_max: usize, lambda_end: f64) -> TrainConfig {
    TrainConfig {
        t_max,
        lambda_end,
        ..TrainConfig::default()
    }
}

#[test]
fn lambda_hits_documented_endpoints() {
    let cfg = cfg_with(2000, 0.01);
    assert_eq!(lambda_at(0, &cfg), 1.0);
    assert_eq!(lambda_at(2000, &cfg), 0.01);
    assert!((lambda_at(1000, &cfg) - 0.505).abs() < 1e-12);
    // Out of range clamps.
    assert_eq!(lambda_at(5000, &cfg), 0.01);
    let zero = cfg_with(2000, 0.0);
    assert_eq!(lambda_at(2000, &zero), 0.0);
}

proptest! {
    #[test]
    fn lambda_is_monotone_with_exact_endpoints(t_max in 1usize..5000, end in 0.0f64..1.0) {
        let cfg = cfg_with(t_max, end);
        prop_assert_eq!(lambda_at(0, &cfg), 1.0);
        prop_assert_eq!(lambda_at(t_max, &cfg), end);
        let mut prev = f64::INFINITY;
        for t in (0..=t_max).step_by((t_max / 97).max(1)) {
            let l = lambda_at(t, &cfg);
            prop_assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn clipped_norm_never_exceeds_the_cap(vals in prop::collection::vec(-1e3f64..1e3, 1..40), cap in 0.01f64..10.0) {
        let mut store = ParamStore::new(0);
        store.insert("a", DenseArray::from_vec(vals.clone())).unwrap();
        let mut g = Gradients::zeros_like(&store);
        g.get_mut("a").unwrap().data_mut().copy_from_slice(&vals);
        let before = clip_global_norm(&mut g, cap);
        let oracle = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((before - oracle).abs() <= 1e-9 * oracle.max(1.0));
        prop_assert!(g.global_norm() <= cap + 1e-9);
    }
}

#[test]
fn lr_schedule_warms_up_then_decays() {
    let cfg = cfg_with(1000, 0.01);
    let w = warmup_steps(&cfg);
    assert_eq!(w, 100);
    assert_eq!(lr_at(0, &cfg), 1e-5);
    assert!((lr_at(w, &cfg) - 1e-4).abs() < 1e-18);
    assert!((lr_at(1000, &cfg) - 1e-5).abs() < 1e-18);
    assert!((lr_at(50, &cfg) - 5.5e-5).abs() < 1e-18);
    assert!((lr_at(550, &cfg) - 5.5e-5).abs() < 1e-18);
}

fn store_of(vals: &[f64]) -> ParamStore {
    let mut s = ParamStore::new(0);
    s.insert("w", DenseArray::from_vec(vals.to_vec())).unwrap();
    s
}

#[test]
fn zero_gradient_step_is_pure_decoupled_decay() {
    let theta = [0.3, -1.7, 2.5, 0.0, 1e-3];
    let mut p = store_of(&theta);
    let mut state = AdamState::new(&p);
    let mut g = Gradients::zeros_like(&p);
    let (lr, wd) = (1e-3, 1e-2);
    for _ in 0..3 {
        optimizer_step(&mut p, &mut g, &mut state, AdamHyper::default(), lr, wd, 1.0).unwrap();
    }
    for (i, t) in theta.iter().enumerate() {
        let want = t * (1.0 - lr * wd) * (1.0 - lr * wd) * (1.0 - lr * wd);
        assert!((p.get("w").unwrap().data()[i] - want).abs() < 1e-12);
    }
}

/// Straight-line AdamW oracle for one parameter vector.
fn adamw_oracle(theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, lr: f64, wd: f64, clip: f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = if norm > clip { clip / norm } else { 1.0 };
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for i in 0..theta.len() {
        let gi = g[i] * s;
        m[i] = b1 * m[i] + (1.0 - b1) * gi;
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
        let mh = m[i] / (1.0 - b1.powi(t));
        let vh = v[i] / (1.0 - b2.powi(t));
        theta[i] = theta[i] * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
    }
}

#[test]
fn clipping_scales_gradients_before_the_moments() {
    // Norm 10 with clip 1: the moments must see g / 10.
    let grad = [6.0, 0.0, 8.0];
    let mut p = store_of(&[1.0, 2.0, 3.0]);
    let mut state = AdamState::new(&p);
    let mut th = [1.0, 2.0, 3.0];
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    for t in 1..=4 {
        let mut g = Gradients::zeros_like(&p);
        g.get_mut("w").unwrap().data_mut().copy_from_slice(&grad);
        let norms = optimizer_step(&mut p, &mut g, &mut state, AdamHyper::default(), 1e-2, 1e-3, 1.0).unwrap();
        assert!((norms.grad_norm - 10.0).abs() < 1e-12);
        assert!(norms.clipped_norm <= 1.0 + 1e-9);
        adamw_oracle(&mut th, &mut m, &mut v, &grad, t, 1e-2, 1e-3, 1.0);
        for i in 0..3 {
            assert!((state.m.get("w").unwrap().data()[i] - m[i]).abs() < 1e-15);
            assert!((p.get("w").unwrap().data()[i] - th[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_gradient_steps_are_bounded_by_lr() {
    let lr = 1e-3;
    let mut p = store_of(&[0.5, -0.5, 2.0]);
    let mut state = AdamState::new(&p);
    let mut prev = p.get("w").unwrap().data().to_vec();
    for _ in 0..500 {
        let mut g = Gradients::zeros_like(&p);
        g.get_mut("w").unwrap().data_mut().copy_from_slice(&[0.3, -0.01, 0.2]);
        optimizer_step(&mut p, &mut g, &mut state, AdamHyper::default(), lr, 0.0, 1.0).unwrap();
        let now = p.get("w").unwrap().data().to_vec();
        for (a, b) in now.iter().zip(&prev) {
            assert!((a - b).abs() <= lr * (1.0 + 1e-6));
        }
        prev = now;
    }
    // Fixed gradient: the bias-corrected ratio tends to sign(g), step -> lr.
    let mut g = Gradients::zeros_like(&p);
    g.get_mut("w").unwrap().data_mut().copy_from_slice(&[0.3, -0.01, 0.2]);
    optimizer_step(&mut p, &mut g, &mut state, AdamHyper::default(), lr, 0.0, 1.0).unwrap();
    let d = prev[1] - p.get("w").unwrap().data()[1];
    assert!((d + lr).abs() < 1e-6 * lr + 1e-9, "step {d}");
}

#[test]
fn non_finite_gradients_leave_state_untouched() {
    let mut p = store_of(&[1.0, 2.0]);
    let mut state = AdamState::new(&p);
    let mut g = Gradients::zeros_like(&p);
    g.get_mut("w").unwrap().data_mut()[0] = f64::NAN;
    let before = (p.clone(), state.clone());
    assert!(optimizer_step(&mut p, &mut g, &mut state, AdamHyper::default(), 1e-3, 1e-3, 1.0).is_err());
    assert_eq!((p, state), before);
}

#[test]
fn ema_contracts_geometrically() {
    let online = store_of(&[1.0, -2.0, 0.5]);
    let mut target = store_of(&[3.0, 0.0, -1.5]);
    let tau = 0.996;
    let diff = |t: &ParamStore| -> Vec<f64> {
        t.get("w").unwrap().data().iter().zip(online.get("w").unwrap().data()).map(|(a, b)| a - b).collect()
    };
    let mut prev = diff(&target);
    for _ in 0..50 {
        ema_update(&online, &mut target, tau).unwrap();
        let now = diff(&target);
        for (a, b) in now.iter().zip(&prev) {
            assert!((a / b - tau).abs() < 1e-12);
        }
        prev = now;
    }
}

#[test]
fn jepa_loss_examples() {
    let mut g = Graph::new();
    let z = DenseArray::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let p = g.variable(z.clone());
    let l = jepa_loss(&mut g, p, &z, &[0, 2]).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);

    let p = g.variable(DenseArray::new(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
    let l = jepa_loss(&mut g, p, &DenseArray::zeros(&[2, 2]), &[0]).unwrap();
    assert_eq!(g.value(l).data()[0], 25.0);

    // Unmasked rows do not matter.
    let a = g.variable(DenseArray::new(&[3, 1], vec![1.0, 7.0, 2.0]).unwrap());
    let b = g.variable(DenseArray::new(&[3, 1], vec![1.0, -90.0, 2.0]).unwrap());
    let tgt = DenseArray::new(&[3, 1], vec![0.0, 0.0, 0.0]).unwrap();
    let la = jepa_loss(&mut g, a, &tgt, &[0, 2]).unwrap();
    let lb = jepa_loss(&mut g, b, &tgt, &[0, 2]).unwrap();
    assert_eq!(g.value(la).data()[0], g.value(lb).data()[0]);
    assert_eq!(g.value(la).data()[0], 2.5);
}

fn posterior(rows: &[Vec<f64>]) -> PosteriorSeq {
    let q = DenseArray::from_rows(rows).unwrap();
    let log_q = q.map(|p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY });
    PosteriorSeq { q, log_q }
}

fn kl_via_graph(q: &[Vec<f64>], p: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let logits = g.variable(DenseArray::from_rows(&p.iter().map(|r| r.iter().map(|x| x.ln()).collect()).collect::<Vec<Vec<f64>>>()).unwrap());
    let idx: Vec<usize> = (0..q.len()).collect();
    let l = cluster_kl_loss(&mut g, &posterior(q), logits, &idx).unwrap();
    g.value(l).data()[0]
}

#[test]
fn kl_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((kl_via_graph(&[vec![1.0, 0.0]], &[vec![0.5, 0.5]]) - ln2).abs() < 1e-12);
    let r = vec![0.2, 0.3, 0.5];
    assert!(kl_via_graph(&[r.clone()], &[r]).abs() < 1e-12);
}

#[test]
fn kl_is_non_negative_and_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let row = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    for _ in 0..1000 {
        let q = row(&mut rng);
        let p = row(&mut rng);
        let got = kl_via_graph(&[q.clone()], &[p.clone()]);
        let oracle: f64 = q.iter().zip(&p).map(|(a, b)| a * (a / b).ln()).sum();
        assert!(got >= -1e-15);
        assert!((got - oracle).abs() < 1e-12);
    }
}

fn trainer(data: &TrainingData, model: ModelBundle, cfg: TrainConfig) -> Trainer {
    Trainer::new(cfg, AugmentConfig::default(), MaskSpec::default(), model, data).unwrap()
}

#[test]
fn frozen_step_changes_nothing_and_stays_finite() {
    let (data, model) = common::setup(8, 3);
    let cfg = TrainConfig {
        lambda_start: 0.0,
        lambda_end: 0.0,
        lr_min: 0.0,
        lr_peak: 0.0,
        t_max: 3,
        ..TrainConfig::default()
    };
    let mut tr = trainer(&data, model.clone(), cfg);
    for _ in 0..3 {
        let r = tr.train_step(&data).unwrap().unwrap();
        assert!(r.l_jepa.is_finite() && r.l_cluster.is_finite() && r.total.is_finite());
        assert_eq!(r.lambda, 0.0);
    }
    assert_eq!(tr.model().online, model.online);
    // The teacher moves toward an unchanged student it already equals.
    for (name, t) in tr.model().target.iter() {
        assert!(t.max_abs_diff(model.target.get(name).unwrap()) < 1e-14);
    }
}

#[test]
fn total_is_jepa_plus_weighted_cluster_loss() {
    let (data, model) = common::setup(8, 4);
    let mut tr = trainer(&data, model, common::train_cfg(6, 4));
    while !tr.is_done() {
        let r = tr.train_step(&data).unwrap().unwrap();
        assert!((r.total - (r.l_jepa + r.lambda * r.l_cluster)).abs() < 1e-9);
        assert!(r.grad_norm.is_finite() && r.l_cluster > 0.0);
    }
}

#[test]
fn same_seed_gives_identical_records() {
    let (data, model) = common::setup(8, 5);
    let run = || {
        let mut tr = trainer(&data, model.clone(), common::train_cfg(5, 5));
        (0..5)
            .map(|_| tr.train_step(&data).unwrap().unwrap().deterministic_part())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn target_encoder_only_moves_by_ema() {
    let (data, model) = common::setup(8, 6);
    let mut tr = trainer(&data, model, common::train_cfg(2, 6));
    let before = tr.model().target.clone();
    tr.train_step(&data).unwrap().unwrap();
    let mut expect = before;
    ema_update(&tr.model().online, &mut expect, 0.996).unwrap();
    assert_eq!(tr.model().target, expect);
}

#[test]
fn seeded_smoke_run_lowers_the_total_loss() {
    let (data, model) = common::setup(16, 7);
    let mut tr = trainer(&data, model, common::train_cfg(200, 7));
    let mut first = None;
    let mut last = None;
    while !tr.is_done() {
        let r = tr.train_step(&data).unwrap().unwrap();
        first.get_or_insert(r.total);
        last = Some(r.total);
    }
    let (first, last) = (first.unwrap(), last.unwrap());
    assert!(last < first, "step 200 total {last} vs step 1 {first}");
}

#[test]
fn misaligned_targets_are_a_hard_error() {
    let (mut data, model) = common::setup(4, 8);
    let q = data.targets.as_mut().unwrap();
    for s in q.iter_mut() {
        let (t, k) = (s.len() - 1, s.k());
        *s = PosteriorSeq {
            q: DenseArray::new(&[t, k], s.q.data()[..t * k].to_vec()).unwrap(),
            log_q: DenseArray::new(&[t, k], s.log_q.data()[..t * k].to_vec()).unwrap(),
        };
    }
    let mut tr = trainer(&data, model, common::train_cfg(2, 8));
    assert!(matches!(tr.train_step(&data), Err(Error::Shape { .. })));
}

#[test]
fn baseline_mode_requires_kmeans_targets() {
    let (data, model) = common::setup(4, 9);
    let cfg = TrainConfig {
        baseline_mode: true,
        ..common::train_cfg(2, 9)
    };
    assert!(matches!(
        Trainer::new(cfg.clone(), AugmentConfig::default(), MaskSpec::default(), model.clone(), &data),
        Err(Error::Config(_))
    ));
    let utts = common::corpus(4, 9);
    let mel = data.mel.clone();
    let km = common::kmeans_targets(&data, 9);
    let hard = TrainingData::prepare(&utts, &mel, Some(&km)).unwrap();
    for s in hard.targets.as_ref().unwrap() {
        assert!(s.q.data().iter().all(|&p| p == 0.0 || p == 1.0));
    }
    let mut tr = trainer(&hard, model.clone(), cfg);
    let r = tr.train_step(&hard).unwrap().unwrap();
    assert!(r.l_cluster.is_finite());
    // k-means targets without the flag are rejected too.
    assert!(Trainer::new(common::train_cfg(2, 9), AugmentConfig::default(), MaskSpec::default(), model, &hard).is_err());
}

#[test]
fn pure_jepa_logs_zero_cluster_loss() {
    let utts = common::corpus(6, 10);
    let data = TrainingData::prepare(&utts, &Default::default(), None).unwrap();
    let model = ModelBundle::new(common::tiny_encoder(gmmjepa::encoder::Frontend::Mel, 10), data.feature_norm().unwrap()).unwrap();
    assert!(matches!(
        Trainer::new(common::train_cfg(2, 10), AugmentConfig::disabled(), MaskSpec::default(), model.clone(), &data),
        Err(Error::Config(_))
    ));
    let mut tr = trainer(&data, model, common::train_cfg(2, 10).pure_jepa());
    for _ in 0..2 {
        let r = tr.train_step(&data).unwrap().unwrap();
        assert_eq!(r.lambda, 0.0);
        assert_eq!(r.l_cluster, 0.0);
        assert_eq!(r.total, r.l_jepa);
    }
}

#[test]
fn divergence_is_skipped_then_aborts() {
    let (data, model) = common::setup(4, 12);
    let cfg = TrainConfig {
        lr_min: 1e30,
        lr_peak: 1e30,
        weight_decay: 1e10,
        t_max: 100,
        ..common::train_cfg(100, 12)
    };
    let mut tr = trainer(&data, model, cfg);
    let err = loop {
        match tr.train_step(&data) {
            Ok(_) => {}
            Err(e) => break e,
        }
    };
    assert!(matches!(err, Error::Training(_)), "{err}");
    assert!(tr.skipped() >= 10);
}

#[test]
fn zero_steps_emit_only_the_initial_checkpoint() {
    let (data, model) = common::setup(4, 13);
    let dir = tempfile::tempdir().unwrap();
    let mut tr = trainer(&data, model.clone(), common::train_cfg(0, 13));
    let out = run_pretraining(&mut tr, &data, dir.path(), None).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(read_metrics(&out.metrics).unwrap().len(), 0);
    let ck = read_checkpoint(out.final_checkpoint.unwrap()).unwrap();
    assert_eq!(ck.model().unwrap(), model);
    let listed: Vec<_> = std::fs::read_dir(dir.path().join("checkpoints")).unwrap().collect();
    assert_eq!(listed.len(), 1);
}

fn metric_parts(path: &std::path::Path) -> Vec<[f64; 7]> {
    read_metrics(path).unwrap().iter().map(|r| r.deterministic_part()).collect()
}

#[test]
fn full_runs_are_reproducible_and_resume_exactly() {
    let (data, model) = common::setup(8, 14);
    let cfg = common::train_cfg(12, 14);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();

    let mut t1 = trainer(&data, model.clone(), cfg.clone());
    let r1 = run_pretraining(&mut t1, &data, a.path(), None).unwrap();
    let mut t2 = trainer(&data, model.clone(), cfg.clone());
    let r2 = run_pretraining(&mut t2, &data, b.path(), None).unwrap();
    let f1 = std::fs::read(r1.final_checkpoint.as_ref().unwrap()).unwrap();
    let f2 = std::fs::read(r2.final_checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(f1, f2);
    assert_eq!(metric_parts(&r1.metrics), metric_parts(&r2.metrics));
    assert_eq!(r1.records.len(), 12);
    assert_eq!(r1.records.last().unwrap().lambda, 0.01);

    // Interrupt at step 5, resume from the written checkpoint.
    let mut t3 = trainer(&data, model, cfg);
    let part = run_pretraining(&mut t3, &data, c.path(), Some(5)).unwrap();
    assert!(part.final_checkpoint.is_none());
    drop(t3);
    let ck = read_checkpoint(&part.latest).unwrap();
    let mut resumed = Trainer::resume(&ck, &data).unwrap();
    assert_eq!(resumed.step(), 5);
    let r3 = run_pretraining(&mut resumed, &data, c.path(), None).unwrap();
    let f3 = std::fs::read(r3.final_checkpoint.unwrap()).unwrap();
    assert_eq!(f1, f3);
    assert_eq!(metric_parts(&r1.metrics), metric_parts(&r3.metrics));
    assert_eq!(encode_checkpoint(&resumed.checkpoint().unwrap()).unwrap(), f1);

    // Cadence: every max(1, 12 / 10) = 1 step.
    let n = std::fs::read_dir(a.path().join("checkpoints")).unwrap().count();
    assert_eq!(n, 12);
}

#[test]
fn released_anchor_reaches_zero_lambda() {
    let (data, model) = common::setup(6, 15);
    for end in [0.0, 0.01] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            lambda_end: end,
            ..common::train_cfg(4, 15)
        };
        let mut tr = trainer(&data, model.clone(), cfg);
        let out = run_pretraining(&mut tr, &data, dir.path(), None).unwrap();
        let lam: Vec<f64> = out.records.iter().map(|r| r.lambda).collect();
        assert_eq!(*lam.last().unwrap(), end);
        assert!(lam.windows(2).all(|w| w[1] <= w[0]));
    }
}
