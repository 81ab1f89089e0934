use gmmjepa::clustering::{
    chunked_soft_assign, decode_targets, encode_targets, gmm_fit_from, gmm_fit_minibatch,
    hard_labels, kmeanspp_init, lloyd_fit, read_targets, write_targets, GmmFitConfig, GmmModel,
    KmeansModel, TargetMeta, TargetModel,
};
use gmmjepa::DenseArray;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn rows(v: &[f64]) -> DenseArray {
    DenseArray::new(&[v.len(), 1], v.to_vec()).unwrap()
}

fn random_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DenseArray {
    let data = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
    DenseArray::new(&[n, d], data).unwrap()
}

fn random_gmm(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GmmModel {
    let lp = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mu = random_data(rng, k, d);
    let lv = DenseArray::new(&[k, d], (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    GmmModel::new(lp, mu, lv).unwrap()
}

#[test]
fn kmeanspp_with_k_equal_n_is_a_permutation() {
    let x = rows(&[0.0, 3.0, 7.0, 12.0, 20.0]);
    for seed in 0..20 {
        let c = kmeanspp_init(&x, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut got = c.data().to_vec();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, x.data());
    }
}

#[test]
fn kmeanspp_single_center_is_a_data_row() {
    let x = rows(&[0.5, 1.5, 2.5]);
    let c = kmeanspp_init(&x, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert!(x.data().contains(&c.data()[0]));
}

#[test]
fn kmeanspp_never_picks_a_duplicate_of_a_chosen_row() {
    // Three distinct values, each repeated; K=3 must pick all three.
    let x = rows(&[1.0, 1.0, 1.0, 4.0, 4.0, 9.0, 9.0, 9.0, 9.0]);
    for seed in 0..50 {
        let c = kmeanspp_init(&x, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut got = c.data().to_vec();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![1.0, 4.0, 9.0]);
    }
}

/// Minimum inertia over all 2-partitions of a 1-D set.
fn brute_force_two_means(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for mask in 1..(1u32 << n) - 1 {
        let (a, b): (Vec<f64>, Vec<f64>) = (0..n).map(|i| (mask >> i & 1 == 1, v[i])).fold(
            (vec![], vec![]),
            |(mut a, mut b), (s, x)| {
                if s { a.push(x) } else { b.push(x) }
                (a, b)
            },
        );
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let cost: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>()
            + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
        if cost < best.0 {
            best = (cost, ma.min(mb), ma.max(mb));
        }
    }
    (best.1, best.2)
}

#[test]
fn lloyd_recovers_brute_force_optimum() {
    let v = [0.0, 1.0, 10.0, 11.0];
    let (lo, hi) = brute_force_two_means(&v);
    for seed in 0..10 {
        let rep = lloyd_fit(&rows(&v), 2, 20, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut c = rep.model.centers().data().to_vec();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![lo, hi]);
        assert_eq!(c, vec![0.5, 10.5]);
    }
}

#[test]
fn lloyd_on_identical_rows_has_zero_inertia() {
    let x = DenseArray::new(&[6, 2], vec![1.5; 12]).unwrap();
    let rep = lloyd_fit(&x, 3, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(*rep.inertia.last().unwrap(), 0.0);
}

#[test]
fn hard_labels_of_centers_are_their_indices() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = random_data(&mut rng, 8, 3);
    let m = KmeansModel::new(c.clone()).unwrap();
    assert_eq!(hard_labels(&m, &c).unwrap(), (0..8).collect::<Vec<u32>>());
}

#[test]
fn hard_label_tie_goes_to_lower_index() {
    let c = rows(&[9.0, 9.0, -1.0, 5.0, 5.0, 1.0]);
    let m = KmeansModel::new(c).unwrap();
    // 0.0 is equidistant to centers 2 (-1) and 5 (1).
    assert_eq!(hard_labels(&m, &rows(&[0.0])).unwrap(), vec![2]);
}

#[test]
fn hard_labels_match_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let c = random_data(&mut rng, 16, 4);
    let x = random_data(&mut rng, 500, 4);
    let m = KmeansModel::new(c.clone()).unwrap();
    let got = hard_labels(&m, &x).unwrap();
    for (i, r) in x.rows().enumerate() {
        let d: Vec<f64> = c
            .rows()
            .map(|cr| cr.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let first = d.iter().position(|&v| v == min).unwrap();
        assert_eq!(got[i] as usize, first);
    }
}

#[test]
fn single_gaussian_fit_matches_sample_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (n, d) = (4000, 3);
    let true_mu = [1.0, -2.0, 0.5];
    let data: Vec<f64> = (0..n * d).map(|i| true_mu[i % d] + normal.sample(&mut rng)).collect();
    let x = DenseArray::new(&[n, d], data).unwrap();
    let cfg = GmmFitConfig {
        k: 1,
        epochs: 100,
        batch_size: 64,
        holdout_frac: 0.0,
        ..Default::default()
    };
    let rep = gmm_fit_minibatch(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for t in 0..d {
        let mean = x.rows().map(|r| r[t]).sum::<f64>() / n as f64;
        let sd = (x.rows().map(|r| (r[t] - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        let got = rep.model.mu().get2(0, t);
        assert!((got - mean).abs() < 3.0 * se, "dim {t}: {got} vs {mean} (se {se})");
    }
}

#[test]
fn two_blobs_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let centers = [[-4.0, 0.0], [4.0, 3.0]];
    let data: Vec<f64> = (0..10_000)
        .flat_map(|i| {
            let c = centers[i % 2];
            [c[0] + normal.sample(&mut rng), c[1] + normal.sample(&mut rng)]
        })
        .collect();
    let x = DenseArray::new(&[10_000, 2], data).unwrap();
    let cfg = GmmFitConfig {
        k: 2,
        epochs: 60,
        batch_size: 64,
        ..Default::default()
    };
    let rep = gmm_fit_minibatch(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for c in centers {
        let best = rep
            .model
            .mu()
            .rows()
            .map(|m| ((m[0] - c[0]).powi(2) + (m[1] - c[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(best < 0.1, "blob {c:?}: nearest fitted mean at distance {best}");
    }
    let ll = &rep.heldout_ll;
    assert!(ll.last().unwrap() >= ll.first().unwrap());
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let init = random_gmm(&mut rng, 3, 2);
    let x = random_data(&mut rng, 300, 2);
    let cfg = GmmFitConfig {
        k: 3,
        epochs: 3,
        lr_start: 0.0,
        lr_end: 0.0,
        ..Default::default()
    };
    let rep = gmm_fit_from(init.clone(), &x, &cfg, &mut rng).unwrap();
    assert_eq!(rep.model, init);
}

#[test]
fn far_outliers_do_not_underflow() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = random_gmm(&mut rng, 8, 4);
    let lp = m.log_posterior(&[50.0, -60.0, 55.0, 70.0]).unwrap();
    let s: f64 = lp.iter().map(|v| v.exp()).sum();
    assert!((s - 1.0).abs() < 1e-9);
    assert!(lp.iter().all(|v| v.is_finite()));
}

#[test]
fn identical_components_split_evenly() {
    let m = GmmModel::new(
        vec![0.0, 0.0],
        DenseArray::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap(),
        DenseArray::zeros(&[2, 2]),
    )
    .unwrap();
    let lp = m.log_posterior(&[0.3, -0.4]).unwrap();
    assert_eq!(lp[0], lp[1]);
    assert!((lp[0].exp() - 0.5).abs() < 1e-15);
}

#[test]
fn chunking_is_invisible() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = random_gmm(&mut rng, 32, 16);
    let x = random_data(&mut rng, 512, 16);
    let direct = chunked_soft_assign(&m, &x, 512, 32).unwrap();
    for _ in 0..20 {
        let b = rng.random_range(1..600);
        let c = rng.random_range(1..40);
        let got = chunked_soft_assign(&m, &x, b, c).unwrap();
        assert!(got.q.max_abs_diff(&direct.q) < 1e-10);
    }
    for (i, r) in x.rows().enumerate() {
        assert_eq!(m.log_posterior(r).unwrap(), direct.log_q.row(i));
    }
}

#[test]
fn empty_input_gives_empty_posteriors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random_gmm(&mut rng, 4, 3);
    let p = chunked_soft_assign(&m, &DenseArray::zeros(&[0, 3]), 8, 2).unwrap();
    assert!(p.is_empty());
}

#[test]
fn target_files_round_trip_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dir = tempfile::tempdir().unwrap();
    let models = [
        TargetModel::Gmm(random_gmm(&mut rng, 5, 3)),
        TargetModel::Kmeans(KmeansModel::new(random_data(&mut rng, 4, 3)).unwrap()),
    ];
    for (i, model) in models.iter().enumerate() {
        let path = dir.path().join(format!("t{i}.bin"));
        let meta = TargetMeta {
            method: model.method().into(),
            k: model.k(),
            d: model.d(),
            seed: 1,
            n_frames: 0,
            epochs: None,
            final_heldout_ll: None,
            var_floor_clamps: None,
            lloyd_iterations: None,
            lloyd_rounds_run: None,
            final_inertia: None,
        };
        write_targets(&path, model, &meta).unwrap();
        let back = read_targets(&path).unwrap();
        assert_eq!(encode_targets(&back), std::fs::read(&path).unwrap());
        match (&back, model) {
            (TargetModel::Gmm(a), TargetModel::Gmm(b)) => {
                assert!(a.is_frozen());
                assert_eq!(a.mu(), b.mu());
                assert_eq!(a.log_var(), b.log_var());
            }
            (TargetModel::Kmeans(a), TargetModel::Kmeans(b)) => assert_eq!(a, b),
            _ => panic!("kind changed"),
        }
    }
    assert!(decode_targets(b"GJTARGEX").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn lloyd_inertia_never_increases(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_data(&mut rng, 60, 3);
        let rep = lloyd_fit(&x, k, 20, &mut rng).unwrap();
        for w in rep.inertia.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn posterior_rows_are_distributions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_gmm(&mut rng, 6, 4);
        let x = random_data(&mut rng, 30, 4);
        let p = m.posteriors(&x).unwrap();
        for r in p.q.rows() {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
        let lse = m.log_pi().iter().map(|v| v.exp()).sum::<f64>().ln();
        prop_assert!(lse.abs() < 1e-9);
    }
}
