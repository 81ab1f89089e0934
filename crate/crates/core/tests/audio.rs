use gmmjepa::audio::{
    log_mel, synth_corpus, LogMel, MelConfig, MelFilterbank, PhoneClass, SynthCorpusSpec,
    WaveBuffer,
};
use proptest::prelude::*;

fn sine(freq: f64, n: usize) -> WaveBuffer {
    let s = (0..n)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
        .collect();
    WaveBuffer::new(s, 16000).unwrap()
}

#[test]
fn sine_at_filter_centre_peaks_in_that_filter() {
    let cfg = MelConfig::default();
    let bank = MelFilterbank::new(cfg.n_mels, cfg.n_fft, 16000).unwrap();
    for k in [30, 45, 60, 75] {
        let f = bank.centers_hz()[k];
        let m = log_mel(&sine(f, 4000), &cfg).unwrap();
        for row in m.frames.rows() {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(arg, k, "sine at {f:.1} Hz");
        }
    }
}

#[test]
fn filters_are_nonnegative_and_cover_interior_bins() {
    let cfg = MelConfig::default();
    let bank = MelFilterbank::new(cfg.n_mels, cfg.n_fft, 16000).unwrap();
    let w = bank.weights();
    assert!(w.data().iter().all(|&v| v >= 0.0));
    let bin_hz = 16000.0 / cfg.n_fft as f64;
    let (first, last) = (bank.centers_hz()[0], *bank.centers_hz().last().unwrap());
    let n_bins = cfg.n_fft / 2 + 1;
    for k in 0..n_bins {
        let f = k as f64 * bin_hz;
        if f > first && f < last {
            let total: f64 = (0..cfg.n_mels).map(|m| w.get2(m, k)).sum();
            assert!(total > 0.0, "bin {k} ({f} Hz) uncovered");
        }
    }
}

#[test]
fn distinct_classes_have_separated_mel_means() {
    let classes = vec![
        PhoneClass {
            formants: [300.0, 900.0, 2400.0],
            bandwidths: [80.0, 100.0, 120.0],
        },
        PhoneClass {
            formants: [750.0, 1900.0, 3000.0],
            bandwidths: [80.0, 100.0, 120.0],
        },
    ];
    let spec = SynthCorpusSpec {
        n_utterances: 20,
        n_phone_classes: 2,
        classes,
        seed: 3,
        ..Default::default()
    };
    let cfg = MelConfig::default();
    let corpus = synth_corpus(&spec, &cfg).unwrap();
    let mut sums = [vec![0.0; cfg.n_mels], vec![0.0; cfg.n_mels]];
    let mut counts = [0usize; 2];
    for u in &corpus {
        let m = log_mel(&u.wave, &cfg).unwrap();
        for (row, &l) in m.frames.rows().zip(&u.labels) {
            counts[l as usize] += 1;
            for (s, v) in sums[l as usize].iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    let gap = (0..cfg.n_mels)
        .map(|d| (sums[0][d] / counts[0] as f64 - sums[1][d] / counts[1] as f64).abs())
        .fold(0.0, f64::max);
    assert!(gap > 1.0, "max class-mean gap {gap}");
}

#[test]
fn generated_classes_differ_in_mel_means() {
    let spec = SynthCorpusSpec {
        n_utterances: 40,
        n_phone_classes: 4,
        seed: 11,
        ..Default::default()
    };
    let cfg = MelConfig::default();
    let corpus = synth_corpus(&spec, &cfg).unwrap();
    let mut sums = vec![vec![0.0; cfg.n_mels]; 4];
    let mut counts = [0usize; 4];
    for u in &corpus {
        let m = log_mel(&u.wave, &cfg).unwrap();
        for (row, &l) in m.frames.rows().zip(&u.labels) {
            counts[l as usize] += 1;
            for (s, v) in sums[l as usize].iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    for a in 0..4 {
        for b in a + 1..4 {
            let gap = (0..cfg.n_mels)
                .map(|d| (sums[a][d] / counts[a] as f64 - sums[b][d] / counts[b] as f64).abs())
                .fold(0.0, f64::max);
            assert!(gap > 1.0, "classes {a},{b}: gap {gap}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shifting_by_one_hop_shifts_rows(seed in any::<u64>(), frames in 3usize..8) {
        use rand::{Rng, SeedableRng};
        let cfg = MelConfig::default();
        let ex = LogMel::new(&cfg, 16000).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.frame_len + cfg.frame_hop * frames;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let a = ex.compute_samples(&x).unwrap();
        let b = ex.compute_samples(&x[cfg.frame_hop..]).unwrap();
        prop_assert_eq!(a.n_frames(), b.n_frames() + 1);
        for t in 0..b.n_frames() {
            for (u, v) in a.frames.row(t + 1).iter().zip(b.frames.row(t)) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frame_count_formula(len in 400usize..20000) {
        let cfg = MelConfig::default();
        let m = log_mel(&WaveBuffer::new(vec![0.1; len], 16000).unwrap(), &cfg).unwrap();
        prop_assert_eq!(m.n_frames(), (len - 400) / 320 + 1);
    }
}
