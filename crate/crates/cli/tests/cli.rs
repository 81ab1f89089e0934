use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  // toy sizes so every command runs in well under a second
  "corpus": {"n_utterances": 10, "n_phone_classes": 8},
  "gmm": {"k": 8, "epochs": 2, "init_sample": 2000},
  "kmeans": {"k": 8},
  "encoder": {"channels": [4, 8], "n_layers": 1, "latent_dim": 16, "n_heads": 2, "ffn_mult": 2,
              "conv_kernel": 7, "rel_pos_buckets": 16, "rel_pos_max_distance": 64, "daam_heads": 2,
              "head_hidden": 16, "head_blocks": 1, "cluster_k": 8},
  "train": {"t_max": 6, "checkpoint_every": 3},
  "analysis": {"nmi_k": 8, "probe": {"epochs": 30}}
}"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.json"), SMALL).unwrap();
        Env { dir }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Runs `gmmjepa -c small.json <args>` inside the temp dir.
    fn run(&self, args: &[&str]) -> Output {
        let mut c = Command::new(env!("CARGO_BIN_EXE_gmmjepa"));
        c.current_dir(self.dir.path()).env_remove("GMMJEPA_CONFIG").env("RUST_LOG", "warn");
        c.arg("-c").arg("small.json").args(args);
        c.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.run(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    }

    fn corpus(&self) {
        self.ok(&["synth-corpus", "--out", "corp"]);
    }

    fn targets(&self, method: &str, out: &str) {
        self.ok(&["fit-targets", "--method", method, "--corpus", "corp", "--out", out]);
    }
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn metrics(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Metric lines without the wall-clock field.
fn deterministic_metrics(p: &Path) -> Vec<Value> {
    metrics(p)
        .into_iter()
        .map(|mut v| {
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn synth_corpus_writes_manifest_deterministically() {
    let e = Env::new();
    e.corpus();
    e.ok(&["synth-corpus", "--out", "again"]);
    let m = json(&e.p("corp/manifest.json"));
    assert_eq!(m["utterances"].as_array().unwrap().len(), 10);
    assert_eq!(fs::read(e.p("corp/manifest.json")).unwrap(), fs::read(e.p("again/manifest.json")).unwrap());
    assert_eq!(fs::read(e.p("corp/utt_00003.wav")).unwrap(), fs::read(e.p("again/utt_00003.wav")).unwrap());
    assert!(e.p("corp/resolved_config.json").exists());

    e.ok(&["synth-corpus", "--out", "empty", "--n-utterances", "0"]);
    assert!(json(&e.p("empty/manifest.json"))["utterances"].as_array().unwrap().is_empty());
    let snap = json(&e.p("empty/resolved_config.json"));
    assert_eq!(snap["overrides"]["corpus.n_utterances"], 0);
}

#[test]
fn synth_corpus_into_unwritable_path_fails() {
    let e = Env::new();
    fs::write(e.p("file"), "x").unwrap();
    let o = e.run(&["synth-corpus", "--out", "file/sub"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fit_targets_writes_model_and_metadata() {
    let e = Env::new();
    e.corpus();
    e.targets("gmm", "t/gmm.bin");
    e.targets("gmm", "t/gmm2.bin");
    e.targets("kmeans", "t/km.bin");
    assert_eq!(fs::read(e.p("t/gmm.bin")).unwrap(), fs::read(e.p("t/gmm2.bin")).unwrap());
    let g = json(&e.p("t/gmm.bin.json"));
    assert_eq!(g["method"], "gmm");
    assert_eq!(g["k"], 8);
    assert!(g["final_heldout_ll"].as_f64().unwrap().is_finite());
    let k = json(&e.p("t/km.bin.json"));
    assert_eq!(k["method"], "kmeans");
    assert_eq!(k["lloyd_iterations"], 20);
    assert!(k["lloyd_rounds_run"].as_u64().unwrap() <= 20);
    assert!(e.p("t/km.bin.config.json").exists());
}

#[test]
fn pretrain_modes() {
    let e = Env::new();
    e.corpus();
    e.targets("gmm", "gmm.bin");
    e.targets("kmeans", "km.bin");

    e.ok(&["pretrain", "--pure-jepa", "--corpus", "corp", "--out", "pure"]);
    let m = metrics(&e.p("pure/metrics.jsonl"));
    assert_eq!(m.len(), 6);
    assert!(m.iter().all(|r| r["lambda"] == 0.0 && r["L_cluster"] == 0.0));

    e.ok(&["pretrain", "--targets", "gmm.bin", "--lambda-end", "0.0", "--corpus", "corp", "--out", "released"]);
    let m = metrics(&e.p("released/metrics.jsonl"));
    assert_eq!(m[0]["lambda"].as_f64().unwrap(), 1.0 - 1.0 / 6.0);
    assert_eq!(m.last().unwrap()["lambda"], 0.0);
    let snap = json(&e.p("released/resolved_config.json"));
    assert_eq!(snap["overrides"]["train.lambda_end"], 0.0);
    assert_eq!(snap["inputs"]["targets"], "gmm.bin");
    for f in ["final.ckpt", "latest.ckpt", "checkpoints/step_000003.ckpt", "checkpoints/step_000006.ckpt"] {
        assert!(e.p("released").join(f).exists(), "{f}");
    }

    e.ok(&["pretrain", "--targets", "km.bin", "--baseline", "--corpus", "corp", "--out", "base"]);
    assert_eq!(metrics(&e.p("base/metrics.jsonl")).len(), 6);
    // Baseline mode with GMM targets is a config error.
    assert_eq!(e.run(&["pretrain", "--targets", "gmm.bin", "--baseline", "--corpus", "corp", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn pretrain_without_targets_is_a_usage_error() {
    let e = Env::new();
    let o = e.run(&["pretrain", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--targets"));
    assert!(!e.p("run").exists());
    let o = e.run(&["pretrain", "--pure-jepa", "--targets", "x", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn snapshot_reproduces_the_run_and_resume_matches() {
    let e = Env::new();
    e.corpus();
    e.targets("gmm", "gmm.bin");
    e.ok(&["pretrain", "--targets", "gmm.bin", "--corpus", "corp", "--out", "a", "--steps", "5", "--seed", "3"]);
    // Rerun from the snapshot alone, no overrides on the command line.
    let o = Command::new(env!("CARGO_BIN_EXE_gmmjepa"))
        .current_dir(e.dir.path())
        .env("RUST_LOG", "warn")
        .args(["-c", "a/resolved_config.json", "pretrain", "--targets", "gmm.bin", "--corpus", "corp", "--out", "b"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(deterministic_metrics(&e.p("a/metrics.jsonl")), deterministic_metrics(&e.p("b/metrics.jsonl")));
    assert_eq!(fs::read(e.p("a/final.ckpt")).unwrap(), fs::read(e.p("b/final.ckpt")).unwrap());

    // Resume from the step-3 checkpoint of an identical run.
    e.ok(&["pretrain", "--targets", "gmm.bin", "--corpus", "corp", "--out", "c", "--steps", "5", "--seed", "3"]);
    fs::copy(e.p("a/checkpoints/step_000003.ckpt"), e.p("c/latest.ckpt")).unwrap();
    e.ok(&["pretrain", "--targets", "gmm.bin", "--corpus", "corp", "--out", "c", "--steps", "5", "--seed", "3", "--resume"]);
    assert_eq!(deterministic_metrics(&e.p("a/metrics.jsonl")), deterministic_metrics(&e.p("c/metrics.jsonl")));
    assert_eq!(fs::read(e.p("a/final.ckpt")).unwrap(), fs::read(e.p("c/final.ckpt")).unwrap());

    // A different train config cannot resume that checkpoint.
    let o = e.run(&["pretrain", "--targets", "gmm.bin", "--corpus", "corp", "--out", "c", "--steps", "7", "--resume"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_report_compare_and_rerun() {
    let e = Env::new();
    e.corpus();
    e.targets("gmm", "gmm.bin");
    e.ok(&["pretrain", "--targets", "gmm.bin", "--corpus", "corp", "--out", "anch"]);
    e.ok(&["pretrain", "--pure-jepa", "--corpus", "corp", "--out", "pure"]);
    let args = [
        "analyze",
        "--checkpoint",
        "anch/final.ckpt",
        "--corpus",
        "corp",
        "--report",
        "rep/a.json",
        "--compare",
        "pure/final.ckpt",
        "--export-embeddings",
        "rep/a.emb",
    ];
    e.ok(&args);
    let r = json(&e.p("rep/a.json"));
    for key in [
        "normalized_entropy_pct",
        "used_clusters",
        "adjacent_consistency",
        "mean_confidence",
        "label_nmi",
        "counts",
        "probe",
        "n_frames",
    ] {
        assert!(!r[key].is_null(), "{key} missing");
    }
    assert_eq!(r["probe"]["accuracies"].as_array().unwrap().len(), 3);
    let csv = fs::read_to_string(e.p("rep/a.nmi.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1].split(',').nth(1), Some("1"));
    assert!(fs::read_to_string(e.p("rep/a.counts.csv")).unwrap().starts_with("rank,cluster,count"));
    assert!(e.p("rep/a.emb").exists() && e.p("rep/a.config.json").exists());

    let first = fs::read(e.p("rep/a.json")).unwrap();
    e.ok(&args);
    assert_eq!(fs::read(e.p("rep/a.json")).unwrap(), first);

    let o = e.run(&["analyze", "--checkpoint", "missing.ckpt", "--corpus", "corp", "--report", "x.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_command() {
    let e = Env::new();
    let o = e.ok(&["gradcheck"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("max rel err"), "{out}");
    assert!(out.contains("0 failed"));

    let o = e.ok(&["gradcheck", "--module", "daam"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.contains("max_rel_err")).count(), 1);
    assert!(out.starts_with("daam"));

    let o = e.run(&["gradcheck", "--module", "snake_beta", "--inject-fault", "snake-sine"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(e.run(&["gradcheck", "--module", "nope"]).status.code(), Some(2));
}

#[test]
fn bad_config_is_a_usage_error() {
    let e = Env::new();
    fs::write(e.p("bad.json"), r#"{"train": {"lamda": 1}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gmmjepa"))
        .current_dir(e.dir.path())
        .args(["-c", "bad.json", "synth-corpus", "--out", "c"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
}

#[test]
fn config_path_from_environment() {
    let e = Env::new();
    let o = Command::new(env!("CARGO_BIN_EXE_gmmjepa"))
        .current_dir(e.dir.path())
        .env("GMMJEPA_CONFIG", "small.json")
        .env("RUST_LOG", "warn")
        .args(["synth-corpus", "--out", "c"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&e.p("c/manifest.json"))["utterances"].as_array().unwrap().len(), 10);
}
