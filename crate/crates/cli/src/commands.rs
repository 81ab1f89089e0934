use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::json;

use gmmjepa::analysis::{
    export_embeddings, kmeans_nmi_matrix, model_outputs, probe_over_seeds, write_dump, write_matrix_csv,
    MetricsReport, ProbeSummary,
};
use gmmjepa::audio::{load_corpus, manifest_path, synth_corpus, write_corpus, Utterance};
use gmmjepa::clustering::{gmm_fit_minibatch, lloyd_fit, write_targets, TargetMeta, TargetModel};
use gmmjepa::config::{RunConfig, SNAPSHOT_FILE};
use gmmjepa::encoder::{read_checkpoint, ModelBundle};
use gmmjepa::gradsuite::{run_suite, Fault, SuiteOptions};
use gmmjepa::rng::{rng_for, stream};
use gmmjepa::trainer::{run_pretraining, stack_rows, Trainer, TrainingData, LATEST_CHECKPOINT};

use crate::{Cli, Command, FaultArg, Method};

/// An error with the exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

/// Config errors are usage errors; everything else is a runtime failure.
impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let usage = error
            .chain()
            .any(|c| matches!(c.downcast_ref::<gmmjepa::Error>(), Some(gmmjepa::Error::Config(_))));
        Failure {
            code: if usage { 2 } else { 1 },
            error,
        }
    }
}

impl From<gmmjepa::Error> for Failure {
    fn from(e: gmmjepa::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        error: anyhow!("{msg}"),
    }
}

type CmdResult = Result<u8, Failure>;

pub fn run(cli: Cli) -> CmdResult {
    let (mut cfg, source) = RunConfig::resolve(cli.config.as_deref())?;
    if let Some(p) = &source {
        log::info!("config: {}", p.display());
        cfg.inputs.insert("config".into(), p.display().to_string());
    }
    match cli.command {
        Command::SynthCorpus { out, n_utterances, seed } => {
            set_opt(&mut cfg, "corpus.n_utterances", n_utterances)?;
            set_opt(&mut cfg, "corpus.seed", seed)?;
            synth(&cfg, &out)
        }
        Command::FitTargets {
            method,
            out,
            corpus,
            seed,
        } => {
            let key = match method {
                Method::Gmm => "gmm.seed",
                Method::Kmeans => "kmeans.seed",
            };
            set_opt(&mut cfg, key, seed)?;
            fit_targets(cfg, method, &out, corpus.as_deref())
        }
        Command::Pretrain {
            targets,
            out,
            corpus,
            lambda_end,
            pure_jepa,
            baseline,
            steps,
            seed,
            resume,
        } => {
            set_opt(&mut cfg, "train.t_max", steps)?;
            set_opt(&mut cfg, "train.seed", seed)?;
            set_opt(&mut cfg, "train.lambda_end", lambda_end)?;
            if pure_jepa {
                cfg.set("train.lambda_end", json!(0.0))?;
                cfg.set("train.lambda_start", json!(0.0))?;
            }
            if baseline {
                cfg.set("train.baseline_mode", json!(true))?;
            }
            pretrain(cfg, targets.as_deref(), &out, corpus.as_deref(), resume)
        }
        Command::Analyze {
            checkpoint,
            corpus,
            report,
            compare,
            matrix,
            export_embeddings,
            no_probe,
        } => analyze(
            cfg,
            &AnalyzeArgs {
                checkpoint,
                corpus,
                report,
                compare,
                matrix,
                export: export_embeddings,
                probe: !no_probe,
            },
        ),
        Command::Gradcheck { module, inject_fault } => gradcheck(module.as_deref(), inject_fault),
    }
}

fn set_opt<T: Serialize>(cfg: &mut RunConfig, key: &str, v: Option<T>) -> Result<(), Failure> {
    if let Some(v) = v {
        cfg.set(key, serde_json::to_value(v).map_err(anyhow::Error::from)?)?;
    }
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn synth(cfg: &RunConfig, out: &Path) -> CmdResult {
    let utts = synth_corpus(&cfg.corpus, &cfg.features)?;
    let manifest = write_corpus(
        out,
        &utts,
        cfg.features.frame_len,
        cfg.features.frame_hop,
        cfg.corpus.n_phone_classes,
        cfg.corpus.sample_rate,
    )
    .with_context(|| format!("writing corpus to {}", out.display()))?;
    cfg.write_snapshot(out.join(SNAPSHOT_FILE))?;
    log::info!("{} utterances, manifest {}", utts.len(), manifest.display());
    Ok(0)
}

/// Utterances from a corpus directory, or synthesised from the config.
fn corpus_or_synth(cfg: &mut RunConfig, corpus: Option<&Path>) -> Result<Vec<Utterance>, Failure> {
    match corpus {
        Some(dir) => {
            let (manifest, utts) =
                load_corpus(dir).with_context(|| format!("loading corpus {}", manifest_path(dir).display()))?;
            if manifest.frame_hop != cfg.features.frame_hop || manifest.frame_len != cfg.features.frame_len {
                return Err(usage(format!(
                    "corpus framing {}/{} differs from features {}/{}",
                    manifest.frame_len, manifest.frame_hop, cfg.features.frame_len, cfg.features.frame_hop
                )));
            }
            cfg.inputs.insert("corpus".into(), dir.display().to_string());
            Ok(utts)
        }
        None => Ok(synth_corpus(&cfg.corpus, &cfg.features)?),
    }
}

fn fit_targets(mut cfg: RunConfig, method: Method, out: &Path, corpus: Option<&Path>) -> CmdResult {
    let utts = corpus_or_synth(&mut cfg, corpus)?;
    let data = TrainingData::prepare(&utts, &cfg.features, None)?;
    if data.is_empty() {
        return Err(usage("cannot fit targets on an empty corpus"));
    }
    let x = data.stacked_frames()?;
    let n_frames = x.shape()[0];
    let (model, meta) = match method {
        Method::Gmm => {
            let g = &cfg.gmm;
            let rep = gmm_fit_minibatch(&x, g, &mut rng_for(g.seed, stream::GMM, 0))?;
            let meta = TargetMeta {
                method: "gmm".into(),
                k: g.k,
                d: x.shape()[1],
                seed: g.seed,
                n_frames,
                epochs: Some(g.epochs),
                final_heldout_ll: Some(rep.final_heldout_ll()),
                var_floor_clamps: Some(rep.var_floor_clamps),
                lloyd_iterations: None,
                lloyd_rounds_run: None,
                final_inertia: None,
            };
            log::info!("GMM K={} held-out LL {:.3}", g.k, rep.final_heldout_ll());
            (TargetModel::Gmm(rep.model), meta)
        }
        Method::Kmeans => {
            let k = &cfg.kmeans;
            let rep = lloyd_fit(&x, k.k, k.iters, &mut rng_for(k.seed, stream::KMEANS, 0))?;
            let meta = TargetMeta {
                method: "kmeans".into(),
                k: k.k,
                d: x.shape()[1],
                seed: k.seed,
                n_frames,
                epochs: None,
                final_heldout_ll: None,
                var_floor_clamps: None,
                lloyd_iterations: Some(k.iters),
                lloyd_rounds_run: Some(rep.rounds_run),
                final_inertia: rep.inertia.last().copied(),
            };
            log::info!("k-means K={} after {} rounds", k.k, rep.rounds_run);
            (TargetModel::Kmeans(rep.model), meta)
        }
    };
    write_targets(out, &model, &meta).with_context(|| format!("writing {}", out.display()))?;
    cfg.write_snapshot(with_suffix(out, ".config.json"))?;
    Ok(0)
}

fn pretrain(mut cfg: RunConfig, targets: Option<&Path>, out: &Path, corpus: Option<&Path>, resume: bool) -> CmdResult {
    let target_model = match targets {
        Some(p) => {
            cfg.inputs.insert("targets".into(), p.display().to_string());
            Some(gmmjepa::clustering::read_targets(p).with_context(|| format!("reading targets {}", p.display()))?)
        }
        None => None,
    };
    let utts = corpus_or_synth(&mut cfg, corpus)?;
    let data = TrainingData::prepare(&utts, &cfg.features, target_model.as_ref())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let latest = out.join(LATEST_CHECKPOINT);
    let mut trainer = if resume && latest.exists() {
        log::info!("resuming from {}", latest.display());
        let t = Trainer::resume(&read_checkpoint(&latest)?, &data)?;
        if t.config() != &cfg.train {
            return Err(usage("resumed run was trained with a different train config"));
        }
        t
    } else {
        let model = ModelBundle::new(cfg.encoder.clone(), data.feature_norm()?)?;
        Trainer::new(cfg.train.clone(), cfg.augment.clone(), cfg.mask.clone(), model, &data)?
    };
    cfg.write_snapshot(out.join(SNAPSHOT_FILE))?;
    let art = run_pretraining(&mut trainer, &data, out, None)?;
    if let Some(r) = art.records.last() {
        log::info!("step {}: total loss {:.4}, {} skipped", r.step, r.total, trainer.skipped());
    }
    Ok(0)
}

struct AnalyzeArgs {
    checkpoint: PathBuf,
    corpus: PathBuf,
    report: PathBuf,
    compare: Vec<PathBuf>,
    matrix: Option<PathBuf>,
    export: Option<PathBuf>,
    probe: bool,
}

#[derive(Serialize)]
struct AnalysisReport {
    checkpoint: String,
    #[serde(flatten)]
    metrics: MetricsReport,
    /// Linear-probe frame accuracy against the corpus labels.
    probe: Option<ProbeSummary>,
}

fn load_model(p: &Path) -> Result<ModelBundle, Failure> {
    Ok(read_checkpoint(p)
        .and_then(|c| c.model())
        .with_context(|| format!("loading checkpoint {}", p.display()))?)
}

fn analyze(mut cfg: RunConfig, a: &AnalyzeArgs) -> CmdResult {
    let model = load_model(&a.checkpoint)?;
    cfg.inputs.insert("checkpoint".into(), a.checkpoint.display().to_string());
    let utts = corpus_or_synth(&mut cfg, Some(&a.corpus))?;
    let data = TrainingData::prepare(&utts, &cfg.features, None)?;
    if data.is_empty() {
        return Err(usage("cannot analyse an empty corpus"));
    }
    let outs = model_outputs(&model, &data, None)?;
    let labels: Vec<Vec<u32>> = utts.iter().map(|u| u.labels.clone()).collect();
    let seqs: Vec<_> = outs.iter().map(|o| o.assignments.clone()).collect();
    let metrics = MetricsReport::compute(&seqs, model.cfg.cluster_k, Some(&labels))?;
    let probe = if a.probe {
        let x = stack_rows(&outs.iter().map(|o| o.embeddings.clone()).collect::<Vec<_>>())?;
        let y: Vec<u32> = labels.iter().flatten().copied().collect();
        Some(probe_over_seeds(&x, &y, &cfg.analysis.probe, &cfg.analysis.probe_seeds)?)
    } else {
        None
    };
    log::info!(
        "entropy {:.1}%, {} of {} clusters used, label NMI {:.3}",
        metrics.normalized_entropy_pct,
        metrics.used_clusters,
        metrics.k,
        metrics.label_nmi.unwrap_or(f64::NAN)
    );
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
    }
    metrics.write_counts_csv(a.report.with_extension("counts.csv"))?;
    let report = AnalysisReport {
        checkpoint: a.checkpoint.display().to_string(),
        metrics,
        probe,
    };
    fs::write(
        &a.report,
        serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n",
    )
    .with_context(|| format!("writing {}", a.report.display()))?;

    if let Some(p) = &a.export {
        let d = export_embeddings(&model, &data, None, None)?;
        write_dump(p, &d)?;
    }
    if !a.compare.is_empty() {
        let mut names = vec![a.checkpoint.display().to_string()];
        let mut dumps = vec![export_embeddings(&model, &data, None, None)?];
        for (i, c) in a.compare.iter().enumerate() {
            cfg.inputs.insert(format!("compare{i}"), c.display().to_string());
            names.push(c.display().to_string());
            dumps.push(export_embeddings(&load_model(c)?, &data, None, None)?);
        }
        let an = &cfg.analysis;
        let m = kmeans_nmi_matrix(&dumps, an.nmi_k, an.nmi_iters, an.nmi_seed)?;
        let path = a.matrix.clone().unwrap_or_else(|| a.report.with_extension("nmi.csv"));
        write_matrix_csv(&path, &names, &m)?;
        log::info!("NMI matrix: {}", path.display());
    }
    cfg.write_snapshot(a.report.with_extension("config.json"))?;
    Ok(0)
}

fn gradcheck(module: Option<&str>, fault: Option<FaultArg>) -> CmdResult {
    let fault = fault.map(|f| match f {
        FaultArg::SnakeSine => Fault::DetachSnakeSine,
    });
    let results = match run_suite(module, fault, SuiteOptions::default()) {
        Err(gmmjepa::Error::InvalidArgument(m)) => return Err(usage(m)),
        r => r?,
    };
    let mut worst = 0.0f64;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<20} {} max_rel_err {:.3e} ({} entries, {:.0} ms)",
            r.name,
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_err,
            r.checked,
            r.elapsed_ms
        );
        worst = worst.max(r.max_rel_err);
        failed += usize::from(!r.passed);
    }
    println!("max rel err {worst:.3e} over {} blocks, {failed} failed", results.len());
    Ok(if failed == 0 { 0 } else { 1 })
}
