//! `gmmjepa`: corpus generation, phase-one target fitting, pretraining,
//! analysis and gradient checks, each driven by one run config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "gmmjepa", version, about = "GMM-anchored JEPA pretraining experiments")]
pub struct Cli {
    /// Run config (JSON, `//` comments allowed). Defaults apply when absent.
    #[arg(long, short, global = true, env = gmmjepa::config::CONFIG_ENV)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Gmm,
    Kmeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    SnakeSine,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus: WAV files plus a manifest of frame labels.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_utterances: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the frozen phase-one model (diagonal GMM or k-means) on log-mel frames.
    FitTargets {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory or manifest; synthesised from the config when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the encoder against the EMA teacher and the frozen targets.
    Pretrain {
        /// Phase-one model file from `fit-targets`.
        #[arg(long, required_unless_present = "pure_jepa", conflicts_with = "pure_jepa")]
        targets: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Final anchor weight; 0 releases the anchor completely.
        #[arg(long)]
        lambda_end: Option<f64>,
        /// No cluster targets, λ ≡ 0.
        #[arg(long, conflicts_with_all = ["lambda_end", "baseline"])]
        pure_jepa: bool,
        /// One-hot k-means targets in place of GMM posteriors.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from `<out>/latest.ckpt` when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Cluster diagnostics, label NMI and linear probes of a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Further checkpoints; writes the pairwise k-means NMI matrix as CSV.
        #[arg(long, num_args = 1..)]
        compare: Vec<PathBuf>,
        /// Where to write the NMI matrix; defaults beside the report.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Also write the binary embedding dump.
        #[arg(long)]
        export_embeddings: Option<PathBuf>,
        #[arg(long)]
        no_probe: bool,
    },
    /// Finite-difference gradient checks of every differentiable block.
    Gradcheck {
        /// Block name, or a prefix such as `encoder`.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
