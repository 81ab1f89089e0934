//! Run configuration: one JSON document covering every stage. `//` line
//! comments are allowed. Unknown keys are rejected, and every run writes the
//! resolved document, with its overrides, next to its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::ProbeConfig;
use crate::audio::{MelConfig, SynthCorpusSpec};
use crate::augment::AugmentConfig;
use crate::clustering::GmmFitConfig;
use crate::encoder::{EncoderConfig, Frontend};
use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::trainer::TrainConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "GMMJEPA_CONFIG";

/// File name of the resolved snapshot inside output directories.
pub const SNAPSHOT_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmeansConfig {
    pub k: usize,
    /// Lloyd rounds.
    pub iters: usize,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self { k: 16, iters: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub probe: ProbeConfig,
    /// One probe run (split and initialisation) per seed.
    pub probe_seeds: Vec<u64>,
    /// Clusters for the k-means step of model-vs-model NMI.
    pub nmi_k: usize,
    pub nmi_iters: usize,
    pub nmi_seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            probe_seeds: vec![0, 1, 2],
            nmi_k: 16,
            nmi_iters: 20,
            nmi_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: SynthCorpusSpec,
    pub features: MelConfig,
    pub gmm: GmmFitConfig,
    pub kmeans: KmeansConfig,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub mask: MaskSpec,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    /// Command-line overrides applied on top of the file, by dotted key.
    /// Informational: the values above already include them.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, Value>,
    /// Files a command read besides the config (corpus, targets,
    /// checkpoints), by role.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
}

/// Removes `//` comments outside string literals.
pub fn strip_line_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let mut in_str = false;
        let mut escaped = false;
        let mut cut = line.len();
        let bytes = line.as_bytes();
        for (i, &b) in bytes.iter().enumerate() {
            if in_str {
                match (escaped, b) {
                    (true, _) => escaped = false,
                    (false, b'\\') => escaped = true,
                    (false, b'"') => in_str = false,
                    _ => {}
                }
            } else if b == b'"' {
                in_str = true;
            } else if b == b'/' && bytes.get(i + 1) == Some(&b'/') {
                cut = i;
                break;
            }
        }
        out.push_str(&line[..cut]);
        out.push('\n');
    }
    out
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&strip_line_comments(text))
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `path`, else the file named by [`CONFIG_ENV`], else defaults.
    /// Returns the file actually read.
    pub fn resolve(path: Option<&Path>) -> Result<(Self, Option<PathBuf>)> {
        let chosen = path
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
        match chosen {
            Some(p) => Ok((Self::load(&p)?, Some(p))),
            None => Ok((Self::default(), None)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augment.validate()?;
        self.mask.validate()?;
        self.train.validate()?;
        if self.encoder.frontend == Frontend::Mel && self.encoder.n_mels != self.features.n_mels {
            return Err(Error::Config(format!(
                "encoder.n_mels {} differs from features.n_mels {}",
                self.encoder.n_mels, self.features.n_mels
            )));
        }
        for (section, k) in [("gmm", self.gmm.k), ("kmeans", self.kmeans.k)] {
            if k != self.encoder.cluster_k {
                return Err(Error::Config(format!(
                    "{section}.k {k} differs from encoder.cluster_k {}",
                    self.encoder.cluster_k
                )));
            }
        }
        if self.corpus.duration_s[0] > self.corpus.duration_s[1] || self.corpus.duration_s[0] <= 0.0 {
            return Err(Error::Config("corpus.duration_s must be an increasing positive range".into()));
        }
        if self.analysis.nmi_k < 2 || self.analysis.probe_seeds.is_empty() {
            return Err(Error::Config("analysis needs nmi_k >= 2 and at least one probe seed".into()));
        }
        Ok(())
    }

    /// Sets the field at a dotted `key` (`"train.lambda_end"`) and records
    /// the override. The key must already exist, and the result must still
    /// validate.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let pointer = format!("/{}", key.replace('.', "/"));
        let slot = doc
            .pointer_mut(&pointer)
            .ok_or_else(|| Error::Config(format!("no config field `{key}`")))?;
        *slot = value.clone();
        let mut next: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        next.validate()?;
        next.overrides.insert(key.to_string(), value);
        *self = next;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the resolved config. Loading the file back gives `self`.
    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}
