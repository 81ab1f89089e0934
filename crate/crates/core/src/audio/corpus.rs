//! On-disk corpus: one WAV per utterance plus a JSON manifest of frame labels.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::Utterance;
use super::wav::{read_wav, write_wav};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub frame_hop: usize,
    pub n_phone_classes: usize,
    pub utterances: Vec<ManifestEntry>,
}

/// Writes every utterance as `utt_NNNNN.wav` under `dir` and the manifest
/// next to them. Returns the manifest path.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    utterances: &[Utterance],
    frame_len: usize,
    frame_hop: usize,
    n_phone_classes: usize,
    sample_rate: u32,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(utterances.len());
    for (i, u) in utterances.iter().enumerate() {
        let name = format!("utt_{i:05}.wav");
        write_wav(dir.join(&name), &u.wave)?;
        entries.push(ManifestEntry {
            path: name,
            labels: u.labels.clone(),
        });
    }
    let manifest = Manifest {
        sample_rate,
        frame_len,
        frame_hop,
        n_phone_classes,
        utterances: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Accepts either the manifest file or the directory holding it.
pub fn manifest_path(p: impl AsRef<Path>) -> PathBuf {
    let p = p.as_ref();
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn read_manifest(p: impl AsRef<Path>) -> Result<Manifest> {
    let path = manifest_path(p);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every utterance listed in the manifest.
pub fn load_corpus(p: impl AsRef<Path>) -> Result<(Manifest, Vec<Utterance>)> {
    let path = manifest_path(p);
    let manifest = read_manifest(&path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let utterances = manifest
        .utterances
        .iter()
        .map(|e| {
            let wave = read_wav(base.join(&e.path))?;
            if wave.sample_rate() != manifest.sample_rate {
                return Err(Error::Format(format!(
                    "{}: sample rate {} differs from manifest {}",
                    e.path,
                    wave.sample_rate(),
                    manifest.sample_rate
                )));
            }
            Ok(Utterance {
                wave,
                labels: e.labels.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, utterances))
}
