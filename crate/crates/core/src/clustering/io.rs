//! Binary target-model files with a JSON metadata sidecar.
//!
//! Layout: `b"GJTARGET"`, `u32` version, `u8` kind (0 GMM, 1 k-means),
//! `u64` K, `u64` D, then little-endian `f64` arrays: `log_pi`, `mu`,
//! `log_var` for a GMM, `centers` for k-means.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::gmm::GmmModel;
use super::kmeans::KmeansModel;
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

const MAGIC: &[u8; 8] = b"GJTARGET";
const VERSION: u32 = 1;

/// A frozen phase-one model.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetModel {
    Gmm(GmmModel),
    Kmeans(KmeansModel),
}

impl TargetModel {
    pub fn k(&self) -> usize {
        match self {
            TargetModel::Gmm(m) => m.k(),
            TargetModel::Kmeans(m) => m.k(),
        }
    }

    pub fn d(&self) -> usize {
        match self {
            TargetModel::Gmm(m) => m.d(),
            TargetModel::Kmeans(m) => m.d(),
        }
    }

    pub fn method(&self) -> &'static str {
        match self {
            TargetModel::Gmm(_) => "gmm",
            TargetModel::Kmeans(_) => "kmeans",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMeta {
    pub method: String,
    pub k: usize,
    pub d: usize,
    pub seed: u64,
    pub n_frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_heldout_ll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_floor_clamps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lloyd_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lloyd_rounds_run: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_inertia: Option<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_targets(model: &TargetModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match model {
        TargetModel::Gmm(_) => 0,
        TargetModel::Kmeans(_) => 1,
    });
    out.extend_from_slice(&(model.k() as u64).to_le_bytes());
    out.extend_from_slice(&(model.d() as u64).to_le_bytes());
    match model {
        TargetModel::Gmm(m) => {
            put_f64s(&mut out, m.log_pi());
            put_f64s(&mut out, m.mu().data());
            put_f64s(&mut out, m.log_var().data());
        }
        TargetModel::Kmeans(m) => put_f64s(&mut out, m.centers().data()),
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("target file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Decodes a target file; GMMs come back frozen.
pub fn decode_targets(buf: &[u8]) -> Result<TargetModel> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format("not a target file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported target file version {version}")));
    }
    let kind = c.take(1)?[0];
    let k = c.u64()? as usize;
    let d = c.u64()? as usize;
    let model = match kind {
        0 => {
            let log_pi = c.f64s(k)?;
            let mu = DenseArray::new(&[k, d], c.f64s(k * d)?)?;
            let log_var = DenseArray::new(&[k, d], c.f64s(k * d)?)?;
            let mut m = GmmModel::new(log_pi, mu, log_var)?;
            m.freeze();
            TargetModel::Gmm(m)
        }
        1 => TargetModel::Kmeans(KmeansModel::new(DenseArray::new(&[k, d], c.f64s(k * d)?)?)?),
        other => return Err(Error::Format(format!("unknown target kind {other}"))),
    };
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after target arrays".into()));
    }
    Ok(model)
}

/// Writes the binary file and its `.json` sidecar.
pub fn write_targets(path: impl AsRef<Path>, model: &TargetModel, meta: &TargetMeta) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&encode_targets(model))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_targets(path: impl AsRef<Path>) -> Result<TargetModel> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    decode_targets(&buf)
}

pub fn read_target_meta(path: impl AsRef<Path>) -> Result<TargetMeta> {
    let side = sidecar_path(path.as_ref());
    Ok(serde_json::from_str(&fs::read_to_string(side)?)?)
}
