//! Checkpoint files.
//!
//! Layout (little-endian): `b"GJCHECKP"`, `u32` version, `u64` length and
//! bytes of a JSON metadata document (holds the encoder config), `u32`
//! section count; each section is a `u32`-prefixed name and a `u64` array
//! count; each array is a `u32`-prefixed name, a `u8` element width (8),
//! `u32` rank, `u64` dims and the `f64` data.

use std::fs;
use std::path::Path;

use super::model::{FeatureNorm, ModelBundle};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{DenseArray, ParamStore};

const MAGIC: &[u8; 8] = b"GJCHECKP";
const VERSION: u32 = 1;

pub type Section = Vec<(String, DenseArray)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub sections: Vec<(String, Section)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            sections: Vec::new(),
        }
    }

    pub fn push_section(&mut self, name: &str, arrays: Section) {
        self.sections.push((name.to_string(), arrays));
    }

    pub fn push_store(&mut self, name: &str, store: &ParamStore) {
        let arrays = store.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        self.push_section(name, arrays);
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Format(format!("checkpoint has no `{name}` section")))
    }

    pub fn store(&self, name: &str, seed: u64) -> Result<ParamStore> {
        let mut s = ParamStore::new(seed);
        for (k, v) in self.section(name)? {
            s.insert(k.clone(), v.clone())?;
        }
        Ok(s)
    }

    /// The model half of a checkpoint: encoder config in `meta.encoder`,
    /// sections `online`, `target`, `norm`.
    pub fn from_model(model: &ModelBundle, mut meta: serde_json::Value) -> Result<Self> {
        if !meta.is_object() {
            meta = serde_json::json!({});
        }
        meta["encoder"] = serde_json::to_value(&model.cfg)?;
        let mut ck = Checkpoint::new(meta);
        ck.push_store("online", &model.online);
        ck.push_store("target", &model.target);
        ck.push_section(
            "norm",
            vec![
                ("mean".into(), DenseArray::from_vec(model.norm.mean.clone())),
                ("std".into(), DenseArray::from_vec(model.norm.std.clone())),
            ],
        );
        Ok(ck)
    }

    pub fn model(&self) -> Result<ModelBundle> {
        let cfg: EncoderConfig = serde_json::from_value(
            self.meta
                .get("encoder")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint metadata lacks `encoder`".into()))?,
        )?;
        cfg.validate()?;
        let norm = self.section("norm")?;
        let get = |n: &str| -> Result<Vec<f64>> {
            norm.iter()
                .find(|(k, _)| k == n)
                .map(|(_, v)| v.data().to_vec())
                .ok_or_else(|| Error::Format(format!("norm section lacks `{n}`")))
        };
        let norm = FeatureNorm {
            mean: get("mean")?,
            std: get("std")?,
        };
        let online = self.store("online", cfg.seed)?;
        let target = self.store("target", cfg.seed)?;
        // Shapes must match a freshly built model of the same config.
        let fresh = ModelBundle::new(cfg.clone(), norm.clone())?;
        for (which, have, want) in [("online", &online, &fresh.online), ("target", &target, &fresh.target)] {
            if have.len() != want.len() {
                return Err(Error::Format(format!(
                    "{which} section has {} arrays, config implies {}",
                    have.len(),
                    want.len()
                )));
            }
            for (name, w) in want.iter() {
                let h = have
                    .get(name)
                    .ok_or_else(|| Error::Format(format!("{which} section lacks `{name}`")))?;
                if h.shape() != w.shape() {
                    return Err(Error::Format(format!(
                        "{which}.{name}: shape {:?}, expected {:?}",
                        h.shape(),
                        w.shape()
                    )));
                }
            }
        }
        Ok(ModelBundle {
            cfg,
            online,
            target,
            norm,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&ck.meta)?;
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ck.sections.len() as u32).to_le_bytes());
    for (name, arrays) in &ck.sections {
        put_str(&mut out, name);
        out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
        for (an, a) in arrays {
            put_str(&mut out, an);
            out.push(8);
            out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u64()? as usize;
    let meta = serde_json::from_slice(r.take(n)?)?;
    let n_sections = r.u32()?;
    let mut sections = Vec::new();
    for _ in 0..n_sections {
        let name = r.string()?;
        let n_arrays = r.u64()?;
        let mut arrays = Vec::new();
        for _ in 0..n_arrays {
            let an = r.string()?;
            let width = r.take(1)?[0];
            if width != 8 {
                return Err(Error::Format(format!("unsupported element width {width}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|l| l.checked_mul(8))
                .ok_or_else(|| Error::Format("array size overflow".into()))?;
            let data = r
                .take(len)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((an, DenseArray::new(&shape, data)?));
        }
        sections.push((name, arrays));
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { meta, sections })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&buf)
}
