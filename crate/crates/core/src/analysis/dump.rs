//! Frame embedding dumps for external visualisation.
//!
//! Layout (little-endian): `b"GJEMBED\0"`, `u32` version, `u64` frame count
//! N, `u32` embedding width C, `u32` cluster count K, `u32` utterance count
//! U, then U pairs of `u64` (corpus index, frame count). Then N·C `f32`
//! embeddings, N·K `f32` posteriors, N `u32` IDs and N `f32` confidences,
//! all row-major.

use std::fs;
use std::path::Path;

use super::{frame_confidence, model_outputs, AssignmentSeq};
use crate::encoder::ModelBundle;
use crate::error::{Error, Result};
use crate::tensor::DenseArray;
use crate::trainer::TrainingData;

const MAGIC: &[u8; 8] = b"GJEMBED\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub c: usize,
    pub k: usize,
    /// Corpus index of each exported utterance.
    pub utterances: Vec<u64>,
    /// Frames per exported utterance.
    pub frames: Vec<u64>,
    pub embeddings: Vec<f32>,
    pub posteriors: Vec<f32>,
    pub ids: Vec<u32>,
    pub confidences: Vec<f32>,
}

impl EmbeddingDump {
    pub fn n_frames(&self) -> usize {
        self.ids.len()
    }

    pub fn embeddings_f64(&self) -> Result<DenseArray> {
        DenseArray::new(
            &[self.n_frames(), self.c],
            self.embeddings.iter().map(|&v| v as f64).collect(),
        )
    }

    /// IDs split back into utterances.
    pub fn ids_by_utterance(&self) -> Vec<Vec<u32>> {
        let mut out = Vec::with_capacity(self.frames.len());
        let mut at = 0;
        for &t in &self.frames {
            out.push(self.ids[at..at + t as usize].to_vec());
            at += t as usize;
        }
        out
    }

    pub fn assignments(&self) -> Vec<AssignmentSeq> {
        self.ids_by_utterance().into_iter().map(AssignmentSeq::hard).collect()
    }

    fn check(&self) -> Result<()> {
        let n = self.ids.len();
        let total: u64 = self.frames.iter().sum();
        if self.utterances.len() != self.frames.len()
            || total as usize != n
            || self.embeddings.len() != n * self.c
            || self.posteriors.len() != n * self.k
            || self.confidences.len() != n
        {
            return Err(Error::Format("embedding dump sections disagree on sizes".into()));
        }
        Ok(())
    }
}

/// Runs the online encoder and cluster head over the chosen utterances and
/// collects everything a dump holds.
pub fn export_embeddings(
    model: &ModelBundle,
    data: &TrainingData,
    which: Option<&[usize]>,
    path: Option<&Path>,
) -> Result<EmbeddingDump> {
    let all: Vec<usize> = (0..data.len()).collect();
    let which = which.unwrap_or(&all);
    let outs = model_outputs(model, data, Some(which))?;
    let c = model.cfg.latent_dim;
    let k = model.cfg.cluster_k;
    let mut d = EmbeddingDump {
        c,
        k,
        utterances: which.iter().map(|&i| i as u64).collect(),
        frames: Vec::with_capacity(outs.len()),
        embeddings: Vec::new(),
        posteriors: Vec::new(),
        ids: Vec::new(),
        confidences: Vec::new(),
    };
    for o in &outs {
        let p = o.assignments.posteriors.as_ref().expect("model outputs are soft");
        d.frames.push(o.assignments.len() as u64);
        d.embeddings.extend(o.embeddings.data().iter().map(|&v| v as f32));
        d.posteriors.extend(p.data().iter().map(|&v| v as f32));
        d.ids.extend_from_slice(&o.assignments.ids);
        d.confidences.extend(frame_confidence(p)?.into_iter().map(|v| v as f32));
    }
    if let Some(path) = path {
        write_dump(path, &d)?;
    }
    Ok(d)
}

pub fn encode_dump(d: &EmbeddingDump) -> Result<Vec<u8>> {
    d.check()?;
    let n = d.n_frames();
    let mut out = Vec::with_capacity(40 + 16 * d.frames.len() + 4 * n * (d.c + d.k + 2));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d.c as u32).to_le_bytes());
    out.extend_from_slice(&(d.k as u32).to_le_bytes());
    out.extend_from_slice(&(d.frames.len() as u32).to_le_bytes());
    for (u, t) in d.utterances.iter().zip(&d.frames) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&t.to_le_bytes());
    }
    for v in d.embeddings.iter().chain(&d.posteriors) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &d.ids {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &d.confidences {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("embedding dump truncated".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("dump size overflow".into()))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_dump(buf: &[u8]) -> Result<EmbeddingDump> {
    let mut r = Reader { buf, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not an embedding dump".into()));
    }
    let v = r.u32()?;
    if v != VERSION {
        return Err(Error::Format(format!("unsupported dump version {v}")));
    }
    let n = r.u64()? as usize;
    let c = r.u32()? as usize;
    let k = r.u32()? as usize;
    let u = r.u32()? as usize;
    let mut utterances = Vec::with_capacity(u);
    let mut frames = Vec::with_capacity(u);
    for _ in 0..u {
        utterances.push(r.u64()?);
        frames.push(r.u64()?);
    }
    let embeddings = r.f32s(n * c)?;
    let posteriors = r.f32s(n * k)?;
    let ids = r
        .take(n * 4)?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let confidences = r.f32s(n)?;
    if r.at != buf.len() {
        return Err(Error::Format("trailing bytes after embedding dump".into()));
    }
    let d = EmbeddingDump {
        c,
        k,
        utterances,
        frames,
        embeddings,
        posteriors,
        ids,
        confidences,
    };
    d.check()?;
    Ok(d)
}

pub fn write_dump(path: impl AsRef<Path>, d: &EmbeddingDump) -> Result<()> {
    fs::write(path, encode_dump(d)?)?;
    Ok(())
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<EmbeddingDump> {
    decode_dump(&fs::read(path)?)
}
