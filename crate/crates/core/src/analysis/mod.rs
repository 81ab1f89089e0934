//! Collapse diagnostics: cluster entropy, used clusters, adjacent
//! consistency, per-frame confidence, NMI, linear probes and embedding
//! export.

mod dump;
mod probe;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Frontend, ModelBundle};
use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Graph};
use crate::trainer::TrainingData;

pub use dump::{decode_dump, encode_dump, export_embeddings, read_dump, write_dump, EmbeddingDump};
pub use probe::{linear_probe, probe_over_seeds, split_indices, ProbeConfig, ProbeSummary};

/// Tolerance on posterior rows summing to one.
pub const POSTERIOR_TOL: f64 = 1e-9;

/// Cluster IDs for one utterance, with the posteriors they came from when
/// the source is soft.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentSeq {
    pub ids: Vec<u32>,
    pub posteriors: Option<DenseArray>,
}

impl AssignmentSeq {
    pub fn hard(ids: Vec<u32>) -> Self {
        Self { ids, posteriors: None }
    }

    /// IDs are the row-wise argmax (first maximum on ties).
    pub fn from_posteriors(p: DenseArray) -> Result<Self> {
        if p.ndim() != 2 {
            return Err(Error::shape("AssignmentSeq", format!("{:?}", p.shape())));
        }
        let ids = p.rows().map(argmax).collect();
        let s = Self {
            ids,
            posteriors: Some(p),
        };
        s.validate(s.posteriors.as_ref().unwrap().shape()[1])?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if let Some(&bad) = self.ids.iter().find(|&&i| i as usize >= k) {
            return Err(Error::invalid(format!("cluster id {bad} outside [0, {k})")));
        }
        if let Some(p) = &self.posteriors {
            if p.shape() != [self.ids.len(), k] {
                return Err(Error::shape(
                    "AssignmentSeq",
                    format!("posteriors {:?} for {} ids, K={k}", p.shape(), self.ids.len()),
                ));
            }
            for (t, row) in p.rows().enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > POSTERIOR_TOL || row.iter().any(|v| *v < 0.0) {
                    return Err(Error::invalid(format!("posterior row {t} sums to {s}")));
                }
            }
        }
        Ok(())
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

pub fn cluster_counts(ids: &[u32], k: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; k];
    for &i in ids {
        *counts
            .get_mut(i as usize)
            .ok_or_else(|| Error::invalid(format!("cluster id {i} outside [0, {k})")))? += 1;
    }
    Ok(counts)
}

/// Normalised Shannon entropy of a usage histogram, as a percentage of
/// `ln K`; empty clusters contribute nothing.
pub fn entropy_pct_from_counts(counts: &[usize]) -> Result<f64> {
    let k = counts.len();
    if k < 2 {
        return Err(Error::invalid(format!("entropy needs K >= 2, got {k}")));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("entropy of zero frames"));
    }
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok((100.0 * h / (k as f64).ln()).clamp(0.0, 100.0))
}

pub fn cluster_entropy(ids: &[u32], k: usize) -> Result<f64> {
    entropy_pct_from_counts(&cluster_counts(ids, k)?)
}

/// Clusters with at least one frame.
pub fn used_clusters(ids: &[u32], k: usize) -> Result<usize> {
    Ok(cluster_counts(ids, k)?.iter().filter(|&&c| c > 0).count())
}

/// Fraction of consecutive frames sharing an ID, per utterance, averaged
/// with weights equal to utterance frame counts. Utterances shorter than
/// two frames are skipped.
pub fn adjacent_consistency<S: AsRef<[u32]>>(utts: &[S]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, u) in utts.iter().enumerate() {
        let ids = u.as_ref();
        if ids.len() < 2 {
            log::warn!("adjacent_consistency: utterance {i} has {} frames, skipped", ids.len());
            continue;
        }
        let same = ids.windows(2).filter(|w| w[0] == w[1]).count() as f64;
        let c = same / (ids.len() - 1) as f64;
        num += ids.len() as f64 * c;
        den += ids.len() as f64;
    }
    if den == 0.0 {
        return Err(Error::invalid("no utterance has two or more frames"));
    }
    Ok(num / den)
}

/// Per frame, `1 − H(row) / ln K`.
pub fn frame_confidence(posteriors: &DenseArray) -> Result<Vec<f64>> {
    let (_, k) = posteriors
        .dims2()
        .ok_or_else(|| Error::shape("frame_confidence", format!("{:?}", posteriors.shape())))?;
    if k < 2 {
        return Err(Error::invalid("confidence needs K >= 2"));
    }
    let ln_k = (k as f64).ln();
    Ok(posteriors
        .rows()
        .map(|r| {
            let h: f64 = r.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
            (1.0 - h / ln_k).clamp(0.0, 1.0)
        })
        .collect())
}

fn entropy_of(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2·I(U;V) / (H(U) + H(V))` from the contingency table, natural logs; 0
/// when both labelings are constant.
pub fn nmi(u: &[u32], v: &[u32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("nmi", format!("{} vs {} labels", u.len(), v.len())));
    }
    if u.is_empty() {
        return Err(Error::invalid("nmi of empty labelings"));
    }
    let n = u.len() as f64;
    let mut joint: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut a: BTreeMap<u32, usize> = BTreeMap::new();
    let mut b: BTreeMap<u32, usize> = BTreeMap::new();
    for (&x, &y) in u.iter().zip(v) {
        *joint.entry((x, y)).or_default() += 1;
        *a.entry(x).or_default() += 1;
        *b.entry(y).or_default() += 1;
    }
    let hu = entropy_of(a.values().copied(), n);
    let hv = entropy_of(b.values().copied(), n);
    if hu + hv == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let c = c as f64;
            c / n * (n * c / (a[&x] as f64 * b[&y] as f64)).ln()
        })
        .sum();
    Ok((2.0 * mi / (hu + hv)).clamp(0.0, 1.0))
}

/// Lloyd clustering of every dump with a shared seed, then pairwise NMI of
/// the resulting labelings. The diagonal is 1.
pub fn kmeans_nmi_matrix(dumps: &[EmbeddingDump], k_probe: usize, iters: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let first = dumps.first().ok_or_else(|| Error::invalid("no dumps to compare"))?;
    for (i, d) in dumps.iter().enumerate().skip(1) {
        if d.utterances != first.utterances || d.frames != first.frames {
            return Err(Error::invalid(format!("dump {i} covers different frames than dump 0")));
        }
    }
    let labels = dumps
        .iter()
        .map(|d| {
            let x = d.embeddings_f64()?;
            let mut rng = crate::rng::rng_for(seed, crate::rng::stream::KMEANS, 0);
            let rep = crate::clustering::lloyd_fit(&x, k_probe, iters, &mut rng)?;
            crate::clustering::hard_labels(&rep.model, &x)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = dumps.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        m[i][i] = 1.0;
        for j in i + 1..n {
            let v = nmi(&labels[i], &labels[j])?;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

/// One utterance through the online encoder and cluster head.
#[derive(Debug, Clone)]
pub struct FrameOutputs {
    pub embeddings: DenseArray,
    pub assignments: AssignmentSeq,
}

/// Runs the online encoder and cluster head over utterances `which` of
/// `data` (all when `None`) on clean inputs.
pub fn model_outputs(model: &ModelBundle, data: &TrainingData, which: Option<&[usize]>) -> Result<Vec<FrameOutputs>> {
    let all: Vec<usize> = (0..data.len()).collect();
    let which = which.unwrap_or(&all);
    which
        .iter()
        .map(|&i| {
            let mel = data
                .clean_mel
                .get(i)
                .ok_or_else(|| Error::invalid(format!("utterance {i} not in corpus")))?;
            let t = mel.shape()[0];
            let mut g = Graph::inference();
            let enc = match model.cfg.frontend {
                Frontend::Mel => model.encode(&mut g, &model.online, mel, None)?,
                Frontend::Wave => {
                    let w = &data.waves[i];
                    let x = DenseArray::new(&[w.len(), 1], w.samples().to_vec())?;
                    model.encode(&mut g, &model.online, &x, Some(t))?
                }
            };
            let logits = model.cluster_logits(&mut g, enc.z)?;
            let p = g.softmax(logits, 1)?;
            Ok(FrameOutputs {
                embeddings: g.value(enc.z).clone(),
                assignments: AssignmentSeq::from_posteriors(g.value(p).clone())?,
            })
        })
        .collect()
}

/// Corpus-level diagnostics of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub n_frames: usize,
    pub n_utterances: usize,
    pub normalized_entropy_pct: f64,
    pub used_clusters: usize,
    pub adjacent_consistency: f64,
    /// Mean of per-frame confidence; `None` for hard assignments.
    pub mean_confidence: Option<f64>,
    /// NMI between cluster IDs and reference frame labels, when given.
    pub label_nmi: Option<f64>,
    /// Frame count per cluster ID.
    pub counts: Vec<usize>,
}

impl MetricsReport {
    pub fn compute(seqs: &[AssignmentSeq], k: usize, labels: Option<&[Vec<u32>]>) -> Result<Self> {
        for s in seqs {
            s.validate(k)?;
        }
        let ids: Vec<u32> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
        let counts = cluster_counts(&ids, k)?;
        let id_seqs: Vec<&[u32]> = seqs.iter().map(|s| s.ids.as_slice()).collect();
        let mean_confidence = if seqs.iter().all(|s| s.posteriors.is_some()) {
            let mut sum = 0.0;
            for s in seqs {
                sum += frame_confidence(s.posteriors.as_ref().unwrap())?.iter().sum::<f64>();
            }
            Some(sum / ids.len().max(1) as f64)
        } else {
            None
        };
        let label_nmi = match labels {
            Some(l) => {
                if l.len() != seqs.len() {
                    return Err(Error::shape("MetricsReport", format!("{} label sequences for {} utterances", l.len(), seqs.len())));
                }
                let flat: Vec<u32> = l.iter().flatten().copied().collect();
                Some(nmi(&ids, &flat)?)
            }
            None => None,
        };
        Ok(Self {
            k,
            n_frames: ids.len(),
            n_utterances: seqs.len(),
            normalized_entropy_pct: entropy_pct_from_counts(&counts)?,
            used_clusters: counts.iter().filter(|&&c| c > 0).count(),
            adjacent_consistency: adjacent_consistency(&id_seqs)?,
            mean_confidence,
            label_nmi,
            counts,
        })
    }

    /// `(rank, cluster, count)` sorted by count, largest first; ties by ID.
    pub fn rank_counts(&self) -> Vec<(usize, u32, usize)> {
        let mut order: Vec<(u32, usize)> = self.counts.iter().enumerate().map(|(i, &c)| (i as u32, c)).collect();
        order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        order.into_iter().enumerate().map(|(r, (id, c))| (r + 1, id, c)).collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Rank-sorted utilization table: `rank,cluster,count`.
    pub fn write_counts_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["rank", "cluster", "count"]).map_err(csv_err)?;
        for (r, id, c) in self.rank_counts() {
            w.serialize((r, id, c)).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Square matrix as CSV with a header row of `names`.
pub fn write_matrix_csv(path: impl AsRef<Path>, names: &[String], m: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec![String::new()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (name, row) in names.iter().zip(m) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
