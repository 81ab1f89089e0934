//! Joint training: masked latent prediction against the EMA teacher plus a
//! decaying KL pull toward frozen phase-one targets.

mod losses;
mod optim;
mod schedule;

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::{LogMel, MelConfig, Utterance, WaveBuffer};
use crate::augment::{augment_pair, AugmentConfig, AugmentorBuffer};
use crate::clustering::{target_posteriors, PosteriorSeq, TargetModel};
use crate::encoder::{ema_update, write_checkpoint, Checkpoint, FeatureNorm, Frontend, ModelBundle};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, sample_block_mask, MaskSpec};
use crate::rng::{rng_for, stream};
use crate::tensor::{DenseArray, Graph, Var};

pub use losses::{cluster_kl_loss, jepa_loss, ROW_SUM_TOL};
pub use optim::{clip_global_norm, optimizer_step, AdamHyper, AdamState, StepNorms};
pub use schedule::{lambda_at, lr_at, warmup_steps};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub t_max: usize,
    pub lr_min: f64,
    pub lr_peak: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub ema_tau: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Hard one-hot k-means targets instead of GMM posteriors.
    pub baseline_mode: bool,
    pub max_consecutive_skips: usize,
    /// Checkpoint cadence; `None` means every `max(1, t_max / 10)` steps.
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_start: 1.0,
            lambda_end: 0.01,
            t_max: 2000,
            lr_min: 1e-5,
            lr_peak: 1e-4,
            warmup_frac: 0.1,
            weight_decay: 1e-3,
            clip_norm: 1.0,
            batch_size: 4,
            ema_tau: 0.996,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            baseline_mode: false,
            max_consecutive_skips: 10,
            checkpoint_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0 <= self.lambda_end && self.lambda_end <= self.lambda_start) {
            return bad(format!(
                "need 0 <= lambda_end <= lambda_start, got {} and {}",
                self.lambda_end, self.lambda_start
            ));
        }
        if !(self.lr_min >= 0.0 && self.lr_peak >= self.lr_min) {
            return bad("need 0 <= lr_min <= lr_peak".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_tau) {
            return bad(format!("ema_tau {} outside [0, 1]", self.ema_tau));
        }
        if self.clip_norm <= 0.0 || self.weight_decay < 0.0 {
            return bad("clip_norm must be positive and weight_decay non-negative".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive".into());
        }
        Ok(())
    }

    /// Pure JEPA: λ ≡ 0, for training without cluster targets.
    pub fn pure_jepa(self) -> Self {
        Self {
            lambda_start: 0.0,
            lambda_end: 0.0,
            ..self
        }
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every.unwrap_or((self.t_max / 10).max(1))
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One line of the metrics stream. `l_cluster` is 0 when training without
/// targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L_JEPA")]
    pub l_jepa: f64,
    #[serde(rename = "L_cluster")]
    pub l_cluster: f64,
    pub lambda: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    /// The record without wall-clock time, for reproducibility checks.
    pub fn deterministic_part(&self) -> [f64; 7] {
        [
            self.step as f64,
            self.l_jepa,
            self.l_cluster,
            self.lambda,
            self.total,
            self.grad_norm,
            self.lr,
        ]
    }
}

/// Corpus in memory with everything that does not change during training:
/// clean log-mel frames and, when available, phase-one targets.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub waves: Vec<WaveBuffer>,
    pub clean_mel: Vec<DenseArray>,
    pub targets: Option<Vec<PosteriorSeq>>,
    pub target_method: Option<String>,
    pub mel: MelConfig,
}

impl TrainingData {
    pub fn prepare(utts: &[Utterance], mel: &MelConfig, targets: Option<&TargetModel>) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::invalid("training needs at least one utterance"));
        }
        let sr = utts[0].wave.sample_rate();
        let lm = LogMel::new(mel, sr)?;
        let mut clean_mel = Vec::with_capacity(utts.len());
        for (i, u) in utts.iter().enumerate() {
            if u.wave.sample_rate() != sr {
                return Err(Error::invalid(format!("utterance {i} has a different sample rate")));
            }
            let f = lm.compute(&u.wave)?.frames;
            if f.shape()[0] == 0 {
                return Err(Error::invalid(format!("utterance {i} is shorter than one frame")));
            }
            clean_mel.push(f);
        }
        let posteriors = match targets {
            Some(m) => Some(
                clean_mel
                    .iter()
                    .map(|f| target_posteriors(m, f))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(Self {
            waves: utts.iter().map(|u| u.wave.clone()).collect(),
            clean_mel,
            targets: posteriors,
            target_method: targets.map(|m| m.method().to_string()),
            mel: mel.clone(),
        })
    }

    /// Every clean log-mel frame of the corpus stacked into one `[N, n_mels]`
    /// matrix, in corpus order; the input to phase-one fitting.
    pub fn stacked_frames(&self) -> Result<DenseArray> {
        stack_rows(&self.clean_mel)
    }

    pub fn feature_norm(&self) -> Result<FeatureNorm> {
        FeatureNorm::fit(self.clean_mel.iter())
    }

    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }
}

/// Concatenates `[T_i, D]` matrices along rows.
pub fn stack_rows(parts: &[DenseArray]) -> Result<DenseArray> {
    let d = parts
        .first()
        .map(|p| p.shape()[1])
        .ok_or_else(|| Error::invalid("nothing to stack"))?;
    let mut data = Vec::with_capacity(parts.iter().map(DenseArray::len).sum());
    let mut n = 0;
    for p in parts {
        if p.ndim() != 2 || p.shape()[1] != d {
            return Err(Error::shape("stack_rows", format!("{:?} vs width {d}", p.shape())));
        }
        n += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    DenseArray::new(&[n, d], data)
}

fn wave_input(w: &WaveBuffer) -> Result<DenseArray> {
    DenseArray::new(&[w.len(), 1], w.samples().to_vec())
}

/// One utterance of a batch after augmentation and masking, with the
/// teacher's latents already computed.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub utt: usize,
    /// Online encoder input (augmented).
    pub input: DenseArray,
    /// Target encoder latents on the clean input, `[T, C]`.
    pub z_target: DenseArray,
    pub mask: crate::masking::MaskVector,
}

/// Loss nodes of one batch. `l_cluster` is `None` without targets.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub l_jepa: Var,
    pub l_cluster: Option<Var>,
}

/// Differentiable part of a step: online encoder on the augmented inputs,
/// mask-token substitution, predictor, cluster head, and the two losses
/// pooled over every masked frame of the batch.
pub fn batch_loss(
    g: &mut Graph,
    model: &ModelBundle,
    data: &TrainingData,
    items: &[BatchItem],
    lambda: f64,
) -> Result<LossParts> {
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let crop = model.cfg.frontend == Frontend::Wave;
    let mut preds = Vec::with_capacity(items.len());
    let mut latents = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    let mut masked = Vec::new();
    let mut offset = 0;
    for it in items {
        let t = it.z_target.shape()[0];
        let enc = model.encode(g, &model.online, &it.input, crop.then_some(t))?;
        if g.shape(enc.z)[0] != t || it.mask.len() != t {
            return Err(Error::shape(
                "batch_loss",
                format!(
                    "utterance {}: online {} frames, target {t}, mask {}",
                    it.utt,
                    g.shape(enc.z)[0],
                    it.mask.len()
                ),
            ));
        }
        let tok = model.mask_token(g)?;
        let z_tilde = apply_mask(g, enc.z, &it.mask, tok)?;
        preds.push(model.predict(g, z_tilde)?);
        latents.push(enc.z);
        targets.push(&it.z_target);
        masked.extend(it.mask.masked_indices().into_iter().map(|i| i + offset));
        offset += t;
    }
    let pred = g.concat(&preds, 0)?;
    let c = targets[0].shape()[1];
    let mut tdata = Vec::with_capacity(offset * c);
    for t in &targets {
        tdata.extend_from_slice(t.data());
    }
    let z_target = DenseArray::new(&[offset, c], tdata)?;
    let l_jepa = jepa_loss(g, pred, &z_target, &masked)?;

    let l_cluster = match &data.targets {
        Some(q) => {
            let seqs: Vec<&PosteriorSeq> = items.iter().map(|it| &q[it.utt]).collect();
            for (it, s) in items.iter().zip(&seqs) {
                if s.len() != it.mask.len() {
                    return Err(Error::shape(
                        "batch_loss",
                        format!("utterance {}: {} target frames vs {} latent frames", it.utt, s.len(), it.mask.len()),
                    ));
                }
            }
            let q = PosteriorSeq::concat(&seqs)?;
            let z = g.concat(&latents, 0)?;
            let logits = model.cluster_logits(g, z)?;
            Some(cluster_kl_loss(g, &q, logits, &masked)?)
        }
        None => None,
    };
    let total = match l_cluster {
        Some(lc) => {
            let w = g.scale(lc, lambda)?;
            g.add(l_jepa, w)?
        }
        None => l_jepa,
    };
    Ok(LossParts {
        total,
        l_jepa,
        l_cluster,
    })
}

/// Everything a checkpoint needs beyond the model and Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    train: TrainConfig,
    augment: AugmentConfig,
    mask: MaskSpec,
    step: usize,
    adam_t: u64,
    /// Corpus indices of the augmentation buffer, oldest first.
    buffer: Vec<usize>,
    consecutive_skips: usize,
    skipped: usize,
    target_method: Option<String>,
}

/// Training loop state. Step `k` (1-based) draws its batch, augmentation
/// and masks from RNG streams indexed by `k`, so a resumed run replays the
/// same draws as an uninterrupted one.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    aug: AugmentConfig,
    mask: MaskSpec,
    model: ModelBundle,
    adam: AdamState,
    step: usize,
    buffer: AugmentorBuffer,
    buffer_idx: VecDeque<usize>,
    consecutive_skips: usize,
    skipped: usize,
    target_method: Option<String>,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        aug: AugmentConfig,
        mask: MaskSpec,
        model: ModelBundle,
        data: &TrainingData,
    ) -> Result<Self> {
        cfg.validate()?;
        aug.validate()?;
        mask.validate()?;
        check_data(&cfg, &model, data)?;
        let adam = AdamState::new(&model.online);
        Ok(Self {
            buffer: AugmentorBuffer::new(aug.buffer_size),
            buffer_idx: VecDeque::with_capacity(aug.buffer_size),
            cfg,
            aug,
            mask,
            model,
            adam,
            step: 0,
            consecutive_skips: 0,
            skipped: 0,
            target_method: data.target_method.clone(),
        })
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, data: &TrainingData) -> Result<Self> {
        let model = ck.model()?;
        let state: TrainerState = serde_json::from_value(
            ck.meta
                .get("trainer")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint lacks trainer state".into()))?,
        )?;
        if state.target_method != data.target_method {
            return Err(Error::Config(format!(
                "checkpoint trained with targets {:?}, data provides {:?}",
                state.target_method, data.target_method
            )));
        }
        check_data(&state.train, &model, data)?;
        let mut adam = AdamState {
            m: ck.store("adam_m", model.cfg.seed)?,
            v: ck.store("adam_v", model.cfg.seed)?,
            t: state.adam_t,
        };
        for (name, p) in model.online.iter() {
            for s in [&mut adam.m, &mut adam.v] {
                match s.get(name) {
                    Some(a) if a.shape() == p.shape() => {}
                    _ => return Err(Error::Format(format!("optimizer state for `{name}` missing or misshapen"))),
                }
            }
        }
        let mut buffer = AugmentorBuffer::new(state.augment.buffer_size);
        for &i in &state.buffer {
            let w = data
                .waves
                .get(i)
                .ok_or_else(|| Error::Format(format!("buffered utterance {i} not in corpus")))?;
            buffer.push(w.clone());
        }
        Ok(Self {
            buffer,
            buffer_idx: state.buffer.into_iter().collect(),
            cfg: state.train,
            aug: state.augment,
            mask: state.mask,
            model,
            adam,
            step: state.step,
            consecutive_skips: state.consecutive_skips,
            skipped: state.skipped,
            target_method: state.target_method,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let state = TrainerState {
            train: self.cfg.clone(),
            augment: self.aug.clone(),
            mask: self.mask.clone(),
            step: self.step,
            adam_t: self.adam.t,
            buffer: self.buffer_idx.iter().copied().collect(),
            consecutive_skips: self.consecutive_skips,
            skipped: self.skipped,
            target_method: self.target_method.clone(),
        };
        let mut ck = Checkpoint::from_model(&self.model, serde_json::json!({ "trainer": state }))?;
        ck.push_store("adam_m", &self.adam.m);
        ck.push_store("adam_v", &self.adam.v);
        Ok(ck)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ModelBundle {
        &self.model
    }

    pub fn into_model(self) -> ModelBundle {
        self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Steps taken so far, skipped ones included.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.t_max
    }

    /// Draws the batch of step `step`, augments and masks it, and runs the
    /// teacher. Pushes each clean utterance into the augmentation buffer.
    pub fn prepare_batch(&mut self, data: &TrainingData, step: usize) -> Result<Vec<BatchItem>> {
        let n = data.len();
        let b = self.cfg.batch_size.min(n);
        let mut rng = rng_for(self.cfg.seed, stream::BATCH, step as u64);
        let picks = rand::seq::index::sample(&mut rng, n, b).into_vec();
        let lm = LogMel::new(&data.mel, data.waves[0].sample_rate())?;
        let mut items = Vec::with_capacity(b);
        for (slot, &i) in picks.iter().enumerate() {
            let draw = (step * self.cfg.batch_size + slot) as u64;
            let mut arng = rng_for(self.cfg.seed ^ self.aug.seed, stream::AUGMENT, draw);
            let pair = augment_pair(&data.waves[i], &mut self.buffer, &self.aug, &mut arng)?;
            if self.aug.buffer_size > 0 {
                if self.buffer_idx.len() == self.aug.buffer_size {
                    self.buffer_idx.pop_front();
                }
                self.buffer_idx.push_back(i);
            }
            let t = data.clean_mel[i].shape()[0];
            let (input, clean) = match self.model.cfg.frontend {
                Frontend::Mel => (lm.compute(&pair.aug)?.frames, data.clean_mel[i].clone()),
                Frontend::Wave => (wave_input(&pair.aug)?, wave_input(&data.waves[i])?),
            };
            let crop = (self.model.cfg.frontend == Frontend::Wave).then_some(t);
            // The teacher runs on a non-tracking tape: no gradient can reach it.
            let mut tg = Graph::inference();
            assert!(!tg.is_tracking());
            let enc = self.model.encode(&mut tg, &self.model.target, &clean, crop)?;
            let z_target = tg.value(enc.z).clone();
            let mut mrng = rng_for(self.cfg.seed ^ self.mask.seed, stream::MASK, draw);
            let mask = sample_block_mask(t, &self.mask, &mut mrng)?;
            items.push(BatchItem {
                utt: i,
                input,
                z_target,
                mask,
            });
        }
        Ok(items)
    }

    fn run_step(&mut self, data: &TrainingData, step: usize, lambda: f64, lr: f64) -> Result<(f64, f64, f64, f64)> {
        let items = self.prepare_batch(data, step)?;
        let mut g = Graph::new();
        let parts = batch_loss(&mut g, &self.model, data, &items, lambda)?;
        g.backward(parts.total)?;
        let mut grads = g.param_grads(&self.model.online);
        let norms = optimizer_step(
            &mut self.model.online,
            &mut grads,
            &mut self.adam,
            self.cfg.adam(),
            lr,
            self.cfg.weight_decay,
            self.cfg.clip_norm,
        )?;
        ema_update(&self.model.online, &mut self.model.target, self.cfg.ema_tau)?;
        let scalar = |v: Var| g.value(v).data()[0];
        Ok((
            scalar(parts.l_jepa),
            parts.l_cluster.map_or(0.0, scalar),
            scalar(parts.total),
            norms.grad_norm,
        ))
    }

    /// Runs the next step. Returns `None` when the step was skipped because
    /// of a non-finite value; too many consecutive skips abort training.
    pub fn train_step(&mut self, data: &TrainingData) -> Result<Option<StepRecord>> {
        if self.is_done() {
            return Err(Error::invalid(format!("training already reached t_max {}", self.cfg.t_max)));
        }
        let step = self.step + 1;
        self.step = step;
        let lambda = lambda_at(step, &self.cfg);
        let lr = lr_at(step, &self.cfg);
        let start = Instant::now();
        match self.run_step(data, step, lambda, lr) {
            Ok((l_jepa, l_cluster, total, grad_norm)) => {
                self.consecutive_skips = 0;
                Ok(Some(StepRecord {
                    step,
                    l_jepa,
                    l_cluster,
                    lambda,
                    total,
                    grad_norm,
                    lr,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                }))
            }
            Err(Error::NonFinite { op }) => {
                self.consecutive_skips += 1;
                self.skipped += 1;
                log::warn!("step {step} skipped: non-finite value in {op}");
                if self.consecutive_skips >= self.cfg.max_consecutive_skips {
                    return Err(Error::Training(format!(
                        "{} consecutive non-finite steps ending at step {step}",
                        self.consecutive_skips
                    )));
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

fn check_data(cfg: &TrainConfig, model: &ModelBundle, data: &TrainingData) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    if model.cfg.frontend == Frontend::Mel && model.cfg.n_mels != data.mel.n_mels {
        return Err(Error::Config(format!(
            "encoder expects {} mel bands, data has {}",
            model.cfg.n_mels, data.mel.n_mels
        )));
    }
    match (cfg.baseline_mode, data.target_method.as_deref()) {
        (true, Some("kmeans")) | (false, Some("gmm")) | (false, None) => {}
        (true, other) => {
            return Err(Error::Config(format!(
                "baseline mode needs k-means targets, got {other:?}"
            )))
        }
        (false, Some(other)) => {
            return Err(Error::Config(format!(
                "{other} targets require baseline_mode"
            )))
        }
    }
    if data.targets.is_none() && cfg.lambda_start > 0.0 {
        return Err(Error::Config(format!(
            "no cluster targets but lambda_start is {}; training without targets needs lambda = 0",
            cfg.lambda_start
        )));
    }
    if let Some(q) = &data.targets {
        if q.first().map(|s| s.k()) != Some(model.cfg.cluster_k) {
            return Err(Error::Config(format!(
                "targets have {:?} clusters, cluster head has {}",
                q.first().map(|s| s.k()),
                model.cfg.cluster_k
            )));
        }
    }
    Ok(())
}

fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.ckpt")
}

/// Drops metrics lines past `step`, left over from an interrupted run.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: StepRecord = serde_json::from_str(line)?;
        if r.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Files written by [`run_pretraining`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub records: Vec<StepRecord>,
    pub metrics: PathBuf,
    pub latest: PathBuf,
    /// Set once `t_max` is reached.
    pub final_checkpoint: Option<PathBuf>,
}

/// Trains until step `until` (default `t_max`), appending one JSON line per
/// completed step to `out_dir/metrics.jsonl` and writing checkpoints to
/// `out_dir/checkpoints/` at the configured cadence, `latest.ckpt` at the
/// end of the call and `final.ckpt` when `t_max` is reached.
pub fn run_pretraining(
    trainer: &mut Trainer,
    data: &TrainingData,
    out_dir: &Path,
    until: Option<usize>,
) -> Result<RunArtifacts> {
    let ck_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    let metrics = out_dir.join(METRICS_FILE);
    if trainer.step() == 0 {
        fs::write(&metrics, "")?;
    } else {
        truncate_metrics(&metrics, trainer.step())?;
    }
    let mut sink = fs::OpenOptions::new().append(true).create(true).open(&metrics)?;
    let t_max = trainer.cfg.t_max;
    let until = until.unwrap_or(t_max).min(t_max);
    let every = trainer.cfg.checkpoint_interval();
    let mut records = Vec::new();
    if t_max == 0 {
        write_checkpoint(ck_dir.join(checkpoint_name(0)), &trainer.checkpoint()?)?;
    }
    while trainer.step() < until {
        if let Some(r) = trainer.train_step(data)? {
            writeln!(sink, "{}", serde_json::to_string(&r)?)?;
            records.push(r);
        }
        let s = trainer.step();
        if s.is_multiple_of(every) || s == t_max {
            write_checkpoint(ck_dir.join(checkpoint_name(s)), &trainer.checkpoint()?)?;
            if let Some(r) = records.last() {
                log::info!(
                    "step {s}: L_JEPA {:.4} L_cluster {:.4} lambda {:.3} lr {:.2e}",
                    r.l_jepa,
                    r.l_cluster,
                    r.lambda,
                    r.lr
                );
            }
        }
    }
    sink.flush()?;
    let ck = trainer.checkpoint()?;
    let latest = out_dir.join(LATEST_CHECKPOINT);
    write_checkpoint(&latest, &ck)?;
    let final_checkpoint = if trainer.is_done() {
        let p = out_dir.join(FINAL_CHECKPOINT);
        write_checkpoint(&p, &ck)?;
        Some(p)
    } else {
        None
    };
    Ok(RunArtifacts {
        records,
        metrics,
        latest,
        final_checkpoint,
    })
}

/// Reads a metrics file back.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
