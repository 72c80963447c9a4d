//! Pre-training over the four objectives and the downstream fine-tuning
//! loops, with AdamW, a warmup/decay schedule and periodic checkpoints.

use std::collections::BTreeMap;

use codereviewer_core::metrics::classification_metrics;
use codereviewer_core::model::{Checkpoint, Gradients, ModelConfig, ModelError, Transformer};
use codereviewer_core::objectives::{MaskingConfig, ObjectiveError, SampleBuilder, TaskKind, TaskSample};
use codereviewer_core::optim::{adamw_step, lr_schedule, AdamState, AdamWConfig};
use codereviewer_core::{rng, Vocab};
use log::{info, warn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CommentGenSample, PretrainItem, QualitySample, RefinementSample};

// Disjoint id ranges for the keyed random streams.
const STEP_STREAM: u64 = 1 << 62;
const DROPOUT_STREAM: u64 = 1 << 61;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corpus yields no samples for any task with positive weight")]
    EmptyCorpus,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint vocabulary {found:016x} does not match {expected:016x}")]
    VocabMismatch { expected: u64, found: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("sink failed: {0}")]
    Sink(#[source] Box<dyn std::error::Error + Send + Sync>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub seed: u64,
    pub task_mix: BTreeMap<TaskKind, f64>,
    pub grad_clip_norm: f64,
    pub eval_every: u64,
    pub max_len: usize,
    pub masking: MaskingConfig,
    pub adamw: AdamWConfig,
    pub model: ModelConfig,
    /// Generation budget and beam width used by validation decoding.
    pub max_new_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 8,
            warmup_steps: 100,
            total_steps: 1000,
            seed: 0,
            task_mix: TaskKind::PRETRAIN.iter().map(|&k| (k, 1.0)).collect(),
            grad_clip_norm: 1.0,
            eval_every: 100,
            max_len: 512,
            masking: MaskingConfig::default(),
            adamw: AdamWConfig::default(),
            model: ModelConfig::default(),
            max_new_tokens: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return bad(format!(
                "need 0 < total_steps and warmup_steps <= total_steps, got {} and {}",
                self.total_steps, self.warmup_steps
            ));
        }
        if self.task_mix.values().any(|w| !w.is_finite() || *w < 0.0) || self.task_mix.values().sum::<f64>() <= 0.0 {
            return bad("task_mix weights must be non-negative with a positive sum".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.max_len < 4 || self.max_len > self.model.max_len {
            return bad(format!("max_len {} must be in [4, model.max_len = {}]", self.max_len, self.model.max_len));
        }
        self.model.validate()?;
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            clip_norm: self.grad_clip_norm,
            ..self.adamw
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub task: TaskKind,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Periodic,
    Best,
}

/// Receives progress while a run is in flight. Every method defaults to a
/// no-op.
pub trait TrainSink {
    fn on_step(&mut self, _entry: &LogEntry) -> Result<(), TrainError> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _ckpt: &Checkpoint<f32>, _kind: CheckpointKind) -> Result<(), TrainError> {
        Ok(())
    }
    fn on_eval(&mut self, _step: u64, _metric: f64) -> Result<(), TrainError> {
        Ok(())
    }
}

/// A sink that ignores everything.
pub struct NoSink;
impl TrainSink for NoSink {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint<f32>,
    /// Best validation checkpoint with its metric, for fine-tuning runs.
    pub best: Option<(Checkpoint<f32>, f64)>,
    pub log: Vec<LogEntry>,
}

impl TrainOutcome {
    /// The checkpoint a fine-tuning run hands on: the best validated one if
    /// any, else the last.
    pub fn selected(&self) -> &Checkpoint<f32> {
        self.best.as_ref().map_or(&self.last, |b| &b.0)
    }
}

/// Samples for one task, each built once from its own keyed stream.
#[derive(Debug, Clone)]
pub struct TaskPool {
    pub kind: TaskKind,
    pub weight: f64,
    pub samples: Vec<TaskSample>,
}

fn sample_stream(seed: u64, kind: TaskKind, index: usize) -> rng::Rng {
    rng::stream(seed, ((kind as u64) << 40) | index as u64)
}

/// Builds the per-task pools for pre-training. Tasks with zero weight are
/// left out; items an objective cannot use (no comment, too short) are
/// skipped.
pub fn pretrain_pools(items: &[PretrainItem], vocab: &Vocab, cfg: &TrainConfig) -> Result<Vec<TaskPool>, TrainError> {
    let builder = SampleBuilder {
        vocab,
        max_len: cfg.max_len,
        masking: cfg.masking,
    };
    let mut pools = Vec::new();
    for (&kind, &weight) in &cfg.task_mix {
        if weight <= 0.0 {
            continue;
        }
        let mut samples = Vec::new();
        let mut skipped = 0usize;
        for (i, item) in items.iter().enumerate() {
            let mut r = sample_stream(cfg.seed, kind, i);
            let built = match (kind, &item.comment) {
                (TaskKind::Dtp, _) => builder.make_dtp(&item.hunk, &mut r),
                (TaskKind::Dcd, _) => builder.make_dcd(&item.hunk, &mut r),
                (TaskKind::Drc, Some(c)) => builder.make_drc(c, &mut r),
                (TaskKind::Rcg, Some(c)) => builder.make_rcg(&item.hunk, c),
                (TaskKind::Drc | TaskKind::Rcg, None) => continue,
                (other, _) => {
                    return Err(TrainError::InvalidConfig(format!("{} is not a pre-training task", other.name())));
                }
            };
            match built {
                Ok(s) => samples.push(s),
                Err(_) => skipped += 1,
            }
        }
        if skipped > 0 {
            info!("{}: skipped {skipped} unusable items", kind.name());
        }
        if samples.is_empty() {
            warn!("{}: no samples, task left out of the mix", kind.name());
            continue;
        }
        pools.push(TaskPool { kind, weight, samples });
    }
    if pools.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    Ok(pools)
}

pub fn quality_samples(data: &[QualitySample], vocab: &Vocab, max_len: usize) -> Result<Vec<TaskSample>, TrainError> {
    let b = SampleBuilder::new(vocab, max_len);
    Ok(data
        .iter()
        .map(|s| b.make_quality(&s.hunk, s.label == 1))
        .collect::<Result<_, _>>()?)
}

pub fn comment_samples(data: &[CommentGenSample], vocab: &Vocab, max_len: usize) -> Result<Vec<TaskSample>, TrainError> {
    let b = SampleBuilder::new(vocab, max_len);
    Ok(data
        .iter()
        .map(|s| b.make_comment_gen(&s.hunk, &s.target_comment))
        .collect::<Result<_, _>>()?)
}

pub fn refinement_samples(
    data: &[RefinementSample],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<TaskSample>, TrainError> {
    let b = SampleBuilder::new(vocab, max_len);
    Ok(data
        .iter()
        .map(|s| b.make_refinement(&s.old_code, &s.comment, &s.new_code))
        .collect::<Result<_, _>>()?)
}

/// What a fine-tuning run validates on; higher metric is better.
enum Validation<'a> {
    None,
    F1(&'a [TaskSample]),
    NegLoss(&'a [TaskSample]),
}

impl Validation<'_> {
    fn score(&self, model: &Transformer<f32>) -> Result<Option<f64>, TrainError> {
        match self {
            Validation::None => Ok(None),
            Validation::F1(samples) => {
                let mut preds = Vec::with_capacity(samples.len());
                let mut labels = Vec::with_capacity(samples.len());
                for s in samples.iter() {
                    preds.push(u8::from(model.classify(&s.input_ids)? >= 0.5));
                    labels.push(s.cls_label.unwrap_or(0));
                }
                Ok(classification_metrics(&preds, &labels).ok().map(|m| m.f1))
            }
            Validation::NegLoss(samples) => {
                if samples.is_empty() {
                    return Ok(None);
                }
                let mut total = 0.0;
                for s in samples.iter() {
                    total += f64::from(model.loss(s)?);
                }
                Ok(Some(-total / samples.len() as f64))
            }
        }
    }
}

fn check_vocab(ckpt: &Checkpoint<f32>, vocab: &Vocab) -> Result<(), TrainError> {
    if ckpt.vocab_fingerprint != 0 && ckpt.vocab_fingerprint != vocab.fingerprint() {
        return Err(TrainError::VocabMismatch {
            expected: vocab.fingerprint(),
            found: ckpt.vocab_fingerprint,
        });
    }
    if vocab.len() > ckpt.model.config().vocab_size {
        return Err(TrainError::InvalidConfig(format!(
            "vocabulary has {} ids but the model only {}",
            vocab.len(),
            ckpt.model.config().vocab_size
        )));
    }
    Ok(())
}

/// The shared loop. Resumes at `ckpt.step + 1`; every random choice is keyed
/// by (seed, step), so a resumed run retraces the uninterrupted one.
fn run(
    mut ckpt: Checkpoint<f32>,
    pools: &[TaskPool],
    cfg: &TrainConfig,
    frozen: &[bool],
    validation: Validation<'_>,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome, TrainError> {
    let weights = WeightedIndex::new(pools.iter().map(|p| p.weight))
        .map_err(|e| TrainError::InvalidConfig(format!("task mix: {e}")))?;
    let opt_cfg = cfg.optimizer();
    let mut state = ckpt.optimizer.take().unwrap_or_else(|| AdamState::new(ckpt.model.params()));
    let dropout = ckpt.model.config().dropout > 0.0;
    let mut log = Vec::new();
    let mut best: Option<(Checkpoint<f32>, f64)> = None;

    for step in ckpt.step + 1..=cfg.total_steps {
        let mut r = rng::stream(cfg.seed, STEP_STREAM | step);
        let pool = &pools[weights.sample(&mut r)];
        let mut grads = Gradients::zeros_like(ckpt.model.params());
        let mut loss = 0.0;
        for b in 0..cfg.batch_size {
            let sample = &pool.samples[r.random_range(0..pool.samples.len())];
            let drop_rng =
                dropout.then(|| rng::stream(cfg.seed, DROPOUT_STREAM | (step * cfg.batch_size as u64 + b as u64)));
            let (l, g) = ckpt.model.loss_and_grads(sample, drop_rng)?;
            loss += f64::from(l);
            grads.add_assign(&g);
        }
        let inv = 1.0 / cfg.batch_size as f32;
        grads.scale(inv);
        let lr = lr_schedule(step, cfg.warmup_steps, cfg.total_steps, cfg.lr);
        adamw_step(ckpt.model.params_mut(), &mut state, &grads, frozen, lr, &opt_cfg);
        ckpt.step = step;

        let entry = LogEntry {
            step,
            task: pool.kind,
            loss: loss / cfg.batch_size as f64,
            lr,
        };
        sink.on_step(&entry)?;
        log.push(entry);

        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            if let Some(metric) = validation.score(&ckpt.model)? {
                sink.on_eval(step, metric)?;
                if best.as_ref().is_none_or(|(_, m)| metric > *m) {
                    let snapshot = Checkpoint {
                        optimizer: None,
                        ..ckpt.clone()
                    };
                    sink.on_checkpoint(&snapshot, CheckpointKind::Best)?;
                    best = Some((snapshot, metric));
                }
            }
            ckpt.optimizer = Some(state.clone());
            sink.on_checkpoint(&ckpt, CheckpointKind::Periodic)?;
            ckpt.optimizer = None;
        }
    }
    ckpt.optimizer = Some(state);
    Ok(TrainOutcome { last: ckpt, best, log })
}

/// Joint pre-training: each step draws one task by the mix weights and a
/// batch from that task's pool.
pub fn pretrain(
    items: &[PretrainItem],
    vocab: &Vocab,
    init: Checkpoint<f32>,
    cfg: &TrainConfig,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_vocab(&init, vocab)?;
    let pools = pretrain_pools(items, vocab, cfg)?;
    let mut init = init;
    init.vocab_fingerprint = vocab.fingerprint();
    let frozen = vec![false; init.model.params().len()];
    run(init, &pools, cfg, &frozen, Validation::None, sink)
}

/// Starts a fine-tuning run from a (pre-trained) model: fresh optimizer,
/// step counter at zero.
fn fresh(init: &Checkpoint<f32>, vocab: &Vocab) -> Checkpoint<f32> {
    Checkpoint {
        model: init.model.clone(),
        optimizer: None,
        step: 0,
        vocab_fingerprint: vocab.fingerprint(),
    }
}

/// Fine-tunes the encoder and classification head with the decoder frozen.
/// The best checkpoint by validation F1 is kept.
pub fn finetune_classification(
    train: &[QualitySample],
    valid: &[QualitySample],
    vocab: &Vocab,
    init: &Checkpoint<f32>,
    cfg: &TrainConfig,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_vocab(init, vocab)?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let samples = quality_samples(train, vocab, cfg.max_len)?;
    let valid = quality_samples(valid, vocab, cfg.max_len)?;
    let ckpt = fresh(init, vocab);
    let mut frozen = vec![false; ckpt.model.params().len()];
    for i in ckpt.model.decoder_param_indices() {
        frozen[i] = true;
    }
    let pools = [TaskPool {
        kind: TaskKind::QualityCls,
        weight: 1.0,
        samples,
    }];
    let validation = if valid.is_empty() {
        Validation::None
    } else {
        Validation::F1(&valid)
    };
    run(ckpt, &pools, cfg, &frozen, validation, sink)
}

/// Fine-tunes the whole encoder-decoder on comment generation or code
/// refinement. The best checkpoint by validation loss is kept.
pub fn finetune_generation(
    train: Vec<TaskSample>,
    valid: &[TaskSample],
    vocab: &Vocab,
    init: &Checkpoint<f32>,
    cfg: &TrainConfig,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_vocab(init, vocab)?;
    let Some(kind) = train.first().map(|s| s.kind) else {
        return Err(TrainError::EmptyDataset);
    };
    if !matches!(kind, TaskKind::CommentGen | TaskKind::Refinement) || train.iter().any(|s| s.kind != kind) {
        return Err(TrainError::InvalidConfig(
            "generation fine-tuning needs CommentGen or Refinement samples of one kind".into(),
        ));
    }
    let ckpt = fresh(init, vocab);
    let frozen = vec![false; ckpt.model.params().len()];
    let pools = [TaskPool {
        kind,
        weight: 1.0,
        samples: train,
    }];
    let validation = if valid.is_empty() {
        Validation::None
    } else {
        Validation::NegLoss(valid)
    };
    run(ckpt, &pools, cfg, &frozen, validation, sink)
}
