//! Command-line front end. `run` does the work so tests can drive it
//! without a process; `main` only maps errors to exit codes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use codereviewer_core::fingerprint::fnv1a;
use codereviewer_core::metrics::{bleu4, classification_metrics, comment_tokens, exact_match, naive_copy, EvalReport};
use codereviewer_core::model::{init_model, Checkpoint, Transformer};
use codereviewer_core::objectives::{encode_lines, join_lines, SampleBuilder, TaskKind};
use codereviewer_core::tokenizer::EOS;
use codereviewer_core::{train_bpe, Vocab};
use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, CleanConfig, CommentGenSample, PretrainItem, QualitySample, RefinementSample, SplitConfig};
use crate::formats::{self, load_checkpoint, read_config, read_jsonl, save_checkpoint, write_json, write_jsonl};
use crate::ingest::{self, Client, RawPullRequest, ReviewRecord};
use crate::manifest::{manifest_path_for, DatasetManifest, RunManifest, SplitSummary};
use crate::trainer::{self, CheckpointKind, LogEntry, TrainConfig, TrainError, TrainSink};

/// A problem with how the tool was invoked (flags, config files). Exits 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl fmt::Display) -> anyhow::Error {
    UsageError(msg.to_string()).into()
}

#[derive(Debug, Parser)]
#[command(name = "codereviewer", version, about = "Review-data pipelines and models for code review automation")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fetch pull requests from the code host, or load fixture files.
    Ingest(IngestArgs),
    /// Build a dataset from ingested pull requests.
    Build(BuildArgs),
    /// Train a BPE vocabulary on a pre-training set.
    Vocab(VocabArgs),
    /// Pre-train or fine-tune a model.
    Train(TrainArgs),
    /// Score a model (or the copy baseline) on a dataset.
    Eval(EvalArgs),
    /// Write model predictions for a dataset.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Repository as owner/name; repeat for several.
    #[arg(long, required_unless_present = "fixtures", conflicts_with = "fixtures")]
    pub repo: Vec<String>,
    /// Directory of *.jsonl fixture files instead of the network.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Output JSONL of pull requests.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the normalized per-hunk records here.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub max_prs: usize,
    /// Environment variable holding the API token.
    #[arg(long, default_value = ingest::TOKEN_ENV)]
    pub token_env: String,
    #[arg(long, default_value = ingest::DEFAULT_BASE_URL)]
    pub base_url: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetTask {
    Quality,
    Comment,
    Refine,
    Pretrain,
}

impl DatasetTask {
    fn name(self) -> &'static str {
        match self {
            DatasetTask::Quality => "quality",
            DatasetTask::Comment => "comment",
            DatasetTask::Refine => "refine",
            DatasetTask::Pretrain => "pretrain",
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Pull-request JSONL file, or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub task: DatasetTask,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML or JSON file listing train and eval projects.
    #[arg(long)]
    pub split_config: PathBuf,
    /// Optional TOML or JSON override of the comment-cleaning rules.
    #[arg(long)]
    pub clean_config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    /// Pre-training JSONL (hunks and comments).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 8000)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DownstreamTask {
    Quality,
    Comment,
    Refine,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Required for fine-tuning.
    #[arg(long, value_enum)]
    pub task: Option<DownstreamTask>,
    /// TOML or JSON training config.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to start from; pre-training without one starts from
    /// fresh weights.
    #[arg(long)]
    pub init_ckpt: Option<PathBuf>,
    /// Continue the run saved in --init-ckpt (step and optimizer state)
    /// instead of starting a new one.
    #[arg(long, requires = "init_ckpt")]
    pub resume: bool,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Vocabulary JSON; taken from --init-ckpt when omitted.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: DownstreamTask,
    #[arg(long, required_unless_present_any = ["naive_copy", "predictions"])]
    pub ckpt: Option<PathBuf>,
    /// Dataset JSONL as written by `build`.
    #[arg(long, required_unless_present = "predictions")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub beam: usize,
    #[arg(long, default_value_t = 128)]
    pub max_new_tokens: usize,
    /// Where to write the report JSON.
    #[arg(long)]
    pub report: PathBuf,
    /// Score the baseline that copies the input code unchanged.
    #[arg(long, conflicts_with = "ckpt")]
    pub naive_copy: bool,
    /// Vocabulary for code BLEU when no checkpoint is given.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Score existing {"id","text"} predictions against --references.
    #[arg(long, requires = "references", conflicts_with_all = ["ckpt", "data", "naive_copy"])]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub references: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_enum)]
    pub task: DownstreamTask,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub beam: usize,
    #[arg(long, default_value_t = 128)]
    pub max_new_tokens: usize,
    /// Output JSONL of {"id","text"}.
    #[arg(long)]
    pub out: PathBuf,
}

/// Removes the listed outputs unless disarmed, so a failed command leaves
/// nothing half-written behind.
struct Cleanup(Vec<PathBuf>);

impl Cleanup {
    fn new() -> Self {
        Self(Vec::new())
    }

    /// Registers `path` if it does not exist yet.
    fn track(&mut self, path: &Path) {
        if !path.exists() {
            self.0.push(path.to_path_buf());
        }
    }

    fn disarm(mut self) {
        self.0.clear();
    }
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        for p in self.0.iter().rev() {
            let _ = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Build(a) => cmd_build(a),
        Command::Vocab(a) => cmd_vocab(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let mut manifest = RunManifest::start("ingest");
    let mut cleanup = Cleanup::new();
    cleanup.track(&a.out);
    cleanup.track(&manifest_path_for(&a.out));
    let prs = if let Some(dir) = &a.fixtures {
        manifest.inputs.push(dir.clone());
        let loaded = ingest::load_fixtures(dir)?;
        if !loaded.skipped.is_empty() {
            log::warn!("skipped {} malformed fixture lines", loaded.skipped.len());
        }
        let mut prs = loaded.records;
        prs.sort_by(|x, y| (&x.repo, x.pr_number).cmp(&(&y.repo, y.pr_number)));
        prs
    } else {
        let token = Client::token_from_env(&a.token_env);
        if token.is_none() {
            log::warn!("{} is not set; requests are unauthenticated", a.token_env);
        }
        Client::new(&a.base_url, token).fetch_many(&a.repo, a.max_prs)?
    };
    write_jsonl(&a.out, &prs)?;
    manifest.outputs.push(a.out.clone());
    if let Some(path) = &a.records {
        cleanup.track(path);
        let records: Vec<ReviewRecord> = prs.iter().flat_map(ingest::normalize).collect();
        write_jsonl(path, &records)?;
        manifest.outputs.push(path.clone());
    }
    info!("wrote {} pull requests to {}", prs.len(), a.out.display());
    manifest.finish(&manifest_path_for(&a.out))?;
    cleanup.disarm();
    Ok(())
}

/// Pull requests from a JSONL file or every *.jsonl in a directory.
fn read_pull_requests(input: &Path) -> Result<Vec<RawPullRequest>> {
    if input.is_dir() {
        let loaded = ingest::load_fixtures(input)?;
        if !loaded.skipped.is_empty() {
            log::warn!("skipped {} malformed lines", loaded.skipped.len());
        }
        Ok(loaded.records)
    } else {
        Ok(read_jsonl(input)?)
    }
}

fn repos_of(records: &[ReviewRecord]) -> Vec<String> {
    let set: std::collections::BTreeSet<&str> = records.iter().map(|r| r.repo.as_str()).collect();
    set.into_iter().map(str::to_string).collect()
}

fn cmd_build(a: BuildArgs) -> Result<()> {
    let split_cfg: SplitConfig = read_config(&a.split_config).map_err(usage)?;
    let clean_cfg: CleanConfig = match &a.clean_config {
        Some(p) => read_config(p).map_err(usage)?,
        None => CleanConfig::default(),
    };
    let mut manifest = RunManifest::start("build");
    manifest.config_path = Some(a.split_config.clone());
    manifest.seed = Some(a.seed);
    manifest.inputs.push(a.input.clone());
    let mut cleanup = Cleanup::new();
    cleanup.track(&a.out);

    let prs = read_pull_requests(&a.input)?;
    let records: Vec<ReviewRecord> = prs.iter().flat_map(ingest::normalize).collect();
    let input_records = records.len();
    let (records, clean_stats) = corpus::clean_comments(records, &clean_cfg);
    let splits = corpus::split_by_project(records, &split_cfg, a.seed)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let task = a.task.name();
    let mut summaries = BTreeMap::new();
    for (split, part) in splits.parts() {
        let file = format!("{task}.{split}.jsonl");
        let path = a.out.join(&file);
        let mut summary = SplitSummary {
            file: file.clone(),
            samples: 0,
            repos: repos_of(part),
            positives: None,
            negatives: None,
        };
        summary.samples = match a.task {
            DatasetTask::Quality => {
                let data = corpus::build_quality_dataset(part, a.seed)
                    .with_context(|| format!("{split} split"))?;
                let pos = data.iter().filter(|s| s.label == 1).count();
                summary.positives = Some(pos);
                summary.negatives = Some(data.len() - pos);
                write_jsonl(&path, &data)?;
                data.len()
            }
            DatasetTask::Comment => {
                let data = corpus::build_comment_dataset(part);
                write_jsonl(&path, &data)?;
                data.len()
            }
            DatasetTask::Refine => {
                let data = corpus::build_refinement_dataset(part);
                write_jsonl(&path, &data)?;
                data.len()
            }
            DatasetTask::Pretrain => {
                let data = corpus::build_pretrain_set(part);
                write_jsonl(&path, &data)?;
                data.len()
            }
        };
        info!("{file}: {} samples", summary.samples);
        manifest.outputs.push(path);
        summaries.insert(split.to_string(), summary);
    }
    write_json(
        &a.out.join("manifest.json"),
        &DatasetManifest {
            task: task.to_string(),
            seed: a.seed,
            rule_version: corpus::RULE_VERSION.to_string(),
            clean_config: clean_cfg,
            clean_stats,
            input_records,
            dropped_records: splits.dropped,
            splits: summaries,
        },
    )?;
    manifest.finish(&manifest_path_for(&a.out))?;
    cleanup.disarm();
    Ok(())
}

fn cmd_vocab(a: VocabArgs) -> Result<()> {
    let items: Vec<PretrainItem> = read_jsonl(&a.input)?;
    let texts = items
        .iter()
        .flat_map(|it| it.hunk.lines.iter().map(|l| l.content.as_str()).chain(it.comment.as_deref()));
    let vocab = train_bpe(texts, a.size).map_err(usage)?;
    let mut manifest = RunManifest::start("vocab");
    manifest.inputs.push(a.input.clone());
    manifest.outputs.push(a.out.clone());
    formats::save_vocab(&a.out, &vocab)?;
    info!("vocabulary of {} ids written to {}", vocab.len(), a.out.display());
    manifest.finish(&manifest_path_for(&a.out))?;
    Ok(())
}

/// Streams the training log and writes checkpoints under the output dir.
struct DirSink<'a> {
    out: &'a Path,
    vocab: &'a Vocab,
    log: fs::File,
}

impl DirSink<'_> {
    fn io(e: impl std::error::Error + Send + Sync + 'static) -> TrainError {
        TrainError::Sink(Box::new(e))
    }
}

impl TrainSink for DirSink<'_> {
    fn on_step(&mut self, entry: &LogEntry) -> Result<(), TrainError> {
        let line = serde_json::to_string(entry).map_err(Self::io)?;
        writeln!(self.log, "{line}").map_err(Self::io)
    }

    fn on_checkpoint(&mut self, ckpt: &Checkpoint<f32>, kind: CheckpointKind) -> Result<(), TrainError> {
        let dir = match kind {
            CheckpointKind::Periodic => self.out.join("checkpoint"),
            CheckpointKind::Best => self.out.join("best"),
        };
        save_checkpoint(&dir, ckpt, self.vocab).map_err(Self::io)
    }

    fn on_eval(&mut self, step: u64, metric: f64) -> Result<(), TrainError> {
        info!("step {step}: validation {metric:.6}");
        Ok(())
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg: TrainConfig = read_config(&a.config).map_err(usage)?;
    cfg.validate().map_err(usage)?;
    if a.stage == Stage::Finetune && a.task.is_none() {
        return Err(usage("--task is required for fine-tuning"));
    }
    let (init, vocab) = match (&a.init_ckpt, &a.vocab) {
        (Some(dir), v) => {
            let (ckpt, ckpt_vocab) = load_checkpoint(dir)?;
            let vocab = match v {
                Some(p) => formats::load_vocab(p)?,
                None => ckpt_vocab,
            };
            (ckpt, vocab)
        }
        (None, Some(p)) => {
            if a.stage == Stage::Finetune {
                return Err(usage("fine-tuning needs --init-ckpt"));
            }
            let vocab = formats::load_vocab(p)?;
            let mut model_cfg = cfg.model.clone();
            if model_cfg.vocab_size < vocab.len() {
                return Err(usage(format!(
                    "model.vocab_size {} is smaller than the vocabulary ({})",
                    model_cfg.vocab_size,
                    vocab.len()
                )));
            }
            model_cfg.vocab_size = model_cfg.vocab_size.max(vocab.len());
            (init_model(&model_cfg, cfg.seed)?, vocab)
        }
        (None, None) => return Err(usage("need --vocab or --init-ckpt")),
    };
    let mut init = init;
    if !a.resume {
        init.step = 0;
        init.optimizer = None;
    }

    let mut manifest = RunManifest::start("train");
    manifest.config_path = Some(a.config.clone());
    manifest.seed = Some(cfg.seed);
    manifest.inputs.extend([a.train.clone()].into_iter().chain(a.valid.clone()).chain(a.init_ckpt.clone()));
    let mut cleanup = Cleanup::new();
    cleanup.track(&a.out);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log_path = a.out.join("train_log.jsonl");
    let log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut sink = DirSink {
        out: &a.out,
        vocab: &vocab,
        log,
    };

    let outcome = match (a.stage, a.task) {
        (Stage::Pretrain, _) => {
            let items: Vec<PretrainItem> = read_jsonl(&a.train)?;
            trainer::pretrain(&items, &vocab, init, &cfg, &mut sink)?
        }
        (Stage::Finetune, Some(DownstreamTask::Quality)) => {
            let train: Vec<QualitySample> = read_jsonl(&a.train)?;
            let valid: Vec<QualitySample> = a.valid.as_deref().map(read_jsonl).transpose()?.unwrap_or_default();
            trainer::finetune_classification(&train, &valid, &vocab, &init, &cfg, &mut sink)?
        }
        (Stage::Finetune, Some(task)) => {
            let load = |p: &Path| -> Result<Vec<_>> {
                Ok(match task {
                    DownstreamTask::Comment => {
                        trainer::comment_samples(&read_jsonl::<CommentGenSample>(p)?, &vocab, cfg.max_len)?
                    }
                    _ => trainer::refinement_samples(&read_jsonl::<RefinementSample>(p)?, &vocab, cfg.max_len)?,
                })
            };
            let train = load(&a.train)?;
            let valid = a.valid.as_deref().map(load).transpose()?.unwrap_or_default();
            trainer::finetune_generation(train, &valid, &vocab, &init, &cfg, &mut sink)?
        }
        (Stage::Finetune, None) => unreachable!("checked above"),
    };
    save_checkpoint(&a.out.join("checkpoint"), &outcome.last, &vocab)?;
    manifest.outputs.extend([log_path, a.out.join("checkpoint")]);
    if outcome.best.is_some() {
        manifest.outputs.push(a.out.join("best"));
    }
    if let Some(last) = outcome.log.last() {
        info!("finished at step {} with loss {:.6}", last.step, last.loss);
    }
    manifest.finish(&manifest_path_for(&a.out))?;
    cleanup.disarm();
    Ok(())
}

/// One prediction or reference line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: usize,
    pub text: String,
}

/// Model outputs for a dataset, as text, in dataset order.
fn model_predictions(
    task: DownstreamTask,
    data: &Path,
    model: &Transformer<f32>,
    vocab: &Vocab,
    beam: usize,
    max_new: usize,
) -> Result<(Vec<String>, Vec<Vec<u32>>)> {
    let max_len = model.config().max_len;
    let b = SampleBuilder::new(vocab, max_len);
    let inputs: Vec<Vec<u32>> = match task {
        DownstreamTask::Quality => read_jsonl::<QualitySample>(data)?
            .iter()
            .map(|s| b.make_quality(&s.hunk, s.label == 1).map(|t| t.input_ids))
            .collect::<Result<_, _>>()?,
        DownstreamTask::Comment => read_jsonl::<CommentGenSample>(data)?
            .iter()
            .map(|s| b.make_comment_gen(&s.hunk, &s.target_comment).map(|t| t.input_ids))
            .collect::<Result<_, _>>()?,
        DownstreamTask::Refine => read_jsonl::<RefinementSample>(data)?
            .iter()
            .map(|s| b.make_refinement(&s.old_code, &s.comment, &s.new_code).map(|t| t.input_ids))
            .collect::<Result<_, _>>()?,
    };
    let mut texts = Vec::with_capacity(inputs.len());
    let mut ids = Vec::with_capacity(inputs.len());
    for input in &inputs {
        if task == DownstreamTask::Quality {
            let p = model.classify(input)?;
            texts.push(u8::from(p >= 0.5).to_string());
            ids.push(Vec::new());
        } else {
            let mut out = model.generate_beam(input, beam, max_new)?;
            if out.last() == Some(&EOS) {
                out.pop();
            }
            texts.push(vocab.decode(&out)?);
            ids.push(out);
        }
    }
    Ok((texts, ids))
}

fn generation_metrics(
    task: DownstreamTask,
    cands: &[String],
    refs: &[String],
    vocab: &Vocab,
) -> Result<BTreeMap<String, f64>> {
    let mut metrics = BTreeMap::new();
    match task {
        DownstreamTask::Comment => {
            let c: Vec<_> = cands.iter().map(|s| comment_tokens(s)).collect();
            let r: Vec<_> = refs.iter().map(|s| comment_tokens(s)).collect();
            metrics.insert("bleu4_corpus".into(), bleu4(&c, &r)?);
        }
        DownstreamTask::Refine => {
            let lines = |v: &[String]| -> Vec<Vec<String>> {
                v.iter().map(|s| s.lines().map(str::to_string).collect()).collect()
            };
            metrics.insert("bleu4_corpus".into(), code_bleu(&lines(cands), &lines(refs), vocab)?);
            metrics.insert("exact_match".into(), exact_match(cands, refs)?);
        }
        DownstreamTask::Quality => unreachable!("classification has no text metrics"),
    }
    Ok(metrics)
}

fn task_kind(task: DownstreamTask) -> TaskKind {
    match task {
        DownstreamTask::Quality => TaskKind::QualityCls,
        DownstreamTask::Comment => TaskKind::CommentGen,
        DownstreamTask::Refine => TaskKind::Refinement,
    }
}

fn references(task: DownstreamTask, data: &Path) -> Result<Vec<String>> {
    Ok(match task {
        DownstreamTask::Quality => read_jsonl::<QualitySample>(data)?
            .iter()
            .map(|s| s.label.to_string())
            .collect(),
        DownstreamTask::Comment => read_jsonl::<CommentGenSample>(data)?
            .into_iter()
            .map(|s| s.target_comment)
            .collect(),
        DownstreamTask::Refine => read_jsonl::<RefinementSample>(data)?
            .iter()
            .map(|s| join_lines(&s.new_code))
            .collect(),
    })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut manifest = RunManifest::start("eval");
    let kind = task_kind(a.task);
    let (cands, refs, vocab, fingerprint) = if let Some(pred_path) = &a.predictions {
        let ref_path = a.references.as_ref().expect("clap requires --references");
        manifest.inputs.extend([pred_path.clone(), ref_path.clone()]);
        let mut preds: Vec<TextRecord> = read_jsonl(pred_path)?;
        let mut refs: Vec<TextRecord> = read_jsonl(ref_path)?;
        preds.sort_by_key(|r| r.id);
        refs.sort_by_key(|r| r.id);
        if preds.iter().map(|r| r.id).ne(refs.iter().map(|r| r.id)) {
            bail!("prediction and reference ids differ");
        }
        let vocab = a.vocab.as_deref().map(formats::load_vocab).transpose()?.unwrap_or_else(Vocab::bytes_only);
        let fp = fnv1a(b"external-predictions");
        (
            preds.into_iter().map(|r| r.text).collect::<Vec<_>>(),
            refs.into_iter().map(|r| r.text).collect::<Vec<_>>(),
            vocab,
            fp,
        )
    } else {
        let data = a.data.as_ref().expect("clap requires --data");
        manifest.inputs.push(data.clone());
        if a.naive_copy && a.task != DownstreamTask::Refine {
            return Err(usage("--naive-copy only applies to the refine task"));
        }
        let refs = references(a.task, data)?;
        if a.naive_copy {
            let samples: Vec<RefinementSample> = read_jsonl(data)?;
            let olds: Vec<String> = samples.iter().map(|s| join_lines(&s.old_code)).collect();
            let cands = naive_copy(&olds);
            let vocab = a.vocab.as_deref().map(formats::load_vocab).transpose()?.unwrap_or_else(Vocab::bytes_only);
            (cands, refs, vocab, fnv1a(b"naive-copy"))
        } else {
            let ckpt_dir = a.ckpt.as_ref().expect("clap requires --ckpt");
            manifest.inputs.push(ckpt_dir.clone());
            if a.beam == 0 {
                return Err(usage("--beam must be at least 1"));
            }
            let (ckpt, vocab) = load_checkpoint(ckpt_dir)?;
            let (cands, _) = model_predictions(a.task, data, &ckpt.model, &vocab, a.beam, a.max_new_tokens)?;
            let fp = ckpt.model.config().fingerprint();
            (cands, refs, vocab, fp)
        }
    };

    let metrics = if a.task == DownstreamTask::Quality {
        let parse = |v: &[String]| -> Result<Vec<u8>> {
            v.iter()
                .map(|s| match s.trim() {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => bail!("classification label must be 0 or 1, got {other:?}"),
                })
                .collect()
        };
        let m = classification_metrics(&parse(&cands)?, &parse(&refs)?)?;
        BTreeMap::from([
            ("accuracy".to_string(), m.accuracy),
            ("precision".to_string(), m.precision),
            ("recall".to_string(), m.recall),
            ("f1".to_string(), m.f1),
        ])
    } else {
        generation_metrics(a.task, &cands, &refs, &vocab)?
    };
    let report = EvalReport {
        task: kind,
        metrics,
        n_samples: refs.len(),
        config_fingerprint: fingerprint,
    };
    for (name, value) in &report.metrics {
        println!("{name}\t{value:.4}");
    }
    write_json(&a.report, &report)?;
    manifest.outputs.push(a.report.clone());
    manifest.finish(&manifest_path_for(&a.report))?;
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    if a.beam == 0 {
        return Err(usage("--beam must be at least 1"));
    }
    let mut manifest = RunManifest::start("predict");
    manifest.inputs.extend([a.ckpt.clone(), a.data.clone()]);
    let (ckpt, vocab) = load_checkpoint(&a.ckpt)?;
    let (texts, _) = model_predictions(a.task, &a.data, &ckpt.model, &vocab, a.beam, a.max_new_tokens)?;
    let records: Vec<TextRecord> = texts.into_iter().enumerate().map(|(id, text)| TextRecord { id, text }).collect();
    write_jsonl(&a.out, &records)?;
    manifest.outputs.push(a.out.clone());
    manifest.finish(&manifest_path_for(&a.out))?;
    Ok(())
}

/// BLEU over the BPE ids of line lists, encoded the way refinement
/// targets are.
pub fn code_bleu(cands: &[Vec<String>], refs: &[Vec<String>], vocab: &Vocab) -> Result<f64> {
    let c: Vec<Vec<u32>> = cands.iter().map(|l| encode_lines(l, vocab)).collect();
    let r: Vec<Vec<u32>> = refs.iter().map(|l| encode_lines(l, vocab)).collect();
    Ok(bleu4(&c, &r)?)
}
