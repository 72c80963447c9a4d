//! Dataset builders: comment cleaning, the three downstream datasets, the
//! pre-training set and the project-level split.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use codereviewer_core::fingerprint::Fnv1a;
use codereviewer_core::rng;
use codereviewer_core::DiffHunk;
use log::warn;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::ReviewRecord;

/// Bumped whenever a cleaning or building rule changes meaning.
pub const RULE_VERSION: &str = "corpus-rules-1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("no commented changes to build positives from")]
    NoPositives,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("projects listed for both training and evaluation: {0:?}")]
    OverlappingProjects(Vec<String>),
    #[error("valid fraction {0} outside [0, 1]")]
    InvalidFraction(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub min_words: usize,
    pub max_words: usize,
    pub bot_suffixes: Vec<String>,
    pub max_non_ascii_ratio: f64,
    pub dedupe_per_repo: bool,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            min_words: 3,
            max_words: 200,
            bot_suffixes: vec!["[bot]".into(), "-bot".into()],
            max_non_ascii_ratio: 0.5,
            dedupe_per_repo: true,
        }
    }
}

/// Why a comment was removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    TooShort,
    TooLong,
    Bot,
    UrlOnly,
    NonAscii,
    Duplicate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanStats {
    pub kept: usize,
    pub dropped: BTreeMap<DropReason, usize>,
}

fn is_url_only(body: &str) -> bool {
    let mut words = body.split_whitespace();
    matches!((words.next(), words.next()), (Some(w), None) if w.starts_with("http://") || w.starts_with("https://"))
}

fn non_ascii_ratio(body: &str) -> f64 {
    let total = body.chars().count();
    if total == 0 {
        return 0.0;
    }
    body.chars().filter(|c| !c.is_ascii()).count() as f64 / total as f64
}

/// The first rule (other than duplication) that rejects a comment.
pub fn reject_reason(body: &str, author: &str, cfg: &CleanConfig) -> Option<DropReason> {
    let words = body.split_whitespace().count();
    if cfg.bot_suffixes.iter().any(|s| author.ends_with(s.as_str())) {
        Some(DropReason::Bot)
    } else if is_url_only(body) {
        Some(DropReason::UrlOnly)
    } else if words < cfg.min_words {
        Some(DropReason::TooShort)
    } else if words > cfg.max_words {
        Some(DropReason::TooLong)
    } else if non_ascii_ratio(body) > cfg.max_non_ascii_ratio {
        Some(DropReason::NonAscii)
    } else {
        None
    }
}

/// Drops unusable comments in input order. A body counts as a duplicate when
/// an earlier surviving comment of the same repo has the same text. Records
/// keep their hunk even when every comment is dropped.
pub fn clean_comments(mut records: Vec<ReviewRecord>, cfg: &CleanConfig) -> (Vec<ReviewRecord>, CleanStats) {
    let mut stats = CleanStats::default();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for rec in &mut records {
        let repo = rec.repo.clone();
        rec.comments.retain(|c| {
            let reason = reject_reason(&c.body, &c.author, cfg).or_else(|| {
                (cfg.dedupe_per_repo && !seen.insert((repo.clone(), c.body.clone()))).then_some(DropReason::Duplicate)
            });
            match reason {
                Some(r) => {
                    *stats.dropped.entry(r).or_default() += 1;
                    false
                }
                None => {
                    stats.kept += 1;
                    true
                }
            }
        });
    }
    (records, stats)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualitySample {
    pub hunk: DiffHunk,
    /// 1 when the change drew a review comment.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentGenSample {
    pub hunk: DiffHunk,
    pub target_comment: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementSample {
    pub old_code: Vec<String>,
    pub comment: String,
    pub new_code: Vec<String>,
}

/// A hunk for the diff objectives, with a comment for the comment
/// objectives when one survived cleaning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainItem {
    pub hunk: DiffHunk,
    pub comment: Option<String>,
}

fn sort_key(r: &ReviewRecord) -> (&str, u64, &str, &str, usize, usize) {
    (
        &r.repo,
        r.pr_number,
        &r.commit_sha,
        &r.hunk.file_path,
        r.hunk.old_start,
        r.hunk.new_start,
    )
}

fn sorted(records: &[ReviewRecord]) -> Vec<&ReviewRecord> {
    let mut v: Vec<&ReviewRecord> = records.iter().collect();
    v.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
    v
}

/// Commented hunks are positives. Uncommented hunks are down-sampled to the
/// positive count (never up-sampled) and the result is shuffled.
pub fn build_quality_dataset(records: &[ReviewRecord], seed: u64) -> Result<Vec<QualitySample>, CorpusError> {
    let (pos, neg): (Vec<&ReviewRecord>, Vec<&ReviewRecord>) =
        sorted(records).into_iter().partition(|r| r.has_comment());
    if pos.is_empty() {
        return Err(CorpusError::NoPositives);
    }
    let neg: Vec<&ReviewRecord> = if neg.len() > pos.len() {
        let mut picked = index::sample(&mut rng::stream(seed, 0), neg.len(), pos.len()).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| neg[i]).collect()
    } else {
        neg
    };
    let mut out: Vec<QualitySample> = pos
        .iter()
        .map(|r| (r, 1))
        .chain(neg.iter().map(|r| (r, 0)))
        .map(|(r, label)| QualitySample {
            hunk: r.hunk.clone(),
            label,
        })
        .collect();
    out.shuffle(&mut rng::stream(seed, 1));
    Ok(out)
}

/// One (hunk, comment) pair per commented hunk: comments by the change's
/// author are ignored and the earliest remaining one is kept, ties going to
/// the smaller body.
pub fn build_comment_dataset(records: &[ReviewRecord]) -> Vec<CommentGenSample> {
    sorted(records)
        .into_iter()
        .filter_map(|r| {
            let c = r
                .comments
                .iter()
                .filter(|c| c.author != r.pr_author)
                .min_by(|a, b| (a.created_at, &a.body).cmp(&(b.created_at, &b.body)))?;
            Some(CommentGenSample {
                hunk: r.hunk.clone(),
                target_comment: c.body.clone(),
            })
        })
        .collect()
}

/// (C1, comment, C2) triplets where exactly one comment maps to exactly one
/// revision and the revision changed something.
pub fn build_refinement_dataset(records: &[ReviewRecord]) -> Vec<RefinementSample> {
    sorted(records)
        .into_iter()
        .filter(|r| r.comments.len() == 1 && r.revision_link_count == 1)
        .filter_map(|r| {
            let pair = r.later_revision.as_ref()?.reconstruct();
            (pair.old_lines != pair.new_lines).then(|| RefinementSample {
                old_code: pair.old_lines,
                comment: r.comments[0].body.clone(),
                new_code: pair.new_lines,
            })
        })
        .collect()
}

/// Every hunk, paired with its earliest surviving comment if any.
pub fn build_pretrain_set(records: &[ReviewRecord]) -> Vec<PretrainItem> {
    sorted(records)
        .into_iter()
        .map(|r| PretrainItem {
            hunk: r.hunk.clone(),
            comment: r
                .comments
                .iter()
                .min_by(|a, b| (a.created_at, &a.body).cmp(&(b.created_at, &b.body)))
                .map(|c| c.body.clone()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_projects: BTreeSet<String>,
    pub eval_projects: BTreeSet<String>,
    #[serde(default = "default_valid_fraction")]
    pub valid_fraction: f64,
}

fn default_valid_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<ReviewRecord>,
    pub valid: Vec<ReviewRecord>,
    pub test: Vec<ReviewRecord>,
    pub dropped: usize,
}

impl Splits {
    pub fn parts(&self) -> [(&'static str, &[ReviewRecord]); 3] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)]
    }
}

/// Assigns each evaluation project wholly to valid or test. Projects are
/// ranked by a seeded hash of their name and the first
/// round(fraction * n) go to valid, clamped so both sides get a project
/// whenever there are at least two.
pub fn eval_assignment(eval: &BTreeSet<String>, valid_fraction: f64, seed: u64) -> BTreeSet<String> {
    let mut ranked: Vec<(u64, &String)> = eval
        .iter()
        .map(|name| {
            let mut h = Fnv1a::new();
            h.write_u64(seed);
            h.write(name.as_bytes());
            (h.finish(), name)
        })
        .collect();
    ranked.sort();
    let n = ranked.len();
    let mut n_valid = (valid_fraction * n as f64).round() as usize;
    if n >= 2 {
        n_valid = n_valid.clamp(1, n - 1);
    }
    ranked.into_iter().take(n_valid).map(|(_, name)| name.clone()).collect()
}

pub fn split_by_project(records: Vec<ReviewRecord>, cfg: &SplitConfig, seed: u64) -> Result<Splits, CorpusError> {
    let overlap: Vec<String> = cfg.train_projects.intersection(&cfg.eval_projects).cloned().collect();
    if !overlap.is_empty() {
        return Err(CorpusError::OverlappingProjects(overlap));
    }
    if !(0.0..=1.0).contains(&cfg.valid_fraction) {
        return Err(CorpusError::InvalidFraction(cfg.valid_fraction.to_string()));
    }
    let valid_projects = eval_assignment(&cfg.eval_projects, cfg.valid_fraction, seed);
    let mut splits = Splits::default();
    let mut unknown: BTreeSet<String> = BTreeSet::new();
    for r in records {
        if cfg.train_projects.contains(&r.repo) {
            splits.train.push(r);
        } else if valid_projects.contains(&r.repo) {
            splits.valid.push(r);
        } else if cfg.eval_projects.contains(&r.repo) {
            splits.test.push(r);
        } else {
            splits.dropped += 1;
            unknown.insert(r.repo);
        }
    }
    for repo in &unknown {
        warn!("dropping records of {repo}: not in any split");
    }
    for (name, part) in splits.parts() {
        if part.is_empty() {
            return Err(CorpusError::EmptySplit(name));
        }
    }
    Ok(splits)
}
