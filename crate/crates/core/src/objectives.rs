//! Model inputs and targets for the four pre-training tasks (diff tag
//! prediction, denoising code diff, denoising review comment, review comment
//! generation) and the three downstream tasks, plus their losses.
//!
//! Input layout:
//!
//! ```text
//! hunk:            [CLS] ([KEEP]|[ADD]|[DEL]) line-tokens "\n" ...
//! code + comment:  [CLS] line-tokens "\n" ... [MSG] comment-tokens
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffHunk, LineTag};
use crate::rng::Rng;
use crate::tensor::{log_softmax, Matrix, Scalar};
use crate::tokenizer::{self, Vocab, CLS, EOS, MASK, MSG};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObjectiveError {
    #[error("comment is empty")]
    EmptyComment,
    #[error("comment needs {len} tokens, leaving no room in max_len {max_len}")]
    CommentAloneTooLong { len: usize, max_len: usize },
    #[error("hunk has no lines")]
    EmptyHunk,
    #[error("max_len {0} is too small")]
    MaxLenTooSmall(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LossError {
    #[error("shape mismatch: {rows} logit rows for {labels} labels")]
    ShapeMismatch { rows: usize, labels: usize },
    #[error("empty target")]
    EmptyTarget,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "DTP")]
    Dtp,
    #[serde(rename = "DCD")]
    Dcd,
    #[serde(rename = "DRC")]
    Drc,
    #[serde(rename = "RCG")]
    Rcg,
    QualityCls,
    CommentGen,
    Refinement,
}

impl TaskKind {
    pub const PRETRAIN: [TaskKind; 4] = [TaskKind::Dtp, TaskKind::Dcd, TaskKind::Drc, TaskKind::Rcg];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Dtp => "DTP",
            TaskKind::Dcd => "DCD",
            TaskKind::Drc => "DRC",
            TaskKind::Rcg => "RCG",
            TaskKind::QualityCls => "QualityCls",
            TaskKind::CommentGen => "CommentGen",
            TaskKind::Refinement => "Refinement",
        }
    }

    /// Whether the task is trained through the decoder.
    pub fn is_generation(self) -> bool {
        !matches!(self, TaskKind::Dtp | TaskKind::QualityCls)
    }
}

/// Class of a masked diff tag. The discriminant is the logit column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TagClass {
    #[serde(rename = "KEEP")]
    Keep = 0,
    #[serde(rename = "ADD")]
    Add = 1,
    #[serde(rename = "DEL")]
    Del = 2,
}

impl TagClass {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn token(self) -> u32 {
        match self {
            TagClass::Keep => tokenizer::KEEP,
            TagClass::Add => tokenizer::ADD,
            TagClass::Del => tokenizer::DEL,
        }
    }
}

impl From<LineTag> for TagClass {
    fn from(tag: LineTag) -> Self {
        match tag {
            LineTag::Keep => TagClass::Keep,
            LineTag::Add => TagClass::Add,
            LineTag::Del => TagClass::Del,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub kind: TaskKind,
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub cls_label: Option<u8>,
    pub tag_positions: Option<Vec<(usize, TagClass)>>,
}

impl TaskSample {
    fn generation(kind: TaskKind, input_ids: Vec<u32>, target_ids: Vec<u32>) -> Self {
        Self {
            kind,
            input_ids,
            target_ids,
            cls_label: None,
            tag_positions: None,
        }
    }
}

/// Masking rates and span lengths for the denoising tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    /// Fraction of hunk lines masked in DCD.
    pub line_rate: f64,
    /// Fraction of comment tokens masked in DRC.
    pub span_rate: f64,
    pub min_span: usize,
    pub max_span: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            line_rate: 0.15,
            span_rate: 0.20,
            min_span: 1,
            max_span: 5,
        }
    }
}

// Guards `rate * m` against representation error before rounding up.
const RATE_EPS: f64 = 1e-9;

/// Number of DCD lines masked out of `n`: `max(1, round(rate * n))`.
pub fn masked_line_count(rate: f64, n: usize) -> usize {
    let k = libm::round(rate * n as f64) as usize;
    k.max(1).min(n)
}

/// Number of DRC tokens masked out of `m`: `ceil(rate * m)`.
pub fn masked_token_count(rate: f64, m: usize) -> usize {
    (libm::ceil(rate * m as f64 - RATE_EPS) as usize).min(m)
}

/// BPE ids of each line followed by a newline token.
pub fn encode_lines<S: AsRef<str>>(lines: &[S], vocab: &Vocab) -> Vec<u32> {
    let mut ids = Vec::new();
    for line in lines {
        ids.extend(vocab.encode(line.as_ref()));
        ids.push(Vocab::newline_id());
    }
    ids
}

/// `[CLS]` then, per line, its tag token, content ids and a newline token;
/// truncated to `max_len` keeping the head.
pub fn encode_hunk(hunk: &DiffHunk, vocab: &Vocab, max_len: usize) -> Vec<u32> {
    let mut ids = Vec::with_capacity(max_len.min(64));
    ids.push(CLS);
    for line in &hunk.lines {
        if ids.len() >= max_len {
            break;
        }
        ids.push(TagClass::from(line.tag).token());
        ids.extend(vocab.encode(&line.content));
        ids.push(Vocab::newline_id());
    }
    ids.truncate(max_len);
    ids
}

/// `[CLS] code [MSG] comment`. The comment is always kept whole; the code is
/// truncated to fit.
pub fn encode_code_and_comment<S: AsRef<str>>(
    code_lines: &[S],
    comment: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<u32>, ObjectiveError> {
    if comment.trim().is_empty() {
        return Err(ObjectiveError::EmptyComment);
    }
    let comment_ids = vocab.encode(comment);
    if comment_ids.len() + 2 >= max_len {
        return Err(ObjectiveError::CommentAloneTooLong {
            len: comment_ids.len(),
            max_len,
        });
    }
    let mut code = encode_lines(code_lines, vocab);
    code.truncate(max_len - 2 - comment_ids.len());
    let mut ids = Vec::with_capacity(code.len() + comment_ids.len() + 2);
    ids.push(CLS);
    ids.extend(code);
    ids.push(MSG);
    ids.extend(comment_ids);
    Ok(ids)
}

fn with_eos(mut ids: Vec<u32>, max_len: usize) -> Vec<u32> {
    ids.truncate(max_len.saturating_sub(1));
    ids.push(EOS);
    ids
}

/// Builds [`TaskSample`]s under a shared vocabulary and length budget.
#[derive(Debug, Clone, Copy)]
pub struct SampleBuilder<'v> {
    pub vocab: &'v Vocab,
    pub max_len: usize,
    pub masking: MaskingConfig,
}

impl<'v> SampleBuilder<'v> {
    pub fn new(vocab: &'v Vocab, max_len: usize) -> Self {
        Self {
            vocab,
            max_len,
            masking: MaskingConfig::default(),
        }
    }

    /// Diff tag prediction: every line tag becomes `[MASK]`; the true tags
    /// are recorded against their input positions.
    pub fn make_dtp(&self, hunk: &DiffHunk, _rng: &mut Rng) -> Result<TaskSample, ObjectiveError> {
        if hunk.lines.is_empty() {
            return Err(ObjectiveError::EmptyHunk);
        }
        let mut input = encode_hunk(hunk, self.vocab, self.max_len);
        let mut positions = Vec::new();
        let mut at = 1;
        for line in &hunk.lines {
            if at >= input.len() {
                break;
            }
            positions.push((at, TagClass::from(line.tag)));
            input[at] = MASK;
            at += 2 + self.vocab.encode(&line.content).len();
        }
        Ok(TaskSample {
            kind: TaskKind::Dtp,
            input_ids: input,
            target_ids: Vec::new(),
            cls_label: None,
            tag_positions: Some(positions),
        })
    }

    /// Denoising code diff: `max(1, round(rate·n))` whole lines have their
    /// content replaced by one sentinel each; tags are preserved. Only lines
    /// that fit within `max_len` take part.
    pub fn make_dcd(&self, hunk: &DiffHunk, rng: &mut Rng) -> Result<TaskSample, ObjectiveError> {
        if hunk.lines.is_empty() {
            return Err(ObjectiveError::EmptyHunk);
        }
        if self.max_len < 4 {
            return Err(ObjectiveError::MaxLenTooSmall(self.max_len));
        }
        let encoded: Vec<Vec<u32>> = hunk.lines.iter().map(|l| self.vocab.encode(&l.content)).collect();
        let mut used = 1;
        let mut n = 0;
        for ids in &encoded {
            if used + ids.len() + 2 > self.max_len {
                break;
            }
            used += ids.len() + 2;
            n += 1;
        }
        // a leading line longer than the budget still gets masked
        let n = n.max(1);

        let k = masked_line_count(self.masking.line_rate, n).min(tokenizer::NUM_SENTINELS as usize);
        let mut chosen = index::sample(rng, n, k).into_vec();
        chosen.sort_unstable();

        let mut input = Vec::with_capacity(used);
        let mut target = Vec::new();
        input.push(CLS);
        let mut next = chosen.iter().peekable();
        let mut sentinel_no = 0;
        for (i, line) in hunk.lines.iter().take(n).enumerate() {
            input.push(TagClass::from(line.tag).token());
            if next.peek() == Some(&&i) {
                next.next();
                let s = tokenizer::sentinel(sentinel_no);
                sentinel_no += 1;
                input.push(s);
                target.push(s);
                target.extend_from_slice(&encoded[i]);
            } else {
                input.extend_from_slice(&encoded[i]);
            }
            input.push(Vocab::newline_id());
        }
        input.truncate(self.max_len);
        Ok(TaskSample::generation(TaskKind::Dcd, input, with_eos(target, self.max_len)))
    }

    /// Longest comment (in tokens) DRC will corrupt, so that input fits and
    /// the span count stays within the sentinel budget.
    fn drc_token_budget(&self) -> usize {
        let mut m = self.max_len.saturating_sub(1);
        while m > 0 && masked_token_count(self.masking.span_rate, m) > tokenizer::NUM_SENTINELS as usize {
            m -= 1;
        }
        m
    }

    /// Denoising review comment: spans of uniform length in
    /// `[min_span, max_span]` are drawn at uniform starts, rejecting
    /// overlaps, until exactly `ceil(rate·m)` tokens are covered.
    pub fn make_drc(&self, comment: &str, rng: &mut Rng) -> Result<TaskSample, ObjectiveError> {
        if comment.trim().is_empty() {
            return Err(ObjectiveError::EmptyComment);
        }
        let mut tokens = self.vocab.encode(comment);
        tokens.truncate(self.drc_token_budget());
        let m = tokens.len();
        let budget = masked_token_count(self.masking.span_rate, m);

        let mut covered = alloc::vec![false; m];
        let mut spans: Vec<(usize, usize)> = Vec::new();
        let mut total = 0;
        let mut attempts = 0u32;
        while total < budget {
            let remaining = budget - total;
            attempts += 1;
            let (start, len) = if attempts <= 10_000 {
                let len = rng
                    .random_range(self.masking.min_span..=self.masking.max_span.max(self.masking.min_span))
                    .clamp(1, remaining);
                (rng.random_range(0..=m - len), len)
            } else {
                (covered.iter().position(|&c| !c).expect("free token"), 1)
            };
            if covered[start..start + len].iter().any(|&c| c) {
                continue;
            }
            covered[start..start + len].iter_mut().for_each(|c| *c = true);
            spans.push((start, len));
            total += len;
        }
        spans.sort_unstable();

        let mut input = Vec::with_capacity(m + 1);
        let mut target = Vec::with_capacity(budget + spans.len() + 1);
        input.push(CLS);
        let mut pos = 0;
        for (no, &(start, len)) in spans.iter().enumerate() {
            input.extend_from_slice(&tokens[pos..start]);
            let s = tokenizer::sentinel(no as u32);
            input.push(s);
            target.push(s);
            target.extend_from_slice(&tokens[start..start + len]);
            pos = start + len;
        }
        input.extend_from_slice(&tokens[pos..]);
        target.push(EOS);
        Ok(TaskSample::generation(TaskKind::Drc, input, target))
    }

    /// Review comment generation: the hunk in, the comment out.
    pub fn make_rcg(&self, hunk: &DiffHunk, comment: &str) -> Result<TaskSample, ObjectiveError> {
        let mut sample = self.make_comment_gen(hunk, comment)?;
        sample.kind = TaskKind::Rcg;
        Ok(sample)
    }

    pub fn make_comment_gen(&self, hunk: &DiffHunk, comment: &str) -> Result<TaskSample, ObjectiveError> {
        if hunk.lines.is_empty() {
            return Err(ObjectiveError::EmptyHunk);
        }
        if comment.trim().is_empty() {
            return Err(ObjectiveError::EmptyComment);
        }
        Ok(TaskSample::generation(
            TaskKind::CommentGen,
            encode_hunk(hunk, self.vocab, self.max_len),
            with_eos(self.vocab.encode(comment), self.max_len),
        ))
    }

    pub fn make_quality(&self, hunk: &DiffHunk, label: bool) -> Result<TaskSample, ObjectiveError> {
        if hunk.lines.is_empty() {
            return Err(ObjectiveError::EmptyHunk);
        }
        Ok(TaskSample {
            kind: TaskKind::QualityCls,
            input_ids: encode_hunk(hunk, self.vocab, self.max_len),
            target_ids: Vec::new(),
            cls_label: Some(label as u8),
            tag_positions: None,
        })
    }

    /// Code refinement: old code and comment in, revised code out.
    pub fn make_refinement<S: AsRef<str>>(
        &self,
        old_code: &[S],
        comment: &str,
        new_code: &[S],
    ) -> Result<TaskSample, ObjectiveError> {
        Ok(TaskSample::generation(
            TaskKind::Refinement,
            encode_code_and_comment(old_code, comment, self.vocab, self.max_len)?,
            with_eos(encode_lines(new_code, self.vocab), self.max_len),
        ))
    }
}

/// Joins lines the way refinement targets are encoded, one newline per line.
pub fn join_lines<S: AsRef<str>>(lines: &[S]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    out
}

/// Mean cross-entropy of per-position 3-way tag logits.
pub fn dtp_loss<T: Scalar>(logits: &Matrix<T>, labels: &[TagClass]) -> Result<T, LossError> {
    let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    if logits.cols() != 3 {
        return Err(LossError::ShapeMismatch {
            rows: logits.cols(),
            labels: 3,
        });
    }
    cross_entropy(logits, &idx).map(|(loss, _)| loss)
}

/// Mean token negative log-likelihood under teacher forcing.
pub fn seq_nll_loss<T: Scalar>(step_logits: &Matrix<T>, target_ids: &[u32]) -> Result<T, LossError> {
    let idx: Vec<usize> = target_ids.iter().map(|&t| t as usize).collect();
    cross_entropy(step_logits, &idx).map(|(loss, _)| loss)
}

/// Mean over rows of `-log softmax(row)[label]`, with the gradient of that
/// mean with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>), LossError> {
    if labels.is_empty() {
        return Err(LossError::EmptyTarget);
    }
    if logits.rows() != labels.len() {
        return Err(LossError::ShapeMismatch {
            rows: logits.rows(),
            labels: labels.len(),
        });
    }
    let n = T::of(labels.len() as f64);
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(LossError::LabelOutOfRange {
                label,
                classes: logits.cols(),
            });
        }
        let lp = log_softmax(logits.row(i));
        total = total - lp[label];
        for (g, &l) in grad.row_mut(i).iter_mut().zip(&lp) {
            *g = l.exp() / n;
        }
        let g = grad.get(i, label);
        grad.set(i, label, g - T::one() / n);
    }
    Ok((total / n, grad))
}

/// Binary cross-entropy on a single logit, with its derivative.
pub fn binary_cross_entropy<T: Scalar>(logit: T, label: bool) -> (T, T) {
    // -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
    let softplus = |x: T| if x > T::zero() { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    let p = sigmoid(logit);
    if label {
        (softplus(-logit), p - T::one())
    } else {
        (softplus(logit), p)
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
