//! Classification metrics, corpus BLEU-4, exact match and the copy baseline.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::TaskKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("length mismatch: {left} predictions vs {right} references")]
    LengthMismatch { left: usize, right: usize },
    #[error("no samples")]
    Empty,
}

fn same_len(left: usize, right: usize) -> Result<(), MetricError> {
    if left != right {
        return Err(MetricError::LengthMismatch { left, right });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub metrics: BTreeMap<String, f64>,
    pub n_samples: usize,
    pub config_fingerprint: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1 with class 1 as the positive class.
pub fn classification_metrics(preds: &[u8], labels: &[u8]) -> Result<ClassificationMetrics, MetricError> {
    same_len(preds.len(), labels.len())?;
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0, 0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        let (p, l) = (p == 1, l == 1);
        correct += usize::from(p == l);
        tp += usize::from(p && l);
        fp += usize::from(p && !l);
        fn_ += usize::from(!p && l);
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassificationMetrics {
        accuracy: ratio(correct, preds.len()),
        precision,
        recall,
        f1,
    })
}

/// Lowercased whitespace tokens, as used for BLEU over review comments.
pub fn comment_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Clipped n-gram matches and candidate n-gram total for one pair.
fn ngram_stats<T: Ord>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    if candidate.len() < n {
        return (0, 0);
    }
    let mut counts: BTreeMap<&[T], (usize, usize)> = BTreeMap::new();
    for g in candidate.windows(n) {
        counts.entry(g).or_default().0 += 1;
    }
    if reference.len() >= n {
        for g in reference.windows(n) {
            if let Some(c) = counts.get_mut(g) {
                c.1 += 1;
            }
        }
    }
    let matches = counts.values().map(|&(c, r)| c.min(r)).sum();
    (matches, candidate.len() - n + 1)
}

/// Corpus-level BLEU-4 in `[0, 100]`: clipped n-gram precisions for n = 1..4,
/// uniform geometric mean, brevity penalty. A zero match count at n ≥ 2 is
/// smoothed to `1 / (total + 1)`.
pub fn bleu4<T: Ord>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64, MetricError> {
    same_len(candidates.len(), references.len())?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let (m, t) = ngram_stats(c, r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if c_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let p = if matches[n] == 0 {
            1.0 / (totals[n] + 1) as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p += libm::log(p) / 4.0;
    }
    let bp = if c_len >= r_len {
        1.0
    } else {
        libm::exp(1.0 - r_len as f64 / c_len as f64)
    };
    Ok(100.0 * bp * libm::exp(log_p))
}

/// Trailing whitespace removed from every line, trailing blank lines dropped.
pub fn normalize_for_match(text: &str) -> String {
    let mut lines: Vec<&str> = text.lines().map(str::trim_end).collect();
    while lines.last() == Some(&"") {
        lines.pop();
    }
    lines.join("\n")
}

/// Fraction of candidates equal to their reference after normalization.
pub fn exact_match<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<f64, MetricError> {
    same_len(candidates.len(), references.len())?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let hits = candidates
        .iter()
        .zip(references)
        .filter(|(c, r)| normalize_for_match(c.as_ref()) == normalize_for_match(r.as_ref()))
        .count();
    Ok(hits as f64 / candidates.len() as f64)
}

/// Baseline that predicts the old code unchanged.
pub fn naive_copy<S: AsRef<str>>(old_codes: &[S]) -> Vec<String> {
    old_codes.iter().map(|s| String::from(s.as_ref())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn confusion_matrix_example() {
        let m = classification_metrics(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall), (0.75, 0.5, 1.0));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        let all = classification_metrics(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((all.accuracy, all.precision, all.recall, all.f1), (1.0, 1.0, 1.0, 1.0));
        let neg = classification_metrics(&[0, 0, 0], &[1, 0, 1]).unwrap();
        assert_eq!((neg.precision, neg.recall, neg.f1), (0.0, 0.0, 0.0));
        assert_eq!(classification_metrics(&[], &[]), Err(MetricError::Empty));
        assert!(matches!(classification_metrics(&[1], &[1, 0]), Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn bleu_edges() {
        let a = vec![comment_tokens("Please rename this Variable now")];
        assert_eq!(bleu4(&a, &a).unwrap(), 100.0);
        let empty: Vec<Vec<String>> = vec![vec![]];
        assert_eq!(bleu4(&empty, &a).unwrap(), 0.0);
        assert!(bleu4(&a, &[]).is_err());
    }

    #[test]
    fn bleu_short_candidate_is_penalized() {
        let r = vec![vec![1u32, 2, 3, 4, 5, 6, 7, 8]];
        let c = vec![vec![1u32, 2, 3, 4]];
        let b = bleu4(&c, &r).unwrap();
        assert!((b - 100.0 * libm::exp(1.0 - 2.0)).abs() < 1e-9);
    }

    #[test]
    fn exact_match_normalizes_trailing_space() {
        assert_eq!(exact_match(&["a  \nb\n\n"], &["a\nb"]).unwrap(), 1.0);
        assert_eq!(exact_match(&["a\nc"], &["a\nb"]).unwrap(), 0.0);
        assert_eq!(naive_copy(&["x = 1"]), vec![String::from("x = 1")]);
    }
}
