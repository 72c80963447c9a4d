//! Beam search over any next-token scorer.

use alloc::vec::Vec;
use core::cmp::Ordering;

/// Log-probabilities of every next token given the tokens generated so far.
pub trait StepScorer {
    fn log_probs(&mut self, prefix: &[u32]) -> Vec<f64>;
}

/// Length-normalized hypothesis score (exponent 1.0).
pub fn normalized_score(sum_log_prob: f64, len: usize) -> f64 {
    if len == 0 {
        f64::NEG_INFINITY
    } else {
        sum_log_prob / len as f64
    }
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<u32>,
    score: f64,
}

// higher score first, then the lexicographically smaller sequence
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Keeps the `beam_size` best expansions per step. Expansions ending in
/// `eos` or reaching `max_new` tokens are finished and leave the beam, which
/// then shrinks by one. Returns the finished hypothesis with the best
/// length-normalized score; it ends in `eos` or has `max_new` tokens.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &mut S, eos: u32, beam_size: usize, max_new: usize) -> Vec<u32> {
    let beam_size = beam_size.max(1);
    if max_new == 0 {
        return Vec::new();
    }
    let mut live = alloc::vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for step in 1..=max_new {
        let k = beam_size - finished.len();
        if k == 0 || live.is_empty() {
            break;
        }
        let mut candidates: Vec<Hyp> = Vec::new();
        for hyp in &live {
            let lp = scorer.log_probs(&hyp.tokens);
            // only a beam's own top-k tokens can make the global top-k
            let mut ids: Vec<u32> = (0..lp.len() as u32).collect();
            let by_lp = |a: &u32, b: &u32| lp[*b as usize].total_cmp(&lp[*a as usize]).then(a.cmp(b));
            if ids.len() > k {
                ids.select_nth_unstable_by(k - 1, by_lp);
                ids.truncate(k);
            }
            for id in ids {
                let mut tokens = hyp.tokens.clone();
                tokens.push(id);
                candidates.push(Hyp {
                    tokens,
                    score: hyp.score + lp[id as usize],
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(k);
        live.clear();
        for c in candidates {
            if c.tokens.last() == Some(&eos) || step == max_new {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    finished
        .into_iter()
        .map(|h| {
            let norm = normalized_score(h.score, h.tokens.len());
            (h, norm)
        })
        .min_by(|(a, na), (b, nb)| nb.total_cmp(na).then_with(|| a.tokens.cmp(&b.tokens)))
        .map(|(h, _)| h.tokens)
        .unwrap_or_default()
}

/// Argmax decoding; ties go to the smaller token id.
pub fn greedy_search<S: StepScorer + ?Sized>(scorer: &mut S, eos: u32, max_new: usize) -> Vec<u32> {
    let mut tokens = Vec::new();
    while tokens.len() < max_new {
        let lp = scorer.log_probs(&tokens);
        let best = (0..lp.len())
            .reduce(|a, b| if lp[b] > lp[a] { b } else { a })
            .expect("non-empty vocabulary") as u32;
        tokens.push(best);
        if best == eos {
            break;
        }
    }
    tokens
}
