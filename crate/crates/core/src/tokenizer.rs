//! Byte-level BPE with a fixed block of reserved special ids.
//!
//! Ids `0..108` are specials (`[PAD]`, `[CLS]`, `[EOS]`, `[MASK]`, `[ADD]`,
//! `[DEL]`, `[KEEP]`, `[MSG]` and 100 sentinels). Ids `108..364` are the 256
//! raw bytes; learned merges follow.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Reverse;

use thiserror::Error;

use crate::fingerprint::Fnv1a;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const ADD: u32 = 4;
pub const DEL: u32 = 5;
pub const KEEP: u32 = 6;
pub const MSG: u32 = 7;
pub const FIRST_SENTINEL: u32 = 8;
pub const NUM_SENTINELS: u32 = 100;
pub const NUM_SPECIALS: u32 = FIRST_SENTINEL + NUM_SENTINELS;
/// Id of byte `0x00`; byte `b` is `BYTE_OFFSET + b`.
pub const BYTE_OFFSET: u32 = NUM_SPECIALS;
pub const MIN_VOCAB_SIZE: usize = (NUM_SPECIALS + 256) as usize;

const NAMED_SPECIALS: [&str; 8] = ["PAD", "CLS", "EOS", "MASK", "ADD", "DEL", "KEEP", "MSG"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenizerError {
    #[error("vocab size {requested} is below the minimum of {MIN_VOCAB_SIZE}")]
    VocabTooSmall { requested: usize },
    #[error("token id {id} out of range for vocab of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

/// Sentinel token number `i` (0-based).
pub fn sentinel(i: u32) -> u32 {
    assert!(i < NUM_SENTINELS, "sentinel index {i} out of range");
    FIRST_SENTINEL + i
}

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIALS
}

pub fn is_sentinel(id: u32) -> bool {
    (FIRST_SENTINEL..NUM_SPECIALS).contains(&id)
}

/// Name of a special id without brackets, e.g. `CLS` or `SENTINEL_4`.
pub fn special_name(id: u32) -> Option<String> {
    match id {
        0..=7 => Some(String::from(NAMED_SPECIALS[id as usize])),
        id if is_sentinel(id) => Some(format!("SENTINEL_{}", id - FIRST_SENTINEL)),
        _ => None,
    }
}

/// All specials as `(name, id)` pairs in id order.
pub fn specials() -> impl Iterator<Item = (String, u32)> {
    (0..NUM_SPECIALS).map(|id| (special_name(id).expect("special"), id))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    /// Byte strings for every non-special id, starting at [`BYTE_OFFSET`].
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: BTreeMap<(u32, u32), (u32, u32)>,
}

impl Vocab {
    /// A vocabulary with no merges: specials plus the 256 bytes.
    pub fn bytes_only() -> Self {
        Self::from_parts(base_tokens(), Vec::new()).expect("valid base vocab")
    }

    /// Rebuilds a vocabulary from its serialized parts, checking the
    /// invariants: byte coverage, no duplicate tokens, every merge result
    /// present.
    pub fn from_parts(tokens: Vec<Vec<u8>>, merges: Vec<(u32, u32)>) -> Result<Self, TokenizerError> {
        let invalid = |msg: String| Err(TokenizerError::InvalidVocab(msg));
        if tokens.len() < 256 {
            return invalid(format!("only {} non-special tokens", tokens.len()));
        }
        for (b, tok) in tokens.iter().take(256).enumerate() {
            if tok.as_slice() != [b as u8] {
                return invalid(format!("token {} is not byte {b:#04x}", b as u32 + BYTE_OFFSET));
            }
        }
        let mut by_bytes = BTreeMap::new();
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return invalid(format!("empty token at id {}", i as u32 + BYTE_OFFSET));
            }
            if by_bytes.insert(tok.as_slice(), i as u32 + BYTE_OFFSET).is_some() {
                return invalid(format!("duplicate token at id {}", i as u32 + BYTE_OFFSET));
            }
        }
        let size = tokens.len() as u32 + BYTE_OFFSET;
        let mut ranks = BTreeMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            if a < BYTE_OFFSET || b < BYTE_OFFSET || a >= size || b >= size {
                return invalid(format!("merge {rank} references id outside the byte-level range"));
            }
            let mut joined = tokens[(a - BYTE_OFFSET) as usize].clone();
            joined.extend_from_slice(&tokens[(b - BYTE_OFFSET) as usize]);
            let Some(&result) = by_bytes.get(joined.as_slice()) else {
                return invalid(format!("result of merge {rank} missing from tokens"));
            };
            if ranks.insert((a, b), (rank as u32, result)).is_some() {
                return invalid(format!("merge {rank} repeats an earlier pair"));
            }
        }
        Ok(Self { tokens, merges, ranks })
    }

    /// Total number of ids, specials included.
    pub fn len(&self) -> usize {
        self.tokens.len() + NUM_SPECIALS as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Byte-level tokens, indexed by `id - BYTE_OFFSET`.
    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        id.checked_sub(BYTE_OFFSET)
            .and_then(|i| self.tokens.get(i as usize))
            .map(Vec::as_slice)
    }

    /// Id of the single-byte token `b`.
    pub fn byte_id(b: u8) -> u32 {
        BYTE_OFFSET + b as u32
    }

    pub fn newline_id() -> u32 {
        Self::byte_id(b'\n')
    }

    /// Stable 64-bit fingerprint of tokens and merges.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.tokens.len() as u64);
        for tok in &self.tokens {
            h.write_u64(tok.len() as u64);
            h.write(tok);
        }
        for &(a, b) in &self.merges {
            h.write_u64(((a as u64) << 32) | b as u64);
        }
        h.finish()
    }

    /// Byte-level BPE encoding. Never emits a special id.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text.bytes().map(Self::byte_id).collect();
        if self.merges.is_empty() {
            return ids;
        }
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, result)| (rank, w[0], w[1], result)))
                .min();
            let Some((_, a, b, result)) = best else { break };
            ids = merge_pair(&ids, a, b, result);
        }
        ids
    }

    /// Concatenates token bytes. Specials render as bracketed names; invalid
    /// UTF-8 (possible for arbitrary id sequences) is replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            if is_special(id) {
                bytes.push(b'[');
                bytes.extend_from_slice(special_name(id).expect("special").as_bytes());
                bytes.push(b']');
            } else {
                let tok = self.token_bytes(id).ok_or(TokenizerError::IdOutOfRange { id, size: self.len() })?;
                bytes.extend_from_slice(tok);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

fn base_tokens() -> Vec<Vec<u8>> {
    (0..=255u8).map(|b| alloc::vec![b]).collect()
}

fn merge_pair(ids: &[u32], a: u32, b: u32, result: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
            out.push(result);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Candidate {
    count: u64,
    // smaller byte strings win ties
    key: Reverse<(Vec<u8>, Vec<u8>)>,
    pair: (u32, u32),
}

/// Trains a vocabulary by repeatedly merging the most frequent adjacent pair
/// (ties broken by the lexicographically smallest pair of byte strings)
/// until `vocab_size` ids exist or no pair occurs at least twice.
pub fn train_bpe<I, S>(corpus: I, vocab_size: usize) -> Result<Vocab, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if vocab_size < MIN_VOCAB_SIZE {
        return Err(TokenizerError::VocabTooSmall { requested: vocab_size });
    }
    let mut word_counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    let mut seen_any = false;
    for s in corpus {
        seen_any = true;
        let s = s.as_ref();
        if !s.is_empty() {
            *word_counts.entry(s.as_bytes().to_vec()).or_default() += 1;
        }
    }
    if !seen_any {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut words: Vec<Vec<u32>> = Vec::with_capacity(word_counts.len());
    let mut freqs: Vec<u64> = Vec::with_capacity(word_counts.len());
    for (w, c) in word_counts {
        words.push(w.into_iter().map(Vocab::byte_id).collect());
        freqs.push(c);
    }

    let mut tokens = base_tokens();
    let mut by_bytes: BTreeMap<Vec<u8>, u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32 + BYTE_OFFSET))
        .collect();
    let mut merges = Vec::new();

    let mut pair_counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut locations: BTreeMap<(u32, u32), BTreeSet<usize>> = BTreeMap::new();
    for (wi, word) in words.iter().enumerate() {
        for w in word.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_default() += freqs[wi];
            locations.entry((w[0], w[1])).or_default().insert(wi);
        }
    }

    let token_of = |tokens: &Vec<Vec<u8>>, id: u32| tokens[(id - BYTE_OFFSET) as usize].clone();
    let candidate = |tokens: &Vec<Vec<u8>>, pair: (u32, u32), count: u64| Candidate {
        count,
        key: Reverse((token_of(tokens, pair.0), token_of(tokens, pair.1))),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&pair, &count)| candidate(&tokens, pair, count))
        .collect();

    while tokens.len() + (NUM_SPECIALS as usize) < vocab_size {
        let Some(top) = heap.pop() else { break };
        let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count {
            continue; // stale entry
        }
        if current < 2 {
            break;
        }
        let (a, b) = top.pair;
        let mut joined = token_of(&tokens, a);
        joined.extend_from_slice(&tokens[(b - BYTE_OFFSET) as usize]);
        let result = match by_bytes.get(&joined) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32 + BYTE_OFFSET;
                by_bytes.insert(joined.clone(), id);
                tokens.push(joined);
                id
            }
        };
        merges.push((a, b));

        let affected = locations.remove(&(a, b)).unwrap_or_default();
        let mut touched: BTreeSet<(u32, u32)> = BTreeSet::new();
        for wi in affected {
            let freq = freqs[wi];
            let old = &words[wi];
            if !old.windows(2).any(|w| w[0] == a && w[1] == b) {
                continue;
            }
            for w in old.windows(2) {
                let p = (w[0], w[1]);
                let c = pair_counts.get_mut(&p).expect("counted pair");
                *c -= freq;
                touched.insert(p);
            }
            let new = merge_pair(old, a, b, result);
            for w in new.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.entry(p).or_default() += freq;
                locations.entry(p).or_default().insert(wi);
                touched.insert(p);
            }
            words[wi] = new;
        }
        for p in touched {
            let count = pair_counts.get(&p).copied().unwrap_or(0);
            if count == 0 {
                pair_counts.remove(&p);
            } else {
                heap.push(candidate(&tokens, p, count));
            }
        }
        pair_counts.remove(&(a, b));
    }

    Vocab::from_parts(tokens, merges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn rejects_small_vocab() {
        assert_eq!(
            train_bpe(["abc"], 300),
            Err(TokenizerError::VocabTooSmall { requested: 300 })
        );
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert_eq!(train_bpe(Vec::<&str>::new(), 400), Err(TokenizerError::EmptyCorpus));
    }

    #[test]
    fn first_merge_is_only_candidate() {
        let vocab = train_bpe(["aaaa"], 366).unwrap();
        let a = Vocab::byte_id(b'a');
        assert_eq!(vocab.merges()[0], (a, a));
        // (aa, aa) occurs once only
        assert_eq!(vocab.merges().len(), 1);
        assert_eq!(vocab.encode("aaaa"), vec![MIN_VOCAB_SIZE as u32; 2]);
    }

    #[test]
    fn no_repeated_pair_means_no_merges() {
        let vocab = train_bpe(["abcdef", "ghij"], 1000).unwrap();
        assert!(vocab.merges().is_empty());
        assert_eq!(vocab.len(), MIN_VOCAB_SIZE);
        assert_eq!(vocab, Vocab::bytes_only());
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" both occur twice; "ab" sorts first
        let vocab = train_bpe(["ab cd", "cd ab"], 365).unwrap();
        assert_eq!(vocab.merges(), [(Vocab::byte_id(b'a'), Vocab::byte_id(b'b'))]);
    }

    #[test]
    fn stops_at_vocab_size() {
        let vocab = train_bpe(["the quick brown fox jumps over the lazy dog"; 3], 370).unwrap();
        assert_eq!(vocab.len(), 370);
    }

    #[test]
    fn encode_decode_basics() {
        let vocab = train_bpe(["fn main() { println!(\"hi\"); }"; 4], 400).unwrap();
        assert!(vocab.encode("").is_empty());
        assert_eq!(vocab.decode(&[]).unwrap(), "");
        assert_eq!(vocab.decode(&[CLS]).unwrap(), "[CLS]");
        assert_eq!(vocab.decode(&[sentinel(3)]).unwrap(), "[SENTINEL_3]");
        let s = "fn main() { println!(\"héllo\"); }";
        let ids = vocab.encode(s);
        assert!(ids.iter().all(|&id| id >= NUM_SPECIALS));
        assert!(ids.len() < s.len());
        assert_eq!(vocab.decode(&ids).unwrap(), s);
        assert_eq!(
            vocab.decode(&[vocab.len() as u32]),
            Err(TokenizerError::IdOutOfRange { id: vocab.len() as u32, size: vocab.len() })
        );
    }

    #[test]
    fn from_parts_validates() {
        let vocab = train_bpe(["abab abab"], 370).unwrap();
        let rebuilt = Vocab::from_parts(vocab.tokens().to_vec(), vocab.merges().to_vec()).unwrap();
        assert_eq!(rebuilt, vocab);
        assert_eq!(rebuilt.fingerprint(), vocab.fingerprint());

        let mut dup = vocab.tokens().to_vec();
        dup.push(b"a".to_vec());
        assert!(Vocab::from_parts(dup, vec![]).is_err());
        let missing = vec![(Vocab::byte_id(b'x'), Vocab::byte_id(b'y'))];
        assert!(Vocab::from_parts(base_tokens(), missing).is_err());
        assert!(Vocab::from_parts(base_tokens(), vec![(CLS, Vocab::byte_id(b'y'))]).is_err());
    }

    #[test]
    fn special_names() {
        let names: Vec<_> = specials().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 108);
        assert_eq!(names[7], "MSG");
        assert_eq!(names[107], "SENTINEL_99".to_string());
    }
}
