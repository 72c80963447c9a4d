//! Core algorithms for code-review automation: unified-diff hunks, a
//! byte-level BPE tokenizer, the pre-training and fine-tuning sample
//! builders with their losses, a compact encoder-decoder transformer with
//! reverse-mode gradients and beam search, the optimizer and learning-rate
//! schedule, and evaluation metrics.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod diff;
pub mod fingerprint;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tokenizer;

pub use diff::{compute_diff, parse_unified_diff, CodePair, DiffError, DiffHunk, LineTag, TaggedLine};
pub use tokenizer::{train_bpe, TokenizerError, Vocab};
