//! A small synthetic review corpus shared by the training tests.

#![allow(dead_code)]

use codereviewer::corpus::{PretrainItem, QualitySample, RefinementSample};
use codereviewer::trainer::TrainConfig;
use codereviewer_core::model::ModelConfig;
use codereviewer_core::{compute_diff, train_bpe, Vocab};

const NAMES: [&str; 8] = ["count", "total", "index", "value", "buffer", "result", "offset", "limit"];
const VERBS: [&str; 4] = ["rename", "inline", "document", "check"];

/// 32 four-line function edits, each with a comment naming the new variable.
pub fn toy_corpus() -> Vec<PretrainItem> {
    (0..32)
        .map(|i| {
            let a = NAMES[i % 8];
            let b = NAMES[(i / 8 + i + 1) % 8];
            let old = [format!("fn f{i}() {{"), format!("    let {a} = {i};"), format!("    {a} + 1"), "}".into()];
            let new = [format!("fn f{i}() {{"), format!("    let {b} = {};", i * 3), format!("    {b} + 1"), "}".into()];
            PretrainItem {
                hunk: compute_diff(&old, &new).unwrap(),
                comment: Some(format!("please {} {b} in f{i}", VERBS[i % 4])),
            }
        })
        .collect()
}

pub fn toy_vocab(items: &[PretrainItem], size: usize) -> Vocab {
    let texts: Vec<String> = items
        .iter()
        .flat_map(|it| it.hunk.lines.iter().map(|l| l.content.clone()).chain(it.comment.clone()))
        .collect();
    train_bpe(texts.iter(), size).unwrap()
}

/// Labels every third hunk as needing a comment.
pub fn toy_quality(items: &[PretrainItem]) -> Vec<QualitySample> {
    items
        .iter()
        .enumerate()
        .map(|(i, it)| QualitySample {
            hunk: it.hunk.clone(),
            label: u8::from(i % 3 == 0),
        })
        .collect()
}

pub fn toy_refinement(items: &[PretrainItem], n: usize) -> Vec<RefinementSample> {
    items
        .iter()
        .take(n)
        .map(|it| {
            let pair = it.hunk.reconstruct();
            RefinementSample {
                old_code: pair.old_lines,
                comment: it.comment.clone().unwrap(),
                new_code: pair.new_lines,
            }
        })
        .collect()
}

pub fn model_config(vocab: &Vocab, d_model: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        n_enc_layers: layers,
        n_dec_layers: layers,
        n_heads: 4,
        d_model,
        d_ff: 2 * d_model,
        vocab_size: vocab.len(),
        max_len: 96,
        dropout: 0.0,
    }
}

pub fn train_config(model: ModelConfig, total_steps: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 8,
        warmup_steps: total_steps / 16,
        total_steps,
        seed: 1,
        eval_every: 1000,
        max_len: 96,
        model,
        ..TrainConfig::default()
    }
}
