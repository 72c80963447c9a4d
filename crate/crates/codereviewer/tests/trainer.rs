mod common;

use std::collections::BTreeMap;

use codereviewer::trainer::{
    finetune_classification, finetune_generation, pretrain, refinement_samples, CheckpointKind, LogEntry, NoSink,
    TrainConfig, TrainError, TrainSink,
};
use codereviewer_core::model::{init_model, Checkpoint};
use codereviewer_core::objectives::{encode_hunk, TaskKind};
use codereviewer_core::metrics::classification_metrics;
use common::*;

fn tiny_config(vocab: &codereviewer_core::Vocab, steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        eval_every: 10,
        ..train_config(model_config(vocab, 16, 1), steps)
    }
}

/// Keeps every periodic checkpoint and the streamed log.
#[derive(Default)]
struct Recorder {
    periodic: Vec<Checkpoint<f32>>,
    best: usize,
    steps: Vec<LogEntry>,
    evals: Vec<(u64, f64)>,
}

impl TrainSink for Recorder {
    fn on_step(&mut self, entry: &LogEntry) -> Result<(), TrainError> {
        self.steps.push(entry.clone());
        Ok(())
    }
    fn on_checkpoint(&mut self, ckpt: &Checkpoint<f32>, kind: CheckpointKind) -> Result<(), TrainError> {
        match kind {
            CheckpointKind::Periodic => self.periodic.push(ckpt.clone()),
            CheckpointKind::Best => self.best += 1,
        }
        Ok(())
    }
    fn on_eval(&mut self, step: u64, metric: f64) -> Result<(), TrainError> {
        self.evals.push((step, metric));
        Ok(())
    }
}

#[test]
fn same_seed_same_run() {
    let items = toy_corpus();
    let vocab = toy_vocab(&items, 400);
    let cfg = tiny_config(&vocab, 20);
    let init = || init_model(&cfg.model, cfg.seed).unwrap();
    let a = pretrain(&items, &vocab, init(), &cfg, &mut NoSink).unwrap();
    let b = pretrain(&items, &vocab, init(), &cfg, &mut NoSink).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.last, b.last);
    assert_eq!(a.log.len(), 20);
    assert!(a.log.iter().all(|e| e.loss.is_finite() && e.loss >= 0.0));
    assert_eq!(a.last.vocab_fingerprint, vocab.fingerprint());

    let other = pretrain(&items, &vocab, init(), &TrainConfig { seed: 2, ..cfg.clone() }, &mut NoSink).unwrap();
    assert_ne!(a.log, other.log);
}

#[test]
fn single_task_mix_draws_only_that_task() {
    let items = toy_corpus();
    let vocab = toy_vocab(&items, 400);
    let cfg = TrainConfig {
        task_mix: BTreeMap::from([(TaskKind::Dtp, 1.0), (TaskKind::Rcg, 0.0)]),
        ..tiny_config(&vocab, 12)
    };
    let out = pretrain(&items, &vocab, init_model(&cfg.model, 0).unwrap(), &cfg, &mut NoSink).unwrap();
    assert!(out.log.iter().all(|e| e.task == TaskKind::Dtp));
}

#[test]
fn joint_mix_visits_every_task() {
    let items = toy_corpus();
    let vocab = toy_vocab(&items, 400);
    let cfg = tiny_config(&vocab, 60);
    let out = pretrain(&items, &vocab, init_model(&cfg.model, 0).unwrap(), &cfg, &mut NoSink).unwrap();
    for kind in TaskKind::PRETRAIN {
        assert!(out.log.iter().any(|e| e.task == kind), "{kind:?} never drawn");
    }
}

#[test]
fn resume_retraces_the_uninterrupted_run() {
    let items = toy_corpus();
    let vocab = toy_vocab(&items, 400);
    let cfg = tiny_config(&vocab, 20);
    let mut rec = Recorder::default();
    let full = pretrain(&items, &vocab, init_model(&cfg.model, 3).unwrap(), &cfg, &mut rec).unwrap();
    assert_eq!(rec.periodic.iter().map(|c| c.step).collect::<Vec<_>>(), [10, 20]);
    assert_eq!(rec.steps, full.log);

    let midway = rec.periodic[0].clone();
    assert!(midway.optimizer.is_some());
    let resumed = pretrain(&items, &vocab, midway, &cfg, &mut NoSink).unwrap();
    assert_eq!(resumed.log, full.log[10..]);
    assert_eq!(resumed.last, full.last);
}

#[test]
fn schedule_is_logged() {
    let items = toy_corpus();
    let vocab = toy_vocab(&items, 400);
    let cfg = TrainConfig {
        warmup_steps: 4,
        ..tiny_config(&vocab, 8)
    };
    let out = pretrain(&items, &vocab, init_model(&cfg.model, 0).unwrap(), &cfg, &mut NoSink).unwrap();
    let lrs: Vec<f64> = out.log.iter().map(|e| e.lr / cfg.lr).collect();
    let want = [0.25, 0.5, 0.75, 1.0, 0.75, 0.5, 0.25, 0.0];
    for (g, w) in lrs.iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "{lrs:?}");
    }
}

#[test]
fn classification_leaves_the_decoder_untouched_and_keeps_the_best() {
    let items = toy_corpus();
    let vocab = toy_vocab(&items, 400);
    let cfg = tiny_config(&vocab, 40);
    let init = init_model(&cfg.model, 4).unwrap();
    let data = toy_quality(&items);
    let (train, valid) = data.split_at(20);
    let mut rec = Recorder::default();
    let out = finetune_classification(train, valid, &vocab, &init, &cfg, &mut rec).unwrap();

    let before = init.model.params();
    let after = out.last.model.params();
    let decoder = init.model.decoder_param_indices();
    assert!(!decoder.is_empty());
    for &i in &decoder {
        assert_eq!(before.get(i), after.get(i), "{} moved", before.entry(i).name);
    }
    assert!((0..before.len()).any(|i| before.get(i) != after.get(i)));

    assert_eq!(rec.evals.iter().map(|e| e.0).collect::<Vec<_>>(), [10, 20, 30, 40]);
    let (best, metric) = out.best.as_ref().unwrap();
    let top = rec.evals.iter().map(|e| e.1).fold(f64::MIN, f64::max);
    assert_eq!(*metric, top);
    assert!(rec.best >= 1);
    let f1 = |m: &Checkpoint<f32>| {
        let preds: Vec<u8> = valid
            .iter()
            .map(|s| u8::from(m.model.classify(&encode_hunk(&s.hunk, &vocab, 96)).unwrap() >= 0.5))
            .collect();
        let labels: Vec<u8> = valid.iter().map(|s| s.label).collect();
        classification_metrics(&preds, &labels).unwrap().f1
    };
    assert!(f1(best) >= f1(&out.last));
    assert_eq!(out.selected(), best);
}

#[test]
fn generation_keeps_the_lowest_validation_loss() {
    let items = toy_corpus();
    let vocab = toy_vocab(&items, 400);
    let cfg = tiny_config(&vocab, 30);
    let init = init_model(&cfg.model, 5).unwrap();
    let samples = refinement_samples(&toy_refinement(&items, 12), &vocab, 96).unwrap();
    let (train, valid) = samples.split_at(8);
    let mut rec = Recorder::default();
    let out = finetune_generation(train.to_vec(), valid, &vocab, &init, &cfg, &mut rec).unwrap();
    assert!(out.log.iter().all(|e| e.task == TaskKind::Refinement));
    let (best, metric) = out.best.as_ref().unwrap();
    let mean_loss: f64 = valid.iter().map(|s| f64::from(best.model.loss(s).unwrap())).sum::<f64>() / valid.len() as f64;
    assert!((-mean_loss - metric).abs() < 1e-9);
    assert!(rec.evals.iter().all(|e| e.1 <= *metric));
}

#[test]
fn bad_inputs_are_rejected() {
    let items = toy_corpus();
    let vocab = toy_vocab(&items, 400);
    let cfg = tiny_config(&vocab, 5);
    let init = init_model(&cfg.model, 0).unwrap();
    assert!(matches!(
        finetune_classification(&[], &[], &vocab, &init, &cfg, &mut NoSink),
        Err(TrainError::EmptyDataset)
    ));
    assert!(matches!(
        pretrain(&[], &vocab, init.clone(), &cfg, &mut NoSink),
        Err(TrainError::EmptyCorpus)
    ));
    let zero = TrainConfig {
        batch_size: 0,
        ..cfg.clone()
    };
    assert!(matches!(
        pretrain(&items, &vocab, init.clone(), &zero, &mut NoSink),
        Err(TrainError::InvalidConfig(_))
    ));
    let other_vocab = toy_vocab(&items, 380);
    let mut stamped = init.clone();
    stamped.vocab_fingerprint = vocab.fingerprint();
    assert!(matches!(
        finetune_classification(&toy_quality(&items), &[], &other_vocab, &stamped, &cfg, &mut NoSink),
        Err(TrainError::VocabMismatch { .. })
    ));
}
