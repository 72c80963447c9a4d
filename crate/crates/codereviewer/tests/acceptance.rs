//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so that the report prints in order and
//! in full; `cargo test --test acceptance` executes it.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use codereviewer::cli::code_bleu;
use codereviewer::corpus::{self, CleanConfig, SplitConfig, Splits};
use codereviewer::ingest::{self, ReviewRecord};
use codereviewer::trainer::{finetune_classification, finetune_generation, pretrain, refinement_samples, NoSink};
use codereviewer_core::metrics::{bleu4, exact_match, naive_copy};
use codereviewer_core::model::{beam_search, greedy_search, init_model, Gradients, ModelConfig, StepScorer, Transformer};
use codereviewer_core::objectives::{
    cross_entropy, dtp_loss, encode_hunk, join_lines, seq_nll_loss, SampleBuilder, TagClass, TaskKind, TaskSample,
};
use codereviewer_core::tensor::Matrix;
use codereviewer_core::tokenizer::{is_sentinel, EOS, PAD};
use codereviewer_core::{compute_diff, rng, DiffHunk, LineTag, TaggedLine, Vocab};
use common::*;
use rand::Rng as _;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail())
    }
}

fn fixture_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures"))
}

fn fixture_records() -> Vec<ReviewRecord> {
    let loaded = ingest::load_fixtures(&fixture_dir().join("prs")).expect("fixtures load");
    loaded.records.iter().flat_map(ingest::normalize).collect()
}

fn fixture_splits(seed: u64) -> Splits {
    let cfg: SplitConfig = codereviewer::formats::read_config(&fixture_dir().join("split.toml")).unwrap();
    let (records, _) = corpus::clean_comments(fixture_records(), &CleanConfig::default());
    corpus::split_by_project(records, &cfg, seed).unwrap()
}

fn random_lines(r: &mut rng::Rng) -> Vec<String> {
    let n = r.random_range(0..40);
    (0..n)
        .map(|_| {
            let len = r.random_range(0..4);
            (0..len).map(|_| ['a', 'b', 'c', ' '][r.random_range(0..4)]).collect()
        })
        .collect()
}

fn diff_round_trip() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(2024, 1);
    let mut passed = 0;
    for _ in 0..1000 {
        let (a, b) = (random_lines(&mut r), random_lines(&mut r));
        let pair = compute_diff(&a, &b).map(|h| h.reconstruct());
        if pair.is_ok_and(|p| p.old_lines == a && p.new_lines == b) {
            passed += 1;
        }
    }
    let took = start.elapsed();
    check(
        passed == 1000 && took < Duration::from_secs(5),
        format!("1000/1000 pairs in {took:.2?}"),
        || format!("{passed}/1000 pairs in {took:.2?}"),
    )
}

fn random_text(r: &mut rng::Rng) -> String {
    let n = r.random_range(0..60);
    (0..n)
        .map(|_| match r.random_range(0..4) {
            0 => char::from(r.random_range(0x20u8..0x7f)),
            1 => ['\n', '\t', ' ', '\r'][r.random_range(0..4)],
            2 => char::from_u32(r.random_range(0x80..0x800)).unwrap_or('é'),
            _ => char::from_u32(r.random_range(0x800..0x11_0000)).unwrap_or('\u{1F600}'),
        })
        .collect()
}

fn tokenizer_lossless() -> Outcome {
    let records = fixture_records();
    let prs = ingest::load_fixtures(&fixture_dir().join("prs")).unwrap().records;
    let mut texts: Vec<String> = prs
        .iter()
        .flat_map(|pr| {
            let diffs = pr.commits.iter().flat_map(|c| c.files.iter().map(|f| f.unified_diff.clone()));
            diffs.chain(pr.review_comments.iter().map(|c| c.body.clone())).collect::<Vec<_>>()
        })
        .collect();
    texts.extend(records.iter().flat_map(|r| r.hunk.lines.iter().map(|l| l.content.clone())));
    let vocab = codereviewer_core::train_bpe(texts.iter(), 2000).map_err(|e| e.to_string())?;
    let mut r = rng::stream(2024, 2);
    texts.extend((0..1000).map(|_| random_text(&mut r)));
    let failed = texts
        .iter()
        .filter(|s| vocab.decode(&vocab.encode(s)).ok().as_deref() != Some(s.as_str()))
        .count();
    check(failed == 0, format!("{} strings, vocabulary {}", texts.len(), vocab.len()), || {
        format!("{failed}/{} strings differ", texts.len())
    })
}

fn masking_rates() -> Outcome {
    let vocab = Vocab::bytes_only();
    let b = SampleBuilder::new(&vocab, 512);
    let comment = "please rename this variable to something clearer!!";
    if vocab.encode(comment).len() != 50 {
        return Err("comment is not 50 tokens".into());
    }
    let mut total = 0.0;
    for id in 0..10_000 {
        let s = b.make_drc(comment, &mut rng::stream(11, id)).map_err(|e| e.to_string())?;
        let masked = s.target_ids.iter().filter(|&&t| !is_sentinel(t) && t != EOS).count();
        total += masked as f64 / 50.0;
    }
    let mean = total / 10_000.0;

    let tags = [LineTag::Keep, LineTag::Add, LineTag::Del];
    let lines = (0..20).map(|i| TaggedLine::new(tags[i % 3], format!("x{i} = {i}"))).collect();
    let hunk = DiffHunk::from_lines(1, 1, lines, "a.py");
    let mut off = 0;
    for id in 0..10_000 {
        let s = b.make_dcd(&hunk, &mut rng::stream(12, id)).map_err(|e| e.to_string())?;
        if s.input_ids.iter().filter(|&&t| is_sentinel(t)).count() != 3 {
            off += 1;
        }
    }
    check(
        (mean - 0.20).abs() <= 0.015 && off == 0,
        format!("DRC mean {:.2}%, DCD 3 of 20 lines in 10000/10000", mean * 100.0),
        || format!("DRC mean {:.2}%, DCD wrong count {off} times", mean * 100.0),
    )
}

fn loss_oracles() -> Outcome {
    let labels = [TagClass::Keep, TagClass::Add, TagClass::Del, TagClass::Del, TagClass::Keep];
    let dtp = dtp_loss(&Matrix::<f64>::zeros(5, 3), &labels).map_err(|e| e.to_string())?;
    let v = 8000;
    let nll = seq_nll_loss(&Matrix::<f64>::zeros(4, v), &[300, 301, 302, EOS]).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut r = rng::stream(2024, 4);
    for _ in 0..500 {
        let (rows, cols) = (r.random_range(1..10), r.random_range(2..50));
        let data: Vec<f64> = (0..rows * cols).map(|_| r.random_range(-8.0..8.0)).collect();
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..cols)).collect();
        let mut want = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &data[i * cols..(i + 1) * cols];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            want -= (row[l].exp() / z).ln();
        }
        want /= rows as f64;
        let (got, _) = cross_entropy(&Matrix::from_vec(rows, cols, data), &labels).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
    }
    let (e1, e2) = ((dtp - 3f64.ln()).abs(), (nll - (v as f64).ln()).abs());
    check(
        e1 < 1e-6 && e2 < 1e-6 && worst < 1e-9,
        format!("|DTP - ln 3| {e1:.1e}, |NLL - ln V| {e2:.1e}, random worst {worst:.1e}"),
        || format!("|DTP - ln 3| {e1:.1e}, |NLL - ln V| {e2:.1e}, random worst {worst:.1e}"),
    )
}

fn gradient_check() -> Outcome {
    const H: f64 = 1e-5;
    let start = Instant::now();
    let cfg = ModelConfig {
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_heads: 4,
        d_model: 32,
        d_ff: 64,
        vocab_size: 364,
        max_len: 16,
        dropout: 0.0,
    };
    let vocab = Vocab::bytes_only();
    let b = SampleBuilder::new(&vocab, 16);
    let hunk = compute_diff(&["ab", "c"], &["ab", "d"]).unwrap();
    let mut gen = b.make_comment_gen(&hunk, "fix").unwrap();
    gen.input_ids.extend([PAD, PAD]);
    let samples = vec![
        b.make_dtp(&hunk, &mut rng::stream(0, 0)).unwrap(),
        gen,
        b.make_quality(&hunk, true).unwrap(),
    ];
    let total = |m: &Transformer<f64>| samples.iter().map(|s| m.loss(s).unwrap()).sum::<f64>();
    let mut model = Transformer::<f64>::init(&cfg, 5).map_err(|e| e.to_string())?;
    let mut analytic = Gradients::zeros_like(model.params());
    for s in &samples {
        analytic.add_assign(&model.loss_and_grads(s, None).map_err(|e| e.to_string())?.1);
    }
    let (mut worst, mut at, mut n) = (0.0f64, String::new(), 0usize);
    for t in 0..model.params().len() {
        for j in 0..model.params().get(t).len() {
            let orig = model.params().get(t).as_slice()[j];
            model.params_mut().get_mut(t).as_mut_slice()[j] = orig + H;
            let up = total(&model);
            model.params_mut().get_mut(t).as_mut_slice()[j] = orig - H;
            let down = total(&model);
            model.params_mut().get_mut(t).as_mut_slice()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.tensors[t].as_slice()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if err > worst {
                worst = err;
                at = format!("{}[{j}]", model.params().entry(t).name);
            }
            n += 1;
        }
    }
    let took = start.elapsed();
    check(
        worst < 1e-3 && took < Duration::from_secs(120),
        format!("{n} scalars, max relative error {worst:.1e} at {at}, {took:.1?}"),
        || format!("{n} scalars, max relative error {worst:.1e} at {at}, {took:.1?}"),
    )
}

fn overfit_suite() -> Outcome {
    let start = Instant::now();
    let items = toy_corpus();
    let vocab = toy_vocab(&items, 600);
    let model = model_config(&vocab, 64, 2);
    let cfg = train_config(model.clone(), 500);
    let pre = pretrain(&items, &vocab, init_model(&model, 1).unwrap(), &cfg, &mut NoSink).map_err(|e| e.to_string())?;
    let mut drops = Vec::new();
    for kind in TaskKind::PRETRAIN {
        let losses: Vec<f64> = pre.log.iter().filter(|e| e.task == kind).map(|e| e.loss).collect();
        if losses.len() < 20 {
            return Err(format!("{} drawn only {} times", kind.name(), losses.len()));
        }
        let first = losses[..10].iter().sum::<f64>() / 10.0;
        let last = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        drops.push((kind.name(), 1.0 - last / first));
    }

    let quality = toy_quality(&items);
    let ccfg = codereviewer::trainer::TrainConfig {
        total_steps: 200,
        warmup_steps: 20,
        lr: 1e-3,
        ..cfg.clone()
    };
    let cls = finetune_classification(&quality, &quality, &vocab, &pre.last, &ccfg, &mut NoSink)
        .map_err(|e| e.to_string())?;
    let m = &cls.selected().model;
    let correct = quality
        .iter()
        .filter(|s| m.classify(&encode_hunk(&s.hunk, &vocab, 96)).is_ok_and(|p| u8::from(p >= 0.5) == s.label))
        .count();

    let train = refinement_samples(&toy_refinement(&items, 8), &vocab, 96).map_err(|e| e.to_string())?;
    let rcfg = codereviewer::trainer::TrainConfig {
        total_steps: 300,
        ..ccfg.clone()
    };
    let gen = finetune_generation(train.clone(), &train, &vocab, &pre.last, &rcfg, &mut NoSink)
        .map_err(|e| e.to_string())?;
    let m = &gen.selected().model;
    let em = train
        .iter()
        .filter(|s| m.generate_beam(&s.input_ids, 1, 64).is_ok_and(|out| out == s.target_ids))
        .count();
    let em = em as f64 / train.len() as f64;

    let took = start.elapsed();
    let detail = format!(
        "loss drop {}; classifier {correct}/{}; refinement EM {:.0}%; {took:.0?}",
        drops.iter().map(|(k, d)| format!("{k} {:.1}%", d * 100.0)).collect::<Vec<_>>().join(", "),
        quality.len(),
        em * 100.0
    );
    let ok = drops.iter().all(|(_, d)| *d >= 0.9)
        && correct == quality.len()
        && em >= 0.9
        && took < Duration::from_secs(15 * 60);
    check(ok, detail.clone(), || detail)
}

fn naive_copy_baseline() -> Outcome {
    let vocab = Vocab::bytes_only();
    let mut parts = Vec::new();
    for seed in [0, 7, 99] {
        let splits = fixture_splits(seed);
        for (name, records) in splits.parts() {
            let data = corpus::build_refinement_dataset(records);
            if data.is_empty() {
                return Err(format!("seed {seed} {name}: no refinement samples"));
            }
            let olds: Vec<String> = data.iter().map(|s| join_lines(&s.old_code)).collect();
            let refs: Vec<String> = data.iter().map(|s| join_lines(&s.new_code)).collect();
            let em = exact_match(&naive_copy(&olds), &refs).map_err(|e| e.to_string())?;
            let old_lines: Vec<Vec<String>> = data.iter().map(|s| s.old_code.clone()).collect();
            let new_lines: Vec<Vec<String>> = data.iter().map(|s| s.new_code.clone()).collect();
            let bleu = code_bleu(&old_lines, &new_lines, &vocab).map_err(|e| e.to_string())?;
            parts.push((seed, name, data.len(), em, bleu));
        }
    }
    let detail = parts
        .iter()
        .filter(|p| p.0 == 7)
        .map(|(_, n, len, em, bleu)| format!("{n}: n={len} EM {em:.2} BLEU {bleu:.2}"))
        .collect::<Vec<_>>()
        .join("; ");
    check(parts.iter().all(|p| p.3 == 0.0 && p.4 > 0.0), detail.clone(), || detail)
}

/// Counts each distinct candidate n-gram once, clipped by scanning both
/// sequences; add-one smoothing for orders with no match.
fn oracle_bleu(cands: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    let count = |seq: &[u32], g: &[u32]| seq.windows(g.len()).filter(|w| *w == g).count();
    let (mut matches, mut totals) = ([0usize; 4], [0usize; 4]);
    for (c, r) in cands.iter().zip(refs) {
        for n in 1..=4 {
            if c.len() < n {
                continue;
            }
            totals[n - 1] += c.len() - n + 1;
            for (i, g) in c.windows(n).enumerate() {
                if !c.windows(n).take(i).any(|w| w == g) {
                    matches[n - 1] += count(c, g).min(count(r, g));
                }
            }
        }
    }
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let r_len: usize = refs.iter().map(Vec::len).sum();
    if c_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|n| {
            if matches[n] > 0 {
                (matches[n] as f64 / totals[n] as f64).ln()
            } else {
                (1.0 / (totals[n] as f64 + 1.0)).ln()
            }
        })
        .sum();
    let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    100.0 * bp * (log_p / 4.0).exp()
}

fn bleu_oracle() -> Outcome {
    let mut r = rng::stream(2024, 8);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..50 {
        let reference: Vec<u32> = (0..r.random_range(1..30)).map(|_| r.random_range(0..10)).collect();
        let mut cand = Vec::new();
        for &t in &reference {
            if r.random_bool(0.85) {
                cand.push(if r.random_bool(0.1) { r.random_range(0..10) } else { t });
            }
        }
        cands.push(cand);
        refs.push(reference);
    }
    let got = bleu4(&cands, &refs).map_err(|e| e.to_string())?;
    let want = oracle_bleu(&cands, &refs);
    let same = bleu4(&refs, &refs).map_err(|e| e.to_string())?;
    let ok = (got - want).abs() < 1e-9 && (same - 100.0).abs() < 1e-9;
    let detail = format!("corpus BLEU {got:.6} vs oracle {want:.6}, BLEU(x,x) {same}");
    check(ok, detail.clone(), || detail)
}

fn jsonl<T: serde::Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).unwrap();
        out.push(b'\n');
    }
    out
}

fn build_all(seed: u64) -> Result<Vec<(String, Vec<u8>, usize, usize)>, String> {
    let splits = fixture_splits(seed);
    let mut out = Vec::new();
    for (name, records) in splits.parts() {
        let q = corpus::build_quality_dataset(records, seed).map_err(|e| e.to_string())?;
        let pos = q.iter().filter(|s| s.label == 1).count();
        out.push((format!("quality.{name}"), jsonl(&q), pos, q.len() - pos));
        out.push((format!("comment.{name}"), jsonl(&corpus::build_comment_dataset(records)), 0, 0));
        out.push((format!("refine.{name}"), jsonl(&corpus::build_refinement_dataset(records)), 0, 0));
        out.push((format!("pretrain.{name}"), jsonl(&corpus::build_pretrain_set(records)), 0, 0));
    }
    Ok(out)
}

fn dataset_properties() -> Outcome {
    let mut notes = Vec::new();
    for seed in [7, 11] {
        let a = build_all(seed)?;
        let b = build_all(seed)?;
        if a != b {
            return Err(format!("seed {seed}: rebuild differs"));
        }
        for (name, _, pos, neg) in a.iter().filter(|x| x.0.starts_with("quality")) {
            if pos.abs_diff(*neg) > 1 {
                return Err(format!("seed {seed} {name}: {pos} positives vs {neg} negatives"));
            }
            if seed == 7 {
                notes.push(format!("{name} {pos}/{neg}"));
            }
        }
        let splits = fixture_splits(seed);
        let repos: Vec<BTreeSet<&str>> = splits
            .parts()
            .iter()
            .map(|(_, rs)| rs.iter().map(|r| r.repo.as_str()).collect())
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                if !repos[i].is_disjoint(&repos[j]) {
                    return Err(format!("seed {seed}: splits {i} and {j} share a repository"));
                }
            }
        }
    }
    Ok(format!("balanced ({}), repos disjoint, rebuilds byte-identical", notes.join(", ")))
}

struct Fixed(fn(&[u32]) -> [f64; 5]);

impl StepScorer for Fixed {
    fn log_probs(&mut self, prefix: &[u32]) -> Vec<f64> {
        let row = (self.0)(prefix);
        let z = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        row.iter().map(|x| x - z).collect()
    }
}

// Token 1 is the greedy pick but leads to weak continuations.
fn garden_path(prefix: &[u32]) -> [f64; 5] {
    match prefix {
        [] => [-1.0, 2.0, 1.6, 0.5, 0.0],
        [1] => [0.0, 0.1, 0.0, 0.1, 0.0],
        [2] => [-2.0, 0.0, 0.0, 3.0, 0.0],
        [2, 3] => [4.0, 0.0, 0.0, 0.0, 0.0],
        _ => [0.5, 0.0, 0.0, 0.0, 0.2],
    }
}

/// Best sequence of at most `max_len` tokens by mean log-probability over
/// every sequence that ends in token 0 or reaches the length limit.
fn exhaustive(m: &mut Fixed, max_len: usize) -> Vec<u32> {
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        let lp = m.log_probs(&prefix);
        for t in 0..5u32 {
            let mut seq = prefix.clone();
            seq.push(t);
            let s = score + lp[t as usize];
            if t == 0 || seq.len() == max_len {
                let norm = s / seq.len() as f64;
                if best.as_ref().is_none_or(|(b, bs)| norm > *bs || (norm == *bs && seq < *b)) {
                    best = Some((seq, norm));
                }
            } else {
                stack.push((seq, s));
            }
        }
    }
    best.unwrap().0
}

fn beam_search_checks() -> Outcome {
    let cfg = ModelConfig {
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        vocab_size: 364,
        max_len: 128,
        dropout: 0.0,
    };
    let model = Transformer::<f32>::init(&cfg, 21).map_err(|e| e.to_string())?;
    let vocab = Vocab::bytes_only();
    let b = SampleBuilder::new(&vocab, 128);
    let data = corpus::build_refinement_dataset(fixture_splits(7).parts()[2].1);
    let inputs: Vec<TaskSample> = data
        .iter()
        .take(20)
        .map(|s| b.make_refinement(&s.old_code, &s.comment, &s.new_code))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    if inputs.len() < 20 {
        return Err(format!("only {} fixture inputs", inputs.len()));
    }
    let mut same = 0;
    for s in &inputs {
        let beam = model.generate_beam(&s.input_ids, 1, 16).map_err(|e| e.to_string())?;
        if beam == model.generate_greedy(&s.input_ids, 16).map_err(|e| e.to_string())? {
            same += 1;
        }
    }
    let mut m = Fixed(garden_path);
    let best = exhaustive(&mut m, 3);
    let beam3 = beam_search(&mut m, 0, 3, 3);
    let greedy = greedy_search(&mut m, 0, 3);
    let detail = format!("beam 1 = greedy on {same}/20; beam 3 {beam3:?}, exhaustive {best:?}, greedy {greedy:?}");
    check(same == 20 && beam3 == best, detail.clone(), || detail)
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("diff round trip", diff_round_trip),
        ("tokenizer losslessness", tokenizer_lossless),
        ("masking rates", masking_rates),
        ("loss oracles", loss_oracles),
        ("gradient check", gradient_check),
        ("overfit suite", overfit_suite),
        ("naive copy baseline", naive_copy_baseline),
        ("BLEU oracle", bleu_oracle),
        ("dataset properties", dataset_properties),
        ("beam search", beam_search_checks),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|x| *x == n.to_string() || name.contains(x.as_str())) {
            continue;
        }
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("criterion {n:>2} {name:<24} PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} {name:<24} FAIL  {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
