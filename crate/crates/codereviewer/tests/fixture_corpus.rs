//! Counts over the shipped fixture corpus, frozen from the independent
//! recount in scripts/fixture_oracle.py (seed 7).

use std::collections::BTreeSet;
use std::path::Path;

use codereviewer::corpus::{self, CleanConfig, DropReason, SplitConfig};
use codereviewer::formats::read_config;
use codereviewer::ingest::{load_fixtures, normalize, ReviewRecord};
use codereviewer_core::parse_unified_diff;

const SEED: u64 = 7;

fn fixtures() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures"))
}

fn records() -> Vec<ReviewRecord> {
    let loaded = load_fixtures(&fixtures().join("prs")).unwrap();
    assert!(loaded.skipped.is_empty());
    loaded.records.iter().flat_map(normalize).collect()
}

#[test]
fn fixture_inventory() {
    let loaded = load_fixtures(&fixtures().join("prs")).unwrap();
    assert_eq!(loaded.records.len(), 200);
    let repos: BTreeSet<&str> = loaded.records.iter().map(|p| p.repo.as_str()).collect();
    assert_eq!(repos.len(), 8);
    // the non-UTF-8 byte arrives as a replacement character
    assert!(loaded
        .records
        .iter()
        .flat_map(|p| &p.review_comments)
        .any(|c| c.body.ends_with(" \u{fffd}")));
}

#[test]
fn normalized_records_match_oracle() {
    let recs = records();
    assert_eq!(recs.len(), 663);
    assert_eq!(recs.iter().map(|r| r.comments.len()).sum::<usize>(), 282);
    assert_eq!(recs.iter().filter(|r| r.later_revision.is_some()).count(), 179);
    for r in &recs {
        let reparsed = parse_unified_diff(&r.hunk.to_unified()).unwrap();
        assert_eq!(reparsed.len(), 1);
        assert_eq!(reparsed[0].lines, r.hunk.lines);
        if let Some(rev) = &r.later_revision {
            assert_eq!(rev.reconstruct().old_lines, r.hunk.reconstruct().new_lines);
        }
    }
    // the truncated diff yields nothing
    assert!(recs.iter().all(|r| r.hunk.file_path != "src/broken.py"));
}

#[test]
fn normalize_is_deterministic() {
    assert_eq!(records(), records());
}

#[test]
fn cleaning_matches_oracle() {
    let (cleaned, stats) = corpus::clean_comments(records(), &CleanConfig::default());
    assert_eq!(stats.kept, 254);
    let dropped: Vec<(DropReason, usize)> = stats.dropped.into_iter().collect();
    assert_eq!(
        dropped,
        [
            (DropReason::TooShort, 3),
            (DropReason::Bot, 4),
            (DropReason::UrlOnly, 5),
            (DropReason::NonAscii, 3),
            (DropReason::Duplicate, 13),
        ]
    );
    assert_eq!(cleaned.iter().filter(|r| r.has_comment()).count(), 226);
    assert!(cleaned.iter().flat_map(|r| &r.comments).all(|c| !c.body.trim().is_empty()));
    assert_eq!(corpus::build_comment_dataset(&cleaned).len(), 222);
    let refine = corpus::build_refinement_dataset(&cleaned);
    assert_eq!(refine.len(), 132);
    assert!(refine.iter().all(|s| s.old_code != s.new_code));
}

#[test]
fn splits_match_oracle() {
    let cfg: SplitConfig = read_config(&fixtures().join("split.toml")).unwrap();
    let (cleaned, _) = corpus::clean_comments(records(), &CleanConfig::default());
    let splits = corpus::split_by_project(cleaned, &cfg, SEED).unwrap();
    assert_eq!(splits.dropped, 0);
    // records, positives, comment pairs, refinements, repos
    let expected = [
        ("train", 325, 111, 109, 63, vec!["acme/cache", "acme/parser", "orbit/ledger", "orbit/scheduler"]),
        ("valid", 169, 59, 58, 38, vec!["acme/webui", "orbit/imaging"]),
        ("test", 169, 56, 55, 31, vec!["acme/netkit", "orbit/shell"]),
    ];
    for ((name, part), (want_name, n, pos, pairs, refine, repos)) in splits.parts().into_iter().zip(expected) {
        assert_eq!(name, want_name);
        assert_eq!(part.len(), n, "{name}");
        let q = corpus::build_quality_dataset(part, SEED).unwrap();
        assert_eq!(q.iter().filter(|s| s.label == 1).count(), pos, "{name}");
        assert_eq!(q.iter().filter(|s| s.label == 0).count(), pos, "{name}");
        assert_eq!(corpus::build_comment_dataset(part).len(), pairs, "{name}");
        assert_eq!(corpus::build_refinement_dataset(part).len(), refine, "{name}");
        let got: BTreeSet<&str> = part.iter().map(|r| r.repo.as_str()).collect();
        assert_eq!(got.into_iter().collect::<Vec<_>>(), repos);
    }
}
