#![allow(dead_code)]

pub mod strategies;

use std::path::PathBuf;

use sopbench_core::grounding::{canonicalize, GroundingConfig};
use sopbench_core::ingest::{parse_corpus_str, ParseOptions};
use sopbench_core::{build_pipeline, CanonicalAction, Episode, RuleSet, SopPipeline};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn load_episode(name: &str) -> Episode {
    let src = std::fs::read_to_string(fixture_path(name)).expect("fixture exists");
    let mut parsed = parse_corpus_str(&src, ParseOptions::default()).expect("fixture parses");
    parsed.corpus.episodes.remove(0)
}

pub fn amazon() -> Episode {
    load_episode("amazon_headphones.jsonl")
}

pub fn aitw() -> RuleSet {
    RuleSet::bundled("aitw").unwrap()
}

pub fn gold_actions(e: &Episode) -> Vec<CanonicalAction> {
    let cfg = GroundingConfig::default();
    e.steps.iter().map(|s| canonicalize(&s.action, &s.screen, &cfg).action).collect()
}

pub fn annotate(e: &Episode, rules: &RuleSet) -> (Vec<CanonicalAction>, SopPipeline) {
    let gold = gold_actions(e);
    let p = build_pipeline(e, &gold, rules).expect("pipeline");
    (gold, p)
}

pub const AMAZON_PIPELINE: [&str; 5] = [
    "search on the website",
    "view and click page content",
    "type 'best rated headphones'",
    "view and click page content",
    "task complete",
];
