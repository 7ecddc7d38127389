//! Line-delimited episode corpora: parsing, writing, manifests, splits and sampling.
//!
//! One JSON record per line:
//!
//! ```text
//! {"episode_id": str, "subset": str, "instruction": str,
//!  "steps": [{"screen": {"elements": [{"id", "text", "ui_type", "bbox": [x0,y0,x1,y1]}]},
//!             "action": {"type", "touch": [x,y], "lift": [x,y], "typed_text"?}}]}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{validate_episode, Episode, RawAction, Step, UiElement};
use crate::Error;

/// Canonical subset names, in report column order.
pub const SUBSETS: [&str; 5] = ["general", "install", "google_apps", "single", "web_shopping"];

/// Display name for a subset (`google_apps` -> `GoogleApps`). Unknown names pass through.
pub fn subset_display_name(subset: &str) -> String {
    match subset {
        "general" => "General".into(),
        "install" => "Install".into(),
        "google_apps" => "GoogleApps".into(),
        "single" => "Single".into(),
        "web_shopping" => "WebShopping".into(),
        other => other.into(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScreenRecord {
    elements: Vec<UiElement>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRecord {
    screen: ScreenRecord,
    action: RawAction,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeRecord {
    episode_id: String,
    subset: String,
    instruction: String,
    steps: Vec<StepRecord>,
}

impl From<EpisodeRecord> for Episode {
    fn from(r: EpisodeRecord) -> Self {
        let steps = r
            .steps
            .into_iter()
            .enumerate()
            .map(|(index, s)| Step { index, screen: reindex(s.screen.elements), action: s.action })
            .collect();
        Episode { episode_id: r.episode_id, subset: r.subset, instruction: r.instruction, steps }
    }
}

/// Renumbers element ids to `0..n` (ordered by original id) unless they already are.
fn reindex(mut elements: Vec<UiElement>) -> Vec<UiElement> {
    if elements.iter().enumerate().all(|(i, e)| e.id as usize == i) {
        return elements;
    }
    elements.sort_by_key(|e| e.id);
    for (i, e) in elements.iter_mut().enumerate() {
        e.id = i as u32;
    }
    elements
}

fn to_record(e: &Episode) -> EpisodeRecord {
    EpisodeRecord {
        episode_id: e.episode_id.clone(),
        subset: e.subset.clone(),
        instruction: e.instruction.clone(),
        steps: e
            .steps
            .iter()
            .map(|s| StepRecord { screen: ScreenRecord { elements: s.screen.clone() }, action: s.action.clone() })
            .collect(),
    }
}

/// Serializes one episode as a single record line (no trailing newline).
pub fn episode_to_line(e: &Episode) -> String {
    serde_json::to_string(&to_record(e)).expect("episode records serialize")
}

/// Parses and validates a single record line.
pub fn episode_from_line(line: &str) -> Result<Episode, Error> {
    let rec: EpisodeRecord = serde_json::from_str(line).map_err(|e| Error::Parse { line: 0, reason: e.to_string() })?;
    let ep = Episode::from(rec);
    let findings = validate_episode(&ep);
    if findings.is_empty() {
        Ok(ep)
    } else {
        Err(Error::Validation { episode_id: ep.episode_id, findings })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub episodes: usize,
    pub screens: usize,
    pub instructions: usize,
}

/// Per-subset counts. Instructions counts distinct instruction strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub subsets: BTreeMap<String, SubsetCounts>,
}

impl Manifest {
    pub fn compute(episodes: &[Episode]) -> Self {
        let mut subsets: BTreeMap<String, SubsetCounts> = BTreeMap::new();
        let mut instructions: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for e in episodes {
            let c = subsets.entry(e.subset.clone()).or_default();
            c.episodes += 1;
            c.screens += e.steps.len();
            instructions.entry(&e.subset).or_default().insert(&e.instruction);
        }
        for (subset, set) in instructions {
            subsets.get_mut(subset).expect("subset counted").instructions = set.len();
        }
        Self { subsets }
    }

    pub fn total_episodes(&self) -> usize {
        self.subsets.values().map(|c| c.episodes).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub episodes: Vec<Episode>,
    pub manifest: Manifest,
}

impl Corpus {
    pub fn new(episodes: Vec<Episode>) -> Self {
        let manifest = Manifest::compute(&episodes);
        Self { episodes, manifest }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// True when the stored manifest matches a recount.
    pub fn manifest_consistent(&self) -> bool {
        self.manifest == Manifest::compute(&self.episodes)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Skip and log bad records instead of aborting.
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedRecord {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct ParsedCorpus {
    pub corpus: Corpus,
    pub skipped: Vec<SkippedRecord>,
}

const CHUNK_LINES: usize = 4096;

/// Streams records from `source`, parsing each chunk of lines in parallel. Episodes keep
/// input order. Blank lines are ignored.
pub fn parse_corpus<R: BufRead>(source: R, opts: ParseOptions) -> Result<ParsedCorpus, Error> {
    let mut episodes = Vec::new();
    let mut skipped = Vec::new();
    let mut chunk: Vec<(usize, String)> = Vec::with_capacity(CHUNK_LINES);
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        chunk.push((i + 1, line));
        if chunk.len() == CHUNK_LINES {
            parse_chunk(&mut chunk, opts, &mut episodes, &mut skipped)?;
        }
    }
    parse_chunk(&mut chunk, opts, &mut episodes, &mut skipped)?;
    Ok(ParsedCorpus { corpus: Corpus::new(episodes), skipped })
}

fn parse_chunk(
    chunk: &mut Vec<(usize, String)>,
    opts: ParseOptions,
    episodes: &mut Vec<Episode>,
    skipped: &mut Vec<SkippedRecord>,
) -> Result<(), Error> {
    let results: Vec<(usize, Result<Episode, Error>)> = chunk
        .par_iter()
        .map(|(n, line)| {
            let r = episode_from_line(line).map_err(|e| match e {
                Error::Parse { reason, .. } => Error::Parse { line: *n, reason },
                other => other,
            });
            (*n, r)
        })
        .collect();
    chunk.clear();
    for (n, r) in results {
        match r {
            Ok(e) => episodes.push(e),
            Err(e) if opts.lenient => {
                warn!("skipping record on line {n}: {e}");
                skipped.push(SkippedRecord { line: n, reason: e.to_string() });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Parses a whole corpus held in memory.
pub fn parse_corpus_str(src: &str, opts: ParseOptions) -> Result<ParsedCorpus, Error> {
    parse_corpus(src.as_bytes(), opts)
}

pub fn write_corpus<W: Write>(c: &Corpus, mut w: W) -> Result<(), Error> {
    for e in &c.episodes {
        writeln!(w, "{}", episode_to_line(e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn corpus_to_string(c: &Corpus) -> String {
    let mut buf = Vec::new();
    write_corpus(c, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

/// Split sizes by largest remainder; each is within one episode of `n * fraction`.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| n as f64 * f).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n.saturating_sub(sizes.iter().sum());
    for i in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    [sizes[0], sizes[1], sizes[2]]
}

/// Episode-wise train/val/test split. Deterministic for a given seed; each split keeps
/// the corpus' original episode order.
pub fn split_corpus(c: &Corpus, fractions: [f64; 3], seed: u64) -> Result<Splits, Error> {
    if fractions.iter().any(|f| !f.is_finite() || *f <= 0.0) {
        return Err(Error::InvalidFractions(format!("{fractions:?} must all be positive")));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(format!("{fractions:?} sum to {sum}, not 1")));
    }
    if c.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sizes = split_sizes(c.len(), fractions);
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (a, rest) = order.split_at(sizes[0]);
    let (b, d) = rest.split_at(sizes[1]);
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Corpus::new(idx.into_iter().map(|i| c.episodes[i].clone()).collect())
    };
    Ok(Splits { train: take(a), val: take(b), test: take(d) })
}

/// Keeps a seeded random `fraction` of the episodes of `subset` (all subsets when `None`);
/// other subsets pass through untouched.
pub fn sample_corpus(c: &Corpus, fraction: f64, seed: u64, subset: Option<&str>) -> Result<Corpus, Error> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidFractions(format!("sample fraction {fraction} not in (0, 1]")));
    }
    let eligible: Vec<usize> = (0..c.len()).filter(|&i| subset.is_none_or(|s| c.episodes[i].subset == s)).collect();
    let keep_n = ((eligible.len() as f64 * fraction).round() as usize).max(usize::from(!eligible.is_empty()));
    let mut chosen = eligible.clone();
    chosen.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    chosen.truncate(keep_n);
    let chosen: BTreeSet<usize> = chosen.into_iter().collect();
    let eligible: BTreeSet<usize> = eligible.into_iter().collect();
    let episodes =
        (0..c.len()).filter(|i| !eligible.contains(i) || chosen.contains(i)).map(|i| c.episodes[i].clone()).collect();
    Ok(Corpus::new(episodes))
}
