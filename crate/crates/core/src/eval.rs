//! Step matching, task-completion scoring and report aggregation.
//!
//! An episode's partial score is its correct steps over its scorable length; a subset's
//! score is 100 × the mean partial of its episodes; the overall score is the unweighted
//! mean of the subset scores present.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{CanonicalAction, Point, UiElement};
use crate::grounding::enlarge;
use crate::grounding::GroundingConfig;
use crate::ingest::Corpus;
use crate::ingest::{subset_display_name, SUBSETS};
use crate::policy::{prepare_episode, replay_all, Policy, Prediction, PreparedEpisode, ReplayMode, StepRecord};
use crate::prompt::{PromptSample, Variant};
use crate::sop::ActionClassifier;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickMode {
    /// Element ids must be equal.
    ExactElement,
    /// Ids equal, or the predicted element's enlarged box contains the gold touch point.
    EnlargedContainment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub click_mode: ClickMode,
    /// Lowercase, trim and collapse whitespace before comparing typed text.
    pub text_norm: bool,
    /// Enlargement used by containment matching.
    pub expand_fraction: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { click_mode: ClickMode::ExactElement, text_norm: true, expand_fraction: 0.10 }
    }
}

pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Whether `pred` counts as the gold action. `gold_touch` is the recorded touch point of a
/// gold click, used only by containment matching.
pub fn match_action(
    pred: &CanonicalAction,
    gold: &CanonicalAction,
    gold_touch: Option<Point>,
    screen: &[UiElement],
    cfg: &MatchConfig,
) -> bool {
    use CanonicalAction as A;
    match (pred, gold) {
        (A::Click { element_id: p, .. }, A::Click { element_id: g, .. }) => {
            if p == g && *g >= 0 {
                return true;
            }
            if cfg.click_mode == ClickMode::ExactElement || *p < 0 {
                return false;
            }
            let Some(touch) =
                gold_touch.or_else(|| screen.iter().find(|e| i64::from(e.id) == *g).map(|e| e.bbox.center()))
            else {
                return false;
            };
            screen
                .iter()
                .find(|e| i64::from(e.id) == *p)
                .is_some_and(|e| enlarge(&e.bbox, cfg.expand_fraction).contains(touch))
        }
        (A::Scroll { direction: p }, A::Scroll { direction: g }) => p == g,
        (A::TypeText { text: p }, A::TypeText { text: g }) => {
            if cfg.text_norm {
                normalize_text(p) == normalize_text(g)
            } else {
                p == g
            }
        }
        _ => pred.same_kind(gold),
    }
}

pub fn match_prediction(
    pred: &Prediction,
    gold: &CanonicalAction,
    gold_touch: Option<Point>,
    screen: &[UiElement],
    cfg: &MatchConfig,
) -> bool {
    pred.action().is_some_and(|a| match_action(a, gold, gold_touch, screen, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub episode_id: String,
    pub subset: String,
    pub partial: f64,
    /// Scorable steps (grounded gold actions).
    pub steps: usize,
    pub correct: usize,
    pub ungrounded: usize,
    pub parse_failures: usize,
    pub unevaluated: usize,
}

/// correct / length.
pub fn partial_score(correct: usize, length: usize) -> Result<f64, Error> {
    if length == 0 {
        return Err(Error::EmptyEpisode);
    }
    Ok(correct as f64 / length as f64)
}

/// Scores one replayed episode. Steps whose gold click could not be grounded are left out
/// of the length; parse failures and unevaluated steps count as incorrect.
pub fn score_episode(
    p: &PreparedEpisode<'_>,
    records: &[StepRecord],
    cfg: &MatchConfig,
) -> Result<EpisodeScore, Error> {
    let e = p.episode;
    let mut s = EpisodeScore {
        episode_id: e.episode_id.clone(),
        subset: e.subset.clone(),
        partial: 0.0,
        steps: 0,
        correct: 0,
        ungrounded: p.gold.iter().filter(|o| !o.grounded).count(),
        parse_failures: 0,
        unevaluated: 0,
    };
    s.steps = e.steps.len() - s.ungrounded;
    for r in records {
        match &r.predicted {
            Prediction::ParseFailure { .. } => s.parse_failures += 1,
            Prediction::Unevaluated { .. } => s.unevaluated += 1,
            Prediction::Action { .. } => {}
        }
        let (Some(gold), Some(step), Some(outcome)) = (&r.gold, e.steps.get(r.step_index), p.gold.get(r.step_index))
        else {
            continue;
        };
        if !outcome.grounded {
            continue;
        }
        let touch = matches!(gold, CanonicalAction::Click { .. }).then_some(step.action.touch);
        if match_prediction(&r.predicted, gold, touch, &step.screen, cfg) {
            s.correct += 1;
        }
    }
    s.partial = partial_score(s.correct, s.steps)?;
    Ok(s)
}

/// Scores many episodes in parallel, keeping input order. Episodes with nothing to score
/// are returned separately by id.
pub fn score_all(
    prepared: &[PreparedEpisode<'_>],
    traces: &[Vec<StepRecord>],
    cfg: &MatchConfig,
) -> (Vec<EpisodeScore>, Vec<String>) {
    let results: Vec<_> = prepared
        .par_iter()
        .zip(traces.par_iter())
        .map(|(p, t)| score_episode(p, t, cfg).map_err(|_| p.episode.episode_id.clone()))
        .collect();
    let mut scores = Vec::new();
    let mut empty = Vec::new();
    for r in results {
        match r {
            Ok(s) => scores.push(s),
            Err(id) => empty.push(id),
        }
    }
    (scores, empty)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub episodes: usize,
    pub steps: usize,
    pub correct: usize,
    pub ungrounded: usize,
    pub parse_failures: usize,
    pub unevaluated: usize,
    /// Episodes with at least one step the policy could not answer.
    pub unevaluated_episodes: Vec<String>,
    /// Episodes with no scorable step.
    pub empty_episodes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub samples: usize,
    pub mean_prompt_tokens: f64,
    pub mean_response_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    /// Subset score (×100, two decimals) by subset name.
    pub subsets: BTreeMap<String, f64>,
    /// Unweighted mean of the subset scores, two decimals.
    pub overall: f64,
    pub counts: ReportCounts,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub token_stats: BTreeMap<Variant, TokenStats>,
    pub episodes: Vec<EpisodeScore>,
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Unweighted mean of subset scores.
pub fn overall_from_subsets(scores: &[f64]) -> Option<f64> {
    if scores.is_empty() {
        None
    } else {
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

/// Groups episode scores by subset and computes subset and overall scores.
pub fn aggregate(model: &str, episodes: Vec<EpisodeScore>) -> EvalReport {
    let mut by_subset: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut counts = ReportCounts { episodes: episodes.len(), ..Default::default() };
    for e in &episodes {
        by_subset.entry(e.subset.clone()).or_default().push(e.partial);
        counts.steps += e.steps;
        counts.correct += e.correct;
        counts.ungrounded += e.ungrounded;
        counts.parse_failures += e.parse_failures;
        counts.unevaluated += e.unevaluated;
        if e.unevaluated > 0 {
            counts.unevaluated_episodes.push(e.episode_id.clone());
        }
    }
    let exact: BTreeMap<String, f64> = by_subset
        .into_iter()
        .map(|(k, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (k, 100.0 * mean)
        })
        .collect();
    let overall = overall_from_subsets(&exact.values().copied().collect::<Vec<_>>()).unwrap_or(0.0);
    EvalReport {
        model: model.to_string(),
        subsets: exact.into_iter().map(|(k, v)| (k, round2(v))).collect(),
        overall: round2(overall),
        counts,
        token_stats: BTreeMap::new(),
        episodes,
    }
}

/// Prepares, replays and scores a whole corpus with one policy.
pub fn evaluate_corpus(
    corpus: &Corpus,
    rules: &(impl ActionClassifier + ?Sized),
    grounding: &GroundingConfig,
    policy: &dyn Policy,
    mode: ReplayMode,
    cfg: &MatchConfig,
) -> EvalReport {
    let prepared: Vec<PreparedEpisode<'_>> =
        corpus.episodes.par_iter().map(|e| prepare_episode(e, rules, grounding)).collect();
    let traces = replay_all(&prepared, policy, mode);
    let (scores, empty) = score_all(&prepared, &traces, cfg);
    let mut report = aggregate(policy.name(), scores);
    report.counts.empty_episodes = empty;
    report
}

/// Mean whitespace-token counts per variant.
pub fn token_stats<'a>(samples: impl IntoIterator<Item = &'a PromptSample>) -> BTreeMap<Variant, TokenStats> {
    let mut acc: BTreeMap<Variant, (usize, usize, usize)> = BTreeMap::new();
    for s in samples {
        let a = acc.entry(s.variant).or_default();
        a.0 += 1;
        a.1 += s.meta.prompt_tokens;
        a.2 += s.meta.response_tokens;
    }
    acc.into_iter()
        .map(|(v, (n, p, r))| {
            (
                v,
                TokenStats {
                    samples: n,
                    mean_prompt_tokens: p as f64 / n as f64,
                    mean_response_tokens: r as f64 / n as f64,
                },
            )
        })
        .collect()
}

/// Checks mean response tokens satisfy base = sop < plan <= plan_state.
pub fn check_token_ordering(stats: &BTreeMap<Variant, TokenStats>) -> Result<(), String> {
    let get =
        |v: Variant| stats.get(&v).map(|s| s.mean_response_tokens).ok_or_else(|| format!("no samples for variant {v}"));
    let (base, plan, plan_state, sop) =
        (get(Variant::Base)?, get(Variant::Plan)?, get(Variant::PlanState)?, get(Variant::Sop)?);
    if base != sop {
        return Err(format!("base ({base}) and sop ({sop}) response lengths differ"));
    }
    if sop >= plan {
        return Err(format!("plan ({plan}) is not longer than sop ({sop})"));
    }
    if plan > plan_state {
        return Err(format!("plan_state ({plan_state}) is shorter than plan ({plan})"));
    }
    Ok(())
}

/// Plain-text results table: one row per report, the five standard subsets first.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut columns: Vec<String> = SUBSETS.iter().map(|s| s.to_string()).collect();
    for r in reports {
        for k in r.subsets.keys() {
            if !columns.contains(k) {
                columns.push(k.clone());
            }
        }
    }
    let mut header = vec!["Model".to_string(), "Overall".to_string()];
    header.extend(columns.iter().map(|c| subset_display_name(c)));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.model.clone(), format!("{:.2}", r.overall)];
            row.extend(columns.iter().map(|c| r.subsets.get(c).map_or("-".to_string(), |v| format!("{v:.2}"))));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = String::new();
    let _ = writeln!(out, "{}", line(&header));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
    for r in &rows {
        let _ = writeln!(out, "{}", line(r));
    }
    out
}
