//! Pluggable prediction policies and the episode replay loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{CanonicalAction, Direction, Episode, UiElement};
use crate::grounding::{canonicalize, GroundingConfig, GroundingOutcome};
use crate::sop::{
    build_pipeline, states_at_step, ActionClassifier, Classification, EntryState, KindPattern, RuleSet, SopPipeline,
    TYPE_SLOT,
};
use crate::structured::reading_order;

/// What a policy produced for one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Prediction {
    Action {
        action: CanonicalAction,
    },
    /// The policy answered but the answer did not parse. Scored as incorrect.
    ParseFailure {
        raw: String,
    },
    /// No answer was obtained (e.g. endpoint down). Scored as incorrect and reported.
    Unevaluated {
        reason: String,
    },
}

impl Prediction {
    pub fn action(&self) -> Option<&CanonicalAction> {
        match self {
            Prediction::Action { action } => Some(action),
            _ => None,
        }
    }
}

impl From<CanonicalAction> for Prediction {
    fn from(action: CanonicalAction) -> Self {
        Prediction::Action { action }
    }
}

/// Everything a policy may look at before acting on step `step_index`.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub episode_id: &'a str,
    pub instruction: &'a str,
    pub step_index: usize,
    pub screen: &'a [UiElement],
    /// Actions taken so far; its length equals `step_index`.
    pub history: &'a [CanonicalAction],
    pub pipeline: Option<&'a SopPipeline>,
    /// Gold action, only under teacher forcing.
    pub gold: Option<&'a CanonicalAction>,
}

impl PolicyContext<'_> {
    pub fn sop_states(&self) -> Option<Vec<(&crate::sop::SopEntry, EntryState)>> {
        self.pipeline.map(|p| states_at_step(p, self.step_index))
    }
}

pub trait Policy: Sync {
    fn name(&self) -> &str;
    fn predict(&self, ctx: &PolicyContext<'_>) -> Prediction;
}

/// Returns the gold action unchanged.
pub struct OraclePolicy;

pub fn oracle_policy(_ctx: &PolicyContext<'_>, gold: &CanonicalAction) -> CanonicalAction {
    gold.clone()
}

impl Policy for OraclePolicy {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict(&self, ctx: &PolicyContext<'_>) -> Prediction {
        match ctx.gold {
            Some(g) => oracle_policy(ctx, g).into(),
            None => Prediction::Unevaluated { reason: "oracle needs a gold action".into() },
        }
    }
}

/// Acts out the first unfinished SOP entry by inverting the rule table.
pub struct RuleSopPolicy {
    pub rules: RuleSet,
}

fn fill_slot<'d>(template: &str, description: &'d str) -> Option<&'d str> {
    let (prefix, suffix) = template.split_once(TYPE_SLOT)?;
    description.strip_prefix(prefix)?.strip_suffix(suffix)
}

/// `None` when the context carries no pipeline.
pub fn rule_sop_policy(ctx: &PolicyContext<'_>, rules: &RuleSet) -> Option<CanonicalAction> {
    let states = ctx.sop_states()?;
    let Some((entry, _)) = states.into_iter().find(|(_, s)| *s == EntryState::Unfinish) else {
        return Some(CanonicalAction::TaskComplete);
    };
    let desc = entry.description.as_str();

    if let Some(text) = rules.kind_description(KindPattern::Type).and_then(|tpl| fill_slot(tpl, desc)) {
        return Some(CanonicalAction::TypeText { text: text.to_string() });
    }
    if rules.kind_description(KindPattern::StatusComplete) == Some(desc) {
        return Some(CanonicalAction::TaskComplete);
    }
    let wanted = Classification::Subtask(desc.to_string());
    if let Some(el) =
        reading_order(ctx.screen).into_iter().find(|el| rules.classify(&CanonicalAction::click(el)) == wanted)
    {
        return Some(CanonicalAction::click(el));
    }
    let by_kind = [
        (KindPattern::PressHome, CanonicalAction::PressHome),
        (KindPattern::PressEnter, CanonicalAction::PressEnter),
        (KindPattern::PressBack, CanonicalAction::PressBack),
        (KindPattern::StatusImpossible, CanonicalAction::TaskImpossible),
        (KindPattern::Scroll, CanonicalAction::Scroll { direction: Direction::Down }),
    ];
    for (kind, action) in by_kind {
        if rules.kind_description(kind) == Some(desc) {
            return Some(action);
        }
    }
    Some(CanonicalAction::Scroll { direction: Direction::Down })
}

impl Policy for RuleSopPolicy {
    fn name(&self) -> &str {
        "rule_sop"
    }

    fn predict(&self, ctx: &PolicyContext<'_>) -> Prediction {
        match rule_sop_policy(ctx, &self.rules) {
            Some(a) => a.into(),
            None => Prediction::Unevaluated { reason: "missing SOP pipeline".into() },
        }
    }
}

/// Uniformly random action kind, with uniformly random targets. Deterministic per
/// (seed, episode, step), so parallel replays are reproducible.
pub struct RandomPolicy {
    pub seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3))
}

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn predict(&self, ctx: &PolicyContext<'_>) -> Prediction {
        let key = format!("{}#{}", ctx.episode_id, ctx.step_index);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(key.as_bytes()));
        let action = match rng.gen_range(0..8) {
            0 => match ctx.screen.choose(&mut rng) {
                Some(el) => CanonicalAction::click(el),
                None => CanonicalAction::Scroll { direction: Direction::Down },
            },
            1 => CanonicalAction::Scroll { direction: *Direction::ALL.choose(&mut rng).expect("non-empty") },
            2 => {
                let words: Vec<&str> = ctx.instruction.split_whitespace().collect();
                let n = rng.gen_range(1..=3.min(words.len().max(1)));
                let start = rng.gen_range(0..words.len().saturating_sub(n - 1).max(1));
                CanonicalAction::TypeText {
                    text: words.iter().skip(start).take(n).copied().collect::<Vec<_>>().join(" "),
                }
            }
            3 => CanonicalAction::PressBack,
            4 => CanonicalAction::PressHome,
            5 => CanonicalAction::PressEnter,
            6 => CanonicalAction::TaskComplete,
            _ => CanonicalAction::TaskImpossible,
        };
        action.into()
    }
}

/// An episode with its gold canonical actions and (when annotatable) its SOP pipeline.
#[derive(Debug, Clone)]
pub struct PreparedEpisode<'a> {
    pub episode: &'a Episode,
    pub gold: Vec<GroundingOutcome>,
    pub pipeline: Option<SopPipeline>,
}

impl PreparedEpisode<'_> {
    pub fn gold_actions(&self) -> Vec<CanonicalAction> {
        self.gold.iter().map(|o| o.action.clone()).collect()
    }
}

pub fn prepare_episode<'a>(
    e: &'a Episode,
    rules: &(impl ActionClassifier + ?Sized),
    cfg: &GroundingConfig,
) -> PreparedEpisode<'a> {
    let gold: Vec<GroundingOutcome> = e.steps.iter().map(|s| canonicalize(&s.action, &s.screen, cfg)).collect();
    let canon: Vec<CanonicalAction> = gold.iter().map(|o| o.action.clone()).collect();
    let pipeline = build_pipeline(e, &canon, rules).ok();
    PreparedEpisode { episode: e, gold, pipeline }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Gold history is fed to every step regardless of earlier predictions.
    TeacherForced,
    /// Predicted history is fed forward; stops on a terminal status, a failed prediction,
    /// or `step_cap` steps (default twice the episode length).
    FreeRunning { step_cap: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    /// `None` past the end of the recorded episode in free-running mode.
    pub gold: Option<CanonicalAction>,
    pub grounded: bool,
    pub predicted: Prediction,
}

pub fn replay_episode(p: &PreparedEpisode<'_>, policy: &dyn Policy, mode: ReplayMode) -> Vec<StepRecord> {
    let e = p.episode;
    match mode {
        ReplayMode::TeacherForced => {
            let gold = p.gold_actions();
            e.steps
                .iter()
                .enumerate()
                .map(|(t, step)| {
                    let ctx = PolicyContext {
                        episode_id: &e.episode_id,
                        instruction: &e.instruction,
                        step_index: t,
                        screen: &step.screen,
                        history: &gold[..t],
                        pipeline: p.pipeline.as_ref(),
                        gold: Some(&gold[t]),
                    };
                    StepRecord {
                        step_index: t,
                        gold: Some(gold[t].clone()),
                        grounded: p.gold[t].grounded,
                        predicted: policy.predict(&ctx),
                    }
                })
                .collect()
        }
        ReplayMode::FreeRunning { step_cap } => {
            let n = e.steps.len();
            if n == 0 {
                return Vec::new();
            }
            let cap = step_cap.unwrap_or(2 * n);
            let mut history: Vec<CanonicalAction> = Vec::new();
            let mut out = Vec::new();
            for t in 0..cap {
                let step = &e.steps[t.min(n - 1)];
                let gold = p.gold.get(t);
                let ctx = PolicyContext {
                    episode_id: &e.episode_id,
                    instruction: &e.instruction,
                    step_index: t,
                    screen: &step.screen,
                    history: &history,
                    pipeline: p.pipeline.as_ref(),
                    gold: None,
                };
                let predicted = policy.predict(&ctx);
                let next = predicted.action().cloned();
                out.push(StepRecord {
                    step_index: t,
                    gold: gold.map(|g| g.action.clone()),
                    grounded: gold.is_none_or(|g| g.grounded),
                    predicted,
                });
                match next {
                    Some(a) if !a.is_terminal() => history.push(a),
                    _ => break,
                }
            }
            out
        }
    }
}

/// Replays every episode in parallel; output keeps corpus order.
pub fn replay_all(prepared: &[PreparedEpisode<'_>], policy: &dyn Policy, mode: ReplayMode) -> Vec<Vec<StepRecord>> {
    prepared.par_iter().map(|p| replay_episode(p, policy, mode)).collect()
}
