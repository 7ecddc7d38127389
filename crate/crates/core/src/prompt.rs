//! Prompt/response serialization for the four training variants.
//!
//! `Sop` changes only the prompt (an `SOP:` block with per-entry states); `Plan` and
//! `PlanState` change only the response (a `PLAN:` / `PLAN&STATE:` block before the action).
//! Rendering is byte-deterministic and one item per line.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{CanonicalAction, Direction, Episode, UiElement};
use crate::grounding::{canonicalize, GroundingConfig};
use crate::ingest::Corpus;
use crate::sop::{build_pipeline, states_at_step, ActionClassifier, EntryState, SopPipeline};
use crate::Error;

pub const PROMPT_HEADER: &str =
    "Given a mobile screen and a question, provide the action based on the screen information.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Plan,
    PlanState,
    Sop,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Plan, Variant::PlanState, Variant::Sop];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Plan => "plan",
            Variant::PlanState => "plan_state",
            Variant::Sop => "sop",
        }
    }

    pub fn needs_pipeline(&self) -> bool {
        !matches!(self, Variant::Base)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected base|plan|plan_state|sop)")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    /// Keep only the most recent N previous actions. `None` keeps the full history.
    pub max_history: Option<usize>,
}

/// Texts are rendered on a single line.
fn one_line(s: &str) -> std::borrow::Cow<'_, str> {
    if s.contains(['\n', '\r']) {
        s.replace(['\n', '\r'], " ").into()
    } else {
        s.into()
    }
}

/// The `SOP:` block for step `t`, without a trailing newline.
pub fn sop_block(p: &SopPipeline, t: usize) -> String {
    let mut out = String::from("SOP:");
    for (e, state) in states_at_step(p, t) {
        let _ = write!(out, "\nid:{} {},state:{}", e.id, one_line(&e.description), state);
    }
    out
}

fn history_line(i: usize, a: &CanonicalAction) -> String {
    let (text, ui_type) = match a {
        CanonicalAction::Click { text, ui_type, .. } => (one_line(text), one_line(ui_type)),
        _ => ("".into(), "".into()),
    };
    format!("id:{i},type:{},text:{text},ui_type:{ui_type}", a.kind_token())
}

/// Renders the prompt for step `t` of `e`.
pub fn render_prompt(
    e: &Episode,
    t: usize,
    canon_history: &[CanonicalAction],
    pipeline: Option<&SopPipeline>,
    v: Variant,
) -> Result<String, Error> {
    let step = e.steps.get(t).ok_or(Error::StepOutOfRange { step: t, len: e.steps.len() })?;
    render_prompt_parts(&e.instruction, &step.screen, canon_history, pipeline, t, v, PromptOptions::default())
}

/// Same as [`render_prompt`] but from loose parts, for callers that replay predicted history.
pub fn render_prompt_parts(
    instruction: &str,
    screen: &[UiElement],
    history: &[CanonicalAction],
    pipeline: Option<&SopPipeline>,
    t: usize,
    v: Variant,
    opts: PromptOptions,
) -> Result<String, Error> {
    let mut out = String::from(PROMPT_HEADER);
    if v == Variant::Sop {
        let p = pipeline.ok_or(Error::MissingPipeline)?;
        out.push('\n');
        out.push_str(&sop_block(p, t));
    }
    out.push_str("\nPrevious Actions:");
    let start = opts.max_history.map_or(0, |m| history.len().saturating_sub(m));
    for (i, a) in history.iter().enumerate().skip(start) {
        out.push('\n');
        out.push_str(&history_line(i, a));
    }
    out.push_str("\nEnvironment:");
    for el in screen {
        let _ = write!(out, "\nid:{}, text:{}, type:{}", el.id, one_line(&el.text), one_line(&el.ui_type));
    }
    let _ = write!(out, "\nInstruction: {}\nAnswer:", one_line(instruction));
    Ok(out)
}

/// The action lines shared by every variant's response.
pub fn action_tail(a: &CanonicalAction) -> String {
    match a {
        CanonicalAction::Click { element_id, text, ui_type } => {
            format!("action: DUAL_POINT\ntext: {} type: {} id:{element_id}", one_line(text), one_line(ui_type))
        }
        CanonicalAction::TypeText { text } => format!("action: TYPE\ntext: {}", one_line(text)),
        other => format!("action: {}", other.kind_token()),
    }
}

pub fn render_response(
    target: &CanonicalAction,
    pipeline: Option<&SopPipeline>,
    t: usize,
    v: Variant,
) -> Result<String, Error> {
    let mut out = String::new();
    match v {
        Variant::Base | Variant::Sop => {}
        Variant::Plan => {
            let p = pipeline.ok_or(Error::MissingPipeline)?;
            out.push_str("PLAN:\n");
            for e in &p.entries {
                let _ = writeln!(out, "id:{} {}", e.id, one_line(&e.description));
            }
        }
        Variant::PlanState => {
            let p = pipeline.ok_or(Error::MissingPipeline)?;
            out.push_str("PLAN&STATE:\n");
            for (e, state) in states_at_step(p, t) {
                let _ = writeln!(out, "id:{} {},state:{state}", e.id, one_line(&e.description));
            }
        }
    }
    out.push_str(&action_tail(target));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanLine {
    pub id: usize,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<EntryState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub action: CanonicalAction,
    pub plan: Option<Vec<PlanLine>>,
}

/// A response the grammar does not accept. Scored as incorrect, never fatal.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unparseable response: {0}")]
pub struct ParseFailure(pub String);

fn fail<T>(msg: impl Into<String>) -> Result<T, ParseFailure> {
    Err(ParseFailure(msg.into()))
}

fn action_keyword(line: &str) -> Option<&str> {
    let l = line.trim_start();
    l.strip_prefix("action type:").or_else(|| l.strip_prefix("action:")).map(str::trim)
}

fn text_field(line: Option<&str>) -> Result<&str, ParseFailure> {
    let Some(line) = line else {
        return fail("missing text line");
    };
    let l = line.trim_start();
    match l.strip_prefix("text: ").or_else(|| l.strip_prefix("text:")) {
        Some(rest) => Ok(rest),
        None => fail(format!("expected `text:` line, found {line:?}")),
    }
}

fn parse_plan_line(line: &str, with_state: bool) -> Result<PlanLine, ParseFailure> {
    let Some(rest) = line.trim().strip_prefix("id:") else {
        return fail(format!("bad plan line {line:?}"));
    };
    let Some((id, desc)) = rest.split_once(' ') else {
        return fail(format!("bad plan line {line:?}"));
    };
    let Ok(id) = id.parse() else {
        return fail(format!("bad plan id in {line:?}"));
    };
    if !with_state {
        return Ok(PlanLine { id, description: desc.to_string(), state: None });
    }
    match desc.rsplit_once(",state:").and_then(|(d, s)| EntryState::parse(s.trim()).map(|s| (d, s))) {
        Some((d, s)) => Ok(PlanLine { id, description: d.to_string(), state: Some(s) }),
        None => fail(format!("plan line without state: {line:?}")),
    }
}

/// Parses a model response back into a canonical action plus its optional plan block.
///
/// Accepts `action type:` as a synonym for `action:` and ignores lines after the action.
pub fn parse_response(text: &str) -> Result<ParsedResponse, ParseFailure> {
    let lines: Vec<&str> = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
    let mut i = lines.iter().position(|l| !l.trim().is_empty()).unwrap_or(lines.len());

    let mut plan = None;
    if let Some(head) = lines.get(i).map(|l| l.trim()) {
        let with_state = match head {
            "PLAN:" => Some(false),
            "PLAN&STATE:" => Some(true),
            _ => None,
        };
        if let Some(with_state) = with_state {
            i += 1;
            let mut entries = Vec::new();
            while let Some(l) = lines.get(i) {
                if action_keyword(l).is_some() {
                    break;
                }
                if !l.trim().is_empty() {
                    entries.push(parse_plan_line(l, with_state)?);
                }
                i += 1;
            }
            plan = Some(entries);
        }
    }

    let Some(token) = lines.get(i).and_then(|l| action_keyword(l)) else {
        return fail("no action line");
    };
    let next = lines.get(i + 1).copied();
    let action = match token {
        "DUAL_POINT" | "CLICK" => parse_click(text_field(next)?)?,
        "TYPE" => CanonicalAction::TypeText { text: text_field(next)?.to_string() },
        "PRESS_BACK" => CanonicalAction::PressBack,
        "PRESS_HOME" => CanonicalAction::PressHome,
        "PRESS_ENTER" => CanonicalAction::PressEnter,
        "TASK_COMPLETE" | "STATUS_TASK_COMPLETE" => CanonicalAction::TaskComplete,
        "TASK_IMPOSSIBLE" | "STATUS_TASK_IMPOSSIBLE" => CanonicalAction::TaskImpossible,
        other => match other.strip_prefix("SCROLL").map(str::trim).and_then(Direction::parse) {
            Some(direction) => CanonicalAction::Scroll { direction },
            None => return fail(format!("unknown action {other:?}")),
        },
    };
    Ok(ParsedResponse { action, plan })
}

fn parse_click(field: &str) -> Result<CanonicalAction, ParseFailure> {
    let Some((rest, id)) = field.rsplit_once(" id:") else {
        return fail(format!("click without id: {field:?}"));
    };
    let Ok(element_id) = id.trim().parse::<i64>() else {
        return fail(format!("bad element id {id:?}"));
    };
    let (text, ui_type) = match rest.rsplit_once(" type: ") {
        Some((t, u)) => (t, u),
        None if rest.starts_with("type: ") => ("", &rest["type: ".len()..]),
        None => return fail(format!("click without type: {field:?}")),
    };
    Ok(CanonicalAction::Click { element_id, text: text.to_string(), ui_type: ui_type.to_string() })
}

/// Whitespace-delimited token count.
pub fn whitespace_tokens(s: &str) -> usize {
    s.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub prompt_tokens: usize,
    pub response_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSample {
    pub episode_id: String,
    pub step_index: usize,
    pub variant: Variant,
    pub prompt: String,
    pub response: String,
    pub sop_block: String,
    pub meta: SampleMeta,
}

impl PromptSample {
    fn new(
        episode_id: &str,
        step_index: usize,
        variant: Variant,
        prompt: String,
        response: String,
        sop_block: String,
    ) -> Self {
        let meta =
            SampleMeta { prompt_tokens: whitespace_tokens(&prompt), response_tokens: whitespace_tokens(&response) };
        Self { episode_id: episode_id.to_string(), step_index, variant, prompt, response, sop_block, meta }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetOptions {
    /// For the SOP variant, also emit the base-variant sample of every step.
    pub mix: bool,
    pub prompt: PromptOptions,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub episodes: usize,
    pub samples: usize,
    pub ungrounded_steps_skipped: usize,
    pub empty_pipeline_episodes: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<PromptSample>,
    pub stats: DatasetStats,
}

/// Samples for a single episode plus (ungrounded steps skipped, pipeline failed).
pub fn episode_samples(
    e: &Episode,
    rules: &(impl ActionClassifier + ?Sized),
    cfg: &GroundingConfig,
    v: Variant,
    opts: DatasetOptions,
) -> (Vec<PromptSample>, usize, bool) {
    let outcomes: Vec<_> = e.steps.iter().map(|s| canonicalize(&s.action, &s.screen, cfg)).collect();
    let canon: Vec<CanonicalAction> = outcomes.iter().map(|o| o.action.clone()).collect();
    let pipeline = if v.needs_pipeline() {
        match build_pipeline(e, &canon, rules) {
            Ok(p) => Some(p),
            Err(_) => return (Vec::new(), 0, true),
        }
    } else {
        None
    };
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (t, (step, outcome)) in e.steps.iter().zip(&outcomes).enumerate() {
        if !outcome.grounded {
            skipped += 1;
            continue;
        }
        let history = &canon[..t];
        let render = |variant: Variant| -> PromptSample {
            let p = pipeline.as_ref();
            let prompt = render_prompt_parts(&e.instruction, &step.screen, history, p, t, variant, opts.prompt)
                .expect("pipeline present for variants that need it");
            let response = render_response(&outcome.action, p, t, variant).expect("pipeline present");
            let block = match (variant, p) {
                (Variant::Sop, Some(p)) => sop_block(p, t),
                _ => String::new(),
            };
            PromptSample::new(&e.episode_id, t, variant, prompt, response, block)
        };
        samples.push(render(v));
        if v == Variant::Sop && opts.mix {
            samples.push(render(Variant::Base));
        }
    }
    (samples, skipped, false)
}

/// One sample per grounded (episode, step), in corpus order. Episodes whose SOP pipeline is
/// empty are skipped and counted when the variant needs a pipeline.
pub fn build_dataset(
    c: &Corpus,
    rules: &(impl ActionClassifier + ?Sized),
    cfg: &GroundingConfig,
    v: Variant,
    opts: DatasetOptions,
) -> Dataset {
    let per_episode: Vec<_> = c.episodes.par_iter().map(|e| episode_samples(e, rules, cfg, v, opts)).collect();
    let mut out = Dataset::default();
    out.stats.episodes = c.len();
    for (samples, skipped, empty) in per_episode {
        out.stats.ungrounded_steps_skipped += skipped;
        out.stats.empty_pipeline_episodes += usize::from(empty);
        out.samples.extend(samples);
    }
    out.stats.samples = out.samples.len();
    out
}
