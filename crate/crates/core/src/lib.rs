//! Data pipeline and evaluation harness for mobile device-control agents.
//!
//! The stages, in pipeline order:
//!
//! * [`ingest`] reads, validates, splits and synthesizes line-delimited episode corpora.
//! * [`grounding`] turns raw gestures into element-level [`CanonicalAction`]s.
//! * [`sop`] annotates episodes with SOP pipelines and per-step completion states.
//! * [`prompt`] renders prompt/response samples for the four model variants and parses
//!   responses back.
//! * [`structured`] detects confirmation/authorization pages and extracts option payloads.
//! * [`policy`] replays episodes through pluggable policies, including a remote HTTP one.
//! * [`eval`] scores predictions and aggregates reports.

pub mod episode;
pub mod eval;
pub mod grounding;
pub mod ingest;
pub mod policy;
pub mod prompt;
pub mod remote;
pub mod sop;
pub mod structured;
pub mod synthetic;

pub use episode::{
    validate_episode, ActionKind, BBox, CanonicalAction, Direction, Episode, Finding, Point, RawAction, Step, UiElement,
};
pub use grounding::{canonicalize, expand_bbox, GroundingConfig, GroundingOutcome};
pub use ingest::{parse_corpus, split_corpus, write_corpus, Corpus, Manifest};
pub use prompt::{parse_response, render_prompt, render_response, PromptSample, Variant};
pub use sop::{build_pipeline, classify_action, states_at_step, RuleSet, SopPipeline};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("episode {episode_id}: {} invariant violation(s): {}", findings.len(), findings.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("; "))]
    Validation { episode_id: String, findings: Vec<Finding> },
    #[error("corpus has no episodes")]
    EmptyCorpus,
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("template cannot realize subtask {0:?}")]
    UnrealizableTemplate(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("episode {episode_id}: every step is excluded from the SOP pipeline")]
    EmptyPipeline { episode_id: String },
    #[error("variant needs an SOP pipeline but none was given")]
    MissingPipeline,
    #[error("expected {expected} canonical actions, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("step {step} out of range for episode of length {len}")]
    StepOutOfRange { step: usize, len: usize },
    #[error("rule set: {0}")]
    RuleSet(String),
    #[error("cannot extract payload: {0}")]
    Extraction(String),
    #[error("option {0:?} not found")]
    LabelNotFound(String),
    #[error("endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("episode has no scorable steps")]
    EmptyEpisode,
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
