//! Rule-table SOP annotation.
//!
//! Each canonical action is mapped to a subtask description (or excluded) by a [`RuleSet`];
//! an episode's descriptions, with exclusions dropped and consecutive duplicates merged,
//! form its [`SopPipeline`]. Completion states are derived from step spans.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episode::{CanonicalAction, Episode};
use crate::Error;

const AITW_RULES: &str = include_str!("../data/rules/aitw.jsonl");
const AIA_MEDICAL_RULES: &str = include_str!("../data/rules/aia_medical.jsonl");

/// Names of the rule sets compiled into the crate.
pub const BUNDLED_RULE_SETS: [&str; 2] = ["aitw", "aia_medical"];

/// Slot in a description template that is replaced by the typed text.
pub const TYPE_SLOT: char = '*';

/// Description used for clicks the text classifier cannot place.
pub const OTHERS: &str = "Others";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindPattern {
    Scroll,
    Type,
    Click,
    PressBack,
    PressHome,
    PressEnter,
    StatusComplete,
    StatusImpossible,
    /// Matches every action; used for catch-all rules.
    Any,
}

impl KindPattern {
    fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).ok()
    }

    fn as_str(&self) -> &'static str {
        match self {
            KindPattern::Scroll => "scroll",
            KindPattern::Type => "type",
            KindPattern::Click => "click",
            KindPattern::PressBack => "press_back",
            KindPattern::PressHome => "press_home",
            KindPattern::PressEnter => "press_enter",
            KindPattern::StatusComplete => "status_complete",
            KindPattern::StatusImpossible => "status_impossible",
            KindPattern::Any => "any",
        }
    }

    pub fn matches(&self, a: &CanonicalAction) -> bool {
        use CanonicalAction as A;
        match self {
            KindPattern::Any => true,
            KindPattern::Scroll => matches!(a, A::Scroll { .. }),
            KindPattern::Type => matches!(a, A::TypeText { .. }),
            KindPattern::Click => matches!(a, A::Click { .. }),
            KindPattern::PressBack => matches!(a, A::PressBack),
            KindPattern::PressHome => matches!(a, A::PressHome),
            KindPattern::PressEnter => matches!(a, A::PressEnter),
            KindPattern::StatusComplete => matches!(a, A::TaskComplete),
            KindPattern::StatusImpossible => matches!(a, A::TaskImpossible),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    Kind(KindPattern),
    /// Case-insensitive comparison on normalized click text. `contains` comes from a
    /// `*pattern*` glob in the rule file.
    Text {
        pattern: String,
        contains: bool,
    },
    UiType(String),
}

impl Matcher {
    /// text > ui_type > kind > catch-all.
    pub fn specificity(&self) -> u8 {
        match self {
            Matcher::Text { .. } => 3,
            Matcher::UiType(_) => 2,
            Matcher::Kind(KindPattern::Any) => 0,
            Matcher::Kind(_) => 1,
        }
    }

    pub fn matches(&self, a: &CanonicalAction) -> bool {
        match (self, a) {
            (Matcher::Kind(k), _) => k.matches(a),
            (Matcher::Text { pattern, contains }, CanonicalAction::Click { text, .. }) => {
                let t = normalize(text);
                if *contains {
                    t.contains(pattern.as_str())
                } else {
                    t == *pattern
                }
            }
            (Matcher::UiType(u), CanonicalAction::Click { ui_type, .. }) => ui_type.eq_ignore_ascii_case(u),
            _ => false,
        }
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SopRule {
    pub matcher: Matcher,
    pub description: Option<String>,
    pub excluded: bool,
    pub priority: i32,
    /// Free-form note from the rule file, e.g. `extended` for rows added on top of the base
    /// keyword list.
    pub origin: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum MatchOn {
    Kind,
    Text,
    UiType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleRecord {
    match_on: MatchOn,
    pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(default)]
    excluded: bool,
    #[serde(default)]
    priority: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<String>,
}

impl TryFrom<RuleRecord> for SopRule {
    type Error = String;

    fn try_from(r: RuleRecord) -> Result<Self, String> {
        let matcher = match r.match_on {
            MatchOn::Kind => Matcher::Kind(
                KindPattern::parse(&r.pattern).ok_or_else(|| format!("unknown action kind {:?}", r.pattern))?,
            ),
            MatchOn::UiType => Matcher::UiType(r.pattern.trim().to_string()),
            MatchOn::Text => {
                let p = r.pattern.trim();
                match p.strip_prefix('*').and_then(|s| s.strip_suffix('*')) {
                    Some(inner) if !inner.is_empty() => Matcher::Text { pattern: normalize(inner), contains: true },
                    _ => Matcher::Text { pattern: normalize(p), contains: false },
                }
            }
        };
        if !r.excluded && r.description.as_deref().is_none_or(str::is_empty) {
            return Err(format!("rule {:?} needs a description", r.pattern));
        }
        Ok(SopRule {
            matcher,
            description: r.description,
            excluded: r.excluded,
            priority: r.priority,
            origin: r.origin,
        })
    }
}

impl From<&SopRule> for RuleRecord {
    fn from(r: &SopRule) -> Self {
        let (match_on, pattern) = match &r.matcher {
            Matcher::Kind(k) => (MatchOn::Kind, k.as_str().to_string()),
            Matcher::UiType(u) => (MatchOn::UiType, u.clone()),
            Matcher::Text { pattern, contains: true } => (MatchOn::Text, format!("*{pattern}*")),
            Matcher::Text { pattern, contains: false } => (MatchOn::Text, pattern.clone()),
        };
        RuleRecord {
            match_on,
            pattern,
            description: r.description.clone(),
            excluded: r.excluded,
            priority: r.priority,
            origin: r.origin.clone(),
        }
    }
}

/// What a rule set says about one action.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Classification {
    Subtask(String),
    Excluded,
}

#[derive(Debug, Clone)]
pub struct RuleSet {
    pub name: String,
    rules: Vec<SopRule>,
}

impl RuleSet {
    /// Builds a rule set, rejecting it when no excluded catch-all rule is present.
    pub fn new(name: impl Into<String>, rules: Vec<SopRule>) -> Result<Self, Error> {
        let name = name.into();
        let has_catch_all = rules.iter().any(|r| r.excluded && r.matcher == Matcher::Kind(KindPattern::Any));
        if !has_catch_all {
            return Err(Error::RuleSet(format!("rule set {name:?} has no excluded catch-all rule")));
        }
        Ok(Self { name, rules })
    }

    /// Parses the line-delimited rule format. Blank lines and `#` comments are skipped.
    pub fn from_jsonl(name: impl Into<String>, src: &str) -> Result<Self, Error> {
        let mut rules = Vec::new();
        for (i, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rec: RuleRecord =
                serde_json::from_str(line).map_err(|e| Error::RuleSet(format!("line {}: {e}", i + 1)))?;
            rules.push(SopRule::try_from(rec).map_err(|e| Error::RuleSet(format!("line {}: {e}", i + 1)))?);
        }
        Self::new(name, rules)
    }

    pub fn bundled(name: &str) -> Result<Self, Error> {
        match name {
            "aitw" => Self::from_jsonl(name, AITW_RULES),
            "aia_medical" => Self::from_jsonl(name, AIA_MEDICAL_RULES),
            other => Err(Error::RuleSet(format!("no bundled rule set named {other:?}"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let src = std::fs::read_to_string(path)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_jsonl(name, &src)
    }

    /// A bundled name, or otherwise a path to a rule file.
    pub fn resolve(name_or_path: &str) -> Result<Self, Error> {
        if BUNDLED_RULE_SETS.contains(&name_or_path) {
            Self::bundled(name_or_path)
        } else {
            Self::load(Path::new(name_or_path))
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.rules
            .iter()
            .map(|r| serde_json::to_string(&RuleRecord::from(r)).expect("rule records serialize") + "\n")
            .collect()
    }

    pub fn rules(&self) -> &[SopRule] {
        &self.rules
    }

    /// Appends extra rules, e.g. additional exclusion keywords.
    pub fn extend(&mut self, extra: impl IntoIterator<Item = SopRule>) {
        self.rules.extend(extra);
    }

    /// The single rule that fires for `a`: highest priority, then most specific matcher,
    /// then earliest in the file.
    pub fn winning_rule(&self, a: &CanonicalAction) -> Option<&SopRule> {
        let mut best: Option<&SopRule> = None;
        for r in self.rules.iter().filter(|r| r.matcher.matches(a)) {
            let better = match best {
                None => true,
                Some(b) => (r.priority, r.matcher.specificity()) > (b.priority, b.matcher.specificity()),
            };
            if better {
                best = Some(r);
            }
        }
        best
    }

    /// Description of the first non-excluded kind rule for `kind`, if any.
    pub fn kind_description(&self, kind: KindPattern) -> Option<&str> {
        self.rules
            .iter()
            .filter(|r| !r.excluded && r.matcher == Matcher::Kind(kind))
            .max_by_key(|r| r.priority)
            .and_then(|r| r.description.as_deref())
    }
}

/// Pluggable mapping from canonical actions to SOP subtasks.
pub trait ActionClassifier: Sync {
    fn classify(&self, a: &CanonicalAction) -> Classification;
}

impl ActionClassifier for RuleSet {
    fn classify(&self, a: &CanonicalAction) -> Classification {
        classify_action(a, self)
    }
}

/// Classifies one action. Ungrounded clicks are always excluded; `TYPE` descriptions have
/// their `*` slot filled with the typed text.
pub fn classify_action(a: &CanonicalAction, rules: &RuleSet) -> Classification {
    if let CanonicalAction::Click { element_id, .. } = a {
        if *element_id < 0 {
            return Classification::Excluded;
        }
    }
    match rules.winning_rule(a) {
        Some(r) if !r.excluded => {
            let desc = r.description.clone().unwrap_or_default();
            match a {
                CanonicalAction::TypeText { text } => Classification::Subtask(desc.replace(TYPE_SLOT, text)),
                _ => Classification::Subtask(desc),
            }
        }
        _ => Classification::Excluded,
    }
}

/// Stand-in for a learned click-text classifier.
pub trait ClickTextClassifier: Sync {
    /// Returns a subtask name, or [`OTHERS`] when no subtask applies.
    fn classify_text(&self, text: &str) -> String;
}

impl ClickTextClassifier for RuleSet {
    fn classify_text(&self, text: &str) -> String {
        classify_click_text(text, self)
    }
}

/// Keyword classification of a click's text. Excluded outcomes read as `Others`.
pub fn classify_click_text(text: &str, rules: &RuleSet) -> String {
    let click = CanonicalAction::Click { element_id: 0, text: text.to_string(), ui_type: String::new() };
    match classify_action(&click, rules) {
        Classification::Subtask(d) => d,
        Classification::Excluded => OTHERS.to_string(),
    }
}

/// Routes clicks through an external text classifier and everything else through a rule set.
pub struct WithTextClassifier<'a, C> {
    pub rules: &'a RuleSet,
    pub text: &'a C,
}

impl<C: ClickTextClassifier> ActionClassifier for WithTextClassifier<'_, C> {
    fn classify(&self, a: &CanonicalAction) -> Classification {
        match a {
            CanonicalAction::Click { element_id, text, .. } if *element_id >= 0 => {
                let d = self.text.classify_text(text);
                if d == OTHERS {
                    Classification::Excluded
                } else {
                    Classification::Subtask(d)
                }
            }
            _ => classify_action(a, self.rules),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SopEntry {
    pub id: usize,
    pub description: String,
    pub first_step: usize,
    pub last_step: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SopPipeline {
    pub entries: Vec<SopEntry>,
}

impl SopPipeline {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn descriptions(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.description.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryState {
    Finish,
    Unfinish,
}

impl EntryState {
    pub fn as_str(&self) -> &'static str {
        match self {
            EntryState::Finish => "finish",
            EntryState::Unfinish => "unfinish",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "finish" => Some(EntryState::Finish),
            "unfinish" => Some(EntryState::Unfinish),
            _ => None,
        }
    }
}

impl fmt::Display for EntryState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Builds the SOP pipeline for an episode from its canonical actions.
pub fn build_pipeline(
    e: &Episode,
    canon: &[CanonicalAction],
    rules: &(impl ActionClassifier + ?Sized),
) -> Result<SopPipeline, Error> {
    if canon.len() != e.steps.len() {
        return Err(Error::LengthMismatch { expected: e.steps.len(), found: canon.len() });
    }
    let mut entries: Vec<SopEntry> = Vec::new();
    for (step, a) in canon.iter().enumerate() {
        let Classification::Subtask(description) = rules.classify(a) else {
            continue;
        };
        match entries.last_mut() {
            Some(last) if last.description == description => last.last_step = step,
            _ => entries.push(SopEntry { id: entries.len(), description, first_step: step, last_step: step }),
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyPipeline { episode_id: e.episode_id.clone() });
    }
    Ok(SopPipeline { entries })
}

/// Completion state of every entry before step `t` executes: an entry is finished iff its
/// last contributing step precedes `t`.
pub fn states_at_step(p: &SopPipeline, t: usize) -> Vec<(&SopEntry, EntryState)> {
    p.entries.iter().map(|e| (e, if e.last_step < t { EntryState::Finish } else { EntryState::Unfinish })).collect()
}
