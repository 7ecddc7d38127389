//! Structured-instruction pages: confirmation pop-ups, privacy authorizations and slot
//! pickers are turned into a message plus options for the user instead of being acted on.
//!
//! Detection is rule based and sits behind [`PageDetector`] so a learned detector can
//! replace it.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::episode::{CanonicalAction, UiElement};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    PrivacyAuthorization,
    NotificationConfirmation,
    SlotSelection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredPayload {
    pub kind: PayloadKind,
    pub title: String,
    pub body: String,
    pub options: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Minimum characters for a text block to count as body text.
    pub body_min_chars: usize,
    pub affirmative_keywords: Vec<String>,
    pub authorization_keywords: Vec<String>,
    /// Tolerance when grouping sibling options by left edge and width.
    pub sibling_tolerance: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            body_min_chars: 40,
            affirmative_keywords: ["I understand", "confirm", "agree", "ok"].map(String::from).to_vec(),
            authorization_keywords: ["authorize", "privacy", "permission"].map(String::from).to_vec(),
            sibling_tolerance: 0.01,
        }
    }
}

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric() && c != '\'').filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

/// Whole-word, case-insensitive phrase match (`ok` matches "OK" but not "book").
fn has_phrase(text: &str, phrase: &str) -> bool {
    let hay = words(text);
    let needle = words(phrase);
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

impl DetectorConfig {
    fn is_body(&self, e: &UiElement) -> bool {
        e.text.trim().chars().count() >= self.body_min_chars
    }

    fn is_short(&self, e: &UiElement) -> bool {
        let n = e.text.trim().chars().count();
        n > 0 && n < self.body_min_chars
    }

    fn is_affirmative_button(&self, e: &UiElement) -> bool {
        self.is_short(e) && self.affirmative_keywords.iter().any(|k| has_phrase(&e.text, k))
    }

    fn mentions_authorization(&self, screen: &[UiElement]) -> bool {
        screen.iter().any(|e| {
            let t = e.text.to_lowercase();
            self.authorization_keywords.iter().any(|k| t.contains(&k.to_lowercase()))
        })
    }

    /// Largest group (in reading order) of at least two short, non-affirmative elements
    /// sharing ui_type, left edge and width.
    fn sibling_options<'a>(&self, screen: &'a [UiElement]) -> Vec<&'a UiElement> {
        let tol = self.sibling_tolerance.max(1e-9);
        let mut groups: BTreeMap<(String, i64, i64), Vec<&UiElement>> = BTreeMap::new();
        for e in reading_order(screen) {
            if !self.is_short(e) || self.is_affirmative_button(e) {
                continue;
            }
            let key = (e.ui_type.clone(), (e.bbox.x_min / tol).round() as i64, (e.bbox.width() / tol).round() as i64);
            groups.entry(key).or_default().push(e);
        }
        groups
            .into_values()
            .filter(|g| g.len() >= 2)
            .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| cmp_reading(b[0], a[0])))
            .unwrap_or_default()
    }
}

fn cmp_reading(a: &UiElement, b: &UiElement) -> Ordering {
    a.bbox.y_min.total_cmp(&b.bbox.y_min).then(a.bbox.x_min.total_cmp(&b.bbox.x_min)).then(a.id.cmp(&b.id))
}

/// Top-to-bottom, then left-to-right, then by id.
pub fn reading_order(screen: &[UiElement]) -> Vec<&UiElement> {
    let mut v: Vec<&UiElement> = screen.iter().collect();
    v.sort_by(|a, b| cmp_reading(a, b));
    v
}

pub trait PageDetector: Sync {
    fn detect(&self, screen: &[UiElement]) -> Option<PayloadKind>;
}

impl PageDetector for DetectorConfig {
    fn detect(&self, screen: &[UiElement]) -> Option<PayloadKind> {
        detect_structured_page(screen, self)
    }
}

pub fn detect_structured_page(screen: &[UiElement], cfg: &DetectorConfig) -> Option<PayloadKind> {
    let has_button = screen.iter().any(|e| cfg.is_affirmative_button(e));
    let has_body = screen.iter().any(|e| cfg.is_body(e));
    if has_button && has_body {
        return Some(if cfg.mentions_authorization(screen) {
            PayloadKind::PrivacyAuthorization
        } else {
            PayloadKind::NotificationConfirmation
        });
    }
    if !cfg.sibling_options(screen).is_empty() {
        return Some(PayloadKind::SlotSelection);
    }
    None
}

fn push_unique(options: &mut Vec<String>, label: &str) {
    let label = label.trim();
    if !options.iter().any(|o| o == label) {
        options.push(label.to_string());
    }
}

pub fn extract_payload(
    screen: &[UiElement],
    kind: PayloadKind,
    cfg: &DetectorConfig,
) -> Result<StructuredPayload, Error> {
    let ordered = reading_order(screen);
    let mut options = Vec::new();
    let option_ids: Vec<u32> = match kind {
        PayloadKind::SlotSelection => cfg.sibling_options(screen).into_iter().map(|e| e.id).collect(),
        _ => ordered.iter().filter(|e| cfg.is_affirmative_button(e)).map(|e| e.id).collect(),
    };
    for e in ordered.iter().filter(|e| option_ids.contains(&e.id)) {
        push_unique(&mut options, &e.text);
    }
    if options.is_empty() {
        return Err(Error::Extraction("no option labels found".into()));
    }
    let title = ordered
        .iter()
        .find(|e| cfg.is_short(e) && !option_ids.contains(&e.id))
        .map(|e| e.text.trim().to_string())
        .unwrap_or_default();
    let body = ordered.iter().filter(|e| cfg.is_body(e)).map(|e| e.text.trim()).collect::<Vec<_>>().join(" ");
    if kind != PayloadKind::SlotSelection && title.is_empty() && body.is_empty() {
        return Err(Error::Extraction("confirmation page without title or body text".into()));
    }
    Ok(StructuredPayload { kind, title, body, options })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum ResponseStrategy {
    FirstAffirmative,
    FixedLabel { label: String },
    Indexed { index: usize },
}

/// Scripted stand-in for the user answering a structured prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserResponseScript {
    pub strategy: ResponseStrategy,
    pub affirmative_keywords: Vec<String>,
}

impl UserResponseScript {
    pub fn new(strategy: ResponseStrategy) -> Self {
        Self { strategy, affirmative_keywords: DetectorConfig::default().affirmative_keywords }
    }
}

pub fn apply_user_script(p: &StructuredPayload, s: &UserResponseScript) -> Result<String, Error> {
    match &s.strategy {
        ResponseStrategy::FirstAffirmative => p
            .options
            .iter()
            .find(|o| s.affirmative_keywords.iter().any(|k| has_phrase(o, k)))
            .or_else(|| p.options.first())
            .cloned()
            .ok_or_else(|| Error::LabelNotFound("<any>".into())),
        ResponseStrategy::FixedLabel { label } => {
            p.options.iter().find(|o| *o == label).cloned().ok_or_else(|| Error::LabelNotFound(label.clone()))
        }
        ResponseStrategy::Indexed { index } => {
            p.options.get(*index).cloned().ok_or_else(|| Error::LabelNotFound(format!("#{index}")))
        }
    }
}

/// Click on the first element (reading order) labelled `label`.
pub fn click_for_option(screen: &[UiElement], label: &str) -> Option<CanonicalAction> {
    reading_order(screen).into_iter().find(|e| e.text.trim() == label).map(CanonicalAction::click)
}
