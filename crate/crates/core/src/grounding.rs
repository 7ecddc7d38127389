//! Maps raw gestures onto the element-level action space.
//!
//! Taps are resolved against element boxes enlarged by a fraction of their own size; swipes
//! keep only their dominant direction.

use serde::{Deserialize, Serialize};

use crate::episode::{ActionKind, BBox, CanonicalAction, Direction, RawAction, UiElement, UNGROUNDED_ID};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingConfig {
    /// Per-side expansion as a fraction of the element's own width/height.
    pub expand_fraction: f64,
    /// Max touch-to-lift distance for a gesture to count as a tap.
    pub click_threshold: f64,
    /// Max center distance for the nearest-element fallback.
    pub max_fallback_distance: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self { expand_fraction: 0.10, click_threshold: 0.04, max_fallback_distance: 0.15 }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let ok = [self.expand_fraction, self.click_threshold, self.max_fallback_distance]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.click_threshold < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid grounding config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingOutcome {
    pub action: CanonicalAction,
    /// False only when a tap could not be attached to any element.
    pub grounded: bool,
    pub candidates_considered: usize,
}

impl GroundingOutcome {
    fn plain(action: CanonicalAction) -> Self {
        Self { action, grounded: true, candidates_considered: 0 }
    }
}

/// Enlarges `e`'s box on every side by `expand_fraction` of its width (x) or height (y),
/// clamped to the unit square.
pub fn expand_bbox(e: &UiElement, expand_fraction: f64) -> BBox {
    enlarge(&e.bbox, expand_fraction)
}

pub(crate) fn enlarge(b: &BBox, f: f64) -> BBox {
    let dx = b.width() * f;
    let dy = b.height() * f;
    BBox::new(
        (b.x_min - dx).clamp(0.0, 1.0),
        (b.y_min - dy).clamp(0.0, 1.0),
        (b.x_max + dx).clamp(0.0, 1.0),
        (b.y_max + dy).clamp(0.0, 1.0),
    )
}

/// Canonicalizes one raw action against its screen. Total: never fails.
pub fn canonicalize(raw: &RawAction, screen: &[UiElement], cfg: &GroundingConfig) -> GroundingOutcome {
    let action = match raw.kind {
        ActionKind::PressBack => CanonicalAction::PressBack,
        ActionKind::PressHome => CanonicalAction::PressHome,
        ActionKind::PressEnter => CanonicalAction::PressEnter,
        ActionKind::StatusTaskComplete => CanonicalAction::TaskComplete,
        ActionKind::StatusTaskImpossible => CanonicalAction::TaskImpossible,
        ActionKind::Type => CanonicalAction::TypeText { text: raw.typed_text.clone().unwrap_or_default() },
        ActionKind::DualPoint => {
            if raw.touch.distance(raw.lift) <= cfg.click_threshold {
                return resolve_click(raw, screen, cfg);
            }
            CanonicalAction::Scroll { direction: swipe_direction(raw.lift.x - raw.touch.x, raw.lift.y - raw.touch.y) }
        }
    };
    GroundingOutcome::plain(action)
}

/// Direction of the dominant displacement axis. Ties go to the vertical axis.
pub fn swipe_direction(dx: f64, dy: f64) -> Direction {
    if dy.abs() >= dx.abs() {
        if dy > 0.0 {
            Direction::Down
        } else {
            Direction::Up
        }
    } else if dx > 0.0 {
        Direction::Right
    } else {
        Direction::Left
    }
}

fn resolve_click(raw: &RawAction, screen: &[UiElement], cfg: &GroundingConfig) -> GroundingOutcome {
    let touch = raw.touch;
    let by_distance = |e: &&UiElement| (e.bbox.center().distance(touch), e.id);
    let closest = |a: &&UiElement, b: &&UiElement| {
        let (da, ia) = by_distance(a);
        let (db, ib) = by_distance(b);
        da.total_cmp(&db).then(ia.cmp(&ib))
    };

    let containing: Vec<&UiElement> =
        screen.iter().filter(|e| expand_bbox(e, cfg.expand_fraction).contains(touch)).collect();
    if let Some(hit) = containing.iter().min_by(|a, b| closest(a, b)) {
        return GroundingOutcome {
            action: CanonicalAction::click(hit),
            grounded: true,
            candidates_considered: containing.len(),
        };
    }

    let nearest =
        screen.iter().filter(|e| e.bbox.center().distance(touch) <= cfg.max_fallback_distance).min_by(closest);
    match nearest {
        Some(e) => {
            GroundingOutcome { action: CanonicalAction::click(e), grounded: true, candidates_considered: screen.len() }
        }
        None => GroundingOutcome {
            action: CanonicalAction::Click { element_id: UNGROUNDED_ID, text: String::new(), ui_type: String::new() },
            grounded: false,
            candidates_considered: screen.len(),
        },
    }
}
