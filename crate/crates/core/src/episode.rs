//! Core episode types shared by every stage of the pipeline.
//!
//! All coordinates are normalized fractions of the screen in `[0, 1]`.
//! Values are immutable once built and can be shared freely across workers.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Coordinate sentinel used by non-gesture actions.
pub const SENTINEL: f64 = -1.0;

/// Axis-aligned box in normalized screen coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    /// Converts a pixel-space box into normalized coordinates.
    pub fn from_pixels(px: [f64; 4], width: f64, height: f64) -> Self {
        Self::new(px[0] / width, px[1] / height, px[2] / width, px[3] / height)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> Point {
        Point::new((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Closed-interval containment.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.x_min)
            && in_unit(self.x_max)
            && in_unit(self.y_min)
            && in_unit(self.y_max)
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const SENTINEL: Point = Point { x: SENTINEL, y: SENTINEL };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_sentinel(&self) -> bool {
        self.x == SENTINEL && self.y == SENTINEL
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// One element of a screen's element list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UiElement {
    pub id: u32,
    pub text: String,
    /// Open vocabulary token such as `TEXT` or `ICON_STAR`; unknown tokens are kept verbatim.
    pub ui_type: String,
    pub bbox: BBox,
}

impl UiElement {
    pub fn new(id: u32, text: impl Into<String>, ui_type: impl Into<String>, bbox: BBox) -> Self {
        Self { id, text: text.into(), ui_type: ui_type.into(), bbox }
    }
}

/// Raw gesture kinds as recorded on device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    DualPoint,
    Type,
    PressBack,
    PressHome,
    PressEnter,
    StatusTaskComplete,
    StatusTaskImpossible,
}

impl ActionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ActionKind::DualPoint => "DUAL_POINT",
            ActionKind::Type => "TYPE",
            ActionKind::PressBack => "PRESS_BACK",
            ActionKind::PressHome => "PRESS_HOME",
            ActionKind::PressEnter => "PRESS_ENTER",
            ActionKind::StatusTaskComplete => "STATUS_TASK_COMPLETE",
            ActionKind::StatusTaskImpossible => "STATUS_TASK_IMPOSSIBLE",
        }
    }

    pub fn is_status(&self) -> bool {
        matches!(self, ActionKind::StatusTaskComplete | ActionKind::StatusTaskImpossible)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAction {
    #[serde(rename = "type")]
    pub kind: ActionKind,
    pub touch: Point,
    pub lift: Point,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub typed_text: Option<String>,
}

impl RawAction {
    pub fn dual_point(touch: Point, lift: Point) -> Self {
        Self { kind: ActionKind::DualPoint, touch, lift, typed_text: None }
    }

    pub fn tap(at: Point) -> Self {
        Self::dual_point(at, at)
    }

    pub fn typed(text: impl Into<String>) -> Self {
        Self { kind: ActionKind::Type, touch: Point::SENTINEL, lift: Point::SENTINEL, typed_text: Some(text.into()) }
    }

    /// A coordinate-free action of the given kind. Use [`RawAction::typed`] for `TYPE`.
    pub fn simple(kind: ActionKind) -> Self {
        Self { kind, touch: Point::SENTINEL, lift: Point::SENTINEL, typed_text: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub index: usize,
    pub screen: Vec<UiElement>,
    pub action: RawAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub episode_id: String,
    pub subset: String,
    pub instruction: String,
    pub steps: Vec<Step>,
}

impl Episode {
    /// Builds an episode from `(screen, action)` pairs, assigning step indices in order.
    pub fn from_pairs(
        episode_id: impl Into<String>,
        subset: impl Into<String>,
        instruction: impl Into<String>,
        pairs: impl IntoIterator<Item = (Vec<UiElement>, RawAction)>,
    ) -> Self {
        let steps =
            pairs.into_iter().enumerate().map(|(index, (screen, action))| Step { index, screen, action }).collect();
        Self { episode_id: episode_id.into(), subset: subset.into(), instruction: instruction.into(), steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Up => "UP",
            Direction::Down => "DOWN",
            Direction::Left => "LEFT",
            Direction::Right => "RIGHT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

/// Sentinel element id carried by clicks that could not be grounded.
pub const UNGROUNDED_ID: i64 = -1;

/// Element-level action space predicted and scored by the harness.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CanonicalAction {
    Click { element_id: i64, text: String, ui_type: String },
    Scroll { direction: Direction },
    TypeText { text: String },
    PressBack,
    PressHome,
    PressEnter,
    TaskComplete,
    TaskImpossible,
}

impl CanonicalAction {
    pub fn click(el: &UiElement) -> Self {
        CanonicalAction::Click { element_id: i64::from(el.id), text: el.text.clone(), ui_type: el.ui_type.clone() }
    }

    /// Token used for this action in prompts and responses (`DUAL_POINT`, `SCROLL DOWN`, ...).
    pub fn kind_token(&self) -> String {
        match self {
            CanonicalAction::Click { .. } => "DUAL_POINT".into(),
            CanonicalAction::Scroll { direction } => format!("SCROLL {}", direction.as_str()),
            CanonicalAction::TypeText { .. } => "TYPE".into(),
            CanonicalAction::PressBack => "PRESS_BACK".into(),
            CanonicalAction::PressHome => "PRESS_HOME".into(),
            CanonicalAction::PressEnter => "PRESS_ENTER".into(),
            CanonicalAction::TaskComplete => "TASK_COMPLETE".into(),
            CanonicalAction::TaskImpossible => "TASK_IMPOSSIBLE".into(),
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, CanonicalAction::TaskComplete | CanonicalAction::TaskImpossible)
    }

    pub fn same_kind(&self, other: &CanonicalAction) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

/// One violated invariant. `step` is `None` for episode-level findings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub step: Option<usize>,
    pub field: String,
    pub message: String,
}

impl Finding {
    fn at(step: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { step: Some(step), field: field.into(), message: message.into() }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(s) => write!(f, "step {s}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// Checks every episode invariant. Returns an empty list iff the episode is well formed.
///
/// Findings are produced in a fixed order: episode-level first, then per step in index order.
pub fn validate_episode(e: &Episode) -> Vec<Finding> {
    let mut out = Vec::new();
    if e.episode_id.is_empty() {
        out.push(Finding { step: None, field: "episode_id".into(), message: "empty episode id".into() });
    }
    if e.steps.is_empty() {
        out.push(Finding { step: None, field: "steps".into(), message: "episode has no steps".into() });
    }
    let last = e.steps.len().saturating_sub(1);
    let mut statuses = 0usize;
    for (pos, step) in e.steps.iter().enumerate() {
        if step.index != pos {
            out.push(Finding::at(pos, "index", format!("expected index {pos}, found {}", step.index)));
        }
        validate_screen(pos, &step.screen, &mut out);
        validate_action(pos, &step.action, &mut out);
        if step.action.kind.is_status() {
            statuses += 1;
            if pos != last {
                out.push(Finding::at(pos, "action.type", "terminal status not final"));
            } else if statuses > 1 {
                out.push(Finding::at(pos, "action.type", "more than one terminal status"));
            }
        }
    }
    out
}

fn validate_screen(pos: usize, screen: &[UiElement], out: &mut Vec<Finding>) {
    let mut seen = HashSet::new();
    for (i, el) in screen.iter().enumerate() {
        if !el.bbox.is_valid() {
            out.push(Finding::at(
                pos,
                format!("screen.elements[{i}].bbox"),
                format!("element id {} has degenerate or out-of-range box {:?}", el.id, <[f64; 4]>::from(el.bbox)),
            ));
        }
        if !seen.insert(el.id) {
            out.push(Finding::at(pos, format!("screen.elements[{i}].id"), format!("duplicate element id {}", el.id)));
        }
    }
    let contiguous = screen.iter().enumerate().all(|(i, el)| el.id as usize == i);
    if !contiguous && seen.len() == screen.len() {
        out.push(Finding::at(pos, "screen.elements", "element ids are not contiguous from 0"));
    }
}

fn validate_action(pos: usize, a: &RawAction, out: &mut Vec<Finding>) {
    if a.kind == ActionKind::DualPoint {
        if !a.touch.in_unit_square() {
            out.push(Finding::at(pos, "action.touch", "touch point outside the unit square"));
        }
        if !a.lift.in_unit_square() {
            out.push(Finding::at(pos, "action.lift", "lift point outside the unit square"));
        }
    } else if !a.touch.is_sentinel() || !a.lift.is_sentinel() {
        out.push(Finding::at(pos, "action.touch", format!("{} must carry sentinel coordinates", a.kind.as_str())));
    }
    match (a.kind == ActionKind::Type, a.typed_text.is_some()) {
        (true, false) => out.push(Finding::at(pos, "action.typed_text", "TYPE action without typed_text")),
        (false, true) => out.push(Finding::at(pos, "action.typed_text", "typed_text present on non-TYPE action")),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn screen() -> Vec<UiElement> {
        vec![
            UiElement::new(0, "Search", "TEXT", BBox::new(0.1, 0.1, 0.9, 0.2)),
            UiElement::new(1, "", "ICON_STAR", BBox::new(0.1, 0.3, 0.2, 0.4)),
        ]
    }

    fn five_steps() -> Episode {
        let tap = RawAction::tap(Point::new(0.5, 0.15));
        Episode::from_pairs(
            "ep-1",
            "general",
            "do the thing",
            vec![
                (screen(), tap.clone()),
                (screen(), RawAction::typed("hello")),
                (screen(), RawAction::simple(ActionKind::PressEnter)),
                (screen(), RawAction::dual_point(Point::new(0.5, 0.8), Point::new(0.5, 0.2))),
                (screen(), RawAction::simple(ActionKind::StatusTaskComplete)),
            ],
        )
    }

    #[test]
    fn well_formed_episode_has_no_findings() {
        assert!(validate_episode(&five_steps()).is_empty());
    }

    #[test]
    fn degenerate_box_is_reported_once() {
        let mut e = five_steps();
        e.steps[1].screen[1].bbox.x_max = e.steps[1].screen[1].bbox.x_min;
        let f = validate_episode(&e);
        assert_eq!(f.len(), 1, "{f:?}");
        assert_eq!(f[0].step, Some(1));
        assert!(f[0].field.contains("elements[1].bbox"));
        assert!(f[0].message.contains("id 1"));
    }

    #[test]
    fn status_in_the_middle_is_not_final() {
        let mut e = five_steps();
        e.steps[2].action = RawAction::simple(ActionKind::StatusTaskComplete);
        e.steps[4].action = RawAction::simple(ActionKind::PressBack);
        let f = validate_episode(&e);
        assert_eq!(f.len(), 1, "{f:?}");
        assert_eq!(f[0].step, Some(2));
        assert_eq!(f[0].message, "terminal status not final");
    }

    #[test]
    fn press_with_coordinates_is_rejected() {
        let mut e = five_steps();
        e.steps[2].action.touch = Point::new(0.1, 0.1);
        let f = validate_episode(&e);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].field, "action.touch");
    }

    #[test]
    fn type_requires_text_and_only_type_has_it() {
        let mut e = five_steps();
        e.steps[1].action.typed_text = None;
        e.steps[2].action.typed_text = Some("x".into());
        let f = validate_episode(&e);
        assert_eq!(f.len(), 2);
        assert!(f.iter().all(|x| x.field == "action.typed_text"));
    }

    #[test]
    fn duplicate_and_gapped_ids() {
        let mut e = five_steps();
        e.steps[0].screen[1].id = 0;
        e.steps[3].screen[1].id = 5;
        let f = validate_episode(&e);
        assert_eq!(f.len(), 2, "{f:?}");
        assert!(f[0].message.contains("duplicate"));
        assert!(f[1].message.contains("contiguous"));
    }

    #[test]
    fn validation_is_deterministic() {
        let mut e = five_steps();
        e.steps[0].screen[0].bbox = BBox::new(0.5, 0.5, 0.4, 1.2);
        e.steps[3].action.lift = Point::new(2.0, 0.0);
        assert_eq!(validate_episode(&e), validate_episode(&e));
    }

    #[test]
    fn unknown_ui_types_survive_serde() {
        let el = UiElement::new(0, "x", "ICON_SOMETHING_NEW", BBox::new(0.0, 0.0, 1.0, 1.0));
        let s = serde_json::to_string(&el).unwrap();
        assert_eq!(s, r#"{"id":0,"text":"x","ui_type":"ICON_SOMETHING_NEW","bbox":[0.0,0.0,1.0,1.0]}"#);
        assert_eq!(serde_json::from_str::<UiElement>(&s).unwrap(), el);
    }

    #[test]
    fn pixel_boxes_normalize() {
        let b = BBox::from_pixels([108.0, 240.0, 972.0, 480.0], 1080.0, 2400.0);
        assert_eq!(b, BBox::new(0.1, 0.1, 0.9, 0.2));
    }
}
