//! The unified 12-action GUI action space.

mod codec;
mod foreign;

pub use codec::{parse_action, serialize_action, ACTION_PREFIX};
pub use foreign::{normalize_foreign, ForeignAction, MappingTables, SourceSpace};

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionType {
    Click,
    Type,
    Select,
    ScrollUp,
    ScrollDown,
    ScrollLeft,
    ScrollRight,
    PressBack,
    PressHome,
    PressEnter,
    StatusTaskComplete,
    StatusTaskImpossible,
}

impl ActionType {
    pub const ALL: [ActionType; 12] = [
        ActionType::Click,
        ActionType::Type,
        ActionType::Select,
        ActionType::ScrollUp,
        ActionType::ScrollDown,
        ActionType::ScrollLeft,
        ActionType::ScrollRight,
        ActionType::PressBack,
        ActionType::PressHome,
        ActionType::PressEnter,
        ActionType::StatusTaskComplete,
        ActionType::StatusTaskImpossible,
    ];

    /// Spelling used in the action text format.
    pub fn wire_name(self) -> &'static str {
        match self {
            ActionType::Click => "CLICK",
            ActionType::Type => "TYPE",
            ActionType::Select => "SELECT",
            ActionType::ScrollUp => "SCROLL UP",
            ActionType::ScrollDown => "SCROLL DOWN",
            ActionType::ScrollLeft => "SCROLL LEFT",
            ActionType::ScrollRight => "SCROLL RIGHT",
            ActionType::PressBack => "PRESS BACK",
            ActionType::PressHome => "PRESS HOME",
            ActionType::PressEnter => "PRESS ENTER",
            ActionType::StatusTaskComplete => "STATUS TASK COMPLETE",
            ActionType::StatusTaskImpossible => "STATUS TASK IMPOSSIBLE",
        }
    }

    pub fn from_wire_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.wire_name() == s)
    }

    /// Spelling of the in-memory enum (`SCROLL_DOWN`).
    pub fn enum_name(self) -> String {
        self.wire_name().replace(' ', "_")
    }

    pub fn from_enum_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.enum_name() == s)
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn is_scroll(self) -> bool {
        matches!(
            self,
            ActionType::ScrollUp | ActionType::ScrollDown | ActionType::ScrollLeft | ActionType::ScrollRight
        )
    }

    /// Actions whose ground truth carries a screen location.
    pub fn is_pointed(self) -> bool {
        matches!(self, ActionType::Click | ActionType::Select) || self.is_scroll()
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

/// Screen point in normalized coordinates, stored in units of 1e-4 so that
/// the four-decimal text form is exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    x: u16,
    y: u16,
}

pub const COORD_SCALE: u16 = 10_000;

impl Point {
    /// Rounds to the nearest 1e-4; fails outside `[0, 1]`.
    pub fn new(x: f64, y: f64) -> Result<Self> {
        let q = |v: f64, axis: &str| -> Result<u16> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{axis} coordinate {v} outside [0, 1]")));
            }
            Ok((v * COORD_SCALE as f64).round() as u16)
        };
        Ok(Self {
            x: q(x, "x")?,
            y: q(y, "y")?,
        })
    }

    pub fn from_units(x: u16, y: u16) -> Result<Self> {
        if x > COORD_SCALE || y > COORD_SCALE {
            return Err(Error::Validation(format!("point units ({x}, {y}) exceed {COORD_SCALE}")));
        }
        Ok(Self { x, y })
    }

    pub fn units(self) -> (u16, u16) {
        (self.x, self.y)
    }

    pub fn x(self) -> f64 {
        self.x as f64 / COORD_SCALE as f64
    }

    pub fn y(self) -> f64 {
        self.y as f64 / COORD_SCALE as f64
    }

    pub fn distance(self, other: Point) -> f64 {
        ((self.x() - other.x()).powi(2) + (self.y() - other.y()).powi(2)).sqrt()
    }
}

/// A single GUI action. `None` points render as the `(-1, -1)` sentinel.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionDecision {
    pub action_type: ActionType,
    pub touch_point: Option<Point>,
    pub lift_point: Option<Point>,
    pub typed_text: String,
}

impl ActionDecision {
    pub fn click(at: Point) -> Self {
        Self::pointed(ActionType::Click, at, at)
    }

    pub fn select(at: Point) -> Self {
        Self::pointed(ActionType::Select, at, at)
    }

    fn pointed(action_type: ActionType, touch: Point, lift: Point) -> Self {
        Self {
            action_type,
            touch_point: Some(touch),
            lift_point: Some(lift),
            typed_text: String::new(),
        }
    }

    pub fn type_text(text: &str) -> Self {
        Self {
            action_type: ActionType::Type,
            touch_point: None,
            lift_point: None,
            typed_text: text.to_string(),
        }
    }

    /// Point-free action (press, status).
    pub fn bare(action_type: ActionType) -> Self {
        Self {
            action_type,
            touch_point: None,
            lift_point: None,
            typed_text: String::new(),
        }
    }

    /// Canonical full-screen swipe for a scroll direction.
    pub fn scroll(action_type: ActionType) -> Result<Self> {
        let (t, l) = match action_type {
            ActionType::ScrollDown => ((0.5, 0.8), (0.5, 0.2)),
            ActionType::ScrollUp => ((0.5, 0.2), (0.5, 0.8)),
            ActionType::ScrollLeft => ((0.2, 0.5), (0.8, 0.5)),
            ActionType::ScrollRight => ((0.8, 0.5), (0.2, 0.5)),
            other => return Err(Error::Validation(format!("{other} is not a scroll"))),
        };
        Ok(Self::pointed(action_type, Point::new(t.0, t.1)?, Point::new(l.0, l.1)?))
    }

    pub fn scroll_between(action_type: ActionType, touch: Point, lift: Point) -> Result<Self> {
        let a = Self::pointed(action_type, touch, lift);
        a.validate()?;
        Ok(a)
    }

    /// Checks the per-type field invariants.
    pub fn validate(&self) -> Result<()> {
        let t = self.action_type;
        let fail = |m: &str| Err(Error::Validation(format!("{t}: {m}")));
        match t {
            ActionType::Click | ActionType::Select => {
                if self.touch_point.is_none() || self.lift_point.is_none() {
                    return fail("requires touch and lift points");
                }
                if !self.typed_text.is_empty() {
                    return fail("must not carry text");
                }
            }
            ActionType::ScrollUp | ActionType::ScrollDown | ActionType::ScrollLeft | ActionType::ScrollRight => {
                let (Some(a), Some(b)) = (self.touch_point, self.lift_point) else {
                    return fail("requires touch and lift points");
                };
                if !self.typed_text.is_empty() {
                    return fail("must not carry text");
                }
                let ok = match t {
                    ActionType::ScrollDown => a.x == b.x && b.y < a.y,
                    ActionType::ScrollUp => a.x == b.x && b.y > a.y,
                    ActionType::ScrollLeft => a.y == b.y && b.x > a.x,
                    _ => a.y == b.y && b.x < a.x,
                };
                if !ok {
                    return fail("lift point not displaced along the scroll direction");
                }
            }
            ActionType::Type => {
                if self.touch_point.is_some() || self.lift_point.is_some() {
                    return fail("must use sentinel points");
                }
                validate_text(&self.typed_text)?;
                if self.typed_text.is_empty() {
                    return fail("requires non-empty text");
                }
            }
            _ => {
                if self.touch_point.is_some() || self.lift_point.is_some() {
                    return fail("must use sentinel points");
                }
                if !self.typed_text.is_empty() {
                    return fail("must not carry text");
                }
            }
        }
        Ok(())
    }
}

fn validate_text(text: &str) -> Result<()> {
    if text.trim() != text {
        return Err(Error::Validation("typed text has surrounding whitespace".into()));
    }
    if text.chars().any(|c| !(' '..='~').contains(&c)) {
        return Err(Error::Validation("typed text must be printable ASCII".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathLabel {
    Fast,
    Slow,
}

impl PathLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PathLabel::Fast => "fast",
            PathLabel::Slow => "slow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(PathLabel::Fast),
            "slow" => Ok(PathLabel::Slow),
            other => Err(Error::Validation(format!("unknown path label `{other}`"))),
        }
    }
}

/// Rule-based perception classifier: actions in the slow set need precise
/// grounding and take the perception path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerceptionRule {
    slow: BTreeSet<ActionType>,
}

impl Default for PerceptionRule {
    fn default() -> Self {
        Self {
            slow: [ActionType::Click, ActionType::Select].into_iter().collect(),
        }
    }
}

impl PerceptionRule {
    pub fn with_slow_set(slow: impl IntoIterator<Item = ActionType>) -> Self {
        Self {
            slow: slow.into_iter().collect(),
        }
    }

    pub fn slow_set(&self) -> &BTreeSet<ActionType> {
        &self.slow
    }

    pub fn classify(&self, a: &ActionDecision) -> PathLabel {
        if self.slow.contains(&a.action_type) {
            PathLabel::Slow
        } else {
            PathLabel::Fast
        }
    }
}

/// Classifies with the default slow set `{CLICK, SELECT}`.
pub fn classify_perception(a: &ActionDecision) -> PathLabel {
    PerceptionRule::default().classify(a)
}
