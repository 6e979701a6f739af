//! Text codec for the action decision format:
//!
//! ```text
//! Action Decision:action_type:{t}, touch_point:[{x1}, {y1}], lift_point:[{x2}, {y2}], typed_text:{text}
//! ```

use super::{ActionDecision, ActionType, Point, COORD_SCALE};
use crate::error::{Error, Result};

pub const ACTION_PREFIX: &str = "Action Decision:action_type:";
const TOUCH: &str = ", touch_point:";
const LIFT: &str = ", lift_point:";
const TEXT: &str = ", typed_text:";
const SENTINEL: &str = "-1.0000";

fn coord(units: u16) -> String {
    format!("{}.{:04}", units / COORD_SCALE, units % COORD_SCALE)
}

fn point_text(p: Option<Point>) -> String {
    match p {
        Some(p) => {
            let (x, y) = p.units();
            format!("[{}, {}]", coord(x), coord(y))
        }
        None => format!("[{SENTINEL}, {SENTINEL}]"),
    }
}

pub fn serialize_action(a: &ActionDecision) -> Result<String> {
    a.validate()?;
    Ok(format!(
        "{ACTION_PREFIX}{}{TOUCH}{}{LIFT}{}{TEXT}{}",
        a.action_type.wire_name(),
        point_text(a.touch_point),
        point_text(a.lift_point),
        a.typed_text
    ))
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, field: &'static str, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            field,
            offset: self.base + self.pos,
            message: message.into(),
        })
    }

    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn expect(&mut self, lit: &str, field: &'static str) -> Result<()> {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            self.err(field, format!("expected `{lit}`"))
        }
    }

    /// Exactly `d.dddd` in `[0, 1]`, or the sentinel.
    fn coordinate(&mut self, field: &'static str) -> Result<Option<u16>> {
        if self.rest().starts_with(SENTINEL) {
            self.pos += SENTINEL.len();
            return Ok(None);
        }
        let b = self.rest().as_bytes();
        let ok = b.len() >= 6
            && b[0].is_ascii_digit()
            && b[1] == b'.'
            && b[2..6].iter().all(u8::is_ascii_digit);
        if !ok {
            return self.err(field, "malformed coordinate");
        }
        let whole = (b[0] - b'0') as u16;
        let frac: u16 = self.rest()[2..6].parse().expect("four digits");
        let units = whole as u32 * COORD_SCALE as u32 + frac as u32;
        if units > COORD_SCALE as u32 {
            return self.err(field, "coordinate outside [0, 1]");
        }
        self.pos += 6;
        Ok(Some(units as u16))
    }

    fn point(&mut self, field: &'static str) -> Result<Option<Point>> {
        self.expect("[", field)?;
        let start = self.pos;
        let x = self.coordinate(field)?;
        self.expect(", ", field)?;
        let y = self.coordinate(field)?;
        self.expect("]", field)?;
        match (x, y) {
            (Some(x), Some(y)) => Ok(Some(Point::from_units(x, y)?)),
            (None, None) => Ok(None),
            _ => {
                self.pos = start;
                self.err(field, "half-sentinel point")
            }
        }
    }
}

/// Inverse of [`serialize_action`]; tolerates surrounding whitespace only.
pub fn parse_action(text: &str) -> Result<ActionDecision> {
    let trimmed_start = text.len() - text.trim_start().len();
    let s = text.trim();
    let mut c = Cursor {
        s,
        pos: 0,
        base: trimmed_start,
    };
    c.expect(ACTION_PREFIX, "action_type")?;
    let Some(end) = c.rest().find(TOUCH) else {
        return c.err("touch_point", "missing field");
    };
    let name = &c.rest()[..end];
    let Some(action_type) = ActionType::from_wire_name(name) else {
        return c.err("action_type", format!("unknown action type `{name}`"));
    };
    c.pos += end;
    c.expect(TOUCH, "touch_point")?;
    let touch_point = c.point("touch_point")?;
    if !c.rest().starts_with(LIFT) {
        return c.err("lift_point", "missing field");
    }
    c.pos += LIFT.len();
    let lift_point = c.point("lift_point")?;
    if !c.rest().starts_with(TEXT) {
        return c.err("typed_text", "missing field");
    }
    c.pos += TEXT.len();
    let typed_text = c.rest().to_string();
    let a = ActionDecision {
        action_type,
        touch_point,
        lift_point,
        typed_text,
    };
    if let Err(e) = a.validate() {
        return Err(Error::Parse {
            field: "action",
            offset: trimmed_start,
            message: e.to_string(),
        });
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CLICK_TEXT: &str = "Action Decision:action_type:CLICK, touch_point:[0.5312, 0.2104], lift_point:[0.5312, 0.2104], typed_text:";

    #[test]
    fn click_example() {
        let a = ActionDecision::click(Point::new(0.5312, 0.2104).unwrap());
        assert_eq!(serialize_action(&a).unwrap(), CLICK_TEXT);
        assert_eq!(parse_action(CLICK_TEXT).unwrap(), a);
    }

    #[test]
    fn status_uses_sentinels_and_spaces() {
        let a = ActionDecision::bare(ActionType::StatusTaskComplete);
        assert_eq!(
            serialize_action(&a).unwrap(),
            "Action Decision:action_type:STATUS TASK COMPLETE, touch_point:[-1.0000, -1.0000], lift_point:[-1.0000, -1.0000], typed_text:"
        );
    }

    #[test]
    fn unknown_type_is_named() {
        let e = parse_action("Action Decision:action_type:FLY, touch_point:[-1.0000, -1.0000], lift_point:[-1.0000, -1.0000], typed_text:")
            .unwrap_err();
        match e {
            Error::Parse { field, offset, message } => {
                assert_eq!(field, "action_type");
                assert_eq!(offset, ACTION_PREFIX.len());
                assert!(message.contains("FLY"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_input_reports_offset() {
        let cut = &CLICK_TEXT[..CLICK_TEXT.len() - ", typed_text:".len()];
        match parse_action(cut).unwrap_err() {
            Error::Parse { field, offset, .. } => {
                assert_eq!(field, "typed_text");
                assert_eq!(offset, cut.len());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn whitespace_tolerance_is_outer_only() {
        let padded = format!("  \n{CLICK_TEXT}\n ");
        assert!(parse_action(&padded).is_ok());
        let inner = CLICK_TEXT.replace("[0.5312, ", "[0.5312,  ");
        assert!(parse_action(&inner).is_err());
    }

    #[test]
    fn rejects_malformed_coordinates() {
        for bad in ["[0.53, 0.2104]", "[1.2000, 0.1000]", "[0.5312, -1.0000]", "[a.bcde, 0.1000]"] {
            let t = CLICK_TEXT.replacen("[0.5312, 0.2104]", bad, 1);
            assert!(parse_action(&t).is_err(), "{bad}");
        }
    }

    #[test]
    fn rejects_invariant_violations() {
        let t = CLICK_TEXT.replace("[0.5312, 0.2104]", "[-1.0000, -1.0000]");
        assert!(matches!(parse_action(&t), Err(Error::Parse { field: "action", .. })));
    }

    pub(crate) fn arb_action() -> impl Strategy<Value = ActionDecision> {
        let unit = 0u16..=COORD_SCALE;
        let typ = prop::sample::select(ActionType::ALL.to_vec());
        (typ, unit.clone(), unit.clone(), unit.clone(), unit, "[a-zA-Z0-9][a-zA-Z0-9 ,.:\\[\\]]{0,14}[a-zA-Z0-9]?")
            .prop_map(|(t, x1, y1, x2, y2, text)| {
                let p = |x, y| Point::from_units(x, y).unwrap();
                match t {
                    ActionType::Click | ActionType::Select => ActionDecision {
                        action_type: t,
                        touch_point: Some(p(x1, y1)),
                        lift_point: Some(p(x2, y2)),
                        typed_text: String::new(),
                    },
                    ActionType::Type => ActionDecision::type_text(&text),
                    t if t.is_scroll() => {
                        let (lo, hi) = (x1.min(x2), x1.max(x2).max(lo_plus(x1.min(x2))));
                        let (a, b) = match t {
                            ActionType::ScrollDown => (p(y1, hi), p(y1, lo)),
                            ActionType::ScrollUp => (p(y1, lo), p(y1, hi)),
                            ActionType::ScrollLeft => (p(lo, y1), p(hi, y1)),
                            _ => (p(hi, y1), p(lo, y1)),
                        };
                        ActionDecision::scroll_between(t, a, b).unwrap()
                    }
                    t => ActionDecision::bare(t),
                }
            })
    }

    fn lo_plus(lo: u16) -> u16 {
        if lo == COORD_SCALE {
            lo
        } else {
            lo + 1
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(a in arb_action().prop_filter("valid", |a| a.validate().is_ok())) {
            let text = serialize_action(&a).unwrap();
            prop_assert_eq!(parse_action(&text).unwrap(), a);
        }
    }
}
