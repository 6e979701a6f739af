//! Normalization of foreign dataset action spaces onto the unified space.
//!
//! The mapping lives in a versioned JSON data file; the built-in copy is
//! `data/action_maps.json` and alternative tables can be loaded at runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ActionDecision, ActionType, Point};
use crate::error::{Error, Result};

const BUILTIN_MAPS: &str = include_str!("../../data/action_maps.json");
pub const MAPPING_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SourceSpace {
    AndroidControl,
    GUIOdyssey,
    GUIAct,
}

impl fmt::Display for SourceSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SourceSpace::AndroidControl => "AndroidControl",
            SourceSpace::GUIOdyssey => "GUIOdyssey",
            SourceSpace::GUIAct => "GUIAct",
        };
        f.write_str(s)
    }
}

impl FromStr for SourceSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AndroidControl" => Ok(SourceSpace::AndroidControl),
            "GUIOdyssey" => Ok(SourceSpace::GUIOdyssey),
            "GUIAct" => Ok(SourceSpace::GUIAct),
            other => Err(Error::Validation(format!("unknown source space `{other}`"))),
        }
    }
}

/// A foreign action record: a kind tag plus whatever arguments it carries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForeignAction {
    pub kind: String,
    #[serde(default)]
    pub point: Option<(f64, f64)>,
    #[serde(default)]
    pub end_point: Option<(f64, f64)>,
    #[serde(default)]
    pub direction: Option<String>,
    #[serde(default)]
    pub text: Option<String>,
}

impl ForeignAction {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn at(mut self, x: f64, y: f64) -> Self {
        self.point = Some((x, y));
        self
    }

    pub fn with_text(mut self, t: &str) -> Self {
        self.text = Some(t.to_string());
        self
    }

    pub fn toward(mut self, d: &str) -> Self {
        self.direction = Some(d.to_string());
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Rule {
    Tap,
    Text,
    Scroll,
    Bare,
}

#[derive(Clone, Debug, Deserialize)]
struct Mapping {
    rule: Rule,
    #[serde(rename = "type")]
    target: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
struct MappingFile {
    version: u32,
    spaces: BTreeMap<String, BTreeMap<String, Mapping>>,
}

#[derive(Clone, Debug)]
pub struct MappingTables {
    spaces: BTreeMap<String, BTreeMap<String, Mapping>>,
}

impl MappingTables {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_MAPS).expect("built-in mapping tables are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MappingFile = serde_json::from_str(text)?;
        if file.version != MAPPING_VERSION {
            return Err(Error::Config(format!("mapping table version {} unsupported", file.version)));
        }
        for table in file.spaces.values() {
            for (kind, m) in table {
                match (&m.rule, &m.target) {
                    (Rule::Scroll, _) => {}
                    (_, Some(t)) if ActionType::from_enum_name(t).is_some() => {}
                    _ => return Err(Error::Config(format!("mapping for `{kind}` names no valid action type"))),
                }
            }
        }
        Ok(Self { spaces: file.spaces })
    }

    pub fn normalize(&self, action: &ForeignAction, space: SourceSpace) -> Result<ActionDecision> {
        let unmapped = || Error::Unmapped {
            space: space.to_string(),
            kind: action.kind.clone(),
        };
        let m = self
            .spaces
            .get(&space.to_string())
            .and_then(|t| t.get(&action.kind))
            .ok_or_else(unmapped)?;
        let target = m.target.as_deref().and_then(ActionType::from_enum_name);
        let out = match m.rule {
            Rule::Tap => {
                let (x, y) = action
                    .point
                    .ok_or_else(|| Error::Validation(format!("`{}` needs a point", action.kind)))?;
                let p = Point::new(x, y)?;
                let t = target.ok_or_else(unmapped)?;
                ActionDecision {
                    action_type: t,
                    touch_point: Some(p),
                    lift_point: Some(p),
                    typed_text: String::new(),
                }
            }
            Rule::Text => {
                let text = action
                    .text
                    .as_deref()
                    .ok_or_else(|| Error::Validation(format!("`{}` needs text", action.kind)))?;
                ActionDecision::type_text(text.trim())
            }
            Rule::Scroll => {
                let dir = action
                    .direction
                    .as_deref()
                    .ok_or_else(|| Error::Validation(format!("`{}` needs a direction", action.kind)))?;
                let t = match dir.to_ascii_lowercase().as_str() {
                    "up" => ActionType::ScrollUp,
                    "down" => ActionType::ScrollDown,
                    "left" => ActionType::ScrollLeft,
                    "right" => ActionType::ScrollRight,
                    other => return Err(Error::Validation(format!("unknown scroll direction `{other}`"))),
                };
                ActionDecision::scroll(t)?
            }
            Rule::Bare => ActionDecision::bare(target.ok_or_else(unmapped)?),
        };
        out.validate()?;
        Ok(out)
    }
}

/// Maps a foreign action using the built-in tables.
pub fn normalize_foreign(action: &ForeignAction, space: SourceSpace) -> Result<ActionDecision> {
    MappingTables::builtin().normalize(action, space)
}
