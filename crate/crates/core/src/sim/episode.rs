use serde::{Deserialize, Serialize};

use super::{generate_screen_with, glyph_caption, glyph_kind, Screen, ScreenConfig, SEARCH_GLYPH, TAPPABLE};
use crate::action::{ActionDecision, ActionType};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Words the type template may ask for.
pub const TYPE_WORDS: [&str; 12] = [
    "hello", "pizza", "weather", "news", "coffee", "train", "movies", "hotel", "jazz", "taxi", "recipes", "soccer",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTemplate {
    TapTarget,
    ScrollThenTap,
    TypeText,
    Impossible,
}

impl TaskTemplate {
    pub const ALL: [TaskTemplate; 4] = [
        TaskTemplate::TapTarget,
        TaskTemplate::ScrollThenTap,
        TaskTemplate::TypeText,
        TaskTemplate::Impossible,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskTemplate::TapTarget => "tap_target",
            TaskTemplate::ScrollThenTap => "scroll_then_tap",
            TaskTemplate::TypeText => "type_text",
            TaskTemplate::Impossible => "impossible",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown task template `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step {
    pub screen: Screen,
    pub action: ActionDecision,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub seed: u64,
    pub template: TaskTemplate,
    pub goal: String,
    pub steps: Vec<Step>,
}

/// Goal text for a template; `target` is a glyph id or a word index.
pub fn goal_text(template: TaskTemplate, target: usize) -> String {
    match template {
        TaskTemplate::TapTarget | TaskTemplate::Impossible => {
            let g = target as u8;
            format!("tap the {} {}", glyph_caption(g), glyph_kind(g).word())
        }
        TaskTemplate::ScrollThenTap => format!("scroll down then tap {}", glyph_caption(target as u8)),
        TaskTemplate::TypeText => format!("type {}", TYPE_WORDS[target]),
    }
}

/// Builds one episode. Every screen is drawn from `rng`, so the episode is a
/// pure function of the seed and configuration.
pub fn generate_episode(seed: u64, template: TaskTemplate, cfg: &ScreenConfig) -> Result<Episode> {
    let mut rng = CounterRng::new(seed);
    let tappable: Vec<u8> = TAPPABLE.collect();
    let complete = ActionDecision::bare(ActionType::StatusTaskComplete);
    let (goal, steps) = match template {
        TaskTemplate::TapTarget => {
            let target = *rng.choose(&tappable);
            let s1 = generate_screen_with(&mut rng, cfg, &[target], &[])?;
            let at = s1.find_glyph(target).expect("required glyph placed").center(cfg.width, cfg.height);
            let s2 = generate_screen_with(&mut rng, cfg, &[], &[])?;
            (
                goal_text(template, target as usize),
                vec![
                    Step { screen: s1, action: ActionDecision::click(at) },
                    Step { screen: s2, action: complete },
                ],
            )
        }
        TaskTemplate::ScrollThenTap => {
            let target = *rng.choose(&tappable);
            let s1 = generate_screen_with(&mut rng, cfg, &[], &[target])?;
            let s2 = generate_screen_with(&mut rng, cfg, &[target], &[])?;
            let at = s2.find_glyph(target).expect("required glyph placed").center(cfg.width, cfg.height);
            let s3 = generate_screen_with(&mut rng, cfg, &[], &[])?;
            (
                goal_text(template, target as usize),
                vec![
                    Step { screen: s1, action: ActionDecision::scroll(ActionType::ScrollDown)? },
                    Step { screen: s2, action: ActionDecision::click(at) },
                    Step { screen: s3, action: complete },
                ],
            )
        }
        TaskTemplate::TypeText => {
            let word = rng.below(TYPE_WORDS.len() as u64) as usize;
            let s1 = generate_screen_with(&mut rng, cfg, &[SEARCH_GLYPH], &[])?;
            let s2 = generate_screen_with(&mut rng, cfg, &[SEARCH_GLYPH], &[])?;
            (
                goal_text(template, word),
                vec![
                    Step { screen: s1, action: ActionDecision::type_text(TYPE_WORDS[word]) },
                    Step { screen: s2, action: complete },
                ],
            )
        }
        TaskTemplate::Impossible => {
            let target = *rng.choose(&tappable);
            let s1 = generate_screen_with(&mut rng, cfg, &[], &[target])?;
            (
                goal_text(template, target as usize),
                vec![Step { screen: s1, action: ActionDecision::bare(ActionType::StatusTaskImpossible) }],
            )
        }
    };
    Ok(Episode {
        seed,
        template,
        goal,
        steps,
    })
}
