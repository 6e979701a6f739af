//! Per-step slow-fast control: build the context, decode, and let the
//! generated token decide whether the perception module runs.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::action::{parse_action, ActionDecision, PathLabel};
use crate::enhance::{prompt_prefix, request_turn, EnhanceConfig, EnhancedCorpus, EnhancedSample, HISTORY_WINDOW};
use crate::error::{Error, Result};
use crate::model::{generate, Decision, GenerateConfig, Model, Special, MAX_ACTION_BYTES};
use crate::sim::{Episode, Pixels};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Adaptive,
    ForcedFast,
    ForcedSlow,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [InferenceMode::ForcedFast, InferenceMode::Adaptive, InferenceMode::ForcedSlow];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(InferenceMode::Adaptive),
            "fast" => Ok(InferenceMode::ForcedFast),
            "slow" => Ok(InferenceMode::ForcedSlow),
            other => Err(Error::Validation(format!("unknown mode `{other}`; expected adaptive, fast or slow"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Adaptive => "adaptive",
            InferenceMode::ForcedFast => "fast",
            InferenceMode::ForcedSlow => "slow",
        }
    }

    fn decision(self) -> Decision {
        match self {
            InferenceMode::Adaptive => Decision::Free,
            InferenceMode::ForcedFast => Decision::Fast,
            InferenceMode::ForcedSlow => Decision::Slow,
        }
    }
}

/// Outcome of one step. `action` is `None` when the generated text did not
/// parse; such steps score as mismatches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub episode_id: usize,
    pub step: usize,
    pub mode: InferenceMode,
    pub path: PathLabel,
    pub action_text: String,
    #[serde(skip)]
    pub action: Option<ActionDecision>,
    pub us_elapsed: u64,
    pub tokens: usize,
    pub perception_invocations: usize,
    /// `<bop>` tokens among the generated slots.
    pub bops: usize,
    pub bop_margin: f64,
}

impl StepTrace {
    pub fn parse_failed(&self) -> bool {
        self.action.is_none()
    }
}

#[derive(Clone)]
pub struct Controller<'m> {
    pub model: &'m Model,
    pub enhance: EnhanceConfig,
    pub max_action_bytes: usize,
}

impl<'m> Controller<'m> {
    pub fn new(model: &'m Model, enhance: EnhanceConfig) -> Self {
        Self {
            model,
            enhance,
            max_action_bytes: MAX_ACTION_BYTES,
        }
    }

    pub fn predict_step(&self, pixels: &Pixels, goal: &str, history: &[ActionDecision], mode: InferenceMode) -> Result<StepTrace> {
        if history.len() > HISTORY_WINDOW {
            return Err(Error::Validation(format!("history of {} entries; at most two are allowed", history.len())));
        }
        let t0 = Instant::now();
        let prefix = prompt_prefix(&self.enhance, goal, history)?;
        let cfg = GenerateConfig {
            decision: mode.decision(),
            n_latent: Some(self.enhance.n_latent),
            request: request_turn(self.enhance.style),
            max_action_bytes: self.max_action_bytes,
        };
        let g = generate(self.model, &prefix, Some(pixels), &cfg)?;
        let action = parse_action(&g.action_text).ok();
        let bops = g.sequence.slots()[prefix.len()..].iter().filter(|s| s.is_special(Special::Bop)).count();
        let us_elapsed = t0.elapsed().as_micros() as u64;
        Ok(StepTrace {
            episode_id: 0,
            step: 0,
            mode,
            path: if g.emitted_bop { PathLabel::Slow } else { PathLabel::Fast },
            action_text: g.action_text,
            action,
            us_elapsed,
            tokens: g.new_slots,
            perception_invocations: g.perception_invocations,
            bops,
            bop_margin: g.bop_margin,
        })
    }

    /// Predicts one enhanced sample with its recorded (ground-truth) history.
    pub fn predict_sample(&self, corpus: &EnhancedCorpus, sample: &EnhancedSample, mode: InferenceMode) -> Result<StepTrace> {
        let history = sample.history.iter().map(|h| parse_action(h)).collect::<Result<Vec<_>>>()?;
        let mut t = self.predict_step(corpus.image(sample)?, &sample.goal, &history, mode)?;
        t.episode_id = sample.episode;
        t.step = sample.step;
        Ok(t)
    }

    /// Runs every step in order. Teacher-forced history uses the
    /// ground-truth actions; closed-loop history uses the model's parsed
    /// predictions and skips steps whose output did not parse.
    pub fn run_episode(&self, episode: &Episode, episode_id: usize, mode: InferenceMode, teacher_forced: bool) -> Result<Vec<StepTrace>> {
        let mut history: Vec<ActionDecision> = Vec::new();
        let mut traces = Vec::with_capacity(episode.steps.len());
        for (i, st) in episode.steps.iter().enumerate() {
            let window = &history[history.len().saturating_sub(HISTORY_WINDOW)..];
            let mut t = self.predict_step(&st.screen.pixels, &episode.goal, window, mode)?;
            t.episode_id = episode_id;
            t.step = i;
            if teacher_forced {
                history.push(st.action.clone());
            } else if let Some(a) = &t.action {
                history.push(a.clone());
            }
            traces.push(t);
        }
        Ok(traces)
    }
}

/// One JSON record per line.
pub fn write_traces(path: &Path, traces: &[StepTrace]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = Vec::new();
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<StepTrace>> {
    let raw = fs::read(path)?;
    let mut out = Vec::new();
    for (index, line) in BufReader::new(raw.as_slice()).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut t: StepTrace = serde_json::from_str(&line).map_err(|e| Error::Record {
            index,
            message: e.to_string(),
        })?;
        t.action = parse_action(&t.action_text).ok();
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhance::PromptStyle;
    use crate::model::ModelConfig;
    use crate::sim::{generate_episode, ScreenConfig, TaskTemplate};

    fn tiny() -> Model {
        Model::new(ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_f: 8,
            image_width: 32,
            image_height: 32,
            ..ModelConfig::desk()
        })
        .unwrap()
    }

    fn episode(template: TaskTemplate, seed: u64) -> Episode {
        generate_episode(seed, template, &ScreenConfig::for_size(32, 32)).unwrap()
    }

    #[test]
    fn every_corpus_action_fits_the_decode_budget() {
        use crate::action::{ActionType, Point};
        use crate::sim::TYPE_WORDS;
        let p = Point::from_units(10_000, 10_000).unwrap();
        let mut actions: Vec<ActionDecision> = ActionType::ALL
            .iter()
            .filter(|t| !t.is_pointed() && **t != ActionType::Type)
            .map(|&t| ActionDecision::bare(t))
            .collect();
        actions.extend(ActionType::ALL.iter().filter(|t| t.is_scroll()).map(|&t| ActionDecision::scroll(t).unwrap()));
        actions.push(ActionDecision::click(p));
        actions.push(ActionDecision::select(p));
        actions.extend(TYPE_WORDS.iter().map(|w| ActionDecision::type_text(w)));
        for a in actions {
            let n = crate::action::serialize_action(&a).unwrap().len();
            assert!(n < MAX_ACTION_BYTES, "{a:?} serializes to {n} bytes");
        }
    }

    #[test]
    fn forced_modes_fix_the_perception_count() {
        let m = tiny();
        let c = Controller::new(&m, EnhanceConfig::for_model(&m.config, PromptStyle::Compact));
        let ep = episode(TaskTemplate::TapTarget, 1);
        for t in c.run_episode(&ep, 0, InferenceMode::ForcedSlow, true).unwrap() {
            assert_eq!((t.perception_invocations, t.path), (1, PathLabel::Slow));
        }
        for t in c.run_episode(&ep, 0, InferenceMode::ForcedFast, true).unwrap() {
            assert_eq!((t.perception_invocations, t.path), (0, PathLabel::Fast));
        }
    }

    #[test]
    fn token_counts_order_by_mode() {
        let mut m = tiny();
        let bias = m.params.id("head.bias").unwrap();
        m.params.get_mut(bias).tensor.data_mut()[Special::Bop.id()] = 0.05;
        let c = Controller::new(&m, EnhanceConfig::for_model(&m.config, PromptStyle::Compact));
        let ep = episode(TaskTemplate::ScrollThenTap, 2);
        let run = |mode| c.run_episode(&ep, 0, mode, true).unwrap();
        let (f, a, s) = (run(InferenceMode::ForcedFast), run(InferenceMode::Adaptive), run(InferenceMode::ForcedSlow));
        for i in 0..ep.steps.len() {
            assert!(f[i].tokens <= a[i].tokens && a[i].tokens <= s[i].tokens);
            let same = if a[i].path == PathLabel::Slow { &s[i] } else { &f[i] };
            assert_eq!(a[i].action_text, same.action_text);
        }
    }

    #[test]
    fn history_window_slides() {
        let m = tiny();
        let c = Controller::new(&m, EnhanceConfig::for_model(&m.config, PromptStyle::Compact));
        let ep = episode(TaskTemplate::ScrollThenTap, 4);
        assert_eq!(ep.steps.len(), 3);
        let traces = c.run_episode(&ep, 7, InferenceMode::ForcedFast, true).unwrap();
        assert_eq!(traces.iter().map(|t| (t.episode_id, t.step)).collect::<Vec<_>>(), [(7, 0), (7, 1), (7, 2)]);
        let too_long = vec![ep.steps[0].action.clone(); 3];
        assert!(c.predict_step(&ep.steps[0].screen.pixels, "g", &too_long, InferenceMode::Adaptive).is_err());
    }

    #[test]
    fn untrained_output_is_a_recorded_parse_failure() {
        let m = tiny();
        let c = Controller::new(&m, EnhanceConfig::for_model(&m.config, PromptStyle::Compact));
        let ep = episode(TaskTemplate::TypeText, 3);
        let t = c.predict_step(&ep.steps[0].screen.pixels, &ep.goal, &[], InferenceMode::Adaptive).unwrap();
        assert!(t.parse_failed());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        write_traces(&p, &[t.clone()]).unwrap();
        let back = read_traces(&p).unwrap();
        assert_eq!(back[0].action_text, t.action_text);
        assert_eq!(back[0].path, t.path);
        assert!(back[0].parse_failed());
    }

    #[test]
    fn modes_parse() {
        for m in InferenceMode::ALL {
            assert_eq!(InferenceMode::parse(m.name()).unwrap(), m);
        }
        assert!(InferenceMode::parse("medium").is_err());
    }
}
