//! Turns corpus steps into training sequences: the chat template, the
//! latent span, the perception frame for Slow samples, thought annotations
//! and the loss mask.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{classify_perception, parse_action, serialize_action, ActionDecision, ActionType, PathLabel};
use crate::error::{Error, Result};
use crate::model::{
    detection_turn, latent_span, validate_frames, ModelConfig, Slot, SlotTag, SpanContent, Special, TokenSequence,
};
use crate::sim::{Corpus, PixelStore, Pixels, Screen};

pub const ENHANCED_SCHEMA_VERSION: u32 = 1;
pub const MAX_THOUGHT_BYTES: usize = 32;
pub const HISTORY_WINDOW: usize = 2;

const SAMPLES_FILE: &str = "enhanced.jsonl";
const PIXELS_FILE: &str = "pixels.bin";
const MANIFEST_FILE: &str = "enhanced_manifest.json";

const INSTRUCTION: &str = "Predict the next action to be taken according to the Goal\nLet's think step by step.";
const REQUEST: &str = "Request for additional features if required or answer the question directly based on your observations";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// The full chat template with serialized history.
    Full,
    /// Drops the constant instruction and request sentences and lists only
    /// the action types of the history.
    Compact,
}

impl PromptStyle {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PromptStyle::Full),
            "compact" => Ok(PromptStyle::Compact),
            other => Err(Error::Validation(format!("unknown prompt style `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    pub n_latent: usize,
    pub style: PromptStyle,
    pub global_slots: usize,
    pub injected_slots: usize,
    pub coarse_grid: (usize, usize),
}

impl EnhanceConfig {
    pub fn for_model(cfg: &ModelConfig, style: PromptStyle) -> Self {
        Self {
            n_latent: cfg.n_latent,
            style,
            global_slots: cfg.global_slots(),
            injected_slots: cfg.injected_slots(),
            coarse_grid: cfg.coarse_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedSample {
    pub episode: usize,
    pub step: usize,
    /// Latent form: `n_latent` placeholders between `<bot>` and `<eot>`.
    pub sequence: TokenSequence,
    pub image_ref: String,
    pub target_action: ActionDecision,
    pub path_label: PathLabel,
    /// Up to two prior action texts, oldest first.
    pub history: Vec<String>,
    pub goal: String,
    /// Explicit thought used by the first half of thought training.
    pub thought: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhanceStats {
    pub samples: usize,
    pub fast: usize,
    pub slow: usize,
    pub by_type: BTreeMap<String, usize>,
}

impl EnhanceStats {
    pub fn of(samples: &[EnhancedSample]) -> Self {
        let mut s = EnhanceStats::default();
        for x in samples {
            s.samples += 1;
            match x.path_label {
                PathLabel::Fast => s.fast += 1,
                PathLabel::Slow => s.slow += 1,
            }
            *s.by_type.entry(x.target_action.action_type.wire_name().to_string()).or_insert(0) += 1;
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnhancedCorpus {
    pub samples: Vec<EnhancedSample>,
    pub pixels: PixelStore,
    pub stats: EnhanceStats,
}

impl EnhancedCorpus {
    pub fn image(&self, sample: &EnhancedSample) -> Result<&Pixels> {
        self.pixels
            .get(&sample.image_ref)
            .ok_or_else(|| Error::Data(format!("missing pixel blob {}", sample.image_ref)))
    }

    pub fn take(&self, n: usize) -> Self {
        let samples: Vec<_> = self.samples.iter().take(n).cloned().collect();
        Self {
            stats: EnhanceStats::of(&samples),
            samples,
            pixels: self.pixels.clone(),
        }
    }
}

fn history_text(style: PromptStyle, history: &[ActionDecision]) -> Result<String> {
    if history.is_empty() {
        return Ok("None".into());
    }
    let parts = history
        .iter()
        .map(|a| match style {
            PromptStyle::Full => serialize_action(a),
            PromptStyle::Compact => Ok(a.action_type.wire_name().to_string()),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.join("; "))
}

/// The opening user turn through the `<assistant>` marker that precedes
/// `<bot>`. Only the two most recent history entries are shown.
pub fn prompt_prefix(cfg: &EnhanceConfig, goal: &str, history: &[ActionDecision]) -> Result<TokenSequence> {
    let recent = &history[history.len().saturating_sub(HISTORY_WINDOW)..];
    let mut s = TokenSequence::new();
    s.push_special(Special::User, false);
    s.push_special(Special::Image, false);
    s.push_placeholders(SlotTag::ImagePatch, cfg.global_slots);
    s.push_text(&format!("\nPrevious Actions: {}\nGoal: {goal}", history_text(cfg.style, recent)?), false);
    if cfg.style == PromptStyle::Full {
        s.push_text(&format!("\n{INSTRUCTION}"), false);
    }
    s.push_special(Special::Assistant, false);
    Ok(s)
}

/// The user turn between `<eot>` and the decision point.
pub fn request_turn(style: PromptStyle) -> TokenSequence {
    let mut s = TokenSequence::new();
    s.push_special(Special::User, false);
    if style == PromptStyle::Full {
        s.push_text(REQUEST, false);
    }
    s.push_special(Special::Assistant, false);
    s
}

/// Everything from the decision point on.
fn response(cfg: &EnhanceConfig, action: &ActionDecision, path: PathLabel) -> Result<TokenSequence> {
    let mut s = TokenSequence::new();
    if path == PathLabel::Slow {
        s.push_special(Special::Bop, false);
        s.push_special(Special::Ctrl, false);
        s.push_special(Special::Eop, false);
        s.extend(&detection_turn(cfg.injected_slots));
    }
    s.push_text(&serialize_action(action)?, false);
    s.push_special(Special::Eos, false);
    Ok(s)
}

fn cell_of(cfg: &EnhanceConfig, x: f64, y: f64) -> (usize, usize) {
    let (rows, cols) = cfg.coarse_grid;
    (((y * rows as f64) as usize).min(rows - 1), ((x * cols as f64) as usize).min(cols - 1))
}

/// Templated stand-in for a natural-language thought, at most 32 bytes.
pub fn thought_text(cfg: &EnhanceConfig, screen: &Screen, action: &ActionDecision) -> String {
    let t = action.action_type;
    let text = match t {
        ActionType::Click | ActionType::Select => {
            let p = action.touch_point.expect("pointed action");
            let (px, py) = ((p.x() * screen.width as f64) as u32, (p.y() * screen.height as f64) as u32);
            let caption = screen
                .elements
                .iter()
                .find(|e| e.bbox.contains(px, py))
                .map_or("target", |e| e.caption.as_str());
            let (r, c) = cell_of(cfg, p.x(), p.y());
            let verb = if t == ActionType::Click { "tap" } else { "select" };
            format!("{verb} {caption} at r{r}c{c}; precise")
        }
        ActionType::Type => format!("type {}; coarse", action.typed_text),
        ActionType::StatusTaskComplete => "done; coarse".into(),
        ActionType::StatusTaskImpossible => "not found; coarse".into(),
        other => format!("{}; coarse", other.wire_name().to_lowercase()),
    };
    let mut text = text;
    text.truncate(MAX_THOUGHT_BYTES);
    text
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossMaskPolicy {
    pub thought_bytes: bool,
}

/// Marks the supervised slots: action bytes after the final `<assistant>`,
/// control tokens, `<eos>`, and (optionally) bytes inside the thought span.
pub fn apply_loss_mask(seq: &mut TokenSequence, policy: LossMaskPolicy) -> Result<()> {
    seq.clear_loss();
    let last_assistant = seq
        .last_position_of(Special::Assistant)
        .ok_or_else(|| Error::Sequence("no <assistant> turn to supervise".into()))?;
    let mut in_span = false;
    for i in 0..seq.len() {
        let on = match seq.slot(i) {
            Slot::Token(id) => match Special::from_id(*id) {
                Some(Special::Bot) => {
                    in_span = true;
                    true
                }
                Some(Special::Eot) => {
                    in_span = false;
                    true
                }
                Some(Special::Bop | Special::Ctrl | Special::Eop | Special::Eos) => true,
                Some(_) => false,
                None => i > last_assistant || (in_span && policy.thought_bytes),
            },
            Slot::Continuous { .. } => false,
        };
        seq.set_loss(i, on);
    }
    if !seq.loss_mask().iter().any(|&b| b) {
        return Err(Error::Sequence("sample has no supervised slot".into()));
    }
    Ok(())
}

pub fn enhance_sample(
    cfg: &EnhanceConfig,
    screen: &Screen,
    goal: &str,
    history: &[ActionDecision],
    action: &ActionDecision,
) -> Result<EnhancedSample> {
    let path = classify_perception(action);
    let mut seq = prompt_prefix(cfg, goal, history)?;
    seq.extend(&latent_span(cfg.n_latent));
    seq.extend(&request_turn(cfg.style));
    seq.extend(&response(cfg, action, path)?);
    apply_loss_mask(&mut seq, LossMaskPolicy { thought_bytes: false })?;
    let recent = &history[history.len().saturating_sub(HISTORY_WINDOW)..];
    Ok(EnhancedSample {
        episode: 0,
        step: 0,
        sequence: seq,
        image_ref: screen.pixels.content_hash(),
        target_action: action.clone(),
        path_label: path,
        history: recent.iter().map(serialize_action).collect::<Result<_>>()?,
        goal: goal.to_string(),
        thought: thought_text(cfg, screen, action),
    })
}

/// The canonical sequence and its text form.
pub fn render_prompt(sample: &EnhancedSample) -> (TokenSequence, String) {
    (sample.sequence.clone(), sample.sequence.text())
}

fn span_of(seq: &TokenSequence) -> Result<(usize, usize)> {
    let bot = seq.position_of(Special::Bot);
    let eot = seq.position_of(Special::Eot);
    match (bot, eot) {
        (Some(b), Some(e)) if b < e => Ok((b, e)),
        _ => Err(Error::Data("sequence has no <bot>…<eot> span".into())),
    }
}

/// Stage-A form: the thought bytes occupy the span, under language loss.
pub fn with_thought(sample: &EnhancedSample) -> Result<TokenSequence> {
    if sample.thought.is_empty() {
        return Err(Error::Data(format!(
            "sample {}:{} carries no thought annotation",
            sample.episode, sample.step
        )));
    }
    let (b, e) = span_of(&sample.sequence)?;
    let mut out = TokenSequence::new();
    for i in 0..=b {
        out.push(sample.sequence.slot(i).clone(), false);
    }
    out.push_text(&sample.thought, false);
    for i in e..sample.sequence.len() {
        out.push(sample.sequence.slot(i).clone(), false);
    }
    apply_loss_mask(&mut out, LossMaskPolicy { thought_bytes: true })?;
    Ok(out)
}

/// Replaces the span content with `n_latent` latent placeholders. A span
/// that already holds exactly that is left as is.
pub fn latent_swap(seq: &TokenSequence, n_latent: usize) -> Result<TokenSequence> {
    let (b, e) = span_of(seq)?;
    let mut out = TokenSequence::new();
    for i in 0..=b {
        out.push(seq.slot(i).clone(), seq.loss_mask()[i]);
    }
    let inner = &seq.slots()[b + 1..e];
    let already = inner.len() == n_latent && inner.iter().all(|s| s.tag() == Some(SlotTag::LatentThought));
    if already {
        for s in inner {
            out.push(s.clone(), false);
        }
    } else {
        out.push_placeholders(SlotTag::LatentThought, n_latent);
    }
    for i in e..seq.len() {
        out.push(seq.slot(i).clone(), seq.loss_mask()[i]);
    }
    Ok(out)
}

/// Checks the frame invariants of one sample.
pub fn validate_sample(sample: &EnhancedSample, n_latent: usize) -> Result<()> {
    let f = validate_frames(&sample.sequence, SpanContent::Latent(n_latent))?;
    if f.slow != (sample.path_label == PathLabel::Slow) {
        return Err(Error::Sequence("perception frame present but label disagrees".into()));
    }
    if sample.path_label != classify_perception(&sample.target_action) {
        return Err(Error::Sequence("path label disagrees with the action".into()));
    }
    if sample.history.len() > HISTORY_WINDOW {
        return Err(Error::Sequence("history longer than two entries".into()));
    }
    if sample.thought.is_empty() || sample.thought.len() > MAX_THOUGHT_BYTES {
        return Err(Error::Sequence("thought annotation must hold 1..=32 bytes".into()));
    }
    Ok(())
}

/// One sample per step, in corpus order, with ground-truth history.
pub fn enhance_corpus(corpus: &Corpus, cfg: &EnhanceConfig) -> Result<EnhancedCorpus> {
    let mut pixels = PixelStore::default();
    let mut samples = Vec::with_capacity(corpus.step_count());
    for (ei, ep) in corpus.episodes.iter().enumerate() {
        let actions: Vec<ActionDecision> = ep.steps.iter().map(|s| s.action.clone()).collect();
        for (si, st) in ep.steps.iter().enumerate() {
            let mut s = enhance_sample(cfg, &st.screen, &ep.goal, &actions[..si], &st.action)?;
            s.episode = ei;
            s.step = si;
            pixels.insert(&st.screen.pixels);
            samples.push(s);
        }
    }
    Ok(EnhancedCorpus {
        stats: EnhanceStats::of(&samples),
        samples,
        pixels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub schema_version: u32,
    pub episode: usize,
    pub step: usize,
    pub sequence_tokens: Vec<String>,
    pub loss_mask: String,
    pub image_ref: String,
    pub action_text: String,
    pub path_label: PathLabel,
    pub history: Vec<String>,
    pub goal: String,
    pub thought: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhancedManifest {
    pub schema_version: u32,
    pub config: EnhanceConfig,
    pub stats: EnhanceStats,
    pub samples_sha256: String,
}

impl SampleRecord {
    pub fn from_sample(s: &EnhancedSample) -> Result<Self> {
        Ok(Self {
            schema_version: ENHANCED_SCHEMA_VERSION,
            episode: s.episode,
            step: s.step,
            sequence_tokens: s.sequence.to_pieces(),
            loss_mask: s.sequence.loss_mask().iter().map(|&b| if b { '1' } else { '0' }).collect(),
            image_ref: s.image_ref.clone(),
            action_text: serialize_action(&s.target_action)?,
            path_label: s.path_label,
            history: s.history.clone(),
            goal: s.goal.clone(),
            thought: s.thought.clone(),
        })
    }

    pub fn into_sample(self) -> Result<EnhancedSample> {
        if self.schema_version != ENHANCED_SCHEMA_VERSION {
            return Err(Error::Data(format!("enhanced schema version {} unsupported", self.schema_version)));
        }
        let mut sequence = TokenSequence::from_pieces(&self.sequence_tokens)?;
        if self.loss_mask.len() != sequence.len() {
            return Err(Error::Data("loss mask length differs from the sequence".into()));
        }
        for (i, c) in self.loss_mask.chars().enumerate() {
            sequence.set_loss(i, c == '1');
        }
        Ok(EnhancedSample {
            episode: self.episode,
            step: self.step,
            sequence,
            image_ref: self.image_ref,
            target_action: parse_action(&self.action_text)?,
            path_label: self.path_label,
            history: self.history,
            goal: self.goal,
            thought: self.thought,
        })
    }
}

pub fn write_enhanced(dir: &Path, corpus: &EnhancedCorpus, cfg: &EnhanceConfig) -> Result<EnhancedManifest> {
    fs::create_dir_all(dir)?;
    let mut lines = Vec::new();
    for s in &corpus.samples {
        serde_json::to_writer(&mut lines, &SampleRecord::from_sample(s)?)?;
        lines.push(b'\n');
    }
    let mut blob = Vec::new();
    corpus.pixels.write_to(&mut blob)?;
    let manifest = EnhancedManifest {
        schema_version: ENHANCED_SCHEMA_VERSION,
        config: cfg.clone(),
        stats: corpus.stats.clone(),
        samples_sha256: hex::encode(Sha256::digest(&lines)),
    };
    fs::write(dir.join(SAMPLES_FILE), lines)?;
    fs::write(dir.join(PIXELS_FILE), blob)?;
    let mut m = serde_json::to_vec_pretty(&manifest)?;
    m.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), m)?;
    Ok(manifest)
}

pub fn read_enhanced(dir: &Path) -> Result<(EnhancedCorpus, EnhancedManifest)> {
    let manifest: EnhancedManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.schema_version != ENHANCED_SCHEMA_VERSION {
        return Err(Error::Data(format!("enhanced schema version {} unsupported", manifest.schema_version)));
    }
    let pixels = PixelStore::read_from(BufReader::new(fs::File::open(dir.join(PIXELS_FILE))?))?;
    let raw = fs::read(dir.join(SAMPLES_FILE))?;
    if hex::encode(Sha256::digest(&raw)) != manifest.samples_sha256 {
        return Err(Error::Data("enhanced samples do not match the manifest hash".into()));
    }
    let mut samples = Vec::new();
    for (index, line) in BufReader::new(raw.as_slice()).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wrap = |e: Error| Error::Record { index, message: e.to_string() };
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| wrap(e.into()))?;
        let s = rec.into_sample().map_err(wrap)?;
        if pixels.get(&s.image_ref).is_none() {
            return Err(wrap(Error::Data(format!("missing pixel blob {}", s.image_ref))));
        }
        samples.push(s);
    }
    let corpus = EnhancedCorpus {
        stats: EnhanceStats::of(&samples),
        samples,
        pixels,
    };
    Ok((corpus, manifest))
}
