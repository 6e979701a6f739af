//! Greedy decoding under the frame grammar.
//!
//! ```text
//! prefix <bot> <latent>×n <eot> request ( <bop><ctrl><eop> detection | ) action <eos>
//! ```
//!
//! The engine writes every slot whose content is fixed by the grammar. The
//! model chooses only the first assistant token after the request turn
//! (`<bop>` or the first action byte) and the action bytes.

use super::{Model, Slot, SlotTag, Special, Stream, TokenSequence};
use crate::error::{Error, Result};
use crate::perception::AttentionDump;
use crate::sim::Pixels;

/// Longest canonical action (126 bytes) plus room for typed text.
pub const MAX_ACTION_BYTES: usize = 160;

/// Who picks the path at the decision point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    /// The model's own argmax over `<bop>` and printable bytes.
    Free,
    /// `<bop>` is masked out.
    Fast,
    /// `<bop>` is forced.
    Slow,
}

#[derive(Clone, Debug)]
pub struct GenerateConfig {
    pub decision: Decision,
    /// Latent slots between `<bot>` and `<eot>`; defaults to the model's `n_latent`.
    pub n_latent: Option<usize>,
    /// Slots fed after `<eot>` and before the decision point.
    pub request: TokenSequence,
    pub max_action_bytes: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            decision: Decision::Free,
            n_latent: None,
            request: TokenSequence::new(),
            max_action_bytes: MAX_ACTION_BYTES,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generation {
    /// Everything fed, prefix included, with continuous embeddings resolved.
    pub sequence: TokenSequence,
    /// Slots appended after the prefix.
    pub new_slots: usize,
    pub emitted_bop: bool,
    pub action_text: String,
    pub latent_steps: usize,
    pub perception_invocations: usize,
    /// `<bop>` logit minus the best printable logit at the decision point.
    pub bop_margin: f64,
    pub attention: Vec<AttentionDump>,
    /// Stopped at `max_action_bytes` without `<eos>`.
    pub hit_limit: bool,
}

/// `<bot>`, `n` latent placeholders, `<eot>`.
pub fn latent_span(n: usize) -> TokenSequence {
    let mut s = TokenSequence::new();
    s.push_special(Special::Bot, false);
    s.push_placeholders(SlotTag::LatentThought, n);
    s.push_special(Special::Eot, false);
    s
}

/// `<user><detection_image>`, `slots` perception placeholders, `<assistant>`.
pub fn detection_turn(slots: usize) -> TokenSequence {
    let mut s = TokenSequence::new();
    s.push_special(Special::User, false);
    s.push_special(Special::DetectionImage, false);
    s.push_placeholders(SlotTag::PerceptionFeature, slots);
    s.push_special(Special::Assistant, false);
    s
}

fn printable(id: usize) -> bool {
    (0x20..=0x7e).contains(&id)
}

fn argmax(logits: &[f64], allowed: impl Fn(usize) -> bool) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, &x) in logits.iter().enumerate() {
        if allowed(i) && (best.0 == usize::MAX || x > best.1) {
            best = (i, x);
        }
    }
    best.0
}

pub fn generate(model: &Model, prefix: &TokenSequence, image: Option<&Pixels>, cfg: &GenerateConfig) -> Result<Generation> {
    let mc = &model.config;
    let n_latent = cfg.n_latent.unwrap_or(mc.n_latent);
    let worst = prefix.len() + n_latent + 2 + cfg.request.len() + 3 + mc.injected_slots() + 3 + cfg.max_action_bytes + 1;
    if worst > mc.max_seq {
        return Err(Error::Generation(format!(
            "a length-{} prefix may grow to {worst} slots, beyond max_seq {}",
            prefix.len(),
            mc.max_seq
        )));
    }
    if prefix.is_empty() {
        return Err(Error::Generation("empty prefix".into()));
    }
    let mut s = Stream::new(model, image);
    s.feed(prefix)?;
    s.feed(&latent_span(n_latent))?;
    if !cfg.request.is_empty() {
        s.feed(&cfg.request)?;
    }

    let logits = s.next_logits()?;
    let bop = Special::Bop.id();
    let best_byte = argmax(&logits, printable);
    let bop_margin = logits[bop] - logits[best_byte];
    let slow = match cfg.decision {
        Decision::Free => bop_margin > 0.0,
        Decision::Fast => false,
        Decision::Slow => true,
    };
    let mut action = Vec::new();
    let mut next = if slow {
        for sp in [Special::Bop, Special::Ctrl, Special::Eop] {
            s.feed_special(sp)?;
        }
        s.feed(&detection_turn(mc.injected_slots()))?;
        argmax(&s.next_logits()?, |i| printable(i) || i == Special::Eos.id())
    } else {
        best_byte
    };
    let mut hit_limit = true;
    while action.len() < cfg.max_action_bytes {
        if next == Special::Eos.id() {
            s.feed_special(Special::Eos)?;
            hit_limit = false;
            break;
        }
        action.push(next as u8);
        s.feed_slots(&[Slot::Token(next)])?;
        next = argmax(&s.next_logits()?, |i| printable(i) || i == Special::Eos.id());
    }

    let grid = mc.fine_grid();
    let action_text = String::from_utf8_lossy(&action).into_owned();
    let attention = s
        .perception_calls()
        .iter()
        .map(|c| AttentionDump::new(grid, &c.attention, Some(action_text.clone())))
        .collect();
    let sequence = s.sequence().clone();
    Ok(Generation {
        new_slots: sequence.len() - prefix.len(),
        sequence,
        emitted_bop: slow,
        action_text,
        latent_steps: n_latent,
        perception_invocations: s.perception_calls().len(),
        bop_margin,
        attention,
        hit_limit,
    })
}
