//! Mixed discrete/continuous token sequences and their frame validator.

use serde::{Deserialize, Serialize};

use super::vocab::{decode_ids, encode_text, Special, BYTE_TOKENS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotTag {
    LatentThought,
    PerceptionFeature,
    ImagePatch,
}

impl SlotTag {
    fn name(self) -> &'static str {
        match self {
            SlotTag::LatentThought => "latent",
            SlotTag::PerceptionFeature => "perception",
            SlotTag::ImagePatch => "image_patch",
        }
    }
}

/// One position. A continuous slot with no embedding is a placeholder that
/// the model resolves during its forward pass: latent slots from the
/// previous hidden state, image and perception slots from the screen.
#[derive(Clone, Debug, PartialEq)]
pub enum Slot {
    Token(usize),
    Continuous {
        tag: SlotTag,
        index: usize,
        embedding: Option<Vec<f64>>,
    },
}

impl Slot {
    pub fn special(s: Special) -> Self {
        Slot::Token(s.id())
    }

    pub fn placeholder(tag: SlotTag, index: usize) -> Self {
        Slot::Continuous {
            tag,
            index,
            embedding: None,
        }
    }

    pub fn token(&self) -> Option<usize> {
        match self {
            Slot::Token(id) => Some(*id),
            _ => None,
        }
    }

    pub fn is_special(&self, s: Special) -> bool {
        self.token() == Some(s.id())
    }

    pub fn tag(&self) -> Option<SlotTag> {
        match self {
            Slot::Continuous { tag, .. } => Some(*tag),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenSequence {
    slots: Vec<Slot>,
    loss: Vec<bool>,
}

impl TokenSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, i: usize) -> &Slot {
        &self.slots[i]
    }

    /// `loss_mask()[i]` is true when slot `i` is a prediction target.
    pub fn loss_mask(&self) -> &[bool] {
        &self.loss
    }

    pub fn push(&mut self, slot: Slot, loss: bool) {
        let loss = loss && matches!(slot, Slot::Token(_));
        self.slots.push(slot);
        self.loss.push(loss);
    }

    pub fn push_special(&mut self, s: Special, loss: bool) {
        self.push(Slot::special(s), loss);
    }

    pub fn push_text(&mut self, text: &str, loss: bool) {
        for id in encode_text(text) {
            self.push(Slot::Token(id), loss);
        }
    }

    pub fn push_placeholders(&mut self, tag: SlotTag, n: usize) {
        for i in 0..n {
            self.push(Slot::placeholder(tag, i), false);
        }
    }

    pub fn extend(&mut self, other: &TokenSequence) {
        self.slots.extend_from_slice(&other.slots);
        self.loss.extend_from_slice(&other.loss);
    }

    pub fn truncate(&mut self, len: usize) {
        self.slots.truncate(len);
        self.loss.truncate(len);
    }

    pub fn set_loss(&mut self, i: usize, on: bool) {
        self.loss[i] = on && matches!(self.slots[i], Slot::Token(_));
    }

    pub fn clear_loss(&mut self) {
        self.loss.iter_mut().for_each(|l| *l = false);
    }

    pub fn split_off(&mut self, at: usize) -> TokenSequence {
        TokenSequence {
            slots: self.slots.split_off(at),
            loss: self.loss.split_off(at),
        }
    }

    pub fn position_of(&self, s: Special) -> Option<usize> {
        self.slots.iter().position(|x| x.is_special(s))
    }

    pub fn last_position_of(&self, s: Special) -> Option<usize> {
        self.slots.iter().rposition(|x| x.is_special(s))
    }

    pub fn count_special(&self, s: Special) -> usize {
        self.slots.iter().filter(|x| x.is_special(s)).count()
    }

    pub fn count_tag(&self, tag: SlotTag) -> usize {
        self.slots.iter().filter(|x| x.tag() == Some(tag)).count()
    }

    /// Canonical text: bytes verbatim, specials by name, latent slots as
    /// `<latent>`, image and perception slots as nothing.
    pub fn text(&self) -> String {
        let mut out = String::new();
        let mut run: Vec<usize> = Vec::new();
        for s in &self.slots {
            match s {
                Slot::Token(id) => run.push(*id),
                Slot::Continuous { tag, .. } => {
                    out.push_str(&decode_ids(&run).unwrap_or_default());
                    run.clear();
                    if *tag == SlotTag::LatentThought {
                        out.push_str(Special::Latent.text());
                    }
                }
            }
        }
        out.push_str(&decode_ids(&run).unwrap_or_default());
        out
    }

    /// Bytes of the slots in `range` that are byte tokens.
    pub fn bytes_in(&self, range: std::ops::Range<usize>) -> Vec<u8> {
        self.slots[range]
            .iter()
            .filter_map(|s| s.token().filter(|&id| id < BYTE_TOKENS).map(|id| id as u8))
            .collect()
    }

    /// One string per slot: a byte as a one-character string, a special by
    /// name, a continuous slot as `<tag:index>`. Embeddings are not kept.
    pub fn to_pieces(&self) -> Vec<String> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Token(id) if *id < BYTE_TOKENS => char::from(*id as u8).to_string(),
                Slot::Token(id) => Special::from_id(*id).map(|s| s.text().to_string()).unwrap_or_default(),
                Slot::Continuous { tag, index, .. } => format!("<{}:{index}>", tag.name()),
            })
            .collect()
    }

    pub fn from_pieces(pieces: &[String]) -> Result<Self> {
        let mut seq = TokenSequence::new();
        for (i, p) in pieces.iter().enumerate() {
            let mut chars = p.chars();
            let slot = match (chars.next(), chars.next()) {
                (Some(c), None) if (c as u32) < BYTE_TOKENS as u32 => Slot::Token(c as usize),
                _ => {
                    if let Some(s) = Special::from_text(p) {
                        Slot::special(s)
                    } else {
                        let inner = p
                            .strip_prefix('<')
                            .and_then(|r| r.strip_suffix('>'))
                            .and_then(|r| r.split_once(':'));
                        let (name, idx) = inner.ok_or_else(|| Error::Data(format!("piece {i} `{p}` is not a token")))?;
                        let tag = [SlotTag::LatentThought, SlotTag::PerceptionFeature, SlotTag::ImagePatch]
                            .into_iter()
                            .find(|t| t.name() == name)
                            .ok_or_else(|| Error::Data(format!("piece {i} has unknown slot tag `{name}`")))?;
                        let index = idx
                            .parse()
                            .map_err(|_| Error::Data(format!("piece {i} has a bad slot index `{idx}`")))?;
                        Slot::placeholder(tag, index)
                    }
                }
            };
            seq.push(slot, false);
        }
        Ok(seq)
    }
}

/// What the `<bot>…<eot>` span is expected to hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanContent {
    Latent(usize),
    Thought,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSummary {
    pub slow: bool,
    pub span: std::ops::Range<usize>,
    pub latent_slots: usize,
    pub perception_slots: usize,
    pub image_slots: usize,
}

/// Linear scan for span discipline: one `<bot>…<eot>` span holding the
/// expected content, latent slots nowhere else, and a contiguous
/// `<bop><ctrl><eop>` triple present exactly when a `<detection_image>`
/// turn is, with perception slots only directly after that marker.
pub fn validate_frames(seq: &TokenSequence, content: SpanContent) -> Result<FrameSummary> {
    let err = |m: String| Err(Error::Validation(m));
    let (mut bot, mut eot) = (None, None);
    let mut latent_slots = 0;
    let mut perception_slots = 0;
    let mut image_slots = 0;
    let mut triple = None;
    let mut detection = None;
    let slots = seq.slots();
    for (i, s) in slots.iter().enumerate() {
        match s {
            Slot::Token(id) => match Special::from_id(*id) {
                Some(Special::Bot) => {
                    if bot.is_some() {
                        return err(format!("second <bot> at {i}"));
                    }
                    bot = Some(i);
                }
                Some(Special::Eot) => {
                    if bot.is_none() || eot.is_some() {
                        return err(format!("unbalanced <eot> at {i}"));
                    }
                    eot = Some(i);
                }
                Some(Special::Bop) => {
                    let ok = slots.get(i + 1).is_some_and(|s| s.is_special(Special::Ctrl))
                        && slots.get(i + 2).is_some_and(|s| s.is_special(Special::Eop));
                    if !ok || triple.is_some() {
                        return err(format!("<bop> at {i} does not open a single contiguous <bop><ctrl><eop>"));
                    }
                    if eot.is_none() {
                        return err(format!("<bop> at {i} precedes the latent span's end"));
                    }
                    triple = Some(i);
                }
                Some(Special::Ctrl) if triple.map(|t| t + 1) != Some(i) => {
                    return err(format!("<ctrl> at {i} outside a perception frame"));
                }
                Some(Special::Eop) if triple.map(|t| t + 2) != Some(i) => {
                    return err(format!("<eop> at {i} outside a perception frame"));
                }
                Some(Special::Latent) => return err(format!("literal <latent> token at {i}")),
                Some(Special::DetectionImage) => {
                    if detection.is_some() || triple.is_none() {
                        return err(format!("<detection_image> at {i} without a preceding perception frame"));
                    }
                    detection = Some(i);
                }
                _ => {}
            },
            Slot::Continuous { tag, .. } => match tag {
                SlotTag::LatentThought => {
                    if bot.is_none() || eot.is_some() {
                        return err(format!("latent slot at {i} outside the <bot>…<eot> span"));
                    }
                    latent_slots += 1;
                }
                SlotTag::PerceptionFeature => {
                    let d = detection.ok_or_else(|| Error::Validation(format!("perception slot at {i} before <detection_image>")))?;
                    if d + 1 + perception_slots != i {
                        return err(format!("perception slot at {i} is not contiguous after <detection_image>"));
                    }
                    perception_slots += 1;
                }
                SlotTag::ImagePatch => image_slots += 1,
            },
        }
    }
    let (Some(b), Some(e)) = (bot, eot) else {
        return err("missing <bot>…<eot> span".into());
    };
    match content {
        SpanContent::Latent(n) => {
            if latent_slots != n || e - b - 1 != n {
                return err(format!("span holds {} slots with {latent_slots} latent, expected exactly {n} latent", e - b - 1));
            }
        }
        SpanContent::Thought => {
            let inner = &slots[b + 1..e];
            if inner.is_empty() || !inner.iter().all(|s| s.token().is_some_and(|id| id < BYTE_TOKENS)) {
                return err("thought span must hold one or more bytes".into());
            }
        }
    }
    if triple.is_some() != detection.is_some() {
        return err("perception frame without a <detection_image> turn".into());
    }
    Ok(FrameSummary {
        slow: triple.is_some(),
        span: b..e + 1,
        latent_slots,
        perception_slots,
        image_slots,
    })
}
