//! Incremental evaluation of a token sequence on one tape.
//!
//! Slots are processed in causal chunks that share per-layer keys and
//! values. A chunk ends wherever the next slot's embedding depends on a
//! hidden state not yet computed: before every latent slot, and before the
//! first perception slot. Training feeds a whole sequence and backpropagates
//! through the chunks; inference feeds one slot at a time.

use super::{ControlKeys, LatentMap, Model, Slot, SlotTag, Special, TokenSequence};
use crate::error::{Error, Result};
use crate::perception;
use crate::sim::Pixels;
use crate::tensor::{Graph, ParamId, Tensor, Var};

/// Record of one perception-module invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionCall {
    pub position: usize,
    pub z_p: Tensor,
    pub attention: Tensor,
}

enum Piece {
    Tokens(Vec<usize>),
    Image(Vec<usize>),
    Perception(Vec<usize>),
    Row(Var),
}

pub struct Stream<'m> {
    model: &'m Model,
    g: Graph<'m>,
    kv: Vec<Option<(Var, Var)>>,
    chunks: Vec<(usize, Var)>,
    seq: TokenSequence,
    pending: Vec<Piece>,
    pending_len: usize,
    image: Option<Pixels>,
    global: Option<Var>,
    injected: Option<Var>,
    calls: Vec<PerceptionCall>,
}

impl<'m> Stream<'m> {
    pub fn new(model: &'m Model, image: Option<&Pixels>) -> Self {
        Self {
            model,
            g: Graph::new(&model.params),
            kv: vec![None; model.config.n_layers],
            chunks: Vec::new(),
            seq: TokenSequence::new(),
            pending: Vec::new(),
            pending_len: 0,
            image: image.cloned(),
            global: None,
            injected: None,
            calls: Vec::new(),
        }
    }

    pub fn graph(&self) -> &Graph<'m> {
        &self.g
    }

    /// Slots fed so far, with continuous embeddings filled in.
    pub fn sequence(&self) -> &TokenSequence {
        &self.seq
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn perception_calls(&self) -> &[PerceptionCall] {
        &self.calls
    }

    fn computed(&self) -> usize {
        self.seq.len() - self.pending_len
    }

    /// Feeds slots with their loss flags and computes every hidden state.
    pub fn feed(&mut self, seq: &TokenSequence) -> Result<()> {
        for (slot, &loss) in seq.slots().iter().zip(seq.loss_mask()) {
            self.push_slot(slot.clone(), loss)?;
        }
        self.flush()
    }

    pub fn feed_slots(&mut self, slots: &[Slot]) -> Result<()> {
        for s in slots {
            self.push_slot(s.clone(), false)?;
        }
        self.flush()
    }

    pub fn feed_special(&mut self, s: Special) -> Result<()> {
        self.feed_slots(&[Slot::special(s)])
    }

    fn push_slot(&mut self, slot: Slot, loss: bool) -> Result<()> {
        let max = self.model.config.max_seq;
        if self.seq.len() >= max {
            return Err(Error::Sequence(format!("sequence exceeds max_seq {max}")));
        }
        let slot = match slot {
            Slot::Token(id) => {
                if id >= super::VOCAB_SIZE {
                    return Err(Error::Sequence(format!("token id {id} outside the vocabulary")));
                }
                match self.pending.last_mut() {
                    Some(Piece::Tokens(ids)) => ids.push(id),
                    _ => self.pending.push(Piece::Tokens(vec![id])),
                }
                Slot::Token(id)
            }
            Slot::Continuous { tag, index, embedding: Some(e) } => {
                if e.len() != self.model.config.d_model {
                    return Err(Error::Dimension(format!("slot embedding of width {}", e.len())));
                }
                let v = self.g.input(Tensor::row(e.clone()))?;
                self.pending.push(Piece::Row(v));
                Slot::Continuous { tag, index, embedding: Some(e) }
            }
            Slot::Continuous { tag: SlotTag::ImagePatch, index, embedding: None } => {
                let global = self.global_var()?;
                let rows = self.g.value(global).rows();
                if index >= rows {
                    return Err(Error::Sequence(format!("image slot {index} of {rows}")));
                }
                let e = self.g.value(global).row_slice(index).to_vec();
                match self.pending.last_mut() {
                    Some(Piece::Image(ix)) => ix.push(index),
                    _ => self.pending.push(Piece::Image(vec![index])),
                }
                Slot::Continuous { tag: SlotTag::ImagePatch, index, embedding: Some(e) }
            }
            Slot::Continuous { tag: SlotTag::LatentThought, index, embedding: None } => {
                self.flush()?;
                if self.seq.is_empty() {
                    return Err(Error::Sequence("latent slot with no previous position".into()));
                }
                let h = self.hidden_row(self.seq.len() - 1)?;
                let v = match (self.model.config.latent_map, self.model.layout.latent_g) {
                    (LatentMap::Linear, Some(id)) => {
                        let w = self.g.param(id);
                        self.g.matmul(h, w)?
                    }
                    _ => h,
                };
                let e = self.g.value(v).data().to_vec();
                self.pending.push(Piece::Row(v));
                Slot::Continuous { tag: SlotTag::LatentThought, index, embedding: Some(e) }
            }
            Slot::Continuous { tag: SlotTag::PerceptionFeature, index, embedding: None } => {
                if self.injected.is_none() || self.starts_new_perception_run() {
                    self.flush()?;
                    self.run_perception()?;
                }
                let inj = self.injected.expect("perception ran");
                let rows = self.g.value(inj).rows();
                if index >= rows {
                    return Err(Error::Sequence(format!("perception slot {index} of {rows}")));
                }
                let e = self.g.value(inj).row_slice(index).to_vec();
                match self.pending.last_mut() {
                    Some(Piece::Perception(ix)) => ix.push(index),
                    _ => self.pending.push(Piece::Perception(vec![index])),
                }
                Slot::Continuous { tag: SlotTag::PerceptionFeature, index, embedding: Some(e) }
            }
        };
        self.seq.push(slot, loss);
        self.pending_len += 1;
        Ok(())
    }

    /// A perception slot directly after `<detection_image>` begins a fresh call.
    fn starts_new_perception_run(&self) -> bool {
        self.seq.slots().last().is_some_and(|s| s.is_special(Special::DetectionImage))
    }

    fn global_var(&mut self) -> Result<Var> {
        if let Some(v) = self.global {
            return Ok(v);
        }
        let px = self
            .image
            .clone()
            .ok_or_else(|| Error::Sequence("image slot in a stream without an image".into()))?;
        let v = self.model.global_graph(&mut self.g, &px)?;
        self.global = Some(v);
        Ok(v)
    }

    fn run_perception(&mut self) -> Result<()> {
        let cfg = &self.model.config;
        let px = self
            .image
            .clone()
            .ok_or_else(|| Error::Sequence("perception slot in a stream without an image".into()))?;
        let ctrl = self
            .seq
            .last_position_of(Special::Ctrl)
            .ok_or_else(|| Error::Sequence("perception slot without a preceding <ctrl>".into()))?;
        let positions: Vec<usize> = match cfg.control_keys {
            ControlKeys::Ctrl => vec![ctrl],
            ControlKeys::Frame => {
                if ctrl == 0 || ctrl + 1 >= self.seq.len() {
                    return Err(Error::Sequence("incomplete perception frame".into()));
                }
                vec![ctrl - 1, ctrl, ctrl + 1]
            }
        };
        let rows = positions.iter().map(|&p| self.hidden_row(p)).collect::<Result<Vec<_>>>()?;
        let h = if rows.len() == 1 { rows[0] } else { self.g.concat_rows(&rows)? };
        let fine = perception::encode_fine(&self.model.params, cfg, &px)?;
        let f = self.g.input(fine.features)?;
        let (z, att) = perception::cross_attend_graph(&mut self.g, cfg, f, h)?;
        let inj = perception::project_graph(&mut self.g, cfg, z)?;
        let probs = self.g.attention_probs(att).expect("attention node").to_vec();
        let p = self.g.value(z).rows();
        self.calls.push(PerceptionCall {
            position: self.seq.len(),
            z_p: self.g.value(z).clone(),
            attention: Tensor::matrix(p, probs.len() / p, probs)?,
        });
        self.injected = Some(inj);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let lay = &self.model.layout;
        let pieces = std::mem::take(&mut self.pending);
        let c = self.pending_len;
        let offset = self.computed();
        let mut parts = Vec::with_capacity(pieces.len());
        for p in pieces {
            let v = match p {
                Piece::Tokens(ids) => {
                    let t = self.g.param(lay.tok);
                    self.g.select_rows(t, &ids)?
                }
                Piece::Image(ix) => {
                    let gl = self.global.expect("global image encoded");
                    self.g.select_rows(gl, &ix)?
                }
                Piece::Perception(ix) => {
                    let inj = self.injected.expect("perception ran");
                    self.g.select_rows(inj, &ix)?
                }
                Piece::Row(v) => v,
            };
            parts.push(v);
        }
        let x = if parts.len() == 1 { parts[0] } else { self.g.concat_rows(&parts)? };
        let pos_rows: Vec<usize> = (offset..offset + c).collect();
        let pos_t = self.g.param(lay.pos);
        let pos = self.g.select_rows(pos_t, &pos_rows)?;
        let mut x = self.g.add(x, pos)?;
        for l in 0..self.model.config.n_layers {
            x = self.block(l, x, offset)?;
        }
        let (gam, bet) = (self.g.param(lay.ln_f.0), self.g.param(lay.ln_f.1));
        let h = self.g.layer_norm(x, gam, bet, 1e-5)?;
        self.chunks.push((offset, h));
        self.pending_len = 0;
        Ok(())
    }

    fn linear(&mut self, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (self.g.param(w), self.g.param(b));
        let y = self.g.matmul(x, w)?;
        self.g.add_row(y, b)
    }

    fn block(&mut self, l: usize, x: Var, offset: usize) -> Result<Var> {
        let b = &self.model.layout.blocks[l];
        let (ln1, q, k, v, o, ln2, up, down) = (b.ln1, b.q, b.k, b.v, b.o, b.ln2, b.up, b.down);
        let (g1, b1) = (self.g.param(ln1.0), self.g.param(ln1.1));
        let h = self.g.layer_norm(x, g1, b1, 1e-5)?;
        let qv = self.linear(h, q)?;
        let kv_new = self.linear(h, k)?;
        let vv_new = self.linear(h, v)?;
        let (k_all, v_all) = match self.kv[l] {
            Some((kp, vp)) => (self.g.concat_rows(&[kp, kv_new])?, self.g.concat_rows(&[vp, vv_new])?),
            None => (kv_new, vv_new),
        };
        self.kv[l] = Some((k_all, v_all));
        let att = self.g.attention(qv, k_all, v_all, self.model.config.n_heads, offset, true)?;
        let att = self.linear(att, o)?;
        let x = self.g.add(x, att)?;
        let (g2, b2) = (self.g.param(ln2.0), self.g.param(ln2.1));
        let h = self.g.layer_norm(x, g2, b2, 1e-5)?;
        let u = self.linear(h, up)?;
        let u = self.g.gelu(u)?;
        let dn = self.linear(u, down)?;
        self.g.add(x, dn)
    }

    /// Final hidden state at position `p` as a `1 × d_model` node.
    pub fn hidden_row(&mut self, p: usize) -> Result<Var> {
        let (start, v) = self
            .chunks
            .iter()
            .rev()
            .find(|(s, _)| *s <= p)
            .copied()
            .ok_or_else(|| Error::Sequence(format!("no hidden state at {p}")))?;
        if p >= self.computed() {
            return Err(Error::Sequence(format!("hidden state at {p} not computed yet")));
        }
        self.g.slice_rows(v, p - start, 1)
    }

    pub fn hidden_vec(&self, p: usize) -> Result<Vec<f64>> {
        let (start, v) = self
            .chunks
            .iter()
            .rev()
            .find(|(s, _)| *s <= p)
            .copied()
            .ok_or_else(|| Error::Sequence(format!("no hidden state at {p}")))?;
        Ok(self.g.value(v).row_slice(p - start).to_vec())
    }

    /// All final hidden states, `len × d_model`.
    pub fn hidden_all(&mut self) -> Result<Var> {
        self.flush()?;
        let parts: Vec<Var> = self.chunks.iter().map(|c| c.1).collect();
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.g.concat_rows(&parts)
    }

    pub fn logits_for(&mut self, h: Var) -> Result<Var> {
        let head = self.model.layout.head;
        self.linear(h, head)
    }

    /// Next-token logits after the last fed slot, computed off the tape.
    pub fn next_logits(&self) -> Result<Vec<f64>> {
        let n = self.seq.len();
        if n == 0 || self.pending_len != 0 {
            return Err(Error::Sequence("no computed position to read logits from".into()));
        }
        let h = Tensor::row(self.hidden_vec(n - 1)?);
        let (w, b) = self.model.layout.head;
        let mut y = h.matmul(self.model.params.value(w))?;
        for (x, bb) in y.data_mut().iter_mut().zip(self.model.params.value(b).data()) {
            *x += bb;
        }
        Ok(y.into_data())
    }

    /// Mean cross-entropy of the loss-marked slots, each predicted from
    /// the position before it.
    pub fn loss(&mut self) -> Result<Var> {
        self.flush()?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, &on) in self.seq.loss_mask().iter().enumerate().skip(1) {
            if on {
                rows.push(i - 1);
                targets.push(self.seq.slot(i).token().expect("loss only on tokens"));
            }
        }
        if rows.is_empty() {
            return self.g.input(Tensor::scalar(0.0));
        }
        let h = self.hidden_all()?;
        let sel = self.g.select_rows(h, &rows)?;
        let logits = self.logits_for(sel)?;
        let mask = vec![true; rows.len()];
        self.g.cross_entropy(logits, &targets, &mask)
    }
}
