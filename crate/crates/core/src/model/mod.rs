//! Toy decoder-only multimodal transformer with latent thinking slots.

mod config;
mod generate;
mod sequence;
mod stream;
mod vocab;

pub use config::{ControlKeys, Injection, LatentMap, ModelConfig, CONFIG_VERSION};
pub use generate::{detection_turn, generate, latent_span, Decision, GenerateConfig, Generation, MAX_ACTION_BYTES};
pub use sequence::{validate_frames, FrameSummary, Slot, SlotTag, SpanContent, TokenSequence};
pub use stream::{PerceptionCall, Stream};
pub use vocab::{decode_ids, encode_text, Special, BYTE_TOKENS, VOCAB_SIZE};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception;
use crate::rng::CounterRng;
use crate::sim::Pixels;
use crate::tensor::{load_checkpoint, save_checkpoint, GradCheckReport, Gradients, Graph, ParamId, ParamStore, Tensor};

pub const CONFIG_FILE: &str = "model_config.json";
pub const WEIGHTS_FILE: &str = "weights.ckpt";

pub(crate) struct BlockIds {
    pub ln1: (ParamId, ParamId),
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub o: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub up: (ParamId, ParamId),
    pub down: (ParamId, ParamId),
}

pub(crate) struct Layout {
    pub tok: ParamId,
    pub pos: ParamId,
    pub img: (ParamId, ParamId),
    pub blocks: Vec<BlockIds>,
    pub ln_f: (ParamId, ParamId),
    pub head: (ParamId, ParamId),
    pub latent_g: Option<ParamId>,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) layout: Layout,
}

/// Parameter counts by top-level name group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub groups: BTreeMap<String, usize>,
}

fn gaussian(rng: &mut CounterRng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

impl Model {
    /// Seeded initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let mut rng = CounterRng::new(c.seed);
        let mut p = ParamStore::new();
        let ones = || Tensor::new(vec![1, d], vec![1.0; d]).expect("shape");
        let zeros = |n: usize| Tensor::zeros(&[1, n]);
        let lin = |p: &mut ParamStore, rng: &mut CounterRng, name: &str, i: usize, o: usize, std: f64| -> Result<(ParamId, ParamId)> {
            Ok((
                p.add(&format!("{name}.weight"), gaussian(rng, i, o, std))?,
                p.add(&format!("{name}.bias"), Tensor::zeros(&[1, o]))?,
            ))
        };
        let tok = p.add("tok_emb.weight", gaussian(&mut rng, VOCAB_SIZE, d, 0.1))?;
        let pos = p.add("pos_emb.weight", gaussian(&mut rng, c.max_seq, d, 0.1))?;
        let img = lin(&mut p, &mut rng, "img.proj", 3, d, 0.5)?;
        let inv = 1.0 / (d as f64).sqrt();
        let resid = inv / (2.0 * c.n_layers as f64).sqrt();
        let mut blocks = Vec::new();
        for l in 0..c.n_layers {
            let pre = format!("blk{l}");
            let ln1 = (p.add(&format!("{pre}.ln1.gamma"), ones())?, p.add(&format!("{pre}.ln1.beta"), zeros(d))?);
            let q = lin(&mut p, &mut rng, &format!("{pre}.attn.q"), d, d, inv)?;
            let k = lin(&mut p, &mut rng, &format!("{pre}.attn.k"), d, d, inv)?;
            let v = lin(&mut p, &mut rng, &format!("{pre}.attn.v"), d, d, inv)?;
            let o = lin(&mut p, &mut rng, &format!("{pre}.attn.o"), d, d, resid)?;
            let ln2 = (p.add(&format!("{pre}.ln2.gamma"), ones())?, p.add(&format!("{pre}.ln2.beta"), zeros(d))?);
            let up = lin(&mut p, &mut rng, &format!("{pre}.mlp.up"), d, 4 * d, inv)?;
            let down = lin(&mut p, &mut rng, &format!("{pre}.mlp.down"), 4 * d, d, 0.5 * resid)?;
            blocks.push(BlockIds { ln1, q, k, v, o, ln2, up, down });
        }
        let ln_f = (p.add("ln_f.gamma", ones())?, p.add("ln_f.beta", zeros(d))?);
        let head = lin(&mut p, &mut rng, "head", d, VOCAB_SIZE, 0.5 * inv)?;
        let latent_g = match c.latent_map {
            LatentMap::Identity => None,
            LatentMap::Linear => Some(p.add("latent.g.weight", Tensor::identity(d))?),
        };
        perception::init_params(&mut p, c, &mut rng.split(0x5150))?;
        let layout = Layout { tok, pos, img, blocks, ln_f, head, latent_g };
        Ok(Self { config, params: p, layout })
    }

    pub fn census(&self) -> Census {
        let mut groups = BTreeMap::new();
        let (mut trainable, mut frozen) = (0, 0);
        for prm in self.params.iter() {
            let group = prm.name.split('.').next().unwrap_or("").to_string();
            *groups.entry(group).or_insert(0) += prm.tensor.len();
            if prm.frozen {
                frozen += prm.tensor.len();
            } else {
                trainable += prm.tensor.len();
            }
        }
        Census {
            total: self.params.census(),
            trainable,
            frozen,
            groups,
        }
    }

    /// Per-channel mean of each coarse patch, scaled to `[0, 1]`; `G × 3`.
    pub fn patch_means(&self, pixels: &Pixels) -> Result<Tensor> {
        let c = &self.config;
        if pixels.width as usize != c.image_width || pixels.height as usize != c.image_height {
            return Err(Error::Dimension(format!(
                "image is {}×{} but the model expects {}×{}",
                pixels.width, pixels.height, c.image_width, c.image_height
            )));
        }
        let t = perception::tiles(pixels, c.coarse_patch)?;
        let n = c.coarse_patch * c.coarse_patch;
        let mut out = Tensor::zeros(&[t.rows(), 3]);
        for r in 0..t.rows() {
            for (i, v) in t.row_slice(r).iter().enumerate() {
                out.data_mut()[r * 3 + i % 3] += v / n as f64;
            }
        }
        Ok(out)
    }

    /// Global image slots: pooled patch means projected to model width.
    pub fn encode_global_image(&self, pixels: &Pixels) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let v = self.global_graph(&mut g, pixels)?;
        Ok(g.value(v).clone())
    }

    pub(crate) fn global_graph(&self, g: &mut Graph, pixels: &Pixels) -> Result<crate::tensor::Var> {
        let means = g.input(self.patch_means(pixels)?)?;
        let (w, b) = (g.param(self.layout.img.0), g.param(self.layout.img.1));
        let y = g.matmul(means, w)?;
        g.add_row(y, b)
    }

    /// `g(h)`: identity, or the learned linear map when configured.
    pub fn latent_step(&self, h_prev: &[f64]) -> Result<Vec<f64>> {
        match self.layout.latent_g {
            None => Ok(h_prev.to_vec()),
            Some(id) => Ok(Tensor::row(h_prev.to_vec()).matmul(self.params.value(id))?.into_data()),
        }
    }

    /// Full forward pass: final hidden states and logits for every position.
    pub fn forward(&self, seq: &TokenSequence, image: Option<&Pixels>) -> Result<(Tensor, Tensor)> {
        if seq.is_empty() {
            return Err(Error::Sequence("forward pass over an empty sequence".into()));
        }
        let mut s = Stream::new(self, image);
        s.feed(seq)?;
        let h = s.hidden_all()?;
        let logits = s.logits_for(h)?;
        Ok((s.graph().value(h).clone(), s.graph().value(logits).clone()))
    }

    /// Mean cross-entropy over the sequence's loss-marked slots.
    pub fn loss(&self, seq: &TokenSequence, image: Option<&Pixels>) -> Result<f64> {
        let mut s = Stream::new(self, image);
        s.feed(seq)?;
        let l = s.loss()?;
        Ok(s.graph().value(l).item())
    }

    /// Loss and gradients with respect to every parameter.
    pub fn gradients(&self, seq: &TokenSequence, image: Option<&Pixels>) -> Result<(f64, Gradients)> {
        let mut s = Stream::new(self, image);
        s.feed(seq)?;
        let l = s.loss()?;
        let grads = s.graph().backward(l)?;
        Ok((s.graph().value(l).item(), grads))
    }

    /// Central-difference check of the full model's loss gradient.
    pub fn grad_check(&mut self, seq: &TokenSequence, image: Option<&Pixels>, eps: f64, per_tensor: usize, seed: u64) -> Result<GradCheckReport> {
        if !(1e-5..=1e-2).contains(&eps) {
            return Err(Error::Validation(format!("gradient-check step {eps} outside [1e-5, 1e-2]")));
        }
        let analytic: Vec<Option<Vec<f64>>> = {
            let (_, grads) = self.gradients(seq, image)?;
            (0..self.params.len()).map(|id| grads.param_grad(id).map(<[f64]>::to_vec)).collect()
        };
        let mut rng = CounterRng::new(seed);
        let mut report = GradCheckReport { max_rel_error: 0.0, coordinates: 0, worst: None };
        for id in 0..self.params.len() {
            if !self.params.is_trainable(id) {
                continue;
            }
            let n = self.params.value(id).len();
            let mut coords: Vec<usize> = (0..n).collect();
            if n > per_tensor {
                rng.shuffle(&mut coords);
                coords.truncate(per_tensor);
            }
            for &c in &coords {
                let orig = self.params.value(id).data()[c];
                self.params.get_mut(id).tensor.data_mut()[c] = orig + eps;
                let plus = self.loss(seq, image);
                self.params.get_mut(id).tensor.data_mut()[c] = orig - eps;
                let minus = self.loss(seq, image);
                self.params.get_mut(id).tensor.data_mut()[c] = orig;
                let numeric = (plus? - minus?) / (2.0 * eps);
                if !numeric.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss near {}", self.params.get(id).name)));
                }
                let a = analytic[id].as_ref().map_or(0.0, |g| g[c]);
                let err = (a - numeric).abs() / numeric.abs().max(1.0);
                report.coordinates += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some(self.params.get(id).name.clone());
                }
            }
        }
        Ok(report)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.config.save(&dir.join(CONFIG_FILE))?;
        save_checkpoint(&dir.join(WEIGHTS_FILE), &self.params, &self.config.digest())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = ModelConfig::load(&dir.join(CONFIG_FILE))?;
        let mut m = Self::new(config)?;
        load_checkpoint(&dir.join(WEIGHTS_FILE), &mut m.params, &m.config.digest())?;
        Ok(m)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let digest = self.config.digest();
        load_checkpoint(path, &mut self.params, &digest)
    }
}
