//! Visual perception module: a frozen fine-grained patch encoder, the
//! cross-attention projector that turns `(F_img, h_ctrl)` into `z_p`, and
//! injection of the projected features back into a token sequence.
//!
//! ```text
//! Q = F_img · W_q                         P × d_k
//! K = reshape(h_ctrl · W_k)               m × d_k
//! V = reshape(h_ctrl · W_v)               m × d_f
//! z_p = softmax(Q Kᵀ / √d_k) V + F_img    P × d_f
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Slot, SlotTag, Special, TokenSequence};
use crate::rng::CounterRng;
use crate::sim::Pixels;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const ENC_WEIGHT: &str = "vpm.enc.weight";
pub const ENC_BIAS: &str = "vpm.enc.bias";
pub const PROJ_Q: &str = "vpm.proj_q.weight";
pub const PROJ_K: &str = "vpm.proj_k.weight";
pub const PROJ_V: &str = "vpm.proj_v.weight";
pub const PROJ_OUT_W: &str = "vpm.proj_out.weight";
pub const PROJ_OUT_B: &str = "vpm.proj_out.bias";
pub const PROJ_POS: &str = "vpm.proj_pos.weight";

/// True for the projector parameters trained in the alignment phase.
pub fn is_projector(name: &str) -> bool {
    name.starts_with("vpm.proj_")
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineFeatureMap {
    /// `P × d_f`, one row per fine patch in row-major patch order.
    pub features: Tensor,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionOutput {
    pub z_p: Tensor,
    /// `P × keys`; each row is a probability vector over the key slots.
    pub attention: Tensor,
}

fn gaussian(rng: &mut CounterRng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// Adds the encoder (frozen) and projector parameters.
pub fn init_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut CounterRng) -> Result<()> {
    let tile = cfg.fine_patch * cfg.fine_patch * 3;
    let (d, df, m) = (cfg.d_model, cfg.d_f, cfg.m_slots);
    store.add_frozen(ENC_WEIGHT, gaussian(rng, tile, df, 2.0 / (tile as f64).sqrt()))?;
    store.add_frozen(ENC_BIAS, gaussian(rng, 1, df, 0.5))?;
    store.add(PROJ_Q, gaussian(rng, df, df, 1.0 / (df as f64).sqrt()))?;
    store.add(PROJ_K, gaussian(rng, d, m * df, 1.0 / (d as f64).sqrt()))?;
    store.add(PROJ_V, gaussian(rng, d, m * df, 0.5 / (d as f64).sqrt()))?;
    store.add(PROJ_OUT_W, gaussian(rng, df, d, 0.5 / (df as f64).sqrt()))?;
    store.add(PROJ_OUT_B, Tensor::zeros(&[1, d]))?;
    store.add(PROJ_POS, gaussian(rng, cfg.injected_slots(), d, 0.1))?;
    Ok(())
}

/// Cuts the image into `patch × patch` tiles; row `k` holds tile `k`'s
/// RGB bytes scaled to `[0, 1]`, row by row within the tile.
pub fn tiles(pixels: &Pixels, patch: usize) -> Result<Tensor> {
    let (w, h) = (pixels.width as usize, pixels.height as usize);
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(Error::Dimension(format!("{w}×{h} image is not divisible into {patch}-pixel patches")));
    }
    let (rows, cols) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(rows * cols * patch * patch * 3);
    for pr in 0..rows {
        for pc in 0..cols {
            for y in pr * patch..(pr + 1) * patch {
                let start = (y * w + pc * patch) * 3;
                data.extend(pixels.data[start..start + patch * 3].iter().map(|&b| b as f64 / 255.0));
            }
        }
    }
    Tensor::matrix(rows * cols, patch * patch * 3, data)
}

fn check_image(cfg: &ModelConfig, pixels: &Pixels) -> Result<()> {
    if pixels.width as usize != cfg.image_width || pixels.height as usize != cfg.image_height {
        return Err(Error::Dimension(format!(
            "image is {}×{} but the model expects {}×{}",
            pixels.width, pixels.height, cfg.image_width, cfg.image_height
        )));
    }
    Ok(())
}

/// `F_img = tanh(tiles · W_enc + b_enc)` with the frozen encoder.
pub fn encode_fine(params: &ParamStore, cfg: &ModelConfig, pixels: &Pixels) -> Result<FineFeatureMap> {
    check_image(cfg, pixels)?;
    let t = tiles(pixels, cfg.fine_patch)?;
    let w = params.value(param_id(params, ENC_WEIGHT)?);
    let b = params.value(param_id(params, ENC_BIAS)?);
    let mut f = t.matmul(w)?;
    let df = f.cols();
    for (i, x) in f.data_mut().iter_mut().enumerate() {
        *x = (*x + b.data()[i % df]).tanh();
    }
    Ok(FineFeatureMap {
        features: f,
        grid: cfg.fine_grid(),
    })
}

fn param_id(params: &ParamStore, name: &str) -> Result<usize> {
    params
        .id(name)
        .ok_or_else(|| Error::Validation(format!("model has no parameter `{name}`")))
}

/// Graph form of the projector. `h_ctrl` is `r × d_model` (one row per
/// control state); the keys are its `r · m_slots` reshaped projections.
/// Returns `(z_p, attention node)`.
pub fn cross_attend_graph(g: &mut Graph, cfg: &ModelConfig, f_img: Var, h_ctrl: Var) -> Result<(Var, Var)> {
    let (fv, hv) = (g.value(f_img), g.value(h_ctrl));
    if fv.cols() != cfg.d_f {
        return Err(Error::Dimension(format!("F_img width {} but d_f is {}", fv.cols(), cfg.d_f)));
    }
    if hv.cols() != cfg.d_model {
        return Err(Error::Dimension(format!("h_ctrl width {} but d_model is {}", hv.cols(), cfg.d_model)));
    }
    let r = hv.rows();
    let (wq, wk, wv) = (g.param_named(PROJ_Q)?, g.param_named(PROJ_K)?, g.param_named(PROJ_V)?);
    if g.value(wv).cols() != cfg.m_slots * cfg.d_f {
        return Err(Error::Dimension("value projection width must equal m_slots · d_f".into()));
    }
    let q = g.matmul(f_img, wq)?;
    let dk = g.value(q).cols();
    let k = g.matmul(h_ctrl, wk)?;
    let k = g.reshape(k, &[r * cfg.m_slots, dk])?;
    let v = g.matmul(h_ctrl, wv)?;
    let v = g.reshape(v, &[r * cfg.m_slots, cfg.d_f])?;
    let att = g.attention(q, k, v, 1, 0, false)?;
    let z = g.add(att, f_img)?;
    Ok((z, att))
}

/// Projects `z_p` to model width: optional mean pooling, an affine map and
/// a learned per-slot position embedding, since injected slots do not sit
/// at fixed sequence positions.
pub fn project_graph(g: &mut Graph, cfg: &ModelConfig, z_p: Var) -> Result<Var> {
    let pooled = match cfg.injection {
        crate::model::Injection::PerPatch => z_p,
        crate::model::Injection::Pooled(k) => {
            let p = g.value(z_p).rows();
            let pool = g.input(pooling_matrix(k, p))?;
            g.matmul(pool, z_p)?
        }
    };
    let (w, b, pos) = (g.param_named(PROJ_OUT_W)?, g.param_named(PROJ_OUT_B)?, g.param_named(PROJ_POS)?);
    let y = g.matmul(pooled, w)?;
    let y = g.add_row(y, b)?;
    g.add(y, pos)
}

/// `k × p` averaging matrix over contiguous row groups.
pub fn pooling_matrix(k: usize, p: usize) -> Tensor {
    let mut m = Tensor::zeros(&[k, p]);
    for j in 0..k {
        let (lo, hi) = (j * p / k, (j + 1) * p / k);
        for c in lo..hi {
            m.data_mut()[j * p + c] = 1.0 / (hi - lo) as f64;
        }
    }
    m
}

pub fn cross_attend(params: &ParamStore, cfg: &ModelConfig, f_img: &FineFeatureMap, h_ctrl: &Tensor) -> Result<PerceptionOutput> {
    let mut g = Graph::new(params);
    let f = g.input(f_img.features.clone())?;
    let h = g.input(h_ctrl.clone())?;
    let (z, att) = cross_attend_graph(&mut g, cfg, f, h)?;
    let probs = g.attention_probs(att).expect("attention node").to_vec();
    let keys = probs.len() / f_img.features.rows();
    Ok(PerceptionOutput {
        z_p: g.value(z).clone(),
        attention: Tensor::matrix(f_img.features.rows(), keys, probs)?,
    })
}

pub fn project_features(params: &ParamStore, cfg: &ModelConfig, z_p: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let z = g.input(z_p.clone())?;
    let y = project_graph(&mut g, cfg, z)?;
    Ok(g.value(y).clone())
}

/// Appends one perception slot per row of `projected` after the
/// `<detection_image>` marker that must end `seq`.
pub fn inject_features(seq: &TokenSequence, projected: &Tensor, max_seq: usize) -> Result<TokenSequence> {
    let n = seq.len();
    let ends_ok = n >= 5
        && seq.slot(n - 5).is_special(Special::Bop)
        && seq.slot(n - 4).is_special(Special::Ctrl)
        && seq.slot(n - 3).is_special(Special::Eop)
        && seq.slot(n - 2).is_special(Special::User)
        && seq.slot(n - 1).is_special(Special::DetectionImage);
    if !ends_ok {
        return Err(Error::Sequence(
            "injection needs a sequence ending in <bop><ctrl><eop><user><detection_image>".into(),
        ));
    }
    if n + projected.rows() > max_seq {
        return Err(Error::Sequence(format!(
            "injecting {} slots into a length-{n} sequence exceeds max_seq {max_seq}",
            projected.rows()
        )));
    }
    let mut out = seq.clone();
    for k in 0..projected.rows() {
        out.push(
            Slot::Continuous {
                tag: SlotTag::PerceptionFeature,
                index: k,
                embedding: Some(projected.row_slice(k).to_vec()),
            },
            false,
        );
    }
    Ok(out)
}

/// Attention weights of one perception call, for external plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub patch_grid: (usize, usize),
    pub keys: usize,
    /// Row-major over patches; `weights[k][j]` is patch `k`'s weight on key `j`.
    pub weights: Vec<Vec<f64>>,
    pub action_text: Option<String>,
}

impl AttentionDump {
    pub fn new(grid: (usize, usize), attention: &Tensor, action_text: Option<String>) -> Self {
        Self {
            patch_grid: grid,
            keys: attention.cols(),
            weights: (0..attention.rows()).map(|r| attention.row_slice(r).to_vec()).collect(),
            action_text,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}
