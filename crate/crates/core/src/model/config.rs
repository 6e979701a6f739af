use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

/// The map `g` that turns a hidden state into the next latent input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMap {
    Identity,
    Linear,
}

/// Which hidden states feed the perception keys and values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKeys {
    /// The `<ctrl>` state only.
    Ctrl,
    /// The `<bop>`, `<ctrl>` and `<eop>` states.
    Frame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    PerPatch,
    /// Mean-pool the patch rows into this many contiguous groups.
    Pooled(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub version: u32,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub n_latent: usize,
    pub coarse_patch: usize,
    pub fine_patch: usize,
    pub m_slots: usize,
    /// Width of the fine feature map.
    pub d_f: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub latent_map: LatentMap,
    pub control_keys: ControlKeys,
    pub injection: Injection,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            max_seq: 1024,
            n_latent: 8,
            coarse_patch: 8,
            fine_patch: 4,
            m_slots: 4,
            d_f: 32,
            image_width: 64,
            image_height: 64,
            latent_map: LatentMap::Identity,
            control_keys: ControlKeys::Ctrl,
            injection: Injection::PerPatch,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small profile for single-core training runs: 32×32 screens, width 32,
    /// two layers.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            max_seq: 512,
            image_width: 32,
            image_height: 32,
            ..Self::default()
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn coarse_grid(&self) -> (usize, usize) {
        (self.image_height / self.coarse_patch, self.image_width / self.coarse_patch)
    }

    pub fn fine_grid(&self) -> (usize, usize) {
        (self.image_height / self.fine_patch, self.image_width / self.fine_patch)
    }

    pub fn global_slots(&self) -> usize {
        let (r, c) = self.coarse_grid();
        r * c
    }

    pub fn fine_patches(&self) -> usize {
        let (r, c) = self.fine_grid();
        r * c
    }

    /// Number of continuous slots appended by one perception call.
    pub fn injected_slots(&self) -> usize {
        match self.injection {
            Injection::PerPatch => self.fine_patches(),
            Injection::Pooled(k) => k,
        }
    }

    pub fn control_rows(&self) -> usize {
        match self.control_keys {
            ControlKeys::Ctrl => 1,
            ControlKeys::Frame => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("model config version {} unsupported", self.version));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 || self.m_slots == 0 || self.d_f == 0 || self.max_seq == 0 {
            return bad("layer count, slot count, feature width and max_seq must be positive".into());
        }
        for (name, p) in [("coarse_patch", self.coarse_patch), ("fine_patch", self.fine_patch)] {
            if p == 0 || self.image_width % p != 0 || self.image_height % p != 0 {
                return bad(format!("{name} {p} does not divide the {}×{} image", self.image_width, self.image_height));
            }
        }
        if let Injection::Pooled(k) = self.injection {
            if k == 0 || k > self.fine_patches() {
                return bad(format!("pooled injection into {k} slots needs 1..={} ", self.fine_patches()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// SHA-256 over the compact JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
