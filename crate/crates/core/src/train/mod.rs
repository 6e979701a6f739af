//! Three-phase training: projector alignment, thought training with the
//! explicit-to-latent swap, and adaptive fine-tuning.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::PathLabel;
use crate::enhance::{latent_swap, with_thought, EnhancedCorpus, EnhancedSample};
use crate::error::{Error, Result};
use crate::model::{Census, Model, TokenSequence, WEIGHTS_FILE};
use crate::perception::is_projector;
use crate::rng::CounterRng;
use crate::sim::Pixels;
use crate::tensor::{AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Align,
    Thought,
    Finetune,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Align, Phase::Thought, Phase::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Align => "align",
            Phase::Thought => "thought",
            Phase::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown phase `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub lr: f64,
    pub batch: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of thought-phase epochs spent on explicit thoughts.
    pub explicit_fraction: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
    pub weight_decay: f64,
}

impl PhaseConfig {
    /// Learning rates and epoch counts of the reference recipe.
    pub fn reference(phase: Phase) -> Self {
        let (lr, epochs) = match phase {
            Phase::Align => (2e-3, 3),
            Phase::Thought => (3e-5, 6),
            Phase::Finetune => (2e-5, 10),
        };
        Self {
            phase,
            lr,
            batch: 8,
            grad_accum: 1,
            epochs,
            seed: 0,
            explicit_fraction: 0.5,
            clip: Some(1.0),
            weight_decay: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{} phase: {m}", self.phase.name())));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch == 0 || self.grad_accum == 0 {
            return bad("batch and grad_accum must be positive");
        }
        if !(0.0..=1.0).contains(&self.explicit_fraction) {
            return bad("explicit_fraction must lie in [0, 1]");
        }
        if self.clip.is_some_and(|c| !(c > 0.0)) {
            return bad("clip must be positive");
        }
        Ok(())
    }

    /// Epochs of explicit-thought training; the rest use latent slots.
    pub fn explicit_epochs(&self) -> usize {
        (self.epochs as f64 * self.explicit_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub phase: Phase,
    pub stage: String,
    pub epoch: usize,
    pub samples: usize,
    pub mean_loss: f64,
}

struct Item<'a> {
    seq: TokenSequence,
    image: &'a Pixels,
}

fn global_norm(model: &Model) -> f64 {
    (0..model.params.len())
        .filter(|&id| model.params.is_trainable(id))
        .flat_map(|id| model.params.get(id).grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

fn train_epochs(
    model: &mut Model,
    items: &[Item],
    cfg: &PhaseConfig,
    stage: &str,
    first_epoch: usize,
    epochs: usize,
    opt: &mut AdamW,
) -> Result<Vec<EpochLoss>> {
    let mut trace = Vec::new();
    let per_step = cfg.batch * cfg.grad_accum;
    for e in first_epoch..first_epoch + epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        CounterRng::new(cfg.seed).split(((cfg.phase as u64) << 32) | e as u64).shuffle(&mut order);
        let mut total = 0.0;
        model.params.zero_grad();
        for chunk in order.chunks(per_step) {
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (loss, grads) = model.gradients(&items[i].seq, Some(items[i].image))?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("loss is {loss} in the {} phase", cfg.phase.name())));
                }
                total += loss;
                grads.accumulate_into(&mut model.params, scale)?;
            }
            if let Some(c) = cfg.clip {
                let n = global_norm(model);
                if n > c {
                    let k = c / n;
                    for p in model.params.iter_mut() {
                        p.grad.iter_mut().for_each(|g| *g *= k);
                    }
                }
            }
            opt.step(&mut model.params)?;
            model.params.zero_grad();
        }
        let mean_loss = total / items.len() as f64;
        log::info!("{} {stage} epoch {e}: loss {mean_loss:.5}", cfg.phase.name());
        trace.push(EpochLoss {
            phase: cfg.phase,
            stage: stage.to_string(),
            epoch: e,
            samples: items.len(),
            mean_loss,
        });
    }
    Ok(trace)
}

fn items<'a>(
    corpus: &'a EnhancedCorpus,
    keep: impl Fn(&EnhancedSample) -> bool,
    seq: impl Fn(&EnhancedSample) -> Result<TokenSequence>,
) -> Result<Vec<Item<'a>>> {
    corpus
        .samples
        .iter()
        .filter(|s| keep(s))
        .map(|s| Ok(Item { seq: seq(s)?, image: corpus.image(s)? }))
        .collect()
}

fn optimizer(model: &Model, cfg: &PhaseConfig) -> AdamW {
    AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &model.params,
    )
}

/// Trains only the projector, on Slow samples.
pub fn phase_align(model: &mut Model, corpus: &EnhancedCorpus, cfg: &PhaseConfig) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    let data = items(corpus, |s| s.path_label == PathLabel::Slow, |s| Ok(s.sequence.clone()))?;
    if data.is_empty() {
        return Err(Error::Config("alignment needs at least one Slow sample".into()));
    }
    model.params.set_trainable(is_projector);
    let mut opt = optimizer(model, cfg);
    let out = train_epochs(model, &data, cfg, "projector", 0, cfg.epochs, &mut opt);
    model.params.set_trainable(|_| true);
    out
}

/// Explicit thoughts in the span first, then the same samples with the
/// span swapped to latent slots, continuing from the same weights.
pub fn phase_thought(model: &mut Model, corpus: &EnhancedCorpus, cfg: &PhaseConfig) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    let n_latent = model.config.n_latent;
    let explicit = items(corpus, |_| true, with_thought)?;
    let latent = items(corpus, |_| true, |s| latent_swap(&with_thought(s)?, n_latent))?;
    model.params.set_trainable(|_| true);
    let mut opt = optimizer(model, cfg);
    let a = cfg.explicit_epochs();
    let mut trace = train_epochs(model, &explicit, cfg, "explicit", 0, a, &mut opt)?;
    trace.extend(train_epochs(model, &latent, cfg, "latent", a, cfg.epochs - a, &mut opt)?);
    Ok(trace)
}

/// All trainable parameters on the mixed Fast/Slow sequences.
pub fn phase_finetune(model: &mut Model, corpus: &EnhancedCorpus, cfg: &PhaseConfig) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    let data = items(corpus, |_| true, |s| Ok(s.sequence.clone()))?;
    if data.is_empty() {
        return Err(Error::Config("fine-tuning needs at least one sample".into()));
    }
    model.params.set_trainable(|_| true);
    let mut opt = optimizer(model, cfg);
    train_epochs(model, &data, cfg, "mixed", 0, cfg.epochs, &mut opt)
}

pub fn run_phase(model: &mut Model, corpus: &EnhancedCorpus, cfg: &PhaseConfig) -> Result<Vec<EpochLoss>> {
    match cfg.phase {
        Phase::Align => phase_align(model, corpus, cfg),
        Phase::Thought => phase_thought(model, corpus, cfg),
        Phase::Finetune => phase_finetune(model, corpus, cfg),
    }
}

/// Phases in order; a missing phase is skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub phases: Vec<PhaseConfig>,
}

impl Recipe {
    pub fn reference(seed: u64) -> Self {
        Self {
            phases: Phase::ALL
                .iter()
                .map(|&p| PhaseConfig { seed, ..PhaseConfig::reference(p) })
                .collect(),
        }
    }

    /// Reference schedule with learning rates for a randomly initialized
    /// desk-sized model.
    pub fn desk(seed: u64) -> Self {
        let mut r = Self::reference(seed);
        for p in &mut r.phases {
            p.lr = match p.phase {
                Phase::Align | Phase::Finetune => 3e-3,
                Phase::Thought => 1e-3,
            };
        }
        r
    }

    pub fn without(mut self, phase: Phase) -> Self {
        self.phases.retain(|p| p.phase != phase);
        self
    }

    pub fn get_mut(&mut self, phase: Phase) -> Option<&mut PhaseConfig> {
        self.phases.iter_mut().find(|p| p.phase == phase)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.phases.windows(2) {
            if w[0].phase >= w[1].phase {
                return Err(Error::Config("phases must be distinct and in align, thought, finetune order".into()));
            }
        }
        self.phases.iter().try_for_each(PhaseConfig::validate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub corpus_sha256: String,
    pub model_config_sha256: String,
    pub census: Census,
    pub phases: Vec<PhaseRecord>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub model: crate::model::ModelConfig,
    pub recipe: Recipe,
    pub corpus_sha256: String,
}

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const LOSS_TRACE_FILE: &str = "loss_trace.jsonl";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    fs::write(path, v)?;
    Ok(())
}

pub fn checkpoint_dir(run: &Path, phase: Phase) -> PathBuf {
    run.join("checkpoints").join(phase.name())
}

/// Runs the recipe, writing the run directory when `run_dir` is given:
/// config snapshot, per-epoch loss trace, one checkpoint per phase and a
/// manifest.
pub fn run_recipe(
    model: &mut Model,
    corpus: &EnhancedCorpus,
    corpus_sha256: &str,
    recipe: &Recipe,
    run_dir: Option<&Path>,
) -> Result<(Vec<EpochLoss>, Option<RunManifest>)> {
    recipe.validate()?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
        let snap = RunSnapshot {
            model: model.config.clone(),
            recipe: recipe.clone(),
            corpus_sha256: corpus_sha256.to_string(),
        };
        write_json(&dir.join(RUN_CONFIG_FILE), &snap)?;
        fs::write(dir.join(LOSS_TRACE_FILE), b"")?;
    }
    let mut trace = Vec::new();
    let mut records = Vec::new();
    for cfg in &recipe.phases {
        let t = run_phase(model, corpus, cfg)?;
        if let Some(dir) = run_dir {
            let mut f = fs::OpenOptions::new().append(true).open(dir.join(LOSS_TRACE_FILE))?;
            for e in &t {
                serde_json::to_writer(&mut f, e)?;
                f.write_all(b"\n")?;
            }
            let cdir = checkpoint_dir(dir, cfg.phase);
            model.save(&cdir)?;
            records.push(PhaseRecord {
                phase: cfg.phase,
                checkpoint: cdir.strip_prefix(dir).unwrap_or(&cdir).display().to_string(),
                checkpoint_sha256: hex::encode(Sha256::digest(fs::read(cdir.join(WEIGHTS_FILE))?)),
            });
        }
        trace.extend(t);
    }
    let manifest = match run_dir {
        Some(dir) => {
            let m = RunManifest {
                corpus_sha256: corpus_sha256.to_string(),
                model_config_sha256: model.config.digest(),
                census: model.census(),
                phases: records,
                final_loss: trace.last().map(|e| e.mean_loss),
            };
            write_json(&dir.join(RUN_MANIFEST_FILE), &m)?;
            Some(m)
        }
        None => None,
    };
    Ok((trace, manifest))
}

#[cfg(test)]
mod tests;
