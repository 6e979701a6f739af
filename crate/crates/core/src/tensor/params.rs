use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

pub type ParamId = usize;

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Vec<f64>,
    /// Frozen parameters never receive gradients or optimizer updates.
    pub frozen: bool,
}

/// Ordered parameter collection. Insertion order is the canonical order
/// used by checkpoints and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
    /// Per-parameter switch overriding `frozen` for the current phase.
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Validation(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        let grad = vec![0.0; tensor.len()];
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            grad,
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        self.trainable.push(true);
        Ok(id)
    }

    pub fn add_frozen(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        let id = self.add(name, tensor)?;
        self.params[id].frozen = true;
        self.trainable[id] = false;
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Whether gradients for `id` are wanted in the current phase.
    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id] && !self.params[id].frozen
    }

    /// Restricts training to names accepted by `pred`; frozen names stay frozen.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (i, p) in self.params.iter().enumerate() {
            self.trainable[i] = !p.frozen && pred(&p.name);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar values.
    pub fn census(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_values(&mut self, other: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in &mut self.params {
            let t = other
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: {:?} vs {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                other.len(),
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect()
    }
}
