use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors plus parallel gradient accumulators.
///
/// BTreeMap keeps iteration order deterministic, which matters for the
/// byte-for-byte reproducibility of optimizer sweeps and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.grads
            .insert(name.clone(), Tensor::zeros(value.shape().to_vec()));
        self.values.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Add `grads` into the accumulators. Missing names are left at zero,
    /// so parameters unused by a forward pass keep zero gradients.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let acc = self.grads.get_mut(name).ok_or_else(|| {
                Error::Invalid(format!("gradient for unknown parameter `{name}`"))
            })?;
            acc.add_scaled(g, 1.0)?;
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_grads(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar parameter count across all tensors.
    pub fn total_elements(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }
}
