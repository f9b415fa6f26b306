use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to an entry of a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// Subject to weight decay (everything except biases by default).
    pub decay: bool,
}

/// Named, shaped parameter tensors with matching gradient buffers.
///
/// Shapes are fixed at registration. Entries keep insertion order, which
/// is also the order used for serialization.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.clone(),
            value,
            grad,
            trainable: true,
            decay,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    /// Overwrites a parameter's values. The shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::dim(
                "set_value",
                format!(
                    "{}: shape {:?} is immutable, got {:?}",
                    entry.name,
                    entry.value.shape(),
                    value.shape()
                ),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.entries[id.0].value.data_mut()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let buf = self.entries[id.0].grad.data_mut();
        debug_assert_eq!(buf.len(), grad.len());
        for (g, d) in buf.iter_mut().zip(grad) {
            *g += d;
        }
    }

    /// Adds another store's gradient buffers into this one. Both stores must
    /// have been built with the same layout.
    pub fn merge_grads(&mut self, other: &ParameterStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Contract("gradient merge across different layouts".into()));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.grad.shape() != theirs.grad.shape() {
                return Err(Error::dim("merge_grads", mine.name.clone()));
            }
            for (g, d) in mine.grad.data_mut().iter_mut().zip(theirs.grad.data()) {
                *g += d;
            }
        }
        Ok(())
    }

    pub fn total_squared_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.value.squared_norm()).sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}
