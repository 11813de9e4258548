//! Named parameter storage.
//!
//! Every tensor that a network owns is registered here under a
//! dot-separated hierarchical name of the form `stream.block.layer.kind`,
//! e.g. `vgg.block3.conv2.weight` or `fusion.dam.inject.level4.bias`.
//! Checkpoints are keyed by exactly these names.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a stored tensor is for. Running statistics are state, not trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    role: ParamRole,
    value: Rc<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, role: ParamRole) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            role,
            value: Rc::new(value),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.role(id).trainable())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.entries[id.0].role
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Rc<Tensor> {
        Rc::clone(&self.entries[id.0].value)
    }

    /// Mutable access; copies on write if a graph still holds the tensor.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = self.get(id).shape();
        if value.shape() != current {
            return Err(Error::CheckpointMismatch {
                name: self.name(id).to_string(),
                reason: format!("expected shape {current}, got {}", value.shape()),
            });
        }
        self.entries[id.0].value = Rc::new(value);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Total number of scalar entries across trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).len()).sum()
    }

    /// Exact element-wise equality of every stored tensor.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
