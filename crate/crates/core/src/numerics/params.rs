use std::collections::BTreeMap;

use crate::error::{KredError, Result};

use super::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
}

/// Named parameter tensors with matching gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(KredError::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.slots.len());
        let grad = Tensor::zeros(value.shape());
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    /// Replaces a value, keeping the slot's shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != value.shape() {
            return Err(KredError::dim("set_value", slot.value.shape(), value.shape()));
        }
        slot.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.slots[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.slots[id.0].trainable = trainable;
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn zero_grad(&mut self) {
        for slot in &mut self.slots {
            slot.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.by_param.iter().enumerate() {
            if let Some(g) = g {
                for (acc, v) in self.slots[i].grad.data_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }

    /// Number of scalar entries across all slots.
    pub fn num_values(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Copies of every value, in insertion order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.slots.iter().map(|s| s.value.clone()).collect()
    }

    /// Restores values taken by [`ParamStore::snapshot`].
    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.slots.len() {
            return Err(KredError::Checkpoint(format!(
                "snapshot holds {} tensors, store has {}",
                values.len(),
                self.slots.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            self.set_value(ParamId(i), v.clone())?;
        }
        Ok(())
    }

    /// (name, value) pairs in insertion order.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.value))
    }
}

/// Gradients produced by one backward pass, indexed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub(crate) by_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            by_param: vec![None; n],
        }
    }

    pub(crate) fn slot(&mut self, id: ParamId, len: usize) -> &mut Vec<f64> {
        self.by_param[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Gradient for `id`, or `None` when the parameter was not reached.
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(id.0).and_then(|g| g.as_deref())
    }
}
