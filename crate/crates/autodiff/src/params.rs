use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{invalid, AutodiffError, Result};
use crate::graph::Gradients;
use crate::tensor::Tensor;

static NEXT_LAYOUT: AtomicU64 = AtomicU64::new(1);

/// Handle to one parameter tensor inside a [`ParamStore`].
///
/// Clones of a store share its layout id, so ids stay valid on snapshots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    layout: u64,
    index: usize,
}

impl ParamId {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Arc<Tensor>,
    grad: Option<Tensor>,
}

/// Named learnable tensors plus their accumulated gradients.
#[derive(Clone, Debug)]
pub struct ParamStore {
    layout: u64,
    params: Vec<Param>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            layout: NEXT_LAYOUT.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(invalid("param", format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Param {
            name,
            value: Arc::new(value),
            grad: None,
        });
        Ok(ParamId {
            layout: self.layout,
            index: self.params.len() - 1,
        })
    }

    fn slot(&self, id: ParamId) -> &Param {
        assert_eq!(id.layout, self.layout, "parameter id used with a foreign store");
        &self.params[id.index]
    }

    fn slot_mut(&mut self, id: ParamId) -> &mut Param {
        assert_eq!(id.layout, self.layout, "parameter id used with a foreign store");
        &mut self.params[id.index]
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.layout == self.layout && id.index < self.params.len()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId {
            layout: self.layout,
            index,
        })
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slot(id).name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(|index| ParamId {
            layout: self.layout,
            index,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slot(id).value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.slot(id).value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.slot_mut(id).value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = self.slot_mut(id);
        if slot.value.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_value",
                lhs: slot.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.slot(id).grad.as_ref()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.slot_mut(id).grad.as_mut()
    }

    /// Resets every gradient to zeros of the parameter's shape.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.data_mut().fill(0.0),
                None => p.grad = Some(Tensor::zeros(p.value.shape())),
            }
        }
    }

    /// Adds the parameter gradients recorded in `grads` that belong to this store.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            if id.layout != self.layout {
                continue;
            }
            let slot = &mut self.params[id.index];
            match &mut slot.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
                None => slot.grad = Some(g.clone()),
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and the exact bits of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
