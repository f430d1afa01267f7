//! Named trainable parameters. Every weight in a model lives in one registry
//! so that initialization, optimizer traversal, and checkpointing all walk the
//! same id-sorted order regardless of model construction order.

use std::collections::HashMap;

use super::rng::Rng;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// How a slot is filled at init time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-limit, limit)
    Uniform { limit: f64 },
    /// He/Kaiming uniform for leaky-relu layers: limit = sqrt(6 / fan_in).
    HeUniform { fan_in: usize },
    /// Xavier/Glorot uniform: limit = sqrt(6 / (fan_in + fan_out)).
    XavierUniform { fan_in: usize, fan_out: usize },
}

impl Init {
    fn fill(&self, t: &mut Tensor2, rng: &mut Rng) {
        match *self {
            Init::Zeros => t.fill(0.0),
            Init::Ones => t.fill(1.0),
            Init::Uniform { limit } => {
                for v in t.data_mut() {
                    *v = rng.uniform_in(-limit, limit);
                }
            }
            Init::HeUniform { fan_in } => {
                let limit = (6.0 / fan_in as f64).sqrt();
                for v in t.data_mut() {
                    *v = rng.uniform_in(-limit, limit);
                }
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in t.data_mut() {
                    *v = rng.uniform_in(-limit, limit);
                }
            }
        }
    }
}

/// Role of a slot: dense weights and embeddings get gradients and optimizer
/// state; state slots (batch-norm running statistics) are updated by forward
/// side effects only and are skipped by the optimizer and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Dense,
    Embedding,
    State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamSlot {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor2,
    pub grad: Tensor2,
    init: Init,
}

/// All parameters of one model.
#[derive(Debug, Clone)]
pub struct ParamRegistry {
    slots: Vec<ParamSlot>,
    by_name: HashMap<String, SlotId>,
}

impl Default for ParamRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamRegistry {
    pub fn new() -> Self {
        ParamRegistry { slots: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a slot; the value is zeroed until `init_params` runs.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, kind: ParamKind, init: Init) -> SlotId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let id = SlotId(self.slots.len());
        self.slots.push(ParamSlot {
            name: name.to_string(),
            kind,
            value: Tensor2::zeros(rows, cols),
            grad: Tensor2::zeros(rows, cols),
            init,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Fills every slot from `rng`, visiting slots in name order so the
    /// resulting weights do not depend on model construction order.
    pub fn init_params(&mut self, rng: &mut Rng) {
        let mut order: Vec<SlotId> = self.ids().collect();
        order.sort_by(|a, b| self.slots[a.0].name.cmp(&self.slots[b.0].name));
        for id in order {
            let slot = &mut self.slots[id.0];
            slot.init.fill(&mut slot.value, rng);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = SlotId> + '_ {
        (0..self.slots.len()).map(SlotId)
    }

    /// Slot ids sorted by name; the canonical traversal order for the
    /// optimizer, checkpoints, and parameter counting.
    pub fn sorted_ids(&self) -> Vec<SlotId> {
        let mut order: Vec<SlotId> = self.ids().collect();
        order.sort_by(|a, b| self.slots[a.0].name.cmp(&self.slots[b.0].name));
        order
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, id: SlotId) -> &ParamSlot {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: SlotId) -> &mut ParamSlot {
        &mut self.slots[id.0]
    }

    pub fn value(&self, id: SlotId) -> &Tensor2 {
        &self.slots[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Result<SlotId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown parameter: {name}")))
    }

    pub fn zero_grads(&mut self) {
        for slot in &mut self.slots {
            slot.grad.fill(0.0);
        }
    }

    /// Total scalar count of trainable non-embedding parameters.
    pub fn dense_param_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.kind == ParamKind::Dense)
            .map(|s| s.value.len())
            .sum()
    }

    /// Total scalar count of embedding-table parameters.
    pub fn embedding_param_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.kind == ParamKind::Embedding)
            .map(|s| s.value.len())
            .sum()
    }
}
