//! Distillation training: per-task Bernoulli KL against the teacher's soft
//! probabilities, averaged over the batch, optimized with Adam over
//! deterministic seeded mini-batches.

use crate::data::Example;
use crate::error::{Error, Result};
use crate::numkernel::adam::Adam;
use crate::numkernel::params::ParamRegistry;
use crate::numkernel::rng::Rng;
use crate::numkernel::tape::{BnMode, NodeId, Tape};
use crate::numkernel::tensor::Tensor2;
use crate::schema::TaskId;
use crate::towers::{forward_probs, MtmdModel};

/// KL(p ‖ q) between Bernoulli distributions, in nats.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0 && q > 0.0 && q < 1.0);
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights(pub [f64; 3]);

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights([1.0, 0.5, 0.5])
    }
}

impl TaskWeights {
    pub fn get(&self, task: TaskId) -> f64 {
        self.0[task.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(Error::Config("task weights must be positive".into()));
        }
        let ctr = self.get(TaskId::Ctr);
        if self.0.iter().any(|&w| w > ctr) {
            return Err(Error::Config(
                "the click task must carry the largest loss weight".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: NodeId,
    pub value: f64,
    /// Mean loss contribution per task; `None` where the batch had no
    /// active rows.
    pub per_task: [Option<f64>; 3],
}

/// Builds the weighted KL loss over per-task probability columns, dividing
/// by the full batch size so masked tasks dilute rather than renormalize.
pub(crate) fn weighted_kl(
    tape: &mut Tape,
    probs: &[Option<(NodeId, Vec<usize>)>; 3],
    examples: &[Example],
    weights: &TaskWeights,
) -> Result<BatchLoss> {
    let b = examples.len() as f64;
    let mut total: Option<NodeId> = None;
    let mut per_task = [None; 3];
    for task in TaskId::ALL {
        let Some((p, rows)) = &probs[task.index()] else { continue };
        let mut target = Tensor2::zeros(rows.len(), 1);
        for (k, &r) in rows.iter().enumerate() {
            let t = examples[r].teacher.get(task).ok_or_else(|| {
                Error::Data(format!(
                    "example {} lacks a teacher score for {}",
                    examples[r].id,
                    task.name()
                ))
            })?;
            target.set(k, 0, t);
        }
        let mask = Tensor2::filled(rows.len(), 1, 1.0);
        let sum = tape.kl_sum(*p, target, mask, weights.get(task));
        let mean = tape.scale(sum, 1.0 / b);
        per_task[task.index()] = Some(tape.value(mean).scalar());
        total = Some(match total {
            None => mean,
            Some(t) => tape.add(t, mean),
        });
    }
    let total = total.ok_or_else(|| Error::Data("batch has no active tasks".into()))?;
    Ok(BatchLoss { total, value: tape.value(total).scalar(), per_task })
}

/// Anything the training loop can optimize: builds its batch loss on a tape
/// over its own registry.
pub trait Trainable {
    fn batch_loss_tape(
        &mut self,
        examples: &[Example],
        weights: &TaskWeights,
        mode: BnMode,
    ) -> Result<(Tape<'_>, BatchLoss)>;

    fn registry_mut(&mut self) -> &mut ParamRegistry;
}

impl Trainable for MtmdModel {
    fn batch_loss_tape(
        &mut self,
        examples: &[Example],
        weights: &TaskWeights,
        mode: BnMode,
    ) -> Result<(Tape<'_>, BatchLoss)> {
        let MtmdModel { cfg, schema, reg, query, item } = self;
        let mut tape = Tape::new(reg);
        let fwd = forward_probs(&mut tape, cfg, schema, query, item, examples, mode)?;
        let loss = weighted_kl(&mut tape, &fwd.probs, examples, weights)?;
        Ok((tape, loss))
    }

    fn registry_mut(&mut self) -> &mut ParamRegistry {
        &mut self.reg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Seed for the mini-batch shuffle stream.
    pub seed: u64,
    pub weights: TaskWeights,
    /// Invoke the checkpoint callback every this many steps; 0 disables it.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 256,
            steps: 1000,
            seed: 1,
            weights: TaskWeights::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: usize,
    pub total: f64,
    pub per_task: [Option<f64>; 3],
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepStats>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.total)
    }
}

/// Runs `cfg.steps` of Adam over seeded shuffled mini-batches. The order is
/// reshuffled each epoch from one RNG stream, so a (model seed, data, train
/// seed) triple fully determines every parameter bit.
pub fn train<M, F>(
    model: &mut M,
    data: &[Example],
    cfg: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<TrainHistory>
where
    M: Trainable,
    F: FnMut(usize, &mut M) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut pos = order.len();
    let mut adam = Adam::new(cfg.lr);
    let mut history = TrainHistory { steps: Vec::with_capacity(cfg.steps) };
    for step in 0..cfg.steps {
        if pos >= order.len() {
            rng.shuffle(&mut order);
            pos = 0;
        }
        let end = (pos + cfg.batch_size).min(order.len());
        // a batch is a set: fixing the row order keeps the summed loss
        // independent of where the shuffle happened to place each example
        let mut picked: Vec<usize> = order[pos..end].to_vec();
        picked.sort_unstable();
        let batch: Vec<Example> = picked.iter().map(|&i| data[i].clone()).collect();
        pos = end;
        let (tape, loss) =
            model.batch_loss_tape(&batch, &cfg.weights, BnMode::Train { update_stats: true })?;
        history.steps.push(StepStats { step, total: loss.value, per_task: loss.per_task });
        tape.backward(loss.total);
        adam.step(model.registry_mut());
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, model)?;
        }
    }
    Ok(history)
}
