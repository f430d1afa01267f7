//! Per-domain reference models: one plain two-tower network per domain,
//! trained only on that domain's slice. Each tower is embeddings plus a
//! single global batch norm feeding one FFN trunk, with an independent
//! sigmoid head per task. No squeeze-excitation, no shared experts, no
//! cross network, no probability chaining.

use crate::adapt::AdaptParams;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::experts::FfnParams;
use crate::numkernel::params::ParamRegistry;
use crate::numkernel::rng::Rng;
use crate::numkernel::tape::{BnMode, NodeId, Tape};
use crate::schema::{DomainKey, FeatureSchema, TaskId, Tower};
use crate::towers::{TaskProbs, PROB_CLAMP};
use crate::trainer::{train, weighted_kl, BatchLoss, TrainConfig, Trainable, TrainHistory};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub deep_dims: Vec<usize>,
    pub emb_dim: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { deep_dims: vec![512, 256, 128, 128], emb_dim: 64 }
    }
}

#[derive(Debug, Clone)]
struct BaselineTower {
    adapt: AdaptParams,
    trunk: FfnParams,
    heads: Vec<FfnParams>,
}

pub struct BaselineModel {
    pub domain: DomainKey,
    pub cfg: BaselineConfig,
    pub schema: FeatureSchema,
    pub reg: ParamRegistry,
    pub tasks: Vec<TaskId>,
    query: BaselineTower,
    item: BaselineTower,
}

impl BaselineModel {
    pub fn new(
        cfg: BaselineConfig,
        schema: FeatureSchema,
        domain: DomainKey,
        seed: u64,
    ) -> Result<BaselineModel> {
        if cfg.deep_dims.is_empty() || cfg.emb_dim == 0 {
            return Err(Error::Config("baseline dims must be positive".into()));
        }
        schema.validate()?;
        let tasks: Vec<TaskId> =
            TaskId::ALL.into_iter().filter(|t| t.active_for(domain.product)).collect();
        let mut reg = ParamRegistry::new();
        let build_tower = |reg: &mut ParamRegistry, tower: Tower| {
            let side = schema.side(tower);
            let t = tower.name();
            let adapt = AdaptParams::build(reg, side, tower, false);
            let trunk =
                FfnParams::build(reg, &format!("{t}.trunk"), side.adapted_dim(), &cfg.deep_dims, false);
            let heads = tasks
                .iter()
                .map(|task| {
                    FfnParams::build(
                        reg,
                        &format!("{t}.head.{}", task.name()),
                        trunk.out_dim,
                        &[cfg.emb_dim],
                        true,
                    )
                })
                .collect();
            BaselineTower { adapt, trunk, heads }
        };
        let query = build_tower(&mut reg, Tower::Query);
        let item = build_tower(&mut reg, Tower::Item);
        reg.init_params(&mut Rng::new(seed));
        Ok(BaselineModel { domain, cfg, schema, reg, tasks, query, item })
    }

    fn check_slice(&self, examples: &[Example]) -> Result<()> {
        for ex in examples {
            if ex.domain != self.domain {
                return Err(Error::Data(format!(
                    "example {} is from {}, model serves {}",
                    ex.id,
                    ex.domain.name(),
                    self.domain.name()
                )));
            }
        }
        Ok(())
    }

    fn forward(
        tape: &mut Tape,
        schema: &FeatureSchema,
        tasks: &[TaskId],
        query: &BaselineTower,
        item: &BaselineTower,
        examples: &[Example],
        mode: BnMode,
    ) -> Result<[Option<(NodeId, Vec<usize>)>; 3]> {
        let rows: Vec<usize> = (0..examples.len()).collect();
        let mut towers = Vec::with_capacity(2);
        for (params, tower) in [(query, Tower::Query), (item, Tower::Item)] {
            let adapted = params.adapt.forward(tape, schema.side(tower), examples, mode)?;
            let trunk = params.trunk.forward(tape, adapted.full)?;
            let embs: Vec<NodeId> = params
                .heads
                .iter()
                .map(|h| h.forward(tape, trunk))
                .collect::<Result<_>>()?;
            towers.push(embs);
        }
        let mut probs: [Option<(NodeId, Vec<usize>)>; 3] = Default::default();
        for (ti, task) in tasks.iter().enumerate() {
            let s = tape.row_dot(towers[0][ti], towers[1][ti]);
            let p = tape.sigmoid(s);
            let p = tape.clamp(p, PROB_CLAMP.0, PROB_CLAMP.1);
            probs[task.index()] = Some((p, rows.clone()));
        }
        Ok(probs)
    }

    pub fn predict_batch(&mut self, examples: &[Example], mode: BnMode) -> Result<Vec<TaskProbs>> {
        self.check_slice(examples)?;
        let BaselineModel { schema, reg, tasks, query, item, .. } = self;
        let mut tape = Tape::new(reg);
        let probs = Self::forward(&mut tape, schema, tasks, query, item, examples, mode)?;
        let mut res =
            vec![TaskProbs { ctr: f64::NAN, gctr: f64::NAN, octr: None }; examples.len()];
        for task in TaskId::ALL {
            let Some((node, rows)) = &probs[task.index()] else { continue };
            let col = tape.value(*node);
            for (k, &r) in rows.iter().enumerate() {
                match task {
                    TaskId::Ctr => res[r].ctr = col.at(k, 0),
                    TaskId::Gctr => res[r].gctr = col.at(k, 0),
                    TaskId::Octr => res[r].octr = Some(col.at(k, 0)),
                }
            }
        }
        Ok(res)
    }

    /// (dense, embedding) parameter counts.
    pub fn param_counts(&self) -> (usize, usize) {
        (self.reg.dense_param_count(), self.reg.embedding_param_count())
    }
}

impl Trainable for BaselineModel {
    fn batch_loss_tape(
        &mut self,
        examples: &[Example],
        weights: &crate::trainer::TaskWeights,
        mode: BnMode,
    ) -> Result<(Tape<'_>, BatchLoss)> {
        self.check_slice(examples)?;
        let BaselineModel { schema, reg, tasks, query, item, .. } = self;
        let mut tape = Tape::new(reg);
        let probs = Self::forward(&mut tape, schema, tasks, query, item, examples, mode)?;
        let loss = weighted_kl(&mut tape, &probs, examples, weights)?;
        Ok((tape, loss))
    }

    fn registry_mut(&mut self) -> &mut ParamRegistry {
        &mut self.reg
    }
}

/// The trained per-domain reference set. Domains absent from the training
/// data are listed in `skipped` and carry no model.
pub struct BaselineSet {
    pub models: Vec<Option<BaselineModel>>,
    pub skipped: Vec<DomainKey>,
    pub histories: Vec<Option<TrainHistory>>,
    pub steps_per_model: usize,
}

impl BaselineSet {
    pub fn model(&self, d: DomainKey) -> Option<&BaselineModel> {
        self.models[d.index()].as_ref()
    }

    pub fn model_mut(&mut self, d: DomainKey) -> Option<&mut BaselineModel> {
        self.models[d.index()].as_mut()
    }

    /// Summed (dense, embedding) parameter counts across trained models.
    pub fn param_counts(&self) -> (usize, usize) {
        self.models.iter().flatten().fold((0, 0), |acc, m| {
            let (d, e) = m.param_counts();
            (acc.0 + d, acc.1 + e)
        })
    }
}

/// Trains one baseline per domain on its own slice. The step budget is
/// `cfg.steps` for the whole set, split evenly, so the set and a unified
/// model trained with `cfg.steps` see the same number of batches.
pub fn train_baselines(
    bl_cfg: &BaselineConfig,
    schema: &FeatureSchema,
    data: &[Example],
    cfg: &TrainConfig,
    model_seed: u64,
) -> Result<BaselineSet> {
    cfg.validate()?;
    let domains = DomainKey::all();
    let steps_per_model = (cfg.steps / domains.len()).max(1);
    let mut seeds = Rng::new(model_seed);
    let mut set = BaselineSet {
        models: Vec::new(),
        skipped: Vec::new(),
        histories: Vec::new(),
        steps_per_model,
    };
    for d in domains {
        let seed = seeds.next_u64();
        let slice: Vec<Example> = data.iter().filter(|e| e.domain == d).cloned().collect();
        if slice.is_empty() {
            set.skipped.push(d);
            set.models.push(None);
            set.histories.push(None);
            continue;
        }
        let mut model = BaselineModel::new(bl_cfg.clone(), schema.clone(), d, seed)?;
        let slice_cfg = TrainConfig { steps: steps_per_model, ..cfg.clone() };
        let hist = train(&mut model, &slice, &slice_cfg, |_, _| Ok(()))?;
        set.models.push(Some(model));
        set.histories.push(Some(hist));
    }
    Ok(set)
}
