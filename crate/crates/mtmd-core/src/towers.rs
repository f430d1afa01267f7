//! Two-tower model assembly. The query tower routes each example to one
//! expert per surface, the item tower to one per ad product. Every expert
//! mixes three sources through a per-task gate: its own deep expert, a
//! task-shared expert, and the tower's domain-shared expert. Mixed vectors
//! pass through layer norm and a low-rank cross network before the per-task
//! heads; a shallow expert on the high-level categorical slice contributes a
//! second dot product to the score.

use crate::adapt::AdaptParams;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::experts::{DcnParams, FfnParams, GateParams};
use crate::numkernel::params::{ParamRegistry, SlotId};
use crate::numkernel::rng::Rng;
use crate::numkernel::tape::{BnMode, NodeId, Tape};
use crate::schema::{AdProduct, DomainKey, FeatureSchema, Surface, TaskId, Tower};

pub const PROB_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Chain dependent tasks on CTR instead of predicting them standalone.
    pub constrained: bool,
    /// Deep embedding width per task, indexed by task.
    pub emb_dims: [usize; 3],
    pub domain_adapt: bool,
    pub dcn: bool,
    /// Layer norm before the cross network (after it when false).
    pub pre_norm: bool,
    pub deep_dims: Vec<usize>,
    pub shallow_dims: Vec<usize>,
    pub gate_hidden: Vec<usize>,
    pub dcn_rank: usize,
    pub dcn_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            constrained: true,
            emb_dims: [64, 64, 64],
            domain_adapt: true,
            dcn: true,
            pre_norm: true,
            deep_dims: vec![512, 256, 128, 128],
            shallow_dims: vec![128, 64],
            gate_hidden: vec![128, 64],
            dcn_rank: 32,
            dcn_depth: 2,
        }
    }
}

impl ModelConfig {
    /// Narrow embeddings for the dependent tasks, wide for CTR.
    pub fn constrained_profile() -> [usize; 3] {
        [128, 32, 32]
    }

    pub fn with_emb_dim(mut self, d: usize) -> Self {
        self.emb_dims = [d, d, d];
        self
    }

    pub fn expert_width(&self) -> usize {
        *self.deep_dims.last().unwrap()
    }

    pub fn shallow_width(&self) -> usize {
        *self.shallow_dims.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.deep_dims.is_empty() || self.shallow_dims.is_empty() {
            return Err(Error::Config("expert layer lists must be non-empty".into()));
        }
        if self.deep_dims.iter().chain(&self.shallow_dims).chain(&self.gate_hidden).any(|&d| d == 0)
        {
            return Err(Error::Config("expert layer widths must be positive".into()));
        }
        if self.emb_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("task embedding widths must be positive".into()));
        }
        if self.expert_width() < 2 {
            return Err(Error::Config("expert width must be at least 2 for layer norm".into()));
        }
        if self.dcn && (self.dcn_rank == 0 || self.dcn_depth == 0) {
            return Err(Error::Config("cross network needs positive rank and depth".into()));
        }
        Ok(())
    }
}

/// Which expert of `tower` serves examples from `d`.
pub fn expert_index(tower: Tower, d: DomainKey) -> usize {
    match tower {
        Tower::Query => d.surface.index(),
        Tower::Item => d.product.index(),
    }
}

pub fn expert_count(tower: Tower) -> usize {
    match tower {
        Tower::Query => Surface::ALL.len(),
        Tower::Item => AdProduct::ALL.len(),
    }
}

pub fn expert_name(tower: Tower, idx: usize) -> &'static str {
    match tower {
        Tower::Query => Surface::ALL[idx].name(),
        Tower::Item => AdProduct::ALL[idx].name(),
    }
}

#[derive(Debug, Clone)]
pub struct DomainExpertParams {
    /// Always all tasks: shapes stay uniform across experts, and tasks a
    /// product does not serve are masked out of loss and ranking instead.
    pub tasks: Vec<TaskId>,
    pub deep: Vec<FfnParams>,
    pub shallow: Vec<FfnParams>,
    pub gates: Vec<GateParams>,
    pub heads: Vec<FfnParams>,
    pub task_shared: FfnParams,
    pub ln: (SlotId, SlotId),
    pub dcn: Option<DcnParams>,
}

impl DomainExpertParams {
    fn build(
        reg: &mut ParamRegistry,
        cfg: &ModelConfig,
        schema: &FeatureSchema,
        tower: Tower,
        idx: usize,
    ) -> DomainExpertParams {
        use crate::numkernel::params::{Init, ParamKind};
        let side = schema.side(tower);
        let t = tower.name();
        let key = expert_name(tower, idx);
        let prefix = format!("{t}.expert.{key}");
        let tasks = TaskId::ALL.to_vec();
        let width = cfg.expert_width();
        let in_dim = side.adapted_dim();

        let per_task = |reg: &mut ParamRegistry, part: &str, f: &dyn Fn(&mut ParamRegistry, String) -> FfnParams| {
            tasks.iter().map(|task| f(reg, format!("{prefix}.{part}.{}", task.name()))).collect::<Vec<_>>()
        };
        let deep = per_task(reg, "deep", &|reg, p| {
            FfnParams::build(reg, &p, in_dim, &cfg.deep_dims, false)
        });
        let shallow = per_task(reg, "shallow", &|reg, p| {
            FfnParams::build(reg, &p, side.high_level_dim(), &cfg.shallow_dims, false)
        });
        let heads = tasks
            .iter()
            .map(|task| {
                FfnParams::build(
                    reg,
                    &format!("{prefix}.head.{}", task.name()),
                    width,
                    &[cfg.emb_dims[task.index()]],
                    true,
                )
            })
            .collect();
        let gates = tasks
            .iter()
            .map(|task| {
                GateParams::build(
                    reg,
                    &format!("{prefix}.gate.{}", task.name()),
                    in_dim,
                    &cfg.gate_hidden,
                    3,
                )
            })
            .collect();
        let task_shared = FfnParams::build(reg, &format!("{prefix}.taskshared"), in_dim, &cfg.deep_dims, false);
        let ln = (
            reg.add(&format!("{prefix}.ln.gamma"), 1, width, ParamKind::Dense, Init::Ones),
            reg.add(&format!("{prefix}.ln.beta"), 1, width, ParamKind::Dense, Init::Zeros),
        );
        let dcn = cfg
            .dcn
            .then(|| DcnParams::build(reg, &format!("{prefix}.dcn"), width, cfg.dcn_rank, cfg.dcn_depth));
        DomainExpertParams { tasks, deep, shallow, gates, heads, task_shared, ln, dcn }
    }
}

#[derive(Debug, Clone)]
pub struct TowerParams {
    pub tower: Tower,
    pub adapt: AdaptParams,
    pub domain_shared: FfnParams,
    pub experts: Vec<DomainExpertParams>,
}

impl TowerParams {
    fn build(
        reg: &mut ParamRegistry,
        cfg: &ModelConfig,
        schema: &FeatureSchema,
        tower: Tower,
    ) -> TowerParams {
        let side = schema.side(tower);
        let adapt = AdaptParams::build(reg, side, tower, cfg.domain_adapt);
        let domain_shared = FfnParams::build(
            reg,
            &format!("{}.shared", tower.name()),
            side.shared_dim(),
            &cfg.deep_dims,
            false,
        );
        let experts = (0..expert_count(tower))
            .map(|i| DomainExpertParams::build(reg, cfg, schema, tower, i))
            .collect();
        TowerParams { tower, adapt, domain_shared, experts }
    }
}

/// Per-task tower output over the rows the task covers, in `rows` order.
#[derive(Debug, Clone)]
pub struct TaskEmb {
    pub deep: NodeId,
    pub shallow: NodeId,
    /// Batch row index per output row, ascending.
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TowerOut {
    pub tasks: [Option<TaskEmb>; 3],
    /// Gate weights per (expert index, task), for inspection.
    pub gates: Vec<(usize, TaskId, NodeId)>,
}

fn assemble_subset(
    tape: &mut Tape,
    parts: Vec<(NodeId, Vec<usize>)>,
) -> (NodeId, Vec<usize>) {
    let mut covered: Vec<usize> = parts.iter().flat_map(|(_, r)| r.iter().copied()).collect();
    covered.sort_unstable();
    let mapped: Vec<(NodeId, Vec<usize>)> = parts
        .into_iter()
        .map(|(n, rows)| {
            let idx = rows.iter().map(|r| covered.binary_search(r).unwrap()).collect();
            (n, idx)
        })
        .collect();
    (tape.assemble_rows(&mapped, covered.len()), covered)
}

/// Gathers `src` (whose rows correspond to `src_rows`) down to `want_rows`,
/// both ascending. No-op when they already match.
fn align_rows(tape: &mut Tape, src: NodeId, src_rows: &[usize], want_rows: &[usize]) -> NodeId {
    if src_rows == want_rows {
        return src;
    }
    let idx: Vec<usize> =
        want_rows.iter().map(|r| src_rows.binary_search(r).expect("row not covered")).collect();
    tape.gather_rows(src, &idx)
}

pub fn tower_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    schema: &FeatureSchema,
    params: &TowerParams,
    examples: &[Example],
    mode: BnMode,
) -> Result<TowerOut> {
    let side = schema.side(params.tower);
    let adapted = params.adapt.forward(tape, side, examples, mode)?;
    let shared_all = params.domain_shared.forward(tape, adapted.shared)?;

    let b = examples.len();
    let mut per_task_parts: [Vec<(NodeId, Vec<usize>)>; 3] = Default::default();
    let mut shallow_parts: [Vec<(NodeId, Vec<usize>)>; 3] = Default::default();
    let mut gates = Vec::new();

    for (ei, expert) in params.experts.iter().enumerate() {
        let rows: Vec<usize> = (0..b)
            .filter(|&r| expert_index(params.tower, examples[r].domain) == ei)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let xg = tape.gather_rows(adapted.full, &rows);
        let hg = tape.gather_rows(adapted.high_level, &rows);
        let sg = tape.gather_rows(shared_all, &rows);
        let ts = expert.task_shared.forward(tape, xg)?;
        for (ti, &task) in expert.tasks.iter().enumerate() {
            let own = expert.deep[ti].forward(tape, xg)?;
            let w = expert.gates[ti].forward(tape, xg)?;
            gates.push((ei, task, w));
            let mixed = tape.mix_experts(&[own, ts, sg], w);
            let (g_ln, b_ln) = expert.ln;
            let gamma = tape.param(g_ln);
            let beta = tape.param(b_ln);
            let z = match (&expert.dcn, cfg.pre_norm) {
                (Some(dcn), true) => {
                    let n = tape.layer_norm(mixed, gamma, beta)?;
                    dcn.forward(tape, n)
                }
                (Some(dcn), false) => {
                    let c = dcn.forward(tape, mixed);
                    tape.layer_norm(c, gamma, beta)?
                }
                (None, _) => tape.layer_norm(mixed, gamma, beta)?,
            };
            let deep_emb = expert.heads[ti].forward(tape, z)?;
            let shallow_emb = expert.shallow[ti].forward(tape, hg)?;
            per_task_parts[task.index()].push((deep_emb, rows.clone()));
            shallow_parts[task.index()].push((shallow_emb, rows.clone()));
        }
    }

    let mut out = TowerOut { gates, ..Default::default() };
    for task in TaskId::ALL {
        let ti = task.index();
        if per_task_parts[ti].is_empty() {
            continue;
        }
        let (deep, rows) = assemble_subset(tape, std::mem::take(&mut per_task_parts[ti]));
        let (shallow, rows2) = assemble_subset(tape, std::mem::take(&mut shallow_parts[ti]));
        debug_assert_eq!(rows, rows2);
        out.tasks[ti] = Some(TaskEmb { deep, shallow, rows });
    }
    Ok(out)
}

/// Probability column per task over the rows where the task is active,
/// plus both towers' raw outputs.
pub struct ForwardOut {
    pub probs: [Option<(NodeId, Vec<usize>)>; 3],
    pub query: TowerOut,
    pub item: TowerOut,
}

pub fn forward_probs(
    tape: &mut Tape,
    cfg: &ModelConfig,
    schema: &FeatureSchema,
    query: &TowerParams,
    item: &TowerParams,
    examples: &[Example],
    mode: BnMode,
) -> Result<ForwardOut> {
    let q_out = tower_forward(tape, cfg, schema, query, examples, mode)?;
    let i_out = tower_forward(tape, cfg, schema, item, examples, mode)?;

    let mut logits: [Option<(NodeId, Vec<usize>)>; 3] = Default::default();
    for task in TaskId::ALL {
        let ti = task.index();
        let (Some(q), Some(i)) = (&q_out.tasks[ti], &i_out.tasks[ti]) else {
            continue;
        };
        let rows: Vec<usize> =
            q.rows.iter().copied().filter(|r| i.rows.binary_search(r).is_ok()).collect();
        if rows.is_empty() {
            continue;
        }
        let qd = align_rows(tape, q.deep, &q.rows, &rows);
        let id = align_rows(tape, i.deep, &i.rows, &rows);
        let qs = align_rows(tape, q.shallow, &q.rows, &rows);
        let is = align_rows(tape, i.shallow, &i.rows, &rows);
        let deep_dot = tape.row_dot(qd, id);
        let shallow_dot = tape.row_dot(qs, is);
        logits[ti] = Some((tape.add(deep_dot, shallow_dot), rows));
    }

    let (ctr_logit, ctr_rows) = logits[TaskId::Ctr.index()]
        .clone()
        .ok_or_else(|| Error::Data("batch produced no click-task rows".into()))?;
    let ctr_raw = tape.sigmoid(ctr_logit);

    let mut probs: [Option<(NodeId, Vec<usize>)>; 3] = Default::default();
    for task in TaskId::ALL {
        let ti = task.index();
        let Some((s, rows)) = logits[ti].clone() else { continue };
        // Embeddings exist for every task; probabilities only for the rows
        // whose product serves it.
        let active: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&r| task.active_for(examples[r].domain.product))
            .collect();
        if active.is_empty() {
            continue;
        }
        let s = align_rows(tape, s, &rows, &active);
        let p = if task == TaskId::Ctr {
            align_rows(tape, ctr_raw, &ctr_rows, &active)
        } else if cfg.constrained {
            let ratio = tape.sigmoid(s);
            let base = align_rows(tape, ctr_raw, &ctr_rows, &active);
            tape.mul(ratio, base)
        } else {
            tape.sigmoid(s)
        };
        probs[ti] = Some((tape.clamp(p, PROB_CLAMP.0, PROB_CLAMP.1), active));
    }
    Ok(ForwardOut { probs, query: q_out, item: i_out })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskProbs {
    pub ctr: f64,
    pub gctr: f64,
    pub octr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TaskEmbedding {
    pub task: TaskId,
    /// The row's product does not serve this task: the embedding is still
    /// produced (uniform shapes) but stays out of loss and ranking.
    pub masked: bool,
    pub deep: Vec<f64>,
    pub shallow: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub id: u64,
    pub domain: DomainKey,
    pub tasks: Vec<TaskEmbedding>,
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreBreakdown {
    pub deep: f64,
    pub shallow: f64,
}

impl ScoreBreakdown {
    pub fn total(self) -> f64 {
        self.deep + self.shallow
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Score of a (query, item) pair at one task from exported embeddings.
pub fn score_pair(q: &TaskEmbedding, i: &TaskEmbedding) -> ScoreBreakdown {
    debug_assert_eq!(q.task, i.task);
    ScoreBreakdown { deep: dot(&q.deep, &i.deep), shallow: dot(&q.shallow, &i.shallow) }
}

pub struct MtmdModel {
    pub cfg: ModelConfig,
    pub schema: FeatureSchema,
    pub reg: ParamRegistry,
    pub query: TowerParams,
    pub item: TowerParams,
}

impl MtmdModel {
    pub fn new(cfg: ModelConfig, schema: FeatureSchema, seed: u64) -> Result<MtmdModel> {
        cfg.validate()?;
        schema.validate()?;
        let mut reg = ParamRegistry::new();
        let query = TowerParams::build(&mut reg, &cfg, &schema, Tower::Query);
        let item = TowerParams::build(&mut reg, &cfg, &schema, Tower::Item);
        reg.init_params(&mut Rng::new(seed));
        Ok(MtmdModel { cfg, schema, reg, query, item })
    }

    /// Active-task probabilities per example, batched. Row order follows
    /// `examples`.
    pub fn predict_batch(&mut self, examples: &[Example], mode: BnMode) -> Result<Vec<TaskProbs>> {
        let MtmdModel { cfg, schema, reg, query, item } = self;
        let mut tape = Tape::new(reg);
        let out = forward_probs(&mut tape, cfg, schema, query, item, examples, mode)?;
        let mut res: Vec<TaskProbs> =
            vec![TaskProbs { ctr: f64::NAN, gctr: f64::NAN, octr: None }; examples.len()];
        for task in TaskId::ALL {
            let Some((node, rows)) = &out.probs[task.index()] else { continue };
            let col = tape.value(*node);
            for (k, &r) in rows.iter().enumerate() {
                let v = col.at(k, 0);
                match task {
                    TaskId::Ctr => res[r].ctr = v,
                    TaskId::Gctr => res[r].gctr = v,
                    TaskId::Octr => res[r].octr = Some(v),
                }
            }
        }
        Ok(res)
    }

    pub fn predict(&mut self, ex: &Example) -> Result<TaskProbs> {
        Ok(self.predict_batch(std::slice::from_ref(ex), BnMode::Infer)?[0])
    }

    /// Embeddings for one tower side, inference mode. Every row carries all
    /// tasks; the ones its product does not serve come back marked masked.
    pub fn embed(&mut self, examples: &[Example], tower: Tower) -> Result<Vec<EmbeddingRow>> {
        let MtmdModel { cfg, schema, reg, query, item } = self;
        let params = match tower {
            Tower::Query => query,
            Tower::Item => item,
        };
        let mut tape = Tape::new(reg);
        let out = tower_forward(&mut tape, cfg, schema, params, examples, BnMode::Infer)?;
        let mut rows: Vec<EmbeddingRow> = examples
            .iter()
            .map(|e| EmbeddingRow { id: e.id, domain: e.domain, tasks: Vec::new() })
            .collect();
        for task in TaskId::ALL {
            let Some(emb) = &out.tasks[task.index()] else { continue };
            let deep = tape.value(emb.deep).clone();
            let shallow = tape.value(emb.shallow).clone();
            for (k, &r) in emb.rows.iter().enumerate() {
                rows[r].tasks.push(TaskEmbedding {
                    task,
                    masked: !task.active_for(examples[r].domain.product),
                    deep: deep.row(k).to_vec(),
                    shallow: shallow.row(k).to_vec(),
                });
            }
        }
        Ok(rows)
    }

    /// (dense, embedding) parameter counts.
    pub fn param_counts(&self) -> (usize, usize) {
        (self.reg.dense_param_count(), self.reg.embedding_param_count())
    }
}
