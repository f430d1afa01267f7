//! Evaluation against the teacher (log-scale absolute error on predicted
//! probabilities), unified-vs-baseline comparison grids, and the ablation
//! harness that retrains the model with single factors removed.

use crate::baseline::BaselineSet;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::numkernel::rng::Rng;
use crate::numkernel::tape::BnMode;
use crate::schema::{DomainKey, FeatureSchema, TaskId};
use crate::towers::{ModelConfig, MtmdModel, TaskProbs};
use crate::trainer::{train, TrainConfig};

const EVAL_CHUNK: usize = 256;

/// Mean |ln(predicted) − ln(reference)| over (predicted, reference) pairs.
pub fn log_mae(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("log-MAE of an empty set".into()));
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(pred, teacher)| (pred.ln() - teacher.ln()).abs())
        .sum();
    Ok(sum / pairs.len() as f64)
}

/// Relative improvement of `new` over `base`, in percent; positive when
/// `new` is smaller.
pub fn improvement_pct(base: f64, new: f64) -> Result<f64> {
    if base == 0.0 {
        return Err(Error::Data("improvement relative to a zero baseline".into()));
    }
    Ok(100.0 * (base - new) / base)
}

pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalCell {
    pub domain: DomainKey,
    pub task: TaskId,
    pub log_mae: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    pub per_task: [Option<(f64, usize)>; 3],
    pub overall: (f64, usize),
}

impl EvalReport {
    pub fn cell(&self, domain: DomainKey, task: TaskId) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.domain == domain && c.task == task)
    }

    pub fn task_log_mae(&self, task: TaskId) -> Option<f64> {
        self.per_task[task.index()].map(|(v, _)| v)
    }
}

fn prob_of(p: &TaskProbs, task: TaskId) -> Option<f64> {
    match task {
        TaskId::Ctr => Some(p.ctr),
        TaskId::Gctr => Some(p.gctr),
        TaskId::Octr => p.octr,
    }
}

fn report_from_pairs(pairs: &mut [Vec<Vec<(f64, f64)>>]) -> Result<EvalReport> {
    let mut cells = Vec::new();
    let mut per_task: [Option<(f64, usize)>; 3] = Default::default();
    let mut all: Vec<(f64, f64)> = Vec::new();
    for task in TaskId::ALL {
        let ti = task.index();
        let mut task_pairs: Vec<(f64, f64)> = Vec::new();
        for d in DomainKey::all() {
            let cell = &pairs[ti][d.index()];
            if cell.is_empty() {
                continue;
            }
            cells.push(EvalCell {
                domain: d,
                task,
                log_mae: log_mae(cell)?,
                count: cell.len(),
            });
            task_pairs.extend_from_slice(cell);
        }
        if !task_pairs.is_empty() {
            per_task[ti] = Some((log_mae(&task_pairs)?, task_pairs.len()));
            all.extend_from_slice(&task_pairs);
        }
    }
    Ok(EvalReport { overall: (log_mae(&all)?, all.len()), cells, per_task })
}

fn accumulate(
    pairs: &mut [Vec<Vec<(f64, f64)>>],
    examples: &[Example],
    probs: &[TaskProbs],
) {
    for (ex, p) in examples.iter().zip(probs) {
        for task in TaskId::ALL {
            let (Some(pred), Some(teacher)) = (prob_of(p, task), ex.teacher.get(task)) else {
                continue;
            };
            pairs[task.index()][ex.domain.index()].push((pred, teacher));
        }
    }
}

fn empty_pairs() -> Vec<Vec<Vec<(f64, f64)>>> {
    vec![vec![Vec::new(); DomainKey::all().len()]; 3]
}

/// Per-cell and aggregate log-MAE of the unified model on `data`.
pub fn evaluate_mtmd(model: &mut MtmdModel, data: &[Example]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut pairs = empty_pairs();
    for chunk in data.chunks(EVAL_CHUNK) {
        let probs = model.predict_batch(chunk, BnMode::Infer)?;
        accumulate(&mut pairs, chunk, &probs);
    }
    report_from_pairs(&mut pairs)
}

/// Per-cell log-MAE of the per-domain reference set. Slices whose domain has
/// no trained model are left out of the report.
pub fn evaluate_baselines(set: &mut BaselineSet, data: &[Example]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut pairs = empty_pairs();
    for d in DomainKey::all() {
        let slice: Vec<Example> = data.iter().filter(|e| e.domain == d).cloned().collect();
        let Some(model) = set.model_mut(d) else { continue };
        if slice.is_empty() {
            continue;
        }
        for chunk in slice.chunks(EVAL_CHUNK) {
            let probs = model.predict_batch(chunk, BnMode::Infer)?;
            accumulate(&mut pairs, chunk, &probs);
        }
    }
    report_from_pairs(&mut pairs)
}

#[derive(Debug, Clone, Copy)]
pub struct CompareCell {
    pub domain: DomainKey,
    pub task: TaskId,
    pub unified: f64,
    pub baseline: f64,
    /// Positive when the unified model has lower error.
    pub improvement_pct: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub cells: Vec<CompareCell>,
    pub unified_params: (usize, usize),
    pub baseline_params: (usize, usize),
}

impl CompareReport {
    pub fn wins(&self) -> usize {
        self.cells.iter().filter(|c| c.improvement_pct > 0.0).count()
    }
}

/// Joins the two reports over the cells both cover.
pub fn compare_reports(
    unified: &EvalReport,
    baseline: &EvalReport,
    unified_params: (usize, usize),
    baseline_params: (usize, usize),
) -> Result<CompareReport> {
    let mut cells = Vec::new();
    for u in &unified.cells {
        let Some(b) = baseline.cell(u.domain, u.task) else { continue };
        cells.push(CompareCell {
            domain: u.domain,
            task: u.task,
            unified: u.log_mae,
            baseline: b.log_mae,
            improvement_pct: improvement_pct(b.log_mae, u.log_mae)?,
            count: u.count,
        });
    }
    Ok(CompareReport { cells, unified_params, baseline_params })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoDomainAdapt,
    NoDcn,
    PostNorm,
    Downsample50,
    EmbDim(usize),
    Unconstrained,
}

pub const ABLATION_SET: [Ablation; 9] = [
    Ablation::Full,
    Ablation::NoDomainAdapt,
    Ablation::NoDcn,
    Ablation::PostNorm,
    Ablation::Downsample50,
    Ablation::EmbDim(64),
    Ablation::EmbDim(48),
    Ablation::EmbDim(32),
    Ablation::Unconstrained,
];

impl Ablation {
    pub fn name(self) -> String {
        match self {
            Ablation::Full => "full".into(),
            Ablation::NoDomainAdapt => "no_domain_adapt".into(),
            Ablation::NoDcn => "no_dcn".into(),
            Ablation::PostNorm => "post_norm".into(),
            Ablation::Downsample50 => "downsample_50".into(),
            Ablation::EmbDim(d) => format!("emb_dim_{d}"),
            Ablation::Unconstrained => "unconstrained".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Ablation> {
        Ok(match s {
            "full" => Ablation::Full,
            "no_domain_adapt" => Ablation::NoDomainAdapt,
            "no_dcn" => Ablation::NoDcn,
            "post_norm" => Ablation::PostNorm,
            "downsample_50" => Ablation::Downsample50,
            "unconstrained" => Ablation::Unconstrained,
            _ => match s.strip_prefix("emb_dim_").and_then(|d| d.parse().ok()) {
                Some(d) => Ablation::EmbDim(d),
                None => return Err(Error::Config(format!("unknown ablation variant {s}"))),
            },
        })
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Ablation::Full | Ablation::Downsample50 => {}
            Ablation::NoDomainAdapt => cfg.domain_adapt = false,
            Ablation::NoDcn => cfg.dcn = false,
            Ablation::PostNorm => cfg.pre_norm = false,
            Ablation::EmbDim(d) => cfg.emb_dims = [d, d, d],
            Ablation::Unconstrained => cfg.constrained = false,
        }
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub variant: Ablation,
    pub overall_log_mae: f64,
    pub per_task: [Option<(f64, usize)>; 3],
    /// Improvement of the full model over this variant; positive when the
    /// ablated factor was helping.
    pub delta_vs_full_pct: f64,
}

/// Trains and evaluates the full model plus each requested variant under the
/// same budget. Half the training data is deterministically dropped for the
/// downsampling variant; everything else sees the full set.
pub fn run_ablation(
    base_cfg: &ModelConfig,
    schema: &FeatureSchema,
    train_data: &[Example],
    eval_data: &[Example],
    train_cfg: &TrainConfig,
    model_seed: u64,
    variants: &[Ablation],
) -> Result<Vec<AblationOutcome>> {
    let run = |variant: Ablation| -> Result<(f64, [Option<(f64, usize)>; 3])> {
        let cfg = variant.apply(base_cfg);
        let mut model = MtmdModel::new(cfg, schema.clone(), model_seed)?;
        let data: Vec<Example> = if variant == Ablation::Downsample50 {
            let mut idx: Vec<usize> = (0..train_data.len()).collect();
            Rng::new(train_cfg.seed ^ 0x00d0_5a4e).shuffle(&mut idx);
            idx.truncate((train_data.len() / 2).max(1));
            idx.into_iter().map(|i| train_data[i].clone()).collect()
        } else {
            train_data.to_vec()
        };
        train(&mut model, &data, train_cfg, |_, _| Ok(()))?;
        let report = evaluate_mtmd(&mut model, eval_data)?;
        Ok((report.overall.0, report.per_task))
    };

    let (full_lm, full_tasks) = run(Ablation::Full)?;
    let mut out = vec![AblationOutcome {
        variant: Ablation::Full,
        overall_log_mae: full_lm,
        per_task: full_tasks,
        delta_vs_full_pct: 0.0,
    }];
    for &v in variants {
        if v == Ablation::Full {
            continue;
        }
        let (lm, tasks) = run(v)?;
        out.push(AblationOutcome {
            variant: v,
            overall_log_mae: lm,
            per_task: tasks,
            delta_vs_full_pct: improvement_pct(lm, full_lm)?,
        });
    }
    Ok(out)
}
