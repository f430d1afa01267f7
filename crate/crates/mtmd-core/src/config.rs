//! Run configuration: an INI-style text format covering the model, the
//! trainer, the per-domain baselines, and the dataset generator.
//!
//! Every key is optional and falls back to the type's default, but unknown
//! sections, unknown keys, and duplicate keys are hard errors so a typo
//! cannot silently run with defaults.

use crate::baseline::BaselineConfig;
use crate::datagen::DomainMix;
use crate::error::{Error, Result};
use crate::towers::ModelConfig;
use crate::trainer::{TaskWeights, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub examples: usize,
    /// Seed of the example stream; the teacher keeps its own.
    pub seed: u64,
    pub teacher_seed: u64,
    pub alpha: f64,
    pub mix: DomainMix,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            examples: 10_000,
            seed: 7,
            teacher_seed: 7,
            alpha: 0.6,
            mix: DomainMix::uniform(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub gen: GenConfig,
}

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

impl Entry {
    fn err(&self, what: &str) -> Error {
        Error::Config(format!("line {}: {}: {what}", self.line, self.key))
    }

    fn bool(&self) -> Result<bool> {
        match self.value.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(self.err(&format!("expected true or false, got '{v}'"))),
        }
    }

    fn usize(&self) -> Result<usize> {
        self.value.parse().map_err(|_| self.err(&format!("expected an integer, got '{}'", self.value)))
    }

    fn u64(&self) -> Result<u64> {
        self.value.parse().map_err(|_| self.err(&format!("expected an integer, got '{}'", self.value)))
    }

    fn f64(&self) -> Result<f64> {
        self.value.parse().map_err(|_| self.err(&format!("expected a number, got '{}'", self.value)))
    }

    fn usize_list(&self) -> Result<Vec<usize>> {
        self.value
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| self.err(&format!("expected integers, got '{}'", self.value))))
            .collect()
    }

    fn f64_list(&self) -> Result<Vec<f64>> {
        self.value
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| self.err(&format!("expected numbers, got '{}'", self.value))))
            .collect()
    }

    fn f64_array<const N: usize>(&self) -> Result<[f64; N]> {
        let list = self.f64_list()?;
        list.try_into().map_err(|_| self.err(&format!("expected {N} comma-separated numbers")))
    }

    fn usize_array<const N: usize>(&self) -> Result<[usize; N]> {
        let list = self.usize_list()?;
        list.try_into().map_err(|_| self.err(&format!("expected {N} comma-separated integers")))
    }
}

type Section = (String, Vec<Entry>);

/// Sections in file order. Keys before any `[section]` header are rejected,
/// as are duplicate keys within a section.
fn parse_ini(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {line_no}: unterminated section header")))?
                .trim();
            sections.push((name.to_string(), Vec::new()));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected 'key = value'")))?;
        let entry =
            Entry { key: key.trim().to_string(), value: value.trim().to_string(), line: line_no };
        let Some((_, entries)) = sections.last_mut() else {
            return Err(Error::Config(format!(
                "line {line_no}: key '{}' appears before any [section]",
                entry.key
            )));
        };
        if entries.iter().any(|e| e.key == entry.key) {
            return Err(Error::Config(format!("line {line_no}: duplicate key '{}'", entry.key)));
        }
        entries.push(entry);
    }
    Ok(sections)
}

fn unknown_key(section: &str, e: &Entry) -> Error {
    Error::Config(format!("line {}: unknown key '{}' in [{section}]", e.line, e.key))
}

fn apply_model(cfg: &mut ModelConfig, entries: &[Entry]) -> Result<()> {
    for e in entries {
        match e.key.as_str() {
            "constrained" => cfg.constrained = e.bool()?,
            "emb_dims" => cfg.emb_dims = e.usize_array()?,
            "domain_adapt" => cfg.domain_adapt = e.bool()?,
            "dcn" => cfg.dcn = e.bool()?,
            "pre_norm" => cfg.pre_norm = e.bool()?,
            "deep_dims" => cfg.deep_dims = e.usize_list()?,
            "shallow_dims" => cfg.shallow_dims = e.usize_list()?,
            "gate_hidden" => cfg.gate_hidden = e.usize_list()?,
            "dcn_rank" => cfg.dcn_rank = e.usize()?,
            "dcn_depth" => cfg.dcn_depth = e.usize()?,
            _ => return Err(unknown_key("model", e)),
        }
    }
    Ok(())
}

fn apply_train(cfg: &mut TrainConfig, entries: &[Entry]) -> Result<()> {
    for e in entries {
        match e.key.as_str() {
            "lr" => cfg.lr = e.f64()?,
            "batch_size" => cfg.batch_size = e.usize()?,
            "steps" => cfg.steps = e.usize()?,
            "seed" => cfg.seed = e.u64()?,
            "weights" => cfg.weights = TaskWeights(e.f64_array()?),
            "checkpoint_every" => cfg.checkpoint_every = e.usize()?,
            _ => return Err(unknown_key("train", e)),
        }
    }
    Ok(())
}

fn apply_baseline(cfg: &mut BaselineConfig, entries: &[Entry]) -> Result<()> {
    for e in entries {
        match e.key.as_str() {
            "deep_dims" => cfg.deep_dims = e.usize_list()?,
            "emb_dim" => cfg.emb_dim = e.usize()?,
            _ => return Err(unknown_key("baseline", e)),
        }
    }
    Ok(())
}

fn apply_gen(cfg: &mut GenConfig, entries: &[Entry]) -> Result<()> {
    for e in entries {
        match e.key.as_str() {
            "examples" => cfg.examples = e.usize()?,
            "seed" => cfg.seed = e.u64()?,
            "teacher_seed" => cfg.teacher_seed = e.u64()?,
            "alpha" => cfg.alpha = e.f64()?,
            "mix" => {
                cfg.mix = if e.value == "uniform" {
                    DomainMix::uniform()
                } else {
                    DomainMix(e.f64_array()?)
                };
                cfg.mix.validate()?;
            }
            _ => return Err(unknown_key("gen", e)),
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (name, entries) in parse_ini(text)? {
            match name.as_str() {
                "model" => apply_model(&mut cfg.model, &entries)?,
                "train" => apply_train(&mut cfg.train, &entries)?,
                "baseline" => apply_baseline(&mut cfg.baseline, &entries)?,
                "gen" => apply_gen(&mut cfg.gen, &entries)?,
                other => return Err(Error::Config(format!("unknown section '[{other}]'"))),
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_text(&text)
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// The `[model]` section as text; parses back via `model_from_text`.
pub fn model_to_text(cfg: &ModelConfig) -> String {
    format!(
        "[model]\n\
         constrained = {}\n\
         emb_dims = {}\n\
         domain_adapt = {}\n\
         dcn = {}\n\
         pre_norm = {}\n\
         deep_dims = {}\n\
         shallow_dims = {}\n\
         gate_hidden = {}\n\
         dcn_rank = {}\n\
         dcn_depth = {}\n",
        cfg.constrained,
        join(&cfg.emb_dims),
        cfg.domain_adapt,
        cfg.dcn,
        cfg.pre_norm,
        join(&cfg.deep_dims),
        join(&cfg.shallow_dims),
        join(&cfg.gate_hidden),
        cfg.dcn_rank,
        cfg.dcn_depth,
    )
}

pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for (name, entries) in parse_ini(text)? {
        if name != "model" {
            return Err(Error::Config(format!("expected only a [model] section, found [{name}]")));
        }
        apply_model(&mut cfg, &entries)?;
    }
    Ok(cfg)
}

/// The `[baseline]` section as text; parses back via `baseline_from_text`.
pub fn baseline_to_text(cfg: &BaselineConfig) -> String {
    format!("[baseline]\ndeep_dims = {}\nemb_dim = {}\n", join(&cfg.deep_dims), cfg.emb_dim)
}

pub fn baseline_from_text(text: &str) -> Result<BaselineConfig> {
    let mut cfg = BaselineConfig::default();
    for (name, entries) in parse_ini(text)? {
        if name != "baseline" {
            return Err(Error::Config(format!(
                "expected only a [baseline] section, found [{name}]"
            )));
        }
        apply_baseline(&mut cfg, &entries)?;
    }
    Ok(cfg)
}
