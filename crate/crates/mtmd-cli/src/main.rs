//! `mtmd`: one binary covering the whole pipeline, from synthetic data to
//! serving artifacts. Tables go to stdout; machine-readable `key=value`
//! records land as files under the output directory.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use mtmd_core::baseline::{train_baselines, BaselineModel, BaselineSet};
use mtmd_core::config::RunConfig;
use mtmd_core::data::{read_dataset, write_dataset, Example};
use mtmd_core::datagen::generate_dataset;
use mtmd_core::error::{Error, Result};
use mtmd_core::eval::{
    compare_reports, evaluate_baselines, evaluate_mtmd, run_ablation, Ablation, ABLATION_SET,
};
use mtmd_core::export::{
    load_baseline, load_model, rank_top_k, save_baseline, save_model, EmbeddingStore,
};
use mtmd_core::report;
use mtmd_core::schema::{make_default_schema, DomainKey, FeatureSchema, TaskId, Tower};
use mtmd_core::teacher::TeacherOracle;
use mtmd_core::towers::MtmdModel;
use mtmd_core::trainer::train;

#[derive(Parser)]
#[command(name = "mtmd", version, about = "two-tower multi-task ad ranker at desk scale")]
struct Cli {
    /// Run configuration file (INI sections: model, train, baseline, gen)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the generation and training seeds from the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for artifacts and record files
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes a synthetic teacher-scored dataset
    Gen {
        /// Number of examples (overrides the config)
        #[arg(short = 'n', long)]
        examples: Option<usize>,
        /// Target file; defaults to <out>/dataset.tsv
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Trains the unified model and writes <out>/model.ckpt
    Train {
        /// Training dataset; defaults to <out>/dataset.tsv
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Trains one baseline per (surface, product) slice under the same budget
    TrainBaselines {
        /// Training dataset; defaults to <out>/dataset.tsv
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Scores a checkpoint on a dataset, per domain and task
    Eval {
        /// Evaluation dataset; defaults to <out>/dataset.tsv
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model checkpoint; defaults to <out>/model.ckpt
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Unified model against the per-domain baselines, cell by cell
    Compare {
        /// Evaluation dataset; defaults to <out>/dataset.tsv
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model checkpoint; defaults to <out>/model.ckpt
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory with baseline_<domain>.ckpt files; defaults to <out>
        #[arg(long)]
        baselines: Option<PathBuf>,
    },
    /// Retrains with one factor removed at a time and reports the deltas
    Ablate {
        /// Training dataset; defaults to <out>/dataset.tsv
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Held-out dataset; defaults to the training dataset
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Comma-separated variant names; defaults to the full set
        #[arg(long)]
        variants: Option<String>,
    },
    /// Embeds a dataset on one tower and writes the store
    ExportEmb {
        /// Dataset to embed; defaults to <out>/dataset.tsv
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model checkpoint; defaults to <out>/model.ckpt
        #[arg(long)]
        model: Option<PathBuf>,
        /// Which tower to export
        #[arg(long, default_value = "item", value_parser = parse_tower)]
        tower: Tower,
        /// Target file; defaults to <out>/<tower>.emb
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Top-k rows of an item store for one query, by task probability
    Rank {
        /// Task to rank by: ctr, gctr or octr
        #[arg(long, value_parser = parse_task)]
        task: TaskId,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        /// Dataset holding the query row; defaults to <out>/dataset.tsv
        #[arg(long)]
        data: Option<PathBuf>,
        /// Id of the query row; defaults to the dataset's first row
        #[arg(long)]
        query_id: Option<u64>,
        /// Item store; defaults to <out>/item.emb
        #[arg(long)]
        store: Option<PathBuf>,
        /// Model checkpoint; defaults to <out>/model.ckpt
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn parse_task(s: &str) -> std::result::Result<TaskId, String> {
    TaskId::parse(&s.to_lowercase()).map_err(|e| e.to_string())
}

fn parse_tower(s: &str) -> std::result::Result<Tower, String> {
    match s {
        "query" => Ok(Tower::Query),
        "item" => Ok(Tower::Item),
        other => Err(format!("unknown tower {other}, expected query or item")),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn or_out(given: Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    given.unwrap_or_else(|| out.join(name))
}

fn load_data(path: &Path, schema: &FeatureSchema) -> Result<Vec<Example>> {
    let data = read_dataset(path, schema)?;
    if data.is_empty() {
        return Err(Error::Data(format!("{} holds no examples", path.display())));
    }
    Ok(data)
}

fn baseline_file(dir: &Path, domain: DomainKey) -> PathBuf {
    dir.join(format!("baseline_{}.ckpt", domain.name()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.gen.seed = seed;
        cfg.train.seed = seed;
    }
    std::fs::create_dir_all(&cli.out)?;
    let schema = make_default_schema();
    let out = cli.out.as_path();

    match cli.cmd {
        Cmd::Gen { examples, data } => {
            let n = examples.unwrap_or(cfg.gen.examples);
            let oracle = TeacherOracle::new(cfg.gen.teacher_seed, cfg.gen.alpha, &schema);
            let rows = generate_dataset(cfg.gen.seed, n, &cfg.gen.mix, &schema, &oracle)?;
            let path = or_out(data, out, "dataset.tsv");
            write_dataset(&path, &schema, &rows)?;
            println!("wrote {} examples to {}", rows.len(), path.display());
        }

        Cmd::Train { data } => {
            let rows = load_data(&or_out(data, out, "dataset.tsv"), &schema)?;
            let mut model = MtmdModel::new(cfg.model.clone(), schema.clone(), cfg.train.seed)?;
            let ckpt = out.join("model.ckpt");
            let history = train(&mut model, &rows, &cfg.train, |step, m| {
                save_model(m, &ckpt)?;
                println!("checkpoint at step {step}");
                Ok(())
            })?;
            save_model(&model, &ckpt)?;
            print!("{}", report::train_summary(&history));
            report::write_records(&out.join("train.records"), &report::train_records(&history))?;
            println!("checkpoint: {}", ckpt.display());
        }

        Cmd::TrainBaselines { data } => {
            let rows = load_data(&or_out(data, out, "dataset.tsv"), &schema)?;
            let set = train_baselines(&cfg.baseline, &schema, &rows, &cfg.train, cfg.train.seed)?;
            let mut lines = vec![format!("baselines.steps_per_model={}", set.steps_per_model)];
            for domain in DomainKey::all() {
                match set.model(domain) {
                    Some(model) => {
                        let path = baseline_file(out, domain);
                        save_baseline(model, &path)?;
                        println!("wrote {}", path.display());
                        if let Some(h) = &set.histories[domain.index()] {
                            if let Some(loss) = h.final_loss() {
                                lines.push(format!(
                                    "baselines.{}.final_loss={loss}",
                                    domain.name()
                                ));
                            }
                        }
                    }
                    None => println!("skipped {}: not enough training rows", domain.name()),
                }
            }
            report::write_records(&out.join("train_baselines.records"), &lines)?;
        }

        Cmd::Eval { data, model } => {
            let rows = load_data(&or_out(data, out, "dataset.tsv"), &schema)?;
            let mut model = load_model(&or_out(model, out, "model.ckpt"), &schema)?;
            let rep = evaluate_mtmd(&mut model, &rows)?;
            print!("{}", report::eval_table(&rep));
            report::write_records(&out.join("eval.records"), &report::eval_records(&rep))?;
        }

        Cmd::Compare { data, model, baselines } => {
            let rows = load_data(&or_out(data, out, "dataset.tsv"), &schema)?;
            let mut model = load_model(&or_out(model, out, "model.ckpt"), &schema)?;
            let dir = baselines.unwrap_or_else(|| out.to_path_buf());
            let mut models: Vec<Option<BaselineModel>> = Vec::new();
            let mut skipped = Vec::new();
            for domain in DomainKey::all() {
                let path = baseline_file(&dir, domain);
                if path.exists() {
                    models.push(Some(load_baseline(&path, &schema)?));
                } else {
                    models.push(None);
                    skipped.push(domain);
                }
            }
            if models.iter().all(Option::is_none) {
                return Err(Error::Data(format!(
                    "no baseline checkpoints under {}",
                    dir.display()
                )));
            }
            let histories = models.iter().map(|_| None).collect();
            let mut set = BaselineSet { models, skipped, histories, steps_per_model: 0 };
            let unified = evaluate_mtmd(&mut model, &rows)?;
            let baseline = evaluate_baselines(&mut set, &rows)?;
            let rep = compare_reports(
                &unified,
                &baseline,
                model.param_counts(),
                set.param_counts(),
            )?;
            print!("{}", report::compare_table(&rep));
            report::write_records(&out.join("compare.records"), &report::compare_records(&rep))?;
        }

        Cmd::Ablate { train_data, eval_data, variants } => {
            let train_rows = load_data(&or_out(train_data, out, "dataset.tsv"), &schema)?;
            let eval_rows = match eval_data {
                Some(path) => load_data(&path, &schema)?,
                None => train_rows.clone(),
            };
            let variants: Vec<Ablation> = match variants {
                Some(list) => list
                    .split(',')
                    .map(|t| Ablation::parse(t.trim()))
                    .collect::<Result<_>>()?,
                None => ABLATION_SET.to_vec(),
            };
            let outcomes = run_ablation(
                &cfg.model,
                &schema,
                &train_rows,
                &eval_rows,
                &cfg.train,
                cfg.train.seed,
                &variants,
            )?;
            print!("{}", report::ablation_table(&outcomes));
            report::write_records(&out.join("ablation.records"), &report::ablation_records(&outcomes))?;
        }

        Cmd::ExportEmb { data, model, tower, store } => {
            let rows = load_data(&or_out(data, out, "dataset.tsv"), &schema)?;
            let mut model = load_model(&or_out(model, out, "model.ckpt"), &schema)?;
            let built = EmbeddingStore::build(&mut model, &rows, tower)?;
            let path = or_out(store, out, &format!("{}.emb", tower.name()));
            built.write_to(&path)?;
            println!("wrote {} rows to {}", built.rows.len(), path.display());
        }

        Cmd::Rank { task, k, data, query_id, store, model } => {
            let rows = load_data(&or_out(data, out, "dataset.tsv"), &schema)?;
            let query = match query_id {
                Some(id) => rows
                    .iter()
                    .find(|e| e.id == id)
                    .ok_or_else(|| Error::Data(format!("no example with id {id}")))?,
                None => &rows[0],
            };
            let store = EmbeddingStore::read_from(&or_out(store, out, "item.emb"))?;
            let mut model = load_model(&or_out(model, out, "model.ckpt"), &schema)?;
            let ranked = rank_top_k(&mut model, query, &store, task, k)?;
            println!("query {} ({}), task {}", query.id, query.domain.name(), task.name());
            println!("{:>4}  {:>20}  {:>12}", "rank", "item_id", "prob");
            let mut lines = Vec::new();
            for (i, (id, p)) in ranked.iter().enumerate() {
                println!("{:>4}  {:>20}  {:>12.6}", i + 1, id, p);
                lines.push(format!("rank.{}.id={id}", i + 1));
                lines.push(format!("rank.{}.prob={p}", i + 1));
            }
            report::write_records(&out.join("rank.records"), &lines)?;
        }
    }
    Ok(())
}
