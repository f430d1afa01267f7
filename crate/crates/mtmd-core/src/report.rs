//! Report rendering: each result comes out twice, as a human-readable table
//! and as machine-readable `key=value` lines (one record per line, full f64
//! precision, no quoting).

use std::path::Path;

use crate::error::Result;
use crate::eval::{AblationOutcome, CompareReport, EvalReport};
use crate::schema::{DomainKey, TaskId};
use crate::trainer::TrainHistory;

/// Writes record lines with a trailing newline.
pub fn write_records(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn render_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let line = |cells: &[String]| -> String {
        let mut s = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 0 {
                s.push_str(&format!("{:<w$}", cell, w = widths[i]));
            } else {
                s.push_str(&format!("{:>w$}", cell, w = widths[i]));
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(headers);
    out.push_str(&line(
        &widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>(),
    ));
    for row in rows {
        debug_assert_eq!(row.len(), cols);
        out.push_str(&line(row));
    }
    out
}

fn task_headers(first: &str) -> Vec<String> {
    let mut h = vec![first.to_string()];
    h.extend(TaskId::ALL.iter().map(|t| t.name().to_uppercase()));
    h
}

pub fn eval_records(r: &EvalReport) -> Vec<String> {
    let mut out = Vec::new();
    for c in &r.cells {
        let key = format!("eval.{}.{}", c.domain.name(), c.task.name());
        out.push(format!("{key}.log_mae={}", c.log_mae));
        out.push(format!("{key}.count={}", c.count));
    }
    for task in TaskId::ALL {
        if let Some((lm, n)) = r.per_task[task.index()] {
            out.push(format!("eval.task.{}.log_mae={lm}", task.name()));
            out.push(format!("eval.task.{}.count={n}", task.name()));
        }
    }
    out.push(format!("eval.overall.log_mae={}", r.overall.0));
    out.push(format!("eval.overall.count={}", r.overall.1));
    out
}

pub fn eval_table(r: &EvalReport) -> String {
    let mut rows = Vec::new();
    for domain in DomainKey::all() {
        let mut row = vec![domain.name()];
        for task in TaskId::ALL {
            row.push(match r.cell(domain, task) {
                Some(c) => format!("{:.6}", c.log_mae),
                None => "n/a".into(),
            });
        }
        rows.push(row);
    }
    let mut agg = vec!["(all domains)".to_string()];
    for task in TaskId::ALL {
        agg.push(match r.per_task[task.index()] {
            Some((lm, _)) => format!("{lm:.6}"),
            None => "n/a".into(),
        });
    }
    rows.push(agg);
    let mut out = render_table(&task_headers("log_mae"), &rows);
    out.push_str(&format!(
        "overall: {:.6} over {} (domain, task) predictions\n",
        r.overall.0, r.overall.1
    ));
    out
}

pub fn compare_records(r: &CompareReport) -> Vec<String> {
    let mut out = Vec::new();
    for c in &r.cells {
        let key = format!("compare.{}.{}", c.domain.name(), c.task.name());
        out.push(format!("{key}.unified={}", c.unified));
        out.push(format!("{key}.baseline={}", c.baseline));
        out.push(format!("{key}.improvement_pct={}", c.improvement_pct));
    }
    out.push(format!("compare.wins={}", r.wins()));
    out.push(format!("compare.cells={}", r.cells.len()));
    out.push(format!("params.unified.dense={}", r.unified_params.0));
    out.push(format!("params.unified.embedding={}", r.unified_params.1));
    out.push(format!("params.baselines.dense={}", r.baseline_params.0));
    out.push(format!("params.baselines.embedding={}", r.baseline_params.1));
    out
}

pub fn compare_table(r: &CompareReport) -> String {
    let cell_of = |d: DomainKey, t: TaskId| {
        r.cells.iter().find(|c| c.domain == d && c.task == t)
    };
    let mut rows = Vec::new();
    for domain in DomainKey::all() {
        let mut row = vec![domain.name()];
        for task in TaskId::ALL {
            row.push(match cell_of(domain, task) {
                Some(c) => format!("{:+.2}%", c.improvement_pct),
                None => "n/a".into(),
            });
        }
        rows.push(row);
    }
    let mut out = render_table(&task_headers("improvement"), &rows);
    out.push_str(&format!(
        "unified model beats its baseline in {} of {} cells\n",
        r.wins(),
        r.cells.len()
    ));
    out.push_str(&format!(
        "params: unified {} dense + {} embedding, baselines {} dense + {} embedding\n",
        r.unified_params.0, r.unified_params.1, r.baseline_params.0, r.baseline_params.1
    ));
    out
}

pub fn ablation_records(outcomes: &[AblationOutcome]) -> Vec<String> {
    let mut out = Vec::new();
    for o in outcomes {
        let key = format!("ablation.{}", o.variant.name());
        out.push(format!("{key}.log_mae={}", o.overall_log_mae));
        out.push(format!("{key}.delta_pct={}", o.delta_vs_full_pct));
    }
    out
}

pub fn ablation_table(outcomes: &[AblationOutcome]) -> String {
    let headers: Vec<String> =
        ["variant", "log_mae", "delta_vs_full"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            vec![
                o.variant.name(),
                format!("{:.6}", o.overall_log_mae),
                format!("{:+.2}%", o.delta_vs_full_pct),
            ]
        })
        .collect();
    render_table(&headers, &rows)
}

pub fn train_records(h: &TrainHistory) -> Vec<String> {
    let mut out = vec![format!("train.steps={}", h.steps.len())];
    if let (Some(first), Some(last)) = (h.steps.first(), h.steps.last()) {
        out.push(format!("train.initial_loss={}", first.total));
        out.push(format!("train.final_loss={}", last.total));
    }
    out
}

pub fn train_summary(h: &TrainHistory) -> String {
    match (h.steps.first(), h.steps.last()) {
        (Some(first), Some(last)) => format!(
            "trained {} steps, loss {:.6} -> {:.6}\n",
            h.steps.len(),
            first.total,
            last.total
        ),
        _ => "trained 0 steps\n".into(),
    }
}
