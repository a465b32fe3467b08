use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{
    aggregate, derive_seed, smooth_losses, train_task, with_pool, AggregateTable, ExperimentConfig, Result,
    RunReport, TaskSet,
};

/// Appends one JSON line per report.
pub fn write_report(report: &RunReport, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut out, report)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// All reports in `*.jsonl` files directly under `dir`, in file-name order.
pub fn read_reports(dir: &Path) -> Result<Vec<(PathBuf, RunReport)>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut reports = Vec::new();
    for path in files {
        for line in fs::read_to_string(&path)?.lines().filter(|l| !l.trim().is_empty()) {
            reports.push((path.clone(), serde_json::from_str(line)?));
        }
    }
    Ok(reports)
}

pub fn write_aggregate_csv(table: &AggregateTable, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "mode,variant,mean_l2,mean_boost_pct,wins,tasks")?;
    for r in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.mode,
            r.variant.name(),
            r.mean_l2,
            r.mean_boost_pct,
            r.wins,
            r.tasks
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Loss history as CSV, optionally Gaussian-smoothed per column.
pub fn write_loss_csv(report: &RunReport, path: &Path, sigma: Option<f64>) -> Result<()> {
    let h = &report.loss_history;
    let column = |f: fn(&crate::pde::LossBreakdown) -> f64| {
        let raw: Vec<f64> = h.iter().map(f).collect();
        match sigma {
            Some(s) => smooth_losses(&raw, s),
            None => raw,
        }
    };
    let cols = [
        column(|b| b.l_f),
        column(|b| b.l_b),
        column(|b| b.l_0),
        column(|b| b.total),
    ];
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "iteration,L_f,L_b,L_0,total")?;
    for i in 0..h.len() {
        writeln!(out, "{},{},{},{},{}", i, cols[0][i], cols[1][i], cols[2][i], cols[3][i])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub reports: Vec<RunReport>,
    pub table: AggregateTable,
    pub aggregate_csv: PathBuf,
}

impl SweepOutcome {
    pub fn failed_runs(&self) -> usize {
        self.table.failed_runs
    }
}

/// Trains every configured mode and variant on every task, writes one
/// report per run under `output_dir/runs`, and the aggregate table.
pub fn compare(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let tasks = TaskSet::build(cfg)?;
    let runs: Vec<_> = (0..tasks.tasks.len())
        .flat_map(|t| cfg.run_kinds().into_iter().map(move |(m, v)| (t, m, v)))
        .collect();
    let mut reports = with_pool(cfg.concurrency, || {
        runs.par_iter()
            .map(|&(t, mode, variant)| {
                let seed = derive_seed(cfg.task_seed, t as u64);
                train_task(cfg, tasks.pair(t), mode, variant.uses_cosine(), seed)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    reports.sort_by(|a, b| (a.task_id, a.mode, a.variant).cmp(&(b.task_id, b.mode, b.variant)));

    let run_dir = cfg.output_dir.join("runs");
    fs::create_dir_all(&run_dir)?;
    for r in &reports {
        write_report(r, &run_dir.join(format!("{}.jsonl", r.file_stem())))?;
    }
    let table = aggregate(&reports)?;
    let aggregate_csv = cfg.output_dir.join("aggregate.csv");
    write_aggregate_csv(&table, &aggregate_csv)?;
    fs::write(cfg.output_dir.join("aggregate.json"), serde_json::to_string_pretty(&table)?)?;
    Ok(SweepOutcome {
        reports,
        table,
        aggregate_csv,
    })
}
