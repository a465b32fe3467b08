use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use atl_pinn::harness::{
    aggregate, compare, derive_seed, generate_references, read_reports, train_network, write_aggregate_csv,
    write_loss_csv, write_report, ExperimentConfig, HarnessError, TaskSet,
};
use atl_pinn::nets::Mode;
use atl_pinn::pde::ProblemKind;
use atl_pinn::refsolve::SolverConfig;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "atlpinn", version, about = "Auxiliary-task PINN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve random tasks with the reference solvers and write grid files.
    Generate {
        #[arg(long)]
        problem: ProblemKind,
        #[arg(long)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Spatial nodes along x (and y for shallow water).
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        nt: Option<usize>,
        #[arg(long, default_value_t = 1)]
        concurrency: usize,
    },
    /// Train one network and write its run report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "single")]
        mode: Mode,
        #[arg(long)]
        cosine: bool,
        #[arg(long, default_value_t = 0)]
        task_id: usize,
        /// Also save the trained parameters.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every mode and variant on every task and write the aggregate table.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Turn run reports into loss-history CSV files.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        smooth_sigma: Option<f64>,
    },
}

enum Outcome {
    Ok,
    RunFailures(usize),
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<HarnessError>(),
            Some(HarnessError::Config(_))
        )
    })
}

fn generate(
    problem: ProblemKind,
    tasks: usize,
    seed: u64,
    out: &Path,
    nx: Option<usize>,
    nt: Option<usize>,
    concurrency: usize,
) -> anyhow::Result<Outcome> {
    let mut solver = SolverConfig::desk(problem);
    if let Some(nx) = nx {
        solver.nx = nx;
        if problem == ProblemKind::ShallowWater {
            solver.ny = nx;
        }
    }
    if let Some(nt) = nt {
        solver.nt = nt;
    }
    let manifest = generate_references(problem, tasks, seed, &solver, out, concurrency)?;
    eprintln!("wrote {} reference grids to {}", manifest.tasks.len(), out.display());
    Ok(Outcome::Ok)
}

fn train(
    config: &Path,
    mode: Mode,
    cosine: bool,
    task_id: usize,
    checkpoint: Option<&Path>,
) -> anyhow::Result<Outcome> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if task_id >= cfg.task_count {
        return Err(HarnessError::Config(format!("task {task_id} out of range (task_count {})", cfg.task_count)).into());
    }
    let tasks = TaskSet::build(&cfg)?;
    let seed = derive_seed(cfg.task_seed, task_id as u64);
    let (report, net) = train_network(&cfg, tasks.pair(task_id), mode, cosine, seed)?;
    let dir = cfg.output_dir.join("runs");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.jsonl", report.file_stem()));
    write_report(&report, &path)?;
    if let Some(cp) = checkpoint {
        net.save_checkpoint(cp)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    eprintln!("wrote {}", path.display());
    Ok(if report.is_completed() {
        Outcome::Ok
    } else {
        Outcome::RunFailures(1)
    })
}

fn run_compare(config: &Path) -> anyhow::Result<Outcome> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let outcome = compare(&cfg)?;
    for row in &outcome.table.rows {
        eprintln!(
            "{:>6} {:>8}  mean L2 {:.4e}  boost {:>8.2}%  wins {}/{}",
            row.mode.name(),
            row.variant.name(),
            row.mean_l2,
            row.mean_boost_pct,
            row.wins,
            row.tasks
        );
    }
    eprintln!("wrote {}", outcome.aggregate_csv.display());
    Ok(match outcome.failed_runs() {
        0 => Outcome::Ok,
        n => Outcome::RunFailures(n),
    })
}

fn report(input: &Path, out: &Path, sigma: Option<f64>) -> anyhow::Result<Outcome> {
    if let Some(s) = sigma {
        if !(s > 0.0) {
            return Err(HarnessError::Config(format!("--smooth-sigma must be positive, got {s}")).into());
        }
    }
    let runs = input.join("runs");
    let source = if runs.is_dir() { runs } else { input.to_path_buf() };
    let reports = read_reports(&source)?;
    if reports.is_empty() {
        bail!("no run reports under {}", source.display());
    }
    std::fs::create_dir_all(out)?;
    for (_, r) in &reports {
        write_loss_csv(r, &out.join(format!("{}_loss.csv", r.file_stem())), sigma)?;
    }
    let all: Vec<_> = reports.into_iter().map(|(_, r)| r).collect();
    match aggregate(&all) {
        Ok(table) => write_aggregate_csv(&table, &out.join("aggregate.csv"))?,
        Err(e) => eprintln!("aggregate table skipped: {e}"),
    }
    eprintln!("wrote {} loss histories to {}", all.len(), out.display());
    let failed = all.iter().filter(|r| !r.is_completed()).count();
    Ok(if failed == 0 {
        Outcome::Ok
    } else {
        Outcome::RunFailures(failed)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate {
            problem,
            tasks,
            seed,
            out,
            nx,
            nt,
            concurrency,
        } => generate(problem, tasks, seed, &out, nx, nt, concurrency),
        Command::Train {
            config,
            mode,
            cosine,
            task_id,
            checkpoint,
        } => train(&config, mode, cosine, task_id, checkpoint.as_deref()),
        Command::Compare { config } => run_compare(&config),
        Command::Report {
            input,
            out,
            smooth_sigma,
        } => report(&input, &out, smooth_sigma),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::RunFailures(n)) => {
            eprintln!("{n} run(s) failed");
            ExitCode::from(2)
        }
        Err(e) => {
            if is_config_error(&e) {
                eprintln!("config error: {e:#}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}
