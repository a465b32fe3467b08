//! Experiment orchestration: configuration, task generation and pairing,
//! training runs, metrics and report files.

mod metrics;
mod report;
mod train;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::{Mode, NetError, NetShape};
use crate::optim::{LrSchedule, OptimError};
use crate::pde::{InitialConditionSpec, LossWeights, PdeError, PdeProblem, ProblemKind};
use crate::refsolve::{read_grid, solve, write_grid, GridField, RefError, SolverConfig};
use crate::sampling::{SamplingError, SamplingPlan};

pub use metrics::{
    aggregate, compute_boost, compute_l2, smooth_losses, AggregateRow, AggregateTable, TaskScore,
};
pub use report::{compare, read_reports, write_aggregate_csv, write_loss_csv, write_report, SweepOutcome};
pub use train::{evaluate_l2, train_network, train_task, RunReport, RunStatus};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("reports without a single-task baseline for tasks {0:?}")]
    MissingBaseline(Vec<usize>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Reference(#[from] RefError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Shared-parameter update rule of an auxiliary run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Single-task network.
    Baseline,
    /// Shared parameters always receive both task gradients.
    Org,
    /// Auxiliary gradient gated by cosine similarity.
    Cos,
}

impl Variant {
    pub fn of(mode: Mode, use_cosine: bool) -> Self {
        match (mode, use_cosine) {
            (Mode::Single, _) => Variant::Baseline,
            (_, false) => Variant::Org,
            (_, true) => Variant::Cos,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Org => "org",
            Variant::Cos => "cos",
        }
    }

    pub fn uses_cosine(self) -> bool {
        self == Variant::Cos
    }
}

/// Network sizes used for each problem family.
pub fn default_shape(kind: ProblemKind) -> NetShape {
    let p = PdeProblem::new(kind);
    let (single, expert, tower) = match kind {
        ProblemKind::DiffReact => ((4, 100), (3, 100), (2, 100)),
        ProblemKind::Burgers => ((5, 50), (4, 50), (2, 50)),
        ProblemKind::ShallowWater => ((6, 100), (5, 100), (2, 100)),
    };
    NetShape {
        input_dim: p.input_dim(),
        output_dim: p.field_count(),
        single,
        expert,
        tower,
    }
}

fn default_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

fn default_variants() -> Vec<bool> {
    vec![false, true]
}

fn default_task_count() -> usize {
    100
}

fn default_iterations() -> u64 {
    30_000
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("atl-runs")
}

fn default_chunk() -> usize {
    2_500
}

fn default_concurrency() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    /// Shared-update variants run for each auxiliary mode.
    #[serde(default = "default_variants")]
    pub use_cosine: Vec<bool>,
    #[serde(default = "default_task_count")]
    pub task_count: usize,
    #[serde(default)]
    pub pairing_seed: u64,
    /// Seed of the initial-condition draws; also feeds network initialisation.
    #[serde(default)]
    pub task_seed: u64,
    #[serde(default)]
    pub sampling: Option<SamplingPlan>,
    #[serde(default)]
    pub architecture: Option<NetShape>,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Reference solver resolution; desk scale when absent.
    #[serde(default)]
    pub reference: Option<SolverConfig>,
    /// Directory written by `generate`; references are solved on the fly when absent.
    #[serde(default)]
    pub reference_dir: Option<PathBuf>,
    /// Collocation points per gradient tape.
    #[serde(default = "default_chunk")]
    pub collocation_chunk: usize,
    /// Grid points per evaluation pass; mini-batch size or collocation chunk when absent.
    #[serde(default)]
    pub eval_chunk: Option<usize>,
    /// Runs trained at the same time.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl ExperimentConfig {
    pub fn new(problem: ProblemKind) -> Self {
        Self {
            problem,
            modes: default_modes(),
            use_cosine: default_variants(),
            task_count: default_task_count(),
            pairing_seed: 0,
            task_seed: 0,
            sampling: None,
            architecture: None,
            iterations: default_iterations(),
            lr_schedule: LrSchedule::default(),
            loss_weights: LossWeights::default(),
            output_dir: default_output_dir(),
            reference: None,
            reference_dir: None,
            collocation_chunk: default_chunk(),
            eval_chunk: None,
            concurrency: default_concurrency(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sampling_plan(&self) -> SamplingPlan {
        self.sampling.unwrap_or_else(|| SamplingPlan::defaults(self.problem))
    }

    pub fn shape(&self) -> NetShape {
        self.architecture.unwrap_or_else(|| default_shape(self.problem))
    }

    pub fn solver_config(&self) -> SolverConfig {
        self.reference.unwrap_or_else(|| SolverConfig::desk(self.problem))
    }

    pub fn eval_chunk(&self) -> usize {
        self.eval_chunk
            .or(self.sampling_plan().minibatch)
            .unwrap_or(self.collocation_chunk)
            .max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.modes.is_empty() {
            return fail("modes is empty".into());
        }
        if self.modes.iter().any(|m| m.is_auxiliary()) && self.use_cosine.is_empty() {
            return fail("use_cosine lists no variant".into());
        }
        if self.task_count < 2 {
            return fail("task_count must be at least 2 so every task has a distinct auxiliary".into());
        }
        if self.collocation_chunk == 0 || self.concurrency == 0 {
            return fail("collocation_chunk and concurrency must be positive".into());
        }
        if !(self.lr_schedule.base_lr > 0.0) || self.lr_schedule.halve_every == 0 {
            return fail("lr_schedule needs base_lr > 0 and halve_every > 0".into());
        }
        self.loss_weights.validate()?;
        self.sampling_plan().validate()?;
        let shape = self.shape();
        let p = PdeProblem::new(self.problem);
        if shape.input_dim != p.input_dim() || shape.output_dim != p.field_count() {
            return fail(format!(
                "architecture is {}->{} but {} needs {}->{}",
                shape.input_dim,
                shape.output_dim,
                self.problem,
                p.input_dim(),
                p.field_count()
            ));
        }
        Ok(())
    }

    /// Every `(mode, variant)` combination the sweep trains per task.
    pub fn run_kinds(&self) -> Vec<(Mode, Variant)> {
        let mut kinds = Vec::new();
        for &mode in &self.modes {
            if mode.is_auxiliary() {
                for &c in &self.use_cosine {
                    kinds.push((mode, Variant::of(mode, c)));
                }
            } else {
                kinds.push((mode, Variant::Baseline));
            }
        }
        kinds.sort();
        kinds.dedup();
        kinds
    }
}

/// Deterministic 64-bit mix of a seed with an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` random initial conditions for `problem`.
pub fn generate_tasks(problem: ProblemKind, count: usize, seed: u64) -> Vec<InitialConditionSpec> {
    let p = PdeProblem::new(problem);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| InitialConditionSpec::sample(&p, &mut rng)).collect()
}

/// For each task, the index of a uniformly drawn auxiliary task other than itself.
pub fn pair_tasks(count: usize, seed: u64) -> Result<Vec<usize>> {
    if count < 2 {
        return Err(HarnessError::Config("pairing needs at least two tasks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|i| {
            let others: Vec<usize> = (0..count).filter(|&j| j != i).collect();
            *others.choose(&mut rng).expect("at least one other task")
        })
        .collect())
}

/// One task with its reference solution.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub id: usize,
    pub ic: InitialConditionSpec,
    pub reference: GridField,
}

/// Main task and its auxiliary partner.
#[derive(Clone, Copy, Debug)]
pub struct TaskPair<'a> {
    pub main: &'a TaskData,
    pub aux: &'a TaskData,
}

/// All tasks of an experiment plus the pairing.
#[derive(Clone, Debug)]
pub struct TaskSet {
    pub problem: ProblemKind,
    pub tasks: Vec<TaskData>,
    pub aux_of: Vec<usize>,
}

impl TaskSet {
    pub fn pair(&self, id: usize) -> TaskPair<'_> {
        TaskPair {
            main: &self.tasks[id],
            aux: &self.tasks[self.aux_of[id]],
        }
    }

    /// Tasks drawn and solved (or loaded) according to `cfg`.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let tasks = match &cfg.reference_dir {
            Some(dir) => {
                let manifest = Manifest::read(dir)?;
                if manifest.problem != cfg.problem {
                    return Err(HarnessError::Config(format!(
                        "reference set is {} but config asks for {}",
                        manifest.problem, cfg.problem
                    )));
                }
                if manifest.tasks.len() < cfg.task_count {
                    return Err(HarnessError::Config(format!(
                        "reference set has {} tasks, config needs {}",
                        manifest.tasks.len(),
                        cfg.task_count
                    )));
                }
                manifest.tasks[..cfg.task_count]
                    .iter()
                    .map(|entry| {
                        let reference = read_grid(&dir.join(&entry.file))?;
                        Ok(TaskData {
                            id: entry.id,
                            ic: entry.ic.clone(),
                            reference,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            None => {
                let specs = generate_tasks(cfg.problem, cfg.task_count, cfg.task_seed);
                let solver = cfg.solver_config();
                with_pool(cfg.concurrency, || {
                    specs
                        .into_par_iter()
                        .enumerate()
                        .map(|(id, ic)| {
                            let reference = solve(cfg.problem, &ic, &solver)?;
                            Ok(TaskData { id, ic, reference })
                        })
                        .collect::<Result<Vec<_>>>()
                })?
            }
        };
        Ok(Self {
            problem: cfg.problem,
            aux_of: pair_tasks(tasks.len(), cfg.pairing_seed)?,
            tasks,
        })
    }
}

pub(crate) fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub ic: InitialConditionSpec,
    pub file: String,
}

/// Index of a generated reference set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub problem: ProblemKind,
    pub seed: u64,
    pub solver: SolverConfig,
    pub tasks: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(Self::FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Solves `count` random tasks and writes one grid file per task plus a manifest.
pub fn generate_references(
    problem: ProblemKind,
    count: usize,
    seed: u64,
    solver: &SolverConfig,
    out: &Path,
    concurrency: usize,
) -> Result<Manifest> {
    std::fs::create_dir_all(out)?;
    let specs = generate_tasks(problem, count, seed);
    let tasks = with_pool(concurrency, || {
        specs
            .into_par_iter()
            .enumerate()
            .map(|(id, ic)| {
                let grid = solve(problem, &ic, solver)?;
                let file = format!("task_{id:03}.grid");
                write_grid(&grid, &out.join(&file))?;
                Ok(ManifestEntry { id, ic, file })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let manifest = Manifest {
        problem,
        seed,
        solver: *solver,
        tasks,
    };
    std::fs::write(out.join(Manifest::FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = ExperimentConfig::new(ProblemKind::DiffReact);
        assert_eq!(c.iterations, 30_000);
        assert_eq!(c.lr_schedule.base_lr, 1e-3);
        assert_eq!(c.lr_schedule.halve_every, 10_000);
        let s = c.shape();
        assert_eq!((s.single, s.expert, s.tower), ((4, 100), (3, 100), (2, 100)));
        let b = default_shape(ProblemKind::Burgers);
        assert_eq!((b.single, b.expert, b.tower), ((5, 50), (4, 50), (2, 50)));
        let w = default_shape(ProblemKind::ShallowWater);
        assert_eq!((w.single, w.expert, w.tower), ((6, 100), (5, 100), (2, 100)));
        assert_eq!((w.input_dim, w.output_dim), (3, 3));
        assert_eq!(ExperimentConfig::new(ProblemKind::ShallowWater).sampling_plan().minibatch, Some(20_000));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"problem":"burgers","learning_rate":1}"#);
        assert!(err.is_err());
        let ok: ExperimentConfig = serde_json::from_str(r#"{"problem":"burgers","task_count":3}"#).unwrap();
        assert_eq!(ok.modes.len(), 5);
        assert_eq!(ok.use_cosine, vec![false, true]);
    }

    #[test]
    fn pairing_never_self_pairs() {
        for seed in 0..20 {
            let aux = pair_tasks(7, seed).unwrap();
            assert!(aux.iter().enumerate().all(|(i, &a)| a != i && a < 7));
        }
        assert_eq!(pair_tasks(7, 3).unwrap(), pair_tasks(7, 3).unwrap());
        assert!(pair_tasks(1, 0).is_err());
    }

    #[test]
    fn run_kinds_cover_modes_and_variants() {
        let c = ExperimentConfig::new(ProblemKind::DiffReact);
        assert_eq!(c.run_kinds().len(), 9);
        let only_cos = ExperimentConfig {
            use_cosine: vec![true],
            ..c
        };
        assert_eq!(only_cos.run_kinds().len(), 5);
    }

    #[test]
    fn derived_seeds_differ() {
        let a: Vec<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 100);
    }
}
