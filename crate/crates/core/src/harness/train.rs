use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{derive_seed, ExperimentConfig, HarnessError, Result, TaskPair, Variant};
use crate::autodiff::Tape;
use crate::nets::{ArchitectureSpec, Mode, NetworkAssembly, Task};
use crate::optim::{adam_step, gcs_update, AdamState, GcsStates};
use crate::pde::{
    boundary_squares, initial_squares, residual_squares, InitialConditionSpec, LossBreakdown, LossWeights,
    PdeProblem, TaskModel,
};
use crate::refsolve::GridField;
use crate::sampling::{next_minibatch, sample_plan, PointBatch, SampledPoints};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed { iteration: u64, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task_id: usize,
    pub aux_task_id: Option<usize>,
    pub mode: Mode,
    pub variant: Variant,
    pub seed: u64,
    pub iterations: u64,
    #[serde(flatten)]
    pub status: RunStatus,
    /// Relative L2 error of the main task on its reference grid.
    pub relative_l2: Option<f64>,
    /// Iterations in which the auxiliary gradient reached the shared parameters.
    pub aux_applied: u64,
    pub wall_time_s: f64,
    /// Main-task loss before each update.
    pub loss_history: Vec<LossBreakdown>,
}

impl RunReport {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn file_stem(&self) -> String {
        format!("task{:03}_{}_{}", self.task_id, self.mode, self.variant.name())
    }
}

/// Full gradient and loss of one task at the current parameters.
fn task_gradient(
    net: &NetworkAssembly,
    problem: &PdeProblem,
    task: Task,
    collocation: &PointBatch,
    points: &SampledPoints,
    ic: &InitialConditionSpec,
    weights: &LossWeights,
    chunk: usize,
) -> Result<(Vec<f64>, LossBreakdown)> {
    let n_total = collocation.len() as f64;
    let mut grad = vec![0.0; net.param_count()];
    let mut l_f = 0.0;
    for part in collocation.chunks(chunk) {
        let mut tape = Tape::new();
        let params = net.bind(&mut tape);
        let model = TaskModel { net, params: &params, task };
        let s = residual_squares(&mut tape, problem, &model, &part)?;
        l_f += tape.scalar(s.sum) / n_total;
        let scaled = tape.scale(s.sum, weights.w_f / n_total);
        for (g, d) in grad.iter_mut().zip(net.flat_gradient(&tape, &params, scaled)?) {
            *g += d;
        }
    }
    let mut tape = Tape::new();
    let params = net.bind(&mut tape);
    let model = TaskModel { net, params: &params, task };
    let b = boundary_squares(&mut tape, &model, &points.boundary)?;
    let i = initial_squares(&mut tape, problem, &model, &points.initial, ic)?;
    let l_b = tape.scalar(b.sum) / b.count as f64;
    let l_0 = tape.scalar(i.sum) / i.count as f64;
    let wb = tape.scale(b.sum, weights.w_b / b.count as f64);
    let w0 = tape.scale(i.sum, weights.w_0 / i.count as f64);
    let rest = tape.add(wb, w0);
    for (g, d) in grad.iter_mut().zip(net.flat_gradient(&tape, &params, rest)?) {
        *g += d;
    }
    Ok((grad, LossBreakdown::from_components(l_f, l_b, l_0, 0.0, weights)))
}

/// Relative L2 error of the main head of `net` on `reference`, evaluated in chunks.
pub fn evaluate_l2(net: &NetworkAssembly, reference: &GridField, chunk: usize) -> Result<f64> {
    let coords = reference.coordinates();
    let n = reference.dims.points();
    let mut prediction = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let cols: Vec<&[f64]> = coords.iter().map(|c| &c[start..end]).collect();
        let out = net.predict(Task::Main, &cols)?;
        prediction.extend_from_slice(&out[0]);
        start = end;
    }
    super::compute_l2(&prediction, &reference.values[0])
}

/// Trains one network on `pair` and evaluates its main task.
///
/// Configuration problems are errors; a non-finite loss or gradient ends the
/// run with a failed report instead.
pub fn train_task(
    cfg: &ExperimentConfig,
    pair: TaskPair<'_>,
    mode: Mode,
    use_cosine: bool,
    seed: u64,
) -> Result<RunReport> {
    Ok(train_network(cfg, pair, mode, use_cosine, seed)?.0)
}

/// [`train_task`] that also returns the trained network.
pub fn train_network(
    cfg: &ExperimentConfig,
    pair: TaskPair<'_>,
    mode: Mode,
    use_cosine: bool,
    seed: u64,
) -> Result<(RunReport, NetworkAssembly)> {
    if mode == Mode::Single && use_cosine {
        return Err(HarnessError::Config(
            "the cosine gate needs shared parameters; single mode has none".into(),
        ));
    }
    if pair.main.id == pair.aux.id {
        return Err(HarnessError::Config(format!("task {} is paired with itself", pair.main.id)));
    }
    cfg.validate()?;
    let started = Instant::now();
    let problem = PdeProblem::new(cfg.problem);
    let arch = ArchitectureSpec::from_shape(mode, &cfg.shape());
    let mut net = NetworkAssembly::build(&arch, seed)?;
    let plan = {
        let p = cfg.sampling_plan();
        p.with_seed(derive_seed(p.seed, pair.main.id as u64))
    };
    let points = sample_plan(&problem, &plan)?;
    let weights = cfg.loss_weights;
    let chunk = cfg.collocation_chunk;

    let mut report = RunReport {
        task_id: pair.main.id,
        aux_task_id: mode.is_auxiliary().then_some(pair.aux.id),
        mode,
        variant: Variant::of(mode, use_cosine),
        seed,
        iterations: cfg.iterations,
        status: RunStatus::Completed,
        relative_l2: None,
        aux_applied: 0,
        wall_time_s: 0.0,
        loss_history: Vec::with_capacity(cfg.iterations as usize),
    };
    let fail = |report: &mut RunReport, iteration: u64, message: String| {
        report.status = RunStatus::Failed { iteration, message };
    };

    let mut single_state = AdamState::new(net.param_count());
    let mut gcs_states = GcsStates::new(&net.partition);
    for it in 0..cfg.iterations {
        let collocation = next_minibatch(&points.collocation, &plan, it);
        let lr = cfg.lr_schedule.lr(it);
        let (g_main, loss) =
            task_gradient(&net, &problem, Task::Main, &collocation, &points, &pair.main.ic, &weights, chunk)?;
        if !loss.is_finite() {
            fail(&mut report, it, format!("non-finite loss {:?}", loss));
            break;
        }
        report.loss_history.push(loss);
        let step = if mode == Mode::Single {
            adam_step(&mut single_state, &mut net.parameters, &g_main, lr)
        } else {
            let (g_aux, aux_loss) =
                task_gradient(&net, &problem, Task::Aux, &collocation, &points, &pair.aux.ic, &weights, chunk)?;
            if !aux_loss.is_finite() {
                fail(&mut report, it, format!("non-finite auxiliary loss {:?}", aux_loss));
                break;
            }
            gcs_update(&mut net, &g_main, &g_aux, &mut gcs_states, lr, use_cosine).map(|d| {
                if d.aux_applied {
                    report.aux_applied += 1;
                }
            })
        };
        if let Err(e) = step {
            fail(&mut report, it, e.to_string());
            break;
        }
    }

    if report.is_completed() {
        match evaluate_l2(&net, &pair.main.reference, cfg.eval_chunk()) {
            Ok(l2) if l2.is_finite() => report.relative_l2 = Some(l2),
            Ok(l2) => fail(&mut report, cfg.iterations, format!("non-finite relative L2 {l2}")),
            Err(e) => return Err(e),
        }
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((report, net))
}
