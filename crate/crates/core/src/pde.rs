//! PDE problems, residual operators and the weighted PINN loss.
//!
//! Residuals are built on a caller-owned [`Tape`] from per-point derivative
//! nodes, so they stay differentiable with respect to network parameters.

use std::f64::consts::PI;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};
use crate::nets::{BoundParams, NetError, NetworkAssembly, Task};
use crate::sampling::{BoundaryPairs, PointBatch};

#[derive(Debug, Error)]
pub enum PdeError {
    #[error("{0} batch is empty")]
    EmptyBatch(&'static str),
    #[error("initial condition {found} does not apply to {problem:?}")]
    WrongInitialCondition { problem: ProblemKind, found: &'static str },
    #[error("loss weights must be finite and nonnegative")]
    Weights,
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T, E = PdeError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProblemKind {
    #[serde(rename = "diffreact")]
    DiffReact,
    #[serde(rename = "burgers")]
    Burgers,
    #[serde(rename = "swe")]
    ShallowWater,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::DiffReact => "diffreact",
            ProblemKind::Burgers => "burgers",
            ProblemKind::ShallowWater => "swe",
        }
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "diffreact" | "diffusion-reaction" => Ok(ProblemKind::DiffReact),
            "burgers" => Ok(ProblemKind::Burgers),
            "swe" | "shallow-water" => Ok(ProblemKind::ShallowWater),
            other => Err(format!("unknown problem '{other}'")),
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    /// Diffusion coefficient.
    pub nu: f64,
    /// Reaction rate of the logistic source.
    pub rho: f64,
    /// Gravitational acceleration.
    pub gravity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeProblem {
    pub kind: ProblemKind,
    pub coefficients: Coefficients,
    /// One `(lo, hi)` interval per spatial axis.
    pub space: Vec<(f64, f64)>,
    pub time: (f64, f64),
}

impl PdeProblem {
    pub fn new(kind: ProblemKind) -> Self {
        match kind {
            ProblemKind::DiffReact => Self {
                kind,
                coefficients: Coefficients {
                    nu: 0.5,
                    rho: 1.0,
                    gravity: 0.0,
                },
                space: vec![(0.0, 1.0)],
                time: (0.0, 1.0),
            },
            ProblemKind::Burgers => Self {
                kind,
                coefficients: Coefficients {
                    nu: 0.01,
                    rho: 0.0,
                    gravity: 0.0,
                },
                space: vec![(0.0, 1.0)],
                time: (0.0, 2.0),
            },
            ProblemKind::ShallowWater => Self {
                kind,
                coefficients: Coefficients {
                    nu: 0.0,
                    rho: 0.0,
                    gravity: 1.0,
                },
                space: vec![(-2.5, 2.5), (-2.5, 2.5)],
                time: (0.0, 1.0),
            },
        }
    }

    pub fn field_count(&self) -> usize {
        match self.kind {
            ProblemKind::ShallowWater => 3,
            _ => 1,
        }
    }

    pub fn field_names(&self) -> Vec<String> {
        let names: &[&str] = match self.kind {
            ProblemKind::ShallowWater => &["h", "u", "v"],
            _ => &["u"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Network input width: spatial axes plus time.
    pub fn input_dim(&self) -> usize {
        self.space.len() + 1
    }
}

/// Initial condition of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum InitialConditionSpec {
    /// `u₀(x) = Σ A_i sin(2π n_i x / L + φ_i)` with two terms.
    SinusoidSuperposition {
        amplitudes: [f64; 2],
        wavenumbers: [u32; 2],
        phases: [f64; 2],
        length: f64,
    },
    /// Raised water column `h₀ = 2` inside radius `r`, `1` outside.
    RadialDamBreak { radius: f64 },
}

impl InitialConditionSpec {
    /// Draws a random task initial condition for `problem`.
    pub fn sample<R: Rng>(problem: &PdeProblem, rng: &mut R) -> Self {
        match problem.kind {
            ProblemKind::DiffReact | ProblemKind::Burgers => {
                let amp = Uniform::new(0.0, 1.0);
                let wave = Uniform::new_inclusive(1u32, 8);
                let phase = Uniform::new(0.0, 2.0 * PI);
                let (lo, hi) = problem.space[0];
                InitialConditionSpec::SinusoidSuperposition {
                    amplitudes: [amp.sample(rng), amp.sample(rng)],
                    wavenumbers: [wave.sample(rng), wave.sample(rng)],
                    phases: [phase.sample(rng), phase.sample(rng)],
                    length: hi - lo,
                }
            }
            ProblemKind::ShallowWater => InitialConditionSpec::RadialDamBreak {
                radius: Uniform::new_inclusive(0.3, 0.7).sample(rng),
            },
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            InitialConditionSpec::SinusoidSuperposition { .. } => "sinusoid_superposition",
            InitialConditionSpec::RadialDamBreak { .. } => "radial_dam_break",
        }
    }

    /// Initial value of every field at the given points (channels `x[, y]`).
    pub fn evaluate(&self, problem: &PdeProblem, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match (self, problem.kind) {
            (InitialConditionSpec::SinusoidSuperposition { .. }, ProblemKind::DiffReact | ProblemKind::Burgers) => {
                Ok(vec![eval_ic_sinusoid(self, &points[0])])
            }
            (InitialConditionSpec::RadialDamBreak { radius }, ProblemKind::ShallowWater) => {
                let h = points[0]
                    .iter()
                    .zip(&points[1])
                    .map(|(&x, &y)| eval_ic_dambreak(*radius, x, y))
                    .collect::<Vec<_>>();
                let zeros = vec![0.0; h.len()];
                Ok(vec![h, zeros.clone(), zeros])
            }
            _ => Err(PdeError::WrongInitialCondition {
                problem: problem.kind,
                found: self.variant_name(),
            }),
        }
    }
}

/// Sinusoid superposition at `x`. Other variants evaluate to zero.
pub fn eval_ic_sinusoid(spec: &InitialConditionSpec, x: &[f64]) -> Vec<f64> {
    match spec {
        InitialConditionSpec::SinusoidSuperposition {
            amplitudes,
            wavenumbers,
            phases,
            length,
        } => x
            .iter()
            .map(|&xv| {
                (0..2)
                    .map(|i| amplitudes[i] * (2.0 * PI * wavenumbers[i] as f64 * xv / length + phases[i]).sin())
                    .sum()
            })
            .collect(),
        InitialConditionSpec::RadialDamBreak { .. } => vec![0.0; x.len()],
    }
}

/// Water height of the radial dam break: `2` strictly inside radius `r`.
pub fn eval_ic_dambreak(r: f64, x: f64, y: f64) -> f64 {
    if (x * x + y * y).sqrt() < r {
        2.0
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_f: f64,
    pub w_b: f64,
    pub w_0: f64,
    pub w_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_f: 1.0,
            w_b: 1.0,
            w_0: 1.0,
            w_d: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_f, self.w_b, self.w_0, self.w_d];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(PdeError::Weights)
        }
    }
}

/// Component values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_f: f64,
    pub l_b: f64,
    pub l_0: f64,
    pub l_d: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(l_f: f64, l_b: f64, l_0: f64, l_d: f64, w: &LossWeights) -> Self {
        Self {
            l_f,
            l_b,
            l_0,
            l_d,
            total: w.w_f * l_f + w.w_b * l_b + w.w_0 * l_0 + w.w_d * l_d,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_f, self.l_b, self.l_0, self.l_d, self.total].iter().all(|v| v.is_finite())
    }
}

/// Supervised observations: points plus one value array per field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataBatch {
    pub points: PointBatch,
    pub values: Vec<Vec<f64>>,
}

/// Everything one task's loss needs.
#[derive(Clone, Debug)]
pub struct TaskBatches<'a> {
    pub collocation: &'a PointBatch,
    pub boundary: &'a [BoundaryPairs],
    pub initial: &'a PointBatch,
    pub data: Option<&'a DataBatch>,
}

/// A differentiable map from coordinate columns to field columns.
pub trait FieldModel {
    fn fields(&self, tape: &mut Tape, coords: &[Var]) -> Result<Vec<Var>>;
}

/// One task head of a network assembly, bound to a tape.
pub struct TaskModel<'a> {
    pub net: &'a NetworkAssembly,
    pub params: &'a BoundParams,
    pub task: Task,
}

impl FieldModel for TaskModel<'_> {
    fn fields(&self, tape: &mut Tape, coords: &[Var]) -> Result<Vec<Var>> {
        Ok(self.net.forward(tape, self.params, self.task, coords)?)
    }
}

impl<F> FieldModel for F
where
    F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    fn fields(&self, tape: &mut Tape, coords: &[Var]) -> Result<Vec<Var>> {
        self(tape, coords)
    }
}

/// `∂_t u − ν ∂_xx u − ρ u (1 − u)`.
pub fn residual_diffreact(tape: &mut Tape, u: Var, du_dt: Var, du_dxx: Var, c: &Coefficients) -> Var {
    let diffusion = tape.scale(du_dxx, c.nu);
    let one_minus = tape.scale_shift(u, -1.0, 1.0);
    let logistic = tape.mul(u, one_minus);
    let reaction = tape.scale(logistic, c.rho);
    let r = tape.sub(du_dt, diffusion);
    tape.sub(r, reaction)
}

/// `∂_t u + u ∂_x u − (ν/π) ∂_xx u`.
pub fn residual_burgers(tape: &mut Tape, u: Var, du_dt: Var, du_dx: Var, du_dxx: Var, c: &Coefficients) -> Var {
    let convection = tape.mul(u, du_dx);
    let diffusion = tape.scale(du_dxx, c.nu / PI);
    let r = tape.add(du_dt, convection);
    tape.sub(r, diffusion)
}

/// First derivatives of `(h, u, v)` with respect to `(x, y, t)`.
#[derive(Clone, Copy, Debug)]
pub struct SweDerivatives {
    pub h_x: Var,
    pub h_y: Var,
    pub h_t: Var,
    pub u_x: Var,
    pub u_y: Var,
    pub u_t: Var,
    pub v_x: Var,
    pub v_y: Var,
    pub v_t: Var,
}

/// Mass and momentum residuals of the shallow-water system with flat bed.
///
/// Conservative products are expanded on the tape:
/// `∂_t h + ∂_x(hu) + ∂_y(hv)`,
/// `∂_t(hu) + ∂_x(hu² + ½gh²) + ∂_y(huv)`,
/// `∂_t(hv) + ∂_y(hv² + ½gh²) + ∂_x(huv)`.
pub fn residual_swe(tape: &mut Tape, h: Var, u: Var, v: Var, d: &SweDerivatives, c: &Coefficients) -> [Var; 3] {
    let g = c.gravity;
    // ∂_x(hu), ∂_y(hv)
    let hux = tape.mul(h, d.u_x);
    let uhx = tape.mul(u, d.h_x);
    let flux_x = tape.add(hux, uhx);
    let hvy = tape.mul(h, d.v_y);
    let vhy = tape.mul(v, d.h_y);
    let flux_y = tape.add(hvy, vhy);
    let mass = tape.add(d.h_t, flux_x);
    let mass = tape.add(mass, flux_y);

    let uv = tape.mul(u, v);
    let hu = tape.mul(h, u);
    let hv = tape.mul(h, v);

    // ∂_y(huv) = h_y uv + hu v_y + hv u_y
    let cross_y = {
        let a = tape.mul(d.h_y, uv);
        let b = tape.mul(hu, d.v_y);
        let cc = tape.mul(hv, d.u_y);
        let ab = tape.add(a, b);
        tape.add(ab, cc)
    };
    // ∂_x(huv) = h_x uv + hu v_x + hv u_x
    let cross_x = {
        let a = tape.mul(d.h_x, uv);
        let b = tape.mul(hu, d.v_x);
        let cc = tape.mul(hv, d.u_x);
        let ab = tape.add(a, b);
        tape.add(ab, cc)
    };

    let momentum = |tape: &mut Tape, vel: Var, vel_t: Var, vel_n: Var, h_n: Var, cross: Var| {
        // ∂_t(h vel) = h vel_t + vel h_t
        let a = tape.mul(h, vel_t);
        let b = tape.mul(vel, d.h_t);
        let dt = tape.add(a, b);
        // ∂_n(h vel²) = 2 h vel vel_n + vel² h_n
        let hvel = tape.mul(h, vel);
        let hvel_n = tape.mul(hvel, vel_n);
        let adv1 = tape.scale(hvel_n, 2.0);
        let vel2 = tape.mul(vel, vel);
        let adv2 = tape.mul(vel2, h_n);
        // ∂_n(½ g h²) = g h h_n
        let hh = tape.mul(h, h_n);
        let pressure = tape.scale(hh, g);
        let r = tape.add(dt, adv1);
        let r = tape.add(r, adv2);
        let r = tape.add(r, pressure);
        tape.add(r, cross)
    };
    let xmom = momentum(tape, u, d.u_t, d.u_x, d.h_x, cross_y);
    let ymom = momentum(tape, v, d.v_t, d.v_y, d.h_y, cross_x);
    [mass, xmom, ymom]
}

/// PDE residual columns of `model` at `batch` (one per equation).
pub fn collocation_residuals(
    tape: &mut Tape,
    problem: &PdeProblem,
    model: &dyn FieldModel,
    batch: &PointBatch,
) -> Result<Vec<Var>> {
    if batch.is_empty() {
        return Err(PdeError::EmptyBatch("collocation"));
    }
    let coords: Vec<Var> = batch.coords.iter().map(|c| tape.input(c)).collect();
    let fields = model.fields(tape, &coords)?;
    let c = problem.coefficients;
    match problem.kind {
        ProblemKind::DiffReact => {
            let (x, t) = (coords[0], coords[1]);
            let u = fields[0];
            let first = tape.input_gradients(u, &[x, t])?;
            let u_xx = tape.input_gradients(first[0], &[x])?[0];
            Ok(vec![residual_diffreact(tape, u, first[1], u_xx, &c)])
        }
        ProblemKind::Burgers => {
            let (x, t) = (coords[0], coords[1]);
            let u = fields[0];
            let first = tape.input_gradients(u, &[x, t])?;
            let u_xx = tape.input_gradients(first[0], &[x])?[0];
            Ok(vec![residual_burgers(tape, u, first[1], first[0], u_xx, &c)])
        }
        ProblemKind::ShallowWater => {
            let (h, u, v) = (fields[0], fields[1], fields[2]);
            let dh = tape.input_gradients(h, &coords)?;
            let du = tape.input_gradients(u, &coords)?;
            let dv = tape.input_gradients(v, &coords)?;
            let d = SweDerivatives {
                h_x: dh[0],
                h_y: dh[1],
                h_t: dh[2],
                u_x: du[0],
                u_y: du[1],
                u_t: du[2],
                v_x: dv[0],
                v_y: dv[1],
                v_t: dv[2],
            };
            Ok(residual_swe(tape, h, u, v, &d, &c).to_vec())
        }
    }
}

/// A `1 × 1` sum of squares together with the number of terms it covers.
#[derive(Clone, Copy, Debug)]
pub struct SquaredSum {
    pub sum: Var,
    pub count: usize,
}

fn sum_of_squares(tape: &mut Tape, columns: &[Var]) -> SquaredSum {
    let mut total: Option<Var> = None;
    let mut count = 0;
    for &c in columns {
        count += tape.shape(c).0;
        let s = tape.sum_squares(c);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    SquaredSum {
        sum: total.expect("at least one column"),
        count,
    }
}

/// Σ r² over every residual equation at `batch`.
pub fn residual_squares(
    tape: &mut Tape,
    problem: &PdeProblem,
    model: &dyn FieldModel,
    batch: &PointBatch,
) -> Result<SquaredSum> {
    let residuals = collocation_residuals(tape, problem, model, batch)?;
    Ok(sum_of_squares(tape, &residuals))
}

/// Σ (û(lower) − û(upper))² over every field and pair.
pub fn boundary_squares(tape: &mut Tape, model: &dyn FieldModel, pairs: &[BoundaryPairs]) -> Result<SquaredSum> {
    if pairs.is_empty() || pairs.iter().any(BoundaryPairs::is_empty) {
        return Err(PdeError::EmptyBatch("boundary"));
    }
    let mut diffs = Vec::new();
    for pair in pairs {
        let lo: Vec<Var> = pair.lower.coords.iter().map(|c| tape.input(c)).collect();
        let hi: Vec<Var> = pair.upper.coords.iter().map(|c| tape.input(c)).collect();
        let f_lo = model.fields(tape, &lo)?;
        let f_hi = model.fields(tape, &hi)?;
        for (a, b) in f_lo.into_iter().zip(f_hi) {
            diffs.push(tape.sub(a, b));
        }
    }
    Ok(sum_of_squares(tape, &diffs))
}

/// Σ (û(x, 0) − IC(x))² over every field.
pub fn initial_squares(
    tape: &mut Tape,
    problem: &PdeProblem,
    model: &dyn FieldModel,
    batch: &PointBatch,
    ic: &InitialConditionSpec,
) -> Result<SquaredSum> {
    if batch.is_empty() {
        return Err(PdeError::EmptyBatch("initial"));
    }
    let space = &batch.coords[..problem.space.len()];
    let targets = ic.evaluate(problem, space)?;
    let coords: Vec<Var> = batch.coords.iter().map(|c| tape.input(c)).collect();
    let fields = model.fields(tape, &coords)?;
    let diffs: Vec<Var> = fields
        .into_iter()
        .zip(&targets)
        .map(|(f, target)| {
            let tv = tape.input(target);
            tape.sub(f, tv)
        })
        .collect();
    Ok(sum_of_squares(tape, &diffs))
}

/// Σ (û(x_p, t_p) − u_p)² over every field.
pub fn data_squares(tape: &mut Tape, model: &dyn FieldModel, data: &DataBatch) -> Result<SquaredSum> {
    if data.points.is_empty() {
        return Err(PdeError::EmptyBatch("data"));
    }
    let coords: Vec<Var> = data.points.coords.iter().map(|c| tape.input(c)).collect();
    let fields = model.fields(tape, &coords)?;
    let diffs: Vec<Var> = fields
        .into_iter()
        .zip(&data.values)
        .map(|(f, target)| {
            let tv = tape.input(target);
            tape.sub(f, tv)
        })
        .collect();
    Ok(sum_of_squares(tape, &diffs))
}

/// Loss component nodes (each `1 × 1`) on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub residual: Var,
    pub boundary: Var,
    pub initial: Var,
    pub data: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, tape: &Tape, weights: &LossWeights) -> LossBreakdown {
        LossBreakdown::from_components(
            tape.scalar(self.residual),
            tape.scalar(self.boundary),
            tape.scalar(self.initial),
            self.data.map_or(0.0, |d| tape.scalar(d)),
            weights,
        )
    }
}

fn mean(tape: &mut Tape, s: SquaredSum) -> Var {
    tape.scale(s.sum, 1.0 / s.count as f64)
}

/// `W_f L_f + W_b L_b + W_0 L_0 + W_d L_d` recorded on `tape`.
pub fn assemble_loss(
    tape: &mut Tape,
    problem: &PdeProblem,
    model: &dyn FieldModel,
    batches: &TaskBatches<'_>,
    ic: &InitialConditionSpec,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let f = residual_squares(tape, problem, model, batches.collocation)?;
    let residual = mean(tape, f);
    let b = boundary_squares(tape, model, batches.boundary)?;
    let boundary = mean(tape, b);
    let i = initial_squares(tape, problem, model, batches.initial, ic)?;
    let initial = mean(tape, i);
    let data = match batches.data {
        Some(d) => {
            let s = data_squares(tape, model, d)?;
            Some(mean(tape, s))
        }
        None => None,
    };

    let wf = tape.scale(residual, weights.w_f);
    let wb = tape.scale(boundary, weights.w_b);
    let w0 = tape.scale(initial, weights.w_0);
    let mut total = tape.add(wf, wb);
    total = tape.add(total, w0);
    if let Some(d) = data {
        let wd = tape.scale(d, weights.w_d);
        total = tape.add(total, wd);
    }
    Ok(LossTerms {
        residual,
        boundary,
        initial,
        data,
        total,
    })
}

/// Convenience wrapper building the loss of one task head.
pub fn assemble_task_loss(
    tape: &mut Tape,
    problem: &PdeProblem,
    net: &NetworkAssembly,
    params: &BoundParams,
    task: Task,
    batches: &TaskBatches<'_>,
    ic: &InitialConditionSpec,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let model = TaskModel { net, params, task };
    assemble_loss(tape, problem, &model, batches, ic, weights)
}
