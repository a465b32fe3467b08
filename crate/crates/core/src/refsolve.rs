//! Explicit finite-difference and finite-volume reference solvers, and the
//! binary grid file format.
//!
//! 1D problems use periodic nodes `x_i = i L / N_x`. The shallow-water solver
//! works on cell centres with zero-gradient outflow ghosts. Output slices are
//! `t_k = k T / (N_t - 1)`; internal steps are chosen from the stability
//! limits and always land exactly on those slices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pde::{eval_ic_dambreak, eval_ic_sinusoid, InitialConditionSpec, PdeProblem, ProblemKind};

pub const GRID_MAGIC: &[u8; 8] = b"ATLGRID1";

#[derive(Debug, Error)]
pub enum RefError {
    #[error("solver configuration: {0}")]
    Config(String),
    #[error("grid format: {0}")]
    Format(String),
    #[error("solution became non-finite at t = {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RefError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
}

impl GridDims {
    pub fn points(&self) -> usize {
        self.nx * self.ny * self.nt
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub nx: usize,
    /// Ignored for 1D problems.
    #[serde(default = "one")]
    pub ny: usize,
    pub nt: usize,
    pub cfl_safety: f64,
    /// Requested internal step; rejected when it violates the stability bound.
    #[serde(default)]
    pub fixed_dt: Option<f64>,
}

fn one() -> usize {
    1
}

impl SolverConfig {
    /// Desk-scale resolution for each problem.
    pub fn desk(kind: ProblemKind) -> Self {
        match kind {
            ProblemKind::DiffReact | ProblemKind::Burgers => Self {
                nx: 256,
                ny: 1,
                nt: 128,
                cfl_safety: 0.9,
                fixed_dt: None,
            },
            ProblemKind::ShallowWater => Self {
                nx: 64,
                ny: 64,
                nt: 51,
                cfl_safety: 0.45,
                fixed_dt: None,
            },
        }
    }

    /// Resolution of the published benchmark data.
    pub fn full(kind: ProblemKind) -> Self {
        match kind {
            ProblemKind::DiffReact | ProblemKind::Burgers => Self {
                nx: 1024,
                nt: 256,
                ..Self::desk(kind)
            },
            ProblemKind::ShallowWater => Self {
                nx: 128,
                ny: 128,
                nt: 101,
                ..Self::desk(kind)
            },
        }
    }

    fn validate(&self, two_d: bool) -> Result<()> {
        if self.nx < 3 || (two_d && self.ny < 3) {
            return Err(RefError::Config(format!("spatial resolution {}x{} too small", self.nx, self.ny)));
        }
        if self.nt < 2 {
            return Err(RefError::Config("need at least two output slices".into()));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety < 1.0) {
            return Err(RefError::Config(format!("cfl_safety {} outside (0, 1)", self.cfl_safety)));
        }
        if let Some(dt) = self.fixed_dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(RefError::Config(format!("fixed_dt {dt} must be positive")));
            }
        }
        Ok(())
    }

    /// Step used for an interval: the stability limit, or `fixed_dt` if it respects it.
    fn step(&self, limit: f64) -> Result<f64> {
        let bound = self.cfl_safety * limit;
        match self.fixed_dt {
            Some(dt) if dt > bound => Err(RefError::Config(format!(
                "fixed_dt {dt:e} exceeds stability bound {bound:e}"
            ))),
            Some(dt) => Ok(dt),
            None => Ok(bound),
        }
    }
}

/// Solution sampled on a regular space-time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub kind: ProblemKind,
    pub dims: GridDims,
    /// `(Δx, Δy, Δt)`; `Δy = 0` for 1D grids.
    pub spacing: [f64; 3],
    /// Coordinates of the first grid point.
    pub origin: [f64; 3],
    pub field_names: Vec<String>,
    pub ic: Option<InitialConditionSpec>,
    /// One array per field, laid out `[t][y][x]`.
    #[serde(skip)]
    pub values: Vec<Vec<f64>>,
}

impl GridField {
    pub fn field_count(&self) -> usize {
        self.values.len()
    }

    pub fn index(&self, k: usize, j: usize, i: usize) -> usize {
        (k * self.dims.ny + j) * self.dims.nx + i
    }

    pub fn at(&self, field: usize, k: usize, j: usize, i: usize) -> f64 {
        self.values[field][self.index(k, j, i)]
    }

    pub fn slice(&self, field: usize, k: usize) -> &[f64] {
        let n = self.dims.slice_len();
        &self.values[field][k * n..(k + 1) * n]
    }

    pub fn x(&self, i: usize) -> f64 {
        self.origin[0] + i as f64 * self.spacing[0]
    }

    pub fn y(&self, j: usize) -> f64 {
        self.origin[1] + j as f64 * self.spacing[1]
    }

    pub fn t(&self, k: usize) -> f64 {
        self.origin[2] + k as f64 * self.spacing[2]
    }

    /// Coordinate columns `x[, y], t` of every grid point, in storage order.
    pub fn coordinates(&self) -> Vec<Vec<f64>> {
        let n = self.dims.points();
        let two_d = self.kind == ProblemKind::ShallowWater;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(if two_d { n } else { 0 });
        let mut ts = Vec::with_capacity(n);
        for k in 0..self.dims.nt {
            for j in 0..self.dims.ny {
                for i in 0..self.dims.nx {
                    xs.push(self.x(i));
                    if two_d {
                        ys.push(self.y(j));
                    }
                    ts.push(self.t(k));
                }
            }
        }
        if two_d {
            vec![xs, ys, ts]
        } else {
            vec![xs, ts]
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.dims.points();
        if n == 0 {
            return Err(RefError::Format("empty grid".into()));
        }
        if self.values.len() != self.field_names.len() {
            return Err(RefError::Format(format!(
                "{} field names for {} fields",
                self.field_names.len(),
                self.values.len()
            )));
        }
        for (name, v) in self.field_names.iter().zip(&self.values) {
            if v.len() != n {
                return Err(RefError::Format(format!("field {name}: {} values, dims imply {n}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(RefError::Format(format!("field {name} holds non-finite values")));
            }
        }
        Ok(())
    }
}

fn interval_steps(span: f64, dt: f64) -> usize {
    ((span / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

fn grid_1d(problem: &PdeProblem, cfg: &SolverConfig, ic: Option<InitialConditionSpec>) -> (GridField, f64) {
    let (lo, hi) = problem.space[0];
    let dx = (hi - lo) / cfg.nx as f64;
    let (t0, t1) = problem.time;
    let grid = GridField {
        kind: problem.kind,
        dims: GridDims {
            nx: cfg.nx,
            ny: 1,
            nt: cfg.nt,
        },
        spacing: [dx, 0.0, (t1 - t0) / (cfg.nt - 1) as f64],
        origin: [lo, 0.0, t0],
        field_names: problem.field_names(),
        ic,
        values: vec![Vec::with_capacity(cfg.nx * cfg.nt)],
    };
    (grid, dx)
}

fn sinusoid_ic(problem: &PdeProblem, ic: &InitialConditionSpec, nx: usize) -> Result<Vec<f64>> {
    if !matches!(ic, InitialConditionSpec::SinusoidSuperposition { .. }) {
        return Err(RefError::Config(format!("{} needs a sinusoid initial condition", problem.kind)));
    }
    let (lo, hi) = problem.space[0];
    let dx = (hi - lo) / nx as f64;
    let xs: Vec<f64> = (0..nx).map(|i| lo + i as f64 * dx).collect();
    Ok(eval_ic_sinusoid(ic, &xs))
}

fn max_abs(u: &[f64]) -> f64 {
    u.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Shared driver for the 1D schemes: `step(u, dt)` advances one step,
/// `limit(u)` is the stable step for the current state.
fn march_1d(
    problem: &PdeProblem,
    cfg: &SolverConfig,
    ic: Option<InitialConditionSpec>,
    u0: Vec<f64>,
    limit: impl Fn(&[f64]) -> f64,
    mut step: impl FnMut(&mut Vec<f64>, &mut Vec<f64>, f64),
) -> Result<GridField> {
    cfg.validate(false)?;
    if u0.len() != cfg.nx {
        return Err(RefError::Config(format!("initial state has {} nodes, expected {}", u0.len(), cfg.nx)));
    }
    let (mut grid, _) = grid_1d(problem, cfg, ic);
    let span = grid.spacing[2];
    let mut u = u0;
    let mut scratch = vec![0.0; cfg.nx];
    grid.values[0].extend_from_slice(&u);
    for k in 1..cfg.nt {
        let dt_max = cfg.step(limit(&u))?;
        let n = interval_steps(span, dt_max);
        let dt = span / n as f64;
        for _ in 0..n {
            step(&mut u, &mut scratch, dt);
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(RefError::NonFinite(grid.t(k)));
        }
        grid.values[0].extend_from_slice(&u);
    }
    Ok(grid)
}

/// Diffusion-reaction from a sinusoid initial condition.
pub fn solve_diffreact(ic: &InitialConditionSpec, cfg: &SolverConfig) -> Result<GridField> {
    let problem = PdeProblem::new(ProblemKind::DiffReact);
    let u0 = sinusoid_ic(&problem, ic, cfg.nx)?;
    solve_diffreact_from(&problem, Some(ic.clone()), u0, cfg)
}

/// Diffusion-reaction from nodal values: central diffusion step, then an
/// explicit logistic reaction step.
pub fn solve_diffreact_from(
    problem: &PdeProblem,
    ic: Option<InitialConditionSpec>,
    u0: Vec<f64>,
    cfg: &SolverConfig,
) -> Result<GridField> {
    let (lo, hi) = problem.space[0];
    let dx = (hi - lo) / cfg.nx as f64;
    let nu = problem.coefficients.nu;
    let rho = problem.coefficients.rho;
    let n = cfg.nx;
    let limit = |u: &[f64]| 1.0 / (2.0 * nu / (dx * dx) + rho * (1.0 + 2.0 * max_abs(u)));
    let step = |u: &mut Vec<f64>, next: &mut Vec<f64>, dt: f64| {
        let k = nu * dt / (dx * dx);
        for i in 0..n {
            let left = u[(i + n - 1) % n];
            let right = u[(i + 1) % n];
            next[i] = u[i] + k * (left - 2.0 * u[i] + right);
        }
        for (ui, &w) in u.iter_mut().zip(next.iter()) {
            *ui = w + dt * rho * w * (1.0 - w);
        }
    };
    march_1d(problem, cfg, ic, u0, limit, step)
}

/// Burgers from a sinusoid initial condition.
pub fn solve_burgers(ic: &InitialConditionSpec, cfg: &SolverConfig) -> Result<GridField> {
    let problem = PdeProblem::new(ProblemKind::Burgers);
    let u0 = sinusoid_ic(&problem, ic, cfg.nx)?;
    solve_burgers_from(&problem, Some(ic.clone()), u0, cfg)
}

/// Godunov flux of `u²/2`.
fn godunov(ul: f64, ur: f64) -> f64 {
    if ul <= ur {
        if ul > 0.0 {
            0.5 * ul * ul
        } else if ur < 0.0 {
            0.5 * ur * ur
        } else {
            0.0
        }
    } else {
        0.5 * (ul * ul).max(ur * ur)
    }
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Burgers in conservative flux form: upwind (Godunov) convection on
/// minmod-limited piecewise-linear face states, central diffusion with
/// coefficient `ν/π`, two-stage strong-stability-preserving Runge-Kutta.
pub fn solve_burgers_from(
    problem: &PdeProblem,
    ic: Option<InitialConditionSpec>,
    u0: Vec<f64>,
    cfg: &SolverConfig,
) -> Result<GridField> {
    let (lo, hi) = problem.space[0];
    let dx = (hi - lo) / cfg.nx as f64;
    let visc = problem.coefficients.nu / std::f64::consts::PI;
    let n = cfg.nx;
    let limit = |u: &[f64]| 1.0 / (2.0 * max_abs(u) / dx + 2.0 * visc / (dx * dx));
    let mut flux = vec![0.0; n];
    let mut slope = vec![0.0; n];
    // Forward Euler stage from `u` into `out`.
    let mut euler = move |u: &[f64], out: &mut [f64], dt: f64| {
        for i in 0..n {
            slope[i] = minmod(u[i] - u[(i + n - 1) % n], u[(i + 1) % n] - u[i]);
        }
        // flux[i] sits at i + 1/2
        for i in 0..n {
            let j = (i + 1) % n;
            let (l, r) = (u[i] + 0.5 * slope[i], u[j] - 0.5 * slope[j]);
            flux[i] = godunov(l, r) - visc * (u[j] - u[i]) / dx;
        }
        let c = dt / dx;
        for i in 0..n {
            out[i] = u[i] - c * (flux[i] - flux[(i + n - 1) % n]);
        }
    };
    let mut stage2 = vec![0.0; n];
    let step = move |u: &mut Vec<f64>, stage1: &mut Vec<f64>, dt: f64| {
        euler(u, stage1, dt);
        euler(stage1, &mut stage2, dt);
        for (ui, &s2) in u.iter_mut().zip(&stage2) {
            *ui = 0.5 * (*ui + s2);
        }
    };
    march_1d(problem, cfg, ic, u0, limit, step)
}

/// Conserved shallow-water state on cell centres.
struct SweState {
    h: Vec<f64>,
    hu: Vec<f64>,
    hv: Vec<f64>,
}

/// Rusanov flux in the frame normal to a face: `(mass, normal momentum, tangential momentum)`.
fn rusanov(l: (f64, f64, f64), r: (f64, f64, f64), g: f64) -> (f64, f64, f64) {
    let phys = |(h, qn, qt): (f64, f64, f64)| {
        let un = qn / h;
        (qn, qn * un + 0.5 * g * h * h, qt * un)
    };
    let speed = |(h, qn, _): (f64, f64, f64)| (qn / h).abs() + (g * h).sqrt();
    let a = speed(l).max(speed(r));
    let fl = phys(l);
    let fr = phys(r);
    (
        0.5 * (fl.0 + fr.0) - 0.5 * a * (r.0 - l.0),
        0.5 * (fl.1 + fr.1) - 0.5 * a * (r.1 - l.1),
        0.5 * (fl.2 + fr.2) - 0.5 * a * (r.2 - l.2),
    )
}

/// Radial dam break with radius `r` in `[0.3, 0.7]`. `r = 0` is accepted as
/// the degenerate lake at rest.
pub fn solve_swe(radius: f64, cfg: &SolverConfig) -> Result<GridField> {
    if !(radius == 0.0 || (0.3..=0.7).contains(&radius)) {
        return Err(RefError::Config(format!("dam-break radius {radius} outside [0.3, 0.7]")));
    }
    let problem = PdeProblem::new(ProblemKind::ShallowWater);
    let (dx, dy) = swe_spacing(&problem, cfg);
    let (x0, y0) = (problem.space[0].0 + 0.5 * dx, problem.space[1].0 + 0.5 * dy);
    let mut h0 = Vec::with_capacity(cfg.nx * cfg.ny);
    for j in 0..cfg.ny {
        for i in 0..cfg.nx {
            h0.push(eval_ic_dambreak(radius, x0 + i as f64 * dx, y0 + j as f64 * dy));
        }
    }
    solve_swe_from(&problem, Some(InitialConditionSpec::RadialDamBreak { radius }), h0, cfg)
}

fn swe_spacing(problem: &PdeProblem, cfg: &SolverConfig) -> (f64, f64) {
    let (xl, xh) = problem.space[0];
    let (yl, yh) = problem.space[1];
    ((xh - xl) / cfg.nx as f64, (yh - yl) / cfg.ny as f64)
}

/// Shallow water from a still initial height on cell centres (`[y][x]`),
/// using unsplit first-order Rusanov fluxes.
pub fn solve_swe_from(
    problem: &PdeProblem,
    ic: Option<InitialConditionSpec>,
    h0: Vec<f64>,
    cfg: &SolverConfig,
) -> Result<GridField> {
    cfg.validate(true)?;
    let (nx, ny) = (cfg.nx, cfg.ny);
    if h0.len() != nx * ny {
        return Err(RefError::Config(format!("initial height has {} cells, expected {}", h0.len(), nx * ny)));
    }
    if h0.iter().any(|h| !(*h > 0.0)) {
        return Err(RefError::Config("initial height must be positive".into()));
    }
    let g = problem.coefficients.gravity;
    let (dx, dy) = swe_spacing(problem, cfg);
    let (t0, t1) = problem.time;
    let mut grid = GridField {
        kind: ProblemKind::ShallowWater,
        dims: GridDims { nx, ny, nt: cfg.nt },
        spacing: [dx, dy, (t1 - t0) / (cfg.nt - 1) as f64],
        origin: [problem.space[0].0 + 0.5 * dx, problem.space[1].0 + 0.5 * dy, t0],
        field_names: problem.field_names(),
        ic,
        values: vec![Vec::with_capacity(nx * ny * cfg.nt); 3],
    };
    let cells = nx * ny;
    let mut s = SweState {
        h: h0,
        hu: vec![0.0; cells],
        hv: vec![0.0; cells],
    };
    let record = |grid: &mut GridField, s: &SweState| {
        grid.values[0].extend_from_slice(&s.h);
        grid.values[1].extend(s.hu.iter().zip(&s.h).map(|(q, h)| q / h));
        grid.values[2].extend(s.hv.iter().zip(&s.h).map(|(q, h)| q / h));
    };
    record(&mut grid, &s);

    let id = |i: usize, j: usize| j * nx + i;
    // fx[j * (nx + 1) + i] is the flux through the face left of cell i.
    let mut fx = vec![(0.0, 0.0, 0.0); (nx + 1) * ny];
    let mut fy = vec![(0.0, 0.0, 0.0); nx * (ny + 1)];
    let mut t = t0;
    for k in 1..cfg.nt {
        let target = grid.t(k);
        while t < target {
            let mut smax = 0.0f64;
            for c in 0..cells {
                let c0 = (g * s.h[c]).sqrt();
                smax = smax.max((s.hu[c] / s.h[c]).abs() + c0).max((s.hv[c] / s.h[c]).abs() + c0);
            }
            let mut dt = cfg.step(dx.min(dy) / smax)?;
            let last = target - t <= dt * (1.0 + 1e-12);
            if last {
                dt = target - t;
            }
            for j in 0..ny {
                for f in 0..=nx {
                    let l = id(f.saturating_sub(1), j);
                    let r = id(f.min(nx - 1), j);
                    fx[j * (nx + 1) + f] = rusanov((s.h[l], s.hu[l], s.hv[l]), (s.h[r], s.hu[r], s.hv[r]), g);
                }
            }
            for f in 0..=ny {
                for i in 0..nx {
                    let b = id(i, f.saturating_sub(1));
                    let a = id(i, f.min(ny - 1));
                    fy[f * nx + i] = rusanov((s.h[b], s.hv[b], s.hu[b]), (s.h[a], s.hv[a], s.hu[a]), g);
                }
            }
            let (cx, cy) = (dt / dx, dt / dy);
            for j in 0..ny {
                for i in 0..nx {
                    let c = id(i, j);
                    let (w, e) = (fx[j * (nx + 1) + i], fx[j * (nx + 1) + i + 1]);
                    let (so, no) = (fy[j * nx + i], fy[(j + 1) * nx + i]);
                    s.h[c] -= cx * (e.0 - w.0) + cy * (no.0 - so.0);
                    s.hu[c] -= cx * (e.1 - w.1) + cy * (no.2 - so.2);
                    s.hv[c] -= cx * (e.2 - w.2) + cy * (no.1 - so.1);
                }
            }
            if s.h.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
                return Err(RefError::NonFinite(t + dt));
            }
            t = if last { target } else { t + dt };
        }
        record(&mut grid, &s);
    }
    Ok(grid)
}

/// Reference solution for `ic` on `problem`.
pub fn solve(kind: ProblemKind, ic: &InitialConditionSpec, cfg: &SolverConfig) -> Result<GridField> {
    match (kind, ic) {
        (ProblemKind::DiffReact, _) => solve_diffreact(ic, cfg),
        (ProblemKind::Burgers, _) => solve_burgers(ic, cfg),
        (ProblemKind::ShallowWater, InitialConditionSpec::RadialDamBreak { radius }) => solve_swe(*radius, cfg),
        (ProblemKind::ShallowWater, _) => Err(RefError::Config("shallow water needs a dam-break initial condition".into())),
    }
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    kind: ProblemKind,
    dims: GridDims,
    spacing: [f64; 3],
    origin: [f64; 3],
    field_names: Vec<String>,
    ic: Option<InitialConditionSpec>,
}

/// Writes `ATLGRID1`, a little-endian `u64` header length, the JSON header,
/// then every field as little-endian `f64` in `[field][t][y][x]` order.
pub fn write_grid(field: &GridField, path: &Path) -> Result<()> {
    field.check()?;
    let header = GridHeader {
        kind: field.kind,
        dims: field.dims,
        spacing: field.spacing,
        origin: field.origin,
        field_names: field.field_names.clone(),
        ic: field.ic.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| RefError::Format(e.to_string()))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(GRID_MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for values in &field.values {
        for v in values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<GridField> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_grid(&bytes)
}

pub fn decode_grid(bytes: &[u8]) -> Result<GridField> {
    if bytes.len() < 16 || &bytes[..8] != GRID_MAGIC {
        return Err(RefError::Format("bad magic number".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[16..];
    if hlen > body.len() as u64 {
        return Err(RefError::Format("truncated header".into()));
    }
    let (head, payload) = body.split_at(hlen as usize);
    let header: GridHeader = serde_json::from_slice(head).map_err(|e| RefError::Format(format!("header: {e}")))?;
    let n = header
        .dims
        .nx
        .checked_mul(header.dims.ny)
        .and_then(|v| v.checked_mul(header.dims.nt))
        .ok_or_else(|| RefError::Format("dims overflow".into()))?;
    let expected = n
        .checked_mul(header.field_names.len())
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| RefError::Format("dims overflow".into()))?;
    if payload.len() != expected {
        return Err(RefError::Format(format!(
            "payload holds {} bytes, dims require {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8 * n.max(1))
        .map(|chunk| chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
        .collect();
    let grid = GridField {
        kind: header.kind,
        dims: header.dims,
        spacing: header.spacing,
        origin: header.origin,
        field_names: header.field_names,
        ic: header.ic,
        values,
    };
    grid.check()?;
    Ok(grid)
}
