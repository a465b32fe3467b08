//! Single-task and auxiliary-task network assemblies.
//!
//! All five modes share one flat parameter vector. The vector is laid out as
//! `[shared | private main | private aux]` and every affine layer owns a
//! contiguous `W` (row-major, `in × out`) followed by its bias.
//!
//! Routing per task `k`:
//!
//! * `Single`: one monolithic MLP.
//! * `Hard`: shared expert → tower `k`.
//! * `Soft`: `[shared experts ‖ task-k experts]` → tower `k`.
//! * `Mmoe`: `Σ gate_k(x)_e · expert_e(x)` over shared experts → tower `k`.
//! * `Ple`: the same gated sum over shared ∪ task-k experts → tower `k`.
//!
//! Experts are hidden-layer stacks whose output is their last activation.
//! Gates are a single affine layer on the raw coordinates followed by softmax.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    Spec(String),
    #[error("task {task:?} is not available in {mode:?} mode")]
    UnknownTask { task: Task, mode: Mode },
    #[error("expected {expected} coordinate columns, got {got}")]
    Arity { expected: usize, got: usize },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Hard,
    Soft,
    Mmoe,
    Ple,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Single, Mode::Hard, Mode::Soft, Mode::Mmoe, Mode::Ple];
    pub const AUXILIARY: [Mode; 4] = [Mode::Hard, Mode::Soft, Mode::Mmoe, Mode::Ple];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Hard => "hard",
            Mode::Soft => "soft",
            Mode::Mmoe => "mmoe",
            Mode::Ple => "ple",
        }
    }

    pub fn is_auxiliary(self) -> bool {
        self != Mode::Single
    }

    /// Shared and per-task expert counts used when none are given explicitly.
    pub fn default_expert_counts(self) -> (usize, usize) {
        match self {
            Mode::Single => (0, 0),
            Mode::Hard => (1, 0),
            Mode::Soft => (1, 1),
            Mode::Mmoe => (3, 0),
            Mode::Ple => (1, 1),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" | "pinn" => Ok(Mode::Single),
            "hard" => Ok(Mode::Hard),
            "soft" => Ok(Mode::Soft),
            "mmoe" => Ok(Mode::Mmoe),
            "ple" => Ok(Mode::Ple),
            other => Err(NetError::Spec(format!("unknown mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Main,
    Aux,
}

impl Task {
    pub fn index(self) -> usize {
        match self {
            Task::Main => 0,
            Task::Aux => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

/// Fully connected stack: `hidden_layers` activated layers of `width` units.
///
/// When used as a full network an un-activated output layer of
/// `output_dim` units follows. When used as an expert there is no output
/// layer; `output_dim` must then equal `width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_layers: usize, width: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_layers,
            width,
            output_dim,
            activation: Activation::Tanh,
        }
    }

    /// Expert stack emitting its last hidden activation.
    pub fn expert(input_dim: usize, hidden_layers: usize, width: usize) -> Self {
        Self::new(input_dim, hidden_layers, width, width)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.hidden_layers == 0 || self.width == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(NetError::Spec(format!(
                "{what}: input_dim, hidden_layers, width and output_dim must be positive"
            )));
        }
        Ok(())
    }

    /// Parameter count with an output layer.
    pub fn full_param_count(&self) -> usize {
        self.trunk_param_count() + self.width * self.output_dim + self.output_dim
    }

    /// Parameter count of the hidden layers alone.
    pub fn trunk_param_count(&self) -> usize {
        let first = self.input_dim * self.width + self.width;
        first + (self.hidden_layers - 1) * (self.width * self.width + self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub mode: Mode,
    /// Monolithic network used by [`Mode::Single`].
    pub single_spec: MlpSpec,
    pub expert_spec: MlpSpec,
    pub tower_spec: MlpSpec,
    pub n_shared_experts: usize,
    pub n_task_experts_per_task: usize,
    pub n_tasks: usize,
}

/// Depth and width of the three network roles, independent of mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub input_dim: usize,
    pub output_dim: usize,
    /// `(hidden_layers, width)` of the single-task network.
    pub single: (usize, usize),
    pub expert: (usize, usize),
    pub tower: (usize, usize),
}

impl ArchitectureSpec {
    /// Builds a spec for `mode` with the default expert counts.
    pub fn from_shape(mode: Mode, shape: &NetShape) -> Self {
        let (n_shared, n_task) = mode.default_expert_counts();
        Self::with_experts(mode, shape, n_shared, n_task)
    }

    pub fn with_experts(mode: Mode, shape: &NetShape, n_shared: usize, n_task: usize) -> Self {
        let expert = MlpSpec::expert(shape.input_dim, shape.expert.0, shape.expert.1);
        let tower_in = match mode {
            Mode::Soft => (n_shared + n_task) * shape.expert.1,
            _ => shape.expert.1,
        };
        Self {
            mode,
            single_spec: MlpSpec::new(shape.input_dim, shape.single.0, shape.single.1, shape.output_dim),
            expert_spec: expert,
            tower_spec: MlpSpec::new(tower_in, shape.tower.0, shape.tower.1, shape.output_dim),
            n_shared_experts: n_shared,
            n_task_experts_per_task: n_task,
            n_tasks: 2,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.single_spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.single_spec.output_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.single_spec.validate("single network")?;
        if self.mode == Mode::Single {
            return Ok(());
        }
        self.expert_spec.validate("expert")?;
        self.tower_spec.validate("tower")?;
        if self.n_tasks != 2 {
            return Err(NetError::Spec(format!(
                "auxiliary-task modes pair exactly 2 tasks, got {}",
                self.n_tasks
            )));
        }
        let e = &self.expert_spec;
        if e.output_dim != e.width {
            return Err(NetError::Spec(format!(
                "expert output width {} must equal its hidden width {}",
                e.output_dim, e.width
            )));
        }
        if e.input_dim != self.single_spec.input_dim {
            return Err(NetError::Spec("expert input_dim must equal coordinate dimension".into()));
        }
        if self.tower_spec.output_dim != self.single_spec.output_dim {
            return Err(NetError::Spec("tower output_dim must equal field count".into()));
        }
        let (ns, nt) = (self.n_shared_experts, self.n_task_experts_per_task);
        match self.mode {
            Mode::Single => {}
            Mode::Hard => {
                if ns != 1 || nt != 0 {
                    return Err(NetError::Spec("hard sharing uses exactly one shared expert".into()));
                }
            }
            Mode::Mmoe => {
                if ns == 0 || nt != 0 {
                    return Err(NetError::Spec(
                        "MMoE needs shared experts and no task experts".into(),
                    ));
                }
            }
            Mode::Soft | Mode::Ple => {
                if ns == 0 || nt == 0 {
                    return Err(NetError::Spec(format!(
                        "{} needs both shared and task-specific experts",
                        self.mode
                    )));
                }
            }
        }
        let feature = match self.mode {
            Mode::Soft => (ns + nt) * e.width,
            _ => e.width,
        };
        if self.tower_spec.input_dim != feature {
            return Err(NetError::Spec(format!(
                "expert output width {feature} does not match tower input width {}",
                self.tower_spec.input_dim
            )));
        }
        Ok(())
    }
}

/// Index ranges of θ (shared) and φ_k (private to task `k`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub shared: Vec<Range<usize>>,
    pub private: Vec<Vec<Range<usize>>>,
}

/// Partition class of a parameter index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamClass {
    Shared,
    Private(Task),
}

impl ParameterPartition {
    fn count(ranges: &[Range<usize>]) -> usize {
        ranges.iter().map(|r| r.len()).sum()
    }

    pub fn shared_count(&self) -> usize {
        Self::count(&self.shared)
    }

    pub fn private_count(&self, task: Task) -> usize {
        self.private.get(task.index()).map_or(0, |r| Self::count(r))
    }

    pub fn ranges(&self, class: ParamClass) -> &[Range<usize>] {
        match class {
            ParamClass::Shared => &self.shared,
            ParamClass::Private(t) => self.private.get(t.index()).map_or(&[], |v| v.as_slice()),
        }
    }

    pub fn classify(&self, index: usize) -> Option<ParamClass> {
        if self.shared.iter().any(|r| r.contains(&index)) {
            return Some(ParamClass::Shared);
        }
        for (k, ranges) in self.private.iter().enumerate() {
            if ranges.iter().any(|r| r.contains(&index)) {
                let task = if k == 0 { Task::Main } else { Task::Aux };
                return Some(ParamClass::Private(task));
            }
        }
        None
    }

    /// Copies the entries of `values` that fall in `class`, in index order.
    pub fn gather(&self, class: ParamClass, values: &[f64]) -> Vec<f64> {
        self.ranges(class)
            .iter()
            .flat_map(|r| values[r.clone()].iter().copied())
            .collect()
    }

    /// Inverse of [`ParameterPartition::gather`].
    pub fn scatter(&self, class: ParamClass, packed: &[f64], values: &mut [f64]) {
        let mut offset = 0;
        for r in self.ranges(class) {
            values[r.clone()].copy_from_slice(&packed[offset..offset + r.len()]);
            offset += r.len();
        }
        assert_eq!(offset, packed.len(), "packed length must match partition class");
    }

    /// Checks that classes are pairwise disjoint and cover `0..total`.
    pub fn check(&self, total: usize) -> Result<()> {
        let mut owner = vec![0u8; total];
        let all = self.shared.iter().chain(self.private.iter().flatten());
        for r in all {
            if r.end > total {
                return Err(NetError::Spec(format!("range {r:?} exceeds {total} parameters")));
            }
            for i in r.clone() {
                owner[i] += 1;
            }
        }
        if let Some(i) = owner.iter().position(|&c| c != 1) {
            return Err(NetError::Spec(format!(
                "parameter {i} belongs to {} partition classes",
                owner[i]
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub shared: usize,
    pub private_main: usize,
    pub private_aux: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    in_dim: usize,
    out_dim: usize,
    offset: usize,
    activate: bool,
}

impl Layer {
    fn weight_len(&self) -> usize {
        self.in_dim * self.out_dim
    }

    fn len(&self) -> usize {
        self.weight_len() + self.out_dim
    }
}

/// Indices into `NetworkAssembly::layers`.
type Stack = Vec<usize>;

#[derive(Clone, Debug, Default, PartialEq)]
struct Wiring {
    single: Option<Stack>,
    shared_experts: Vec<Stack>,
    task_experts: Vec<Vec<Stack>>,
    gates: Vec<Option<usize>>,
    towers: Vec<Stack>,
}

struct Allocator {
    layers: Vec<Layer>,
    cursor: usize,
}

impl Allocator {
    fn layer(&mut self, in_dim: usize, out_dim: usize, activate: bool) -> usize {
        let layer = Layer {
            in_dim,
            out_dim,
            offset: self.cursor,
            activate,
        };
        self.cursor += layer.len();
        self.layers.push(layer);
        self.layers.len() - 1
    }

    fn trunk(&mut self, spec: &MlpSpec) -> Stack {
        let mut stack = vec![self.layer(spec.input_dim, spec.width, true)];
        for _ in 1..spec.hidden_layers {
            stack.push(self.layer(spec.width, spec.width, true));
        }
        stack
    }

    fn full(&mut self, spec: &MlpSpec) -> Stack {
        let mut stack = self.trunk(spec);
        stack.push(self.layer(spec.width, spec.output_dim, false));
        stack
    }
}

/// Parameters plus wiring for one architecture mode.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkAssembly {
    pub arch: ArchitectureSpec,
    pub seed: u64,
    pub parameters: Vec<f64>,
    pub partition: ParameterPartition,
    layers: Vec<Layer>,
    wiring: Wiring,
}

/// Parameter blocks of one assembly recorded as tape leaves.
pub struct BoundParams {
    layers: Vec<(Var, Var)>,
}

/// Intermediate nodes of a forward pass, exposed for inspection.
pub struct ForwardTrace {
    pub outputs: Vec<Var>,
    /// Tower input (expert features after sharing or gating).
    pub features: Option<Var>,
    /// `batch × n_experts` softmax weights for gated modes.
    pub gate: Option<Var>,
}

impl NetworkAssembly {
    /// Allocates and Glorot-initialises every layer from `seed`.
    pub fn build(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut alloc = Allocator {
            layers: Vec::new(),
            cursor: 0,
        };
        let mut wiring = Wiring::default();
        let partition = if arch.mode == Mode::Single {
            wiring.single = Some(alloc.full(&arch.single_spec));
            ParameterPartition {
                shared: Vec::new(),
                private: vec![vec![0..alloc.cursor]],
            }
        } else {
            for _ in 0..arch.n_shared_experts {
                let e = alloc.trunk(&arch.expert_spec);
                wiring.shared_experts.push(e);
            }
            let shared_end = alloc.cursor;
            let n_gated = match arch.mode {
                Mode::Mmoe => arch.n_shared_experts,
                Mode::Ple => arch.n_shared_experts + arch.n_task_experts_per_task,
                _ => 0,
            };
            let mut private = Vec::with_capacity(arch.n_tasks);
            for _ in 0..arch.n_tasks {
                let start = alloc.cursor;
                let experts = (0..arch.n_task_experts_per_task)
                    .map(|_| alloc.trunk(&arch.expert_spec))
                    .collect();
                wiring.task_experts.push(experts);
                let gate = (n_gated > 0).then(|| alloc.layer(arch.input_dim(), n_gated, false));
                wiring.gates.push(gate);
                wiring.towers.push(alloc.full(&arch.tower_spec));
                private.push(vec![start..alloc.cursor]);
            }
            ParameterPartition {
                shared: vec![0..shared_end],
                private,
            }
        };
        partition.check(alloc.cursor)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut parameters = vec![0.0; alloc.cursor];
        for layer in &alloc.layers {
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in &mut parameters[layer.offset..layer.offset + layer.weight_len()] {
                *w = rng.gen_range(-limit..limit);
            }
        }

        Ok(Self {
            arch: *arch,
            seed,
            parameters,
            partition,
            layers: alloc.layers,
            wiring,
        })
    }

    pub fn mode(&self) -> Mode {
        self.arch.mode
    }

    pub fn param_count(&self) -> usize {
        self.parameters.len()
    }

    pub fn tasks(&self) -> &'static [Task] {
        if self.mode() == Mode::Single {
            &[Task::Main]
        } else {
            &[Task::Main, Task::Aux]
        }
    }

    pub fn param_report(&self) -> ParamReport {
        ParamReport {
            shared: self.partition.shared_count(),
            private_main: self.partition.private_count(Task::Main),
            private_aux: self.partition.private_count(Task::Aux),
            total: self.parameters.len(),
        }
    }

    /// Sets the output layer of every tower (or of the single network) to zero.
    pub fn zero_output_layers(&mut self) {
        let heads: Vec<usize> = match &self.wiring.single {
            Some(stack) => vec![*stack.last().expect("non-empty stack")],
            None => self.wiring.towers.iter().map(|t| *t.last().expect("non-empty tower")).collect(),
        };
        for id in heads {
            let l = self.layers[id];
            self.parameters[l.offset..l.offset + l.len()].fill(0.0);
        }
    }

    /// Parameter index ranges of each task's gate layer, if any.
    pub fn gate_range(&self, task: Task) -> Option<Range<usize>> {
        let id = (*self.wiring.gates.get(task.index())?)?;
        let l = self.layers[id];
        Some(l.offset..l.offset + l.len())
    }

    /// Parameter index range of a task's tower.
    pub fn tower_range(&self, task: Task) -> Option<Range<usize>> {
        let tower = self.wiring.towers.get(task.index())?;
        let first = self.layers[*tower.first()?];
        let last = self.layers[*tower.last()?];
        Some(first.offset..last.offset + last.len())
    }

    /// Records every parameter block as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = &self.parameters[l.offset..l.offset + l.weight_len()];
                let b = &self.parameters[l.offset + l.weight_len()..l.offset + l.len()];
                let w = tape.leaf(Array2::from_shape_vec((l.in_dim, l.out_dim), w.to_vec()).expect("weight shape"));
                let b = tape.leaf(Array2::from_shape_vec((1, l.out_dim), b.to_vec()).expect("bias shape"));
                (w, b)
            })
            .collect();
        BoundParams { layers }
    }

    fn apply_stack(&self, tape: &mut Tape, bound: &BoundParams, stack: &[usize], mut x: Var) -> Result<Var> {
        for &id in stack {
            let (w, b) = bound.layers[id];
            let z = tape.affine(x, w, b)?;
            x = if self.layers[id].activate { tape.tanh(z) } else { z };
        }
        Ok(x)
    }

    fn gated_sum(&self, tape: &mut Tape, gate: Var, experts: &[Var]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (e, &expert) in experts.iter().enumerate() {
            let weight = tape.slice_cols(gate, e, 1);
            let term = tape.scale_rows(expert, weight)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        Ok(acc.expect("gated modes have at least one expert"))
    }

    /// Full forward pass for `task`, keeping gate and feature nodes.
    pub fn forward_trace(&self, tape: &mut Tape, bound: &BoundParams, task: Task, coords: &[Var]) -> Result<ForwardTrace> {
        if coords.len() != self.arch.input_dim() {
            return Err(NetError::Arity {
                expected: self.arch.input_dim(),
                got: coords.len(),
            });
        }
        if !self.tasks().contains(&task) {
            return Err(NetError::UnknownTask { task, mode: self.mode() });
        }
        let x = if coords.len() == 1 {
            coords[0]
        } else {
            tape.concat_cols(coords)?
        };
        let k = task.index();
        let mut gate = None;
        let mut features = None;
        let out = match self.mode() {
            Mode::Single => {
                let stack = self.wiring.single.as_ref().expect("single wiring");
                self.apply_stack(tape, bound, stack, x)?
            }
            mode => {
                let mut experts = Vec::new();
                for stack in &self.wiring.shared_experts {
                    experts.push(self.apply_stack(tape, bound, stack, x)?);
                }
                for stack in &self.wiring.task_experts[k] {
                    experts.push(self.apply_stack(tape, bound, stack, x)?);
                }
                let feat = match mode {
                    Mode::Hard => experts[0],
                    Mode::Soft => tape.concat_cols(&experts)?,
                    _ => {
                        let id = self.wiring.gates[k].expect("gated mode has a gate");
                        let (w, b) = bound.layers[id];
                        let logits = tape.affine(x, w, b)?;
                        let g = tape.softmax(logits);
                        gate = Some(g);
                        self.gated_sum(tape, g, &experts)?
                    }
                };
                features = Some(feat);
                self.apply_stack(tape, bound, &self.wiring.towers[k], feat)?
            }
        };
        let outputs = if self.arch.output_dim() == 1 {
            vec![out]
        } else {
            (0..self.arch.output_dim()).map(|c| tape.slice_cols(out, c, 1)).collect()
        };
        Ok(ForwardTrace {
            outputs,
            features,
            gate,
        })
    }

    /// Network outputs for `task`, one `batch × 1` node per field.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, task: Task, coords: &[Var]) -> Result<Vec<Var>> {
        Ok(self.forward_trace(tape, bound, task, coords)?.outputs)
    }

    /// Gradient of the `1 × 1` node `loss` with respect to the flat parameter vector.
    pub fn flat_gradient(&self, tape: &Tape, bound: &BoundParams, loss: Var) -> Result<Vec<f64>> {
        let wrt: Vec<Var> = bound.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        let grads = tape.gradients(loss, &wrt)?;
        let mut flat = vec![0.0; self.parameters.len()];
        for (layer, pair) in self.layers.iter().zip(grads.chunks(2)) {
            let wlen = layer.weight_len();
            let w = pair[0].as_standard_layout();
            let b = pair[1].as_standard_layout();
            flat[layer.offset..layer.offset + wlen].copy_from_slice(w.as_slice().expect("contiguous"));
            flat[layer.offset + wlen..layer.offset + layer.len()].copy_from_slice(b.as_slice().expect("contiguous"));
        }
        Ok(flat)
    }

    /// Evaluates `task` outputs at plain coordinates without keeping the tape.
    pub fn predict(&self, task: Task, coords: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let n = coords.first().map_or(0, |c| c.len());
        if n == 0 {
            return Ok(vec![Vec::new(); self.arch.output_dim()]);
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let inputs: Vec<Var> = coords.iter().map(|c| tape.input(c)).collect();
        let outs = self.forward(&mut tape, &bound, task, &inputs)?;
        Ok(outs.iter().map(|&o| tape.column(o)).collect())
    }

    /// Writes a JSON header line followed by little-endian `f64` parameters.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            mode: self.mode(),
            architecture: self.arch,
            seed: self.seed,
            partition: self.partition.clone(),
            param_count: self.parameters.len(),
        };
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &header).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        out.write_all(b"\n")?;
        for p in &self.parameters {
            out.write_all(&p.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        let mut net = Self::build(&header.architecture, header.seed)?;
        if net.partition != header.partition || net.parameters.len() != header.param_count {
            return Err(NetError::Checkpoint("header does not match rebuilt architecture".into()));
        }
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * header.param_count {
            return Err(NetError::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                8 * header.param_count,
                bytes.len()
            )));
        }
        for (p, chunk) in net.parameters.iter_mut().zip(bytes.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    mode: Mode,
    architecture: ArchitectureSpec,
    seed: u64,
    partition: ParameterPartition,
    param_count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diffreact_shape() -> NetShape {
        NetShape {
            input_dim: 2,
            output_dim: 1,
            single: (4, 100),
            expert: (3, 100),
            tower: (2, 100),
        }
    }

    fn small_shape() -> NetShape {
        NetShape {
            input_dim: 2,
            output_dim: 1,
            single: (2, 6),
            expert: (2, 5),
            tower: (1, 4),
        }
    }

    #[test]
    fn single_diffreact_parameter_count() {
        let arch = ArchitectureSpec::from_shape(Mode::Single, &diffreact_shape());
        let net = NetworkAssembly::build(&arch, 1).unwrap();
        assert_eq!(net.param_count(), 30_701);
        let report = net.param_report();
        assert_eq!(report.shared, 0);
        assert_eq!(report.private_main, 30_701);
    }

    #[test]
    fn hard_shared_set_is_the_expert() {
        let arch = ArchitectureSpec::from_shape(Mode::Hard, &diffreact_shape());
        let net = NetworkAssembly::build(&arch, 1).unwrap();
        let r = net.param_report();
        assert_eq!(r.shared, 20_500);
        assert_eq!(r.shared, arch.expert_spec.trunk_param_count());
        assert_eq!(r.private_main, arch.tower_spec.full_param_count());
        assert_eq!(r.shared + r.private_main + r.private_aux, r.total);
    }

    #[test]
    fn same_seed_same_parameters() {
        for mode in Mode::ALL {
            let arch = ArchitectureSpec::from_shape(mode, &small_shape());
            let a = NetworkAssembly::build(&arch, 42).unwrap();
            let b = NetworkAssembly::build(&arch, 42).unwrap();
            assert_eq!(a.parameters, b.parameters);
            let c = NetworkAssembly::build(&arch, 43).unwrap();
            assert_ne!(a.parameters, c.parameters);
        }
    }

    #[test]
    fn tower_width_mismatch_is_rejected() {
        let mut arch = ArchitectureSpec::from_shape(Mode::Hard, &small_shape());
        arch.tower_spec.input_dim += 1;
        assert!(matches!(NetworkAssembly::build(&arch, 0), Err(NetError::Spec(_))));
        let mut arch = ArchitectureSpec::from_shape(Mode::Mmoe, &small_shape());
        arch.n_task_experts_per_task = 1;
        assert!(matches!(NetworkAssembly::build(&arch, 0), Err(NetError::Spec(_))));
    }

    #[test]
    fn single_mode_has_no_aux_task() {
        let arch = ArchitectureSpec::from_shape(Mode::Single, &small_shape());
        let net = NetworkAssembly::build(&arch, 0).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.input(&[0.1]);
        let t = tape.input(&[0.2]);
        assert!(matches!(
            net.forward(&mut tape, &bound, Task::Aux, &[x, t]),
            Err(NetError::UnknownTask { .. })
        ));
    }

    #[test]
    fn gates_are_normalised() {
        for mode in [Mode::Mmoe, Mode::Ple] {
            let arch = ArchitectureSpec::from_shape(mode, &small_shape());
            let net = NetworkAssembly::build(&arch, 3).unwrap();
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let x = tape.input(&[-1.0, -0.2, 0.4, 1.0]);
            let t = tape.input(&[0.0, 0.9, 0.3, 0.5]);
            for task in [Task::Main, Task::Aux] {
                let trace = net.forward_trace(&mut tape, &bound, task, &[x, t]).unwrap();
                let gate = tape.value(trace.gate.unwrap());
                for row in gate.rows() {
                    assert!(row.iter().all(|&w| w >= 0.0));
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hard_mode_shares_features() {
        let arch = ArchitectureSpec::from_shape(Mode::Hard, &small_shape());
        let net = NetworkAssembly::build(&arch, 9).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.input(&[0.1, 0.5, 0.9]);
        let t = tape.input(&[0.2, 0.4, 0.6]);
        let main = net.forward_trace(&mut tape, &bound, Task::Main, &[x, t]).unwrap();
        let aux = net.forward_trace(&mut tape, &bound, Task::Aux, &[x, t]).unwrap();
        assert_eq!(tape.value(main.features.unwrap()), tape.value(aux.features.unwrap()));
        assert_ne!(tape.value(main.outputs[0]), tape.value(aux.outputs[0]));
    }

    #[test]
    fn zeroed_output_layer_gives_zero_output() {
        for mode in Mode::ALL {
            let arch = ArchitectureSpec::from_shape(mode, &small_shape());
            let mut net = NetworkAssembly::build(&arch, 5).unwrap();
            net.zero_output_layers();
            let out = net.predict(Task::Main, &[&[0.3, -0.7], &[0.1, 0.2]]).unwrap();
            assert_eq!(out[0], vec![0.0, 0.0]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let arch = ArchitectureSpec::from_shape(Mode::Ple, &small_shape());
        let mut net = NetworkAssembly::build(&arch, 11).unwrap();
        net.parameters[3] = 0.125;
        net.save_checkpoint(&path).unwrap();
        let back = NetworkAssembly::load_checkpoint(&path).unwrap();
        assert_eq!(back, net);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            NetworkAssembly::load_checkpoint(&path),
            Err(NetError::Checkpoint(_))
        ));
    }

    #[test]
    fn partition_gather_scatter() {
        let arch = ArchitectureSpec::from_shape(Mode::Soft, &small_shape());
        let net = NetworkAssembly::build(&arch, 2).unwrap();
        let mut rebuilt = vec![0.0; net.param_count()];
        for class in [ParamClass::Shared, ParamClass::Private(Task::Main), ParamClass::Private(Task::Aux)] {
            let packed = net.partition.gather(class, &net.parameters);
            net.partition.scatter(class, &packed, &mut rebuilt);
        }
        assert_eq!(rebuilt, net.parameters);
        assert_eq!(net.partition.classify(0), Some(ParamClass::Shared));
        assert_eq!(
            net.partition.classify(net.param_count() - 1),
            Some(ParamClass::Private(Task::Aux))
        );
    }
}
