//! Seeded collocation, boundary and initial point generation.
//!
//! All draws come from ChaCha8 (`rand_chacha::ChaCha8Rng`), a counter-based
//! generator. Each role reads its own stream of the plan seed, and every
//! mini-batch iteration reads stream `MINIBATCH_STREAM + iteration`, so any
//! batch can be regenerated from `(seed, plan, iteration)` alone.

use rand::distributions::{Distribution, Open01, OpenClosed01, Uniform};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pde::{PdeProblem, ProblemKind};

const COLLOCATION_STREAM: u64 = 1;
const BOUNDARY_STREAM: u64 = 2;
const INITIAL_STREAM: u64 = 3;
const MINIBATCH_STREAM: u64 = 1 << 32;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("sampling plan: {0}")]
    Plan(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPlan {
    pub n_collocation: usize,
    pub n_boundary_per_edge: usize,
    pub n_initial: usize,
    #[serde(default)]
    pub minibatch: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SamplingPlan {
    /// Point counts used for each problem family at full scale.
    pub fn defaults(kind: ProblemKind) -> Self {
        match kind {
            ProblemKind::DiffReact | ProblemKind::Burgers => Self {
                n_collocation: 10_000,
                n_boundary_per_edge: 100,
                n_initial: 100,
                minibatch: None,
                seed: 0,
            },
            ProblemKind::ShallowWater => Self {
                n_collocation: 100_000,
                n_boundary_per_edge: 1_000,
                n_initial: 1_000,
                minibatch: Some(20_000),
                seed: 0,
            },
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.n_collocation == 0 || self.n_boundary_per_edge == 0 || self.n_initial == 0 {
            return Err(SamplingError::Plan("all point counts must be positive".into()));
        }
        match self.minibatch {
            Some(0) => Err(SamplingError::Plan("minibatch must be positive".into())),
            Some(m) if m > self.n_collocation => Err(SamplingError::Plan(format!(
                "minibatch {m} exceeds {} collocation points",
                self.n_collocation
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointRole {
    Collocation,
    BoundaryPair,
    Initial,
    Data,
}

/// Points stored channel-wise in network input order `(x[, y], t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointBatch {
    pub role: PointRole,
    pub coords: Vec<Vec<f64>>,
}

impl PointBatch {
    pub fn new(role: PointRole, coords: Vec<Vec<f64>>) -> Self {
        debug_assert!(coords.windows(2).all(|w| w[0].len() == w[1].len()));
        Self { role, coords }
    }

    pub fn len(&self) -> usize {
        self.coords.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.coords.len()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.coords.iter().map(|c| c[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            role: self.role,
            coords: self
                .coords
                .iter()
                .map(|c| indices.iter().map(|&i| c[i]).collect())
                .collect(),
        }
    }

    /// Consecutive slices of at most `size` points.
    pub fn chunks(&self, size: usize) -> Vec<Self> {
        assert!(size > 0, "chunk size must be positive");
        let n = self.len();
        (0..n)
            .step_by(size)
            .map(|start| {
                let end = (start + size).min(n);
                Self {
                    role: self.role,
                    coords: self.coords.iter().map(|c| c[start..end].to_vec()).collect(),
                }
            })
            .collect()
    }
}

/// Matched points on opposite edges of a periodic direction.
///
/// `lower[i]` and `upper[i]` differ only in channel `axis`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPairs {
    pub axis: usize,
    pub lower: PointBatch,
    pub upper: PointBatch,
}

impl BoundaryPairs {
    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }
}

/// The fixed training set for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledPoints {
    pub collocation: PointBatch,
    pub boundary: Vec<BoundaryPairs>,
    pub initial: PointBatch,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn open_interval(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = Open01.sample(rng);
    lo + (hi - lo) * u
}

/// `(t0, T]`, matching the time domain of the residual and boundary terms.
fn time_interval(rng: &mut ChaCha8Rng, (t0, t1): (f64, f64)) -> f64 {
    let u: f64 = OpenClosed01.sample(rng);
    t0 + (t1 - t0) * u
}

/// Draws the collocation, boundary-pair and initial batches of `plan`.
pub fn sample_plan(problem: &PdeProblem, plan: &SamplingPlan) -> Result<SampledPoints, SamplingError> {
    plan.validate()?;
    let dims = problem.space.len();

    let mut rng = rng_for(plan.seed, COLLOCATION_STREAM);
    let mut coords = vec![Vec::with_capacity(plan.n_collocation); dims + 1];
    for _ in 0..plan.n_collocation {
        for (d, interval) in problem.space.iter().enumerate() {
            coords[d].push(open_interval(&mut rng, *interval));
        }
        coords[dims].push(time_interval(&mut rng, problem.time));
    }
    let collocation = PointBatch::new(PointRole::Collocation, coords);

    let mut rng = rng_for(plan.seed, BOUNDARY_STREAM);
    let mut boundary = Vec::with_capacity(dims);
    for axis in 0..dims {
        let n = plan.n_boundary_per_edge;
        let mut lower = vec![Vec::with_capacity(n); dims + 1];
        let mut upper = vec![Vec::with_capacity(n); dims + 1];
        for _ in 0..n {
            for (d, interval) in problem.space.iter().enumerate() {
                if d == axis {
                    lower[d].push(interval.0);
                    upper[d].push(interval.1);
                } else {
                    let v = open_interval(&mut rng, *interval);
                    lower[d].push(v);
                    upper[d].push(v);
                }
            }
            let t = time_interval(&mut rng, problem.time);
            lower[dims].push(t);
            upper[dims].push(t);
        }
        boundary.push(BoundaryPairs {
            axis,
            lower: PointBatch::new(PointRole::BoundaryPair, lower),
            upper: PointBatch::new(PointRole::BoundaryPair, upper),
        });
    }

    let mut rng = rng_for(plan.seed, INITIAL_STREAM);
    let mut coords = vec![Vec::with_capacity(plan.n_initial); dims + 1];
    for _ in 0..plan.n_initial {
        for (d, &(lo, hi)) in problem.space.iter().enumerate() {
            coords[d].push(Uniform::new(lo, hi).sample(&mut rng));
        }
        coords[dims].push(problem.time.0);
    }
    let initial = PointBatch::new(PointRole::Initial, coords);

    Ok(SampledPoints {
        collocation,
        boundary,
        initial,
    })
}

/// Indices of the collocation subset used at `iteration`.
///
/// Drawn without replacement; a subset of the full size is a permutation.
pub fn minibatch_indices(n_total: usize, size: usize, seed: u64, iteration: u64) -> Vec<usize> {
    assert!(size <= n_total, "mini-batch larger than the pool");
    let mut rng = rng_for(seed, MINIBATCH_STREAM + iteration);
    index::sample(&mut rng, n_total, size).into_vec()
}

/// The collocation batch for `iteration`: the mini-batch subset when the
/// plan has one, the full pool otherwise.
pub fn next_minibatch(full: &PointBatch, plan: &SamplingPlan, iteration: u64) -> PointBatch {
    match plan.minibatch {
        Some(size) if size <= full.len() => {
            full.subset(&minibatch_indices(full.len(), size, plan.seed, iteration))
        }
        _ => full.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diffreact() -> PdeProblem {
        PdeProblem::new(ProblemKind::DiffReact)
    }

    #[test]
    fn default_counts() {
        let p = SamplingPlan::defaults(ProblemKind::DiffReact);
        let pts = sample_plan(&diffreact(), &p).unwrap();
        assert_eq!(pts.collocation.len(), 10_000);
        assert_eq!(pts.boundary.len(), 1);
        assert_eq!(pts.boundary[0].len(), 100);
        assert_eq!(pts.initial.len(), 100);

        let swe = PdeProblem::new(ProblemKind::ShallowWater);
        let p = SamplingPlan::defaults(ProblemKind::ShallowWater);
        let pts = sample_plan(&swe, &p).unwrap();
        assert_eq!(pts.collocation.len(), 100_000);
        assert_eq!(pts.boundary.len(), 2);
        assert!(pts.boundary.iter().all(|b| b.len() == 1_000));
        assert_eq!(pts.initial.len(), 1_000);
        assert_eq!(p.minibatch, Some(20_000));
    }

    #[test]
    fn diffreact_points_lie_in_domain() {
        let p = SamplingPlan::defaults(ProblemKind::DiffReact).with_seed(17);
        let pts = sample_plan(&diffreact(), &p).unwrap();
        let (x, t) = (&pts.collocation.coords[0], &pts.collocation.coords[1]);
        assert!(x.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(t.iter().all(|&v| v > 0.0 && v <= 1.0));
        assert!(pts.initial.coords[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boundary_pairs_differ_only_along_normal() {
        let swe = PdeProblem::new(ProblemKind::ShallowWater);
        let mut p = SamplingPlan::defaults(ProblemKind::ShallowWater);
        p.n_collocation = 10;
        p.minibatch = None;
        p.n_boundary_per_edge = 50;
        let pts = sample_plan(&swe, &p).unwrap();
        for pairs in &pts.boundary {
            for i in 0..pairs.len() {
                let (lo, hi) = (pairs.lower.point(i), pairs.upper.point(i));
                for c in 0..3 {
                    if c == pairs.axis {
                        assert_eq!(lo[c], -2.5);
                        assert_eq!(hi[c], 2.5);
                    } else {
                        assert_eq!(lo[c], hi[c]);
                    }
                }
            }
        }
    }

    #[test]
    fn reproducible_from_seed() {
        let p = SamplingPlan::defaults(ProblemKind::Burgers).with_seed(5);
        let prob = PdeProblem::new(ProblemKind::Burgers);
        assert_eq!(sample_plan(&prob, &p).unwrap(), sample_plan(&prob, &p).unwrap());
        let q = p.with_seed(6);
        assert_ne!(sample_plan(&prob, &p).unwrap(), sample_plan(&prob, &q).unwrap());
    }

    #[test]
    fn minibatch_examples() {
        let a = minibatch_indices(100_000, 20_000, 3, 7);
        assert_eq!(a.len(), 20_000);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20_000);
        assert_eq!(a, minibatch_indices(100_000, 20_000, 3, 7));
        assert_ne!(a, minibatch_indices(100_000, 20_000, 3, 8));

        let mut full = minibatch_indices(50, 50, 1, 0);
        full.sort_unstable();
        assert_eq!(full, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_minibatch_rejected() {
        let mut p = SamplingPlan::defaults(ProblemKind::DiffReact);
        p.minibatch = Some(p.n_collocation + 1);
        assert!(p.validate().is_err());
    }

    #[test]
    fn minibatches_cover_the_pool() {
        // Each index is missed by one draw with probability 0.8; over 1,000
        // draws that is 0.8^1000 ≈ 1e-97 per index.
        let (n, k) = (100_000, 20_000);
        let mut seen = vec![false; n];
        for it in 0..1_000 {
            for i in minibatch_indices(n, k, 11, it) {
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn chunks_partition_the_batch() {
        let p = SamplingPlan::defaults(ProblemKind::DiffReact);
        let pts = sample_plan(&diffreact(), &p).unwrap();
        let chunks = pts.collocation.chunks(3_000);
        assert_eq!(chunks.iter().map(PointBatch::len).collect::<Vec<_>>(), vec![3_000, 3_000, 3_000, 1_000]);
        let rejoined: Vec<f64> = chunks.iter().flat_map(|c| c.coords[0].clone()).collect();
        assert_eq!(rejoined, pts.collocation.coords[0]);
    }
}
