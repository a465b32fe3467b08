//! Adam, the step-halving learning-rate schedule, and the cosine-gated
//! two-task update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::{NetworkAssembly, ParamClass, ParameterPartition, Task};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("non-finite gradient at index {index} (iteration {iteration})")]
    NonFinite { iteration: u64, index: usize },
    #[error("shared partition is empty; use adam_step for single-task training")]
    NoSharedPartition,
}

pub type Result<T, E = OptimError> = std::result::Result<T, E>;

/// Norm below which a gradient has no usable direction.
pub const COSINE_NORM_FLOOR: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub halve_every: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            halve_every: 10_000,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, iteration: u64) -> f64 {
        let halvings = iteration / self.halve_every.max(1);
        self.base_lr * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
    }
}

/// `⟨a, b⟩ / (‖a‖‖b‖)`, or `None` when either norm is below the floor.
pub fn cosine_similarity(g_main: &[f64], g_aux: &[f64]) -> Result<Option<f64>> {
    if g_main.len() != g_aux.len() {
        return Err(OptimError::Length {
            left: g_main.len(),
            right: g_aux.len(),
        });
    }
    let dot: f64 = g_main.iter().zip(g_aux).map(|(a, b)| a * b).sum();
    let na = g_main.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = g_aux.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        return Ok(None);
    }
    Ok(Some((dot / (na * nb)).clamp(-1.0, 1.0)))
}

/// One bias-corrected Adam step. The step counter doubles as the
/// iteration index reported on non-finite gradients.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.len() != params.len() {
        return Err(OptimError::Length {
            left: params.len(),
            right: grads.len().min(state.len()),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFinite {
            iteration: state.t,
            index,
        });
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Outcome of one gated update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcsDecision {
    pub cosine: Option<f64>,
    pub aux_applied: bool,
}

impl GcsDecision {
    fn new(cosine: Option<f64>, gate: bool) -> Self {
        let positive = matches!(cosine, Some(c) if c > 0.0);
        Self {
            cosine,
            aux_applied: !gate || positive,
        }
    }
}

/// Adam states for the shared block and both private blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcsStates {
    pub theta: AdamState,
    pub phi_main: AdamState,
    pub phi_aux: AdamState,
}

impl GcsStates {
    pub fn new(partition: &ParameterPartition) -> Self {
        Self {
            theta: AdamState::new(partition.shared_count()),
            phi_main: AdamState::new(partition.private_count(Task::Main)),
            phi_aux: AdamState::new(partition.private_count(Task::Aux)),
        }
    }
}

/// Gated update on a flat parameter vector. `g_main` and `g_aux` are full
/// gradients of each task loss. Returns the decision and the effective
/// shared gradient handed to Adam.
pub fn gcs_update_params(
    params: &mut [f64],
    partition: &ParameterPartition,
    g_main: &[f64],
    g_aux: &[f64],
    states: &mut GcsStates,
    lr: f64,
    use_cosine: bool,
) -> Result<(GcsDecision, Vec<f64>)> {
    if partition.shared_count() == 0 {
        return Err(OptimError::NoSharedPartition);
    }
    for g in [g_main, g_aux] {
        if g.len() != params.len() {
            return Err(OptimError::Length {
                left: params.len(),
                right: g.len(),
            });
        }
    }
    let theta_main = partition.gather(ParamClass::Shared, g_main);
    let theta_aux = partition.gather(ParamClass::Shared, g_aux);
    let cosine = cosine_similarity(&theta_main, &theta_aux)?;
    let decision = GcsDecision::new(cosine, use_cosine);

    let theta_grad: Vec<f64> = if decision.aux_applied {
        theta_main.iter().zip(&theta_aux).map(|(a, b)| a + b).collect()
    } else {
        theta_main
    };

    let steps = [
        (ParamClass::Shared, &mut states.theta, theta_grad.clone()),
        (
            ParamClass::Private(Task::Main),
            &mut states.phi_main,
            partition.gather(ParamClass::Private(Task::Main), g_main),
        ),
        (
            ParamClass::Private(Task::Aux),
            &mut states.phi_aux,
            partition.gather(ParamClass::Private(Task::Aux), g_aux),
        ),
    ];
    // Validate all blocks before touching any state.
    for (_, state, grad) in &steps {
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFinite {
                iteration: state.t,
                index,
            });
        }
    }
    for (class, state, grad) in steps {
        let mut block = partition.gather(class, params);
        adam_step(state, &mut block, &grad, lr)?;
        partition.scatter(class, &block, params);
    }
    Ok((decision, theta_grad))
}

/// Gated update applied to a network's parameters.
pub fn gcs_update(
    net: &mut NetworkAssembly,
    g_main: &[f64],
    g_aux: &[f64],
    states: &mut GcsStates,
    lr: f64,
    use_cosine: bool,
) -> Result<GcsDecision> {
    let partition = net.partition.clone();
    let (decision, _) = gcs_update_params(&mut net.parameters, &partition, g_main, g_aux, states, lr, use_cosine)?;
    Ok(decision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn toy_partition() -> ParameterPartition {
        // [θ0, θ1 | φ_main | φ_aux]
        ParameterPartition {
            shared: vec![0..2],
            private: vec![vec![2..3], vec![3..4]],
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), Some(0.0));
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap().unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_similarity(&[0.3, -2.0], &[-0.3, 2.0]).unwrap().unwrap(), -1.0, epsilon = 1e-15);
        assert_eq!(cosine_similarity(&[1.0], &[0.0]).unwrap(), None);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(9_999), 1e-3);
        assert_eq!(s.lr(10_000), 5e-4);
        assert_eq!(s.lr(20_000), 2.5e-4);
    }

    #[test]
    fn first_adam_step() {
        let mut st = AdamState::new(1);
        let mut p = [1.0];
        adam_step(&mut st, &mut p, &[0.1], 1e-3).unwrap();
        assert_abs_diff_eq!(p[0], 0.999, epsilon = 1e-9);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut st = AdamState::new(3);
        let mut p = [0.5, -1.0, 2.0];
        for _ in 0..50 {
            adam_step(&mut st, &mut p, &[0.0; 3], 1e-2).unwrap();
        }
        assert_eq!(p, [0.5, -1.0, 2.0]);
    }

    #[test]
    fn non_finite_gradient_reports_iteration() {
        let mut st = AdamState::new(2);
        let mut p = [0.0, 0.0];
        adam_step(&mut st, &mut p, &[1.0, 1.0], 1e-3).unwrap();
        let err = adam_step(&mut st, &mut p, &[1.0, f64::NAN], 1e-3).unwrap_err();
        assert_eq!(err, OptimError::NonFinite { iteration: 1, index: 1 });
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut st = AdamState::new(2);
            let mut p = vec![0.3, 0.7];
            for i in 0..100 {
                let g = [(i as f64).sin(), p[0] * p[1]];
                adam_step(&mut st, &mut p, &g, 1e-3).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gate_examples() {
        let part = toy_partition();
        let mut params = vec![0.0; 4];
        let mut st = GcsStates::new(&part);
        let (d, g) = gcs_update_params(&mut params, &part, &[1.0, 0.0, 0.0, 0.0], &[0.5, 0.0, 0.0, 0.0], &mut st, 1e-3, true).unwrap();
        assert!(d.aux_applied);
        assert_eq!(g, vec![1.5, 0.0]);

        let mut st = GcsStates::new(&part);
        let (d, g) = gcs_update_params(&mut params, &part, &[1.0, 0.0, 0.0, 0.0], &[-1.0, 0.0, 0.0, 0.0], &mut st, 1e-3, true).unwrap();
        assert!(!d.aux_applied);
        assert_eq!(d.cosine, Some(-1.0));
        assert_eq!(g, vec![1.0, 0.0]);

        let mut st = GcsStates::new(&part);
        let (d, g) = gcs_update_params(&mut params, &part, &[1.0, 2.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 5.0], &mut st, 1e-3, true).unwrap();
        assert_eq!(d.cosine, None);
        assert!(!d.aux_applied);
        assert_eq!(g, vec![1.0, 2.0]);
    }

    #[test]
    fn empty_shared_partition_is_rejected() {
        let part = ParameterPartition {
            shared: vec![],
            private: vec![vec![0..2]],
        };
        let mut params = vec![0.0; 2];
        let mut st = GcsStates {
            theta: AdamState::new(0),
            phi_main: AdamState::new(2),
            phi_aux: AdamState::new(0),
        };
        let err = gcs_update_params(&mut params, &part, &[0.0; 2], &[0.0; 2], &mut st, 1e-3, true).unwrap_err();
        assert_eq!(err, OptimError::NoSharedPartition);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn gate_matches_cosine_sign(
            a in prop::collection::vec(-10.0f64..10.0, 2),
            b in prop::collection::vec(-10.0f64..10.0, 2),
        ) {
            let part = toy_partition();
            let mut params = vec![0.1, 0.2, 0.3, 0.4];
            let mut st = GcsStates::new(&part);
            let g_main = [a[0], a[1], 0.0, 0.0];
            let g_aux = [b[0], b[1], 0.0, 0.0];
            let (d, _) = gcs_update_params(&mut params, &part, &g_main, &g_aux, &mut st, 1e-3, true).unwrap();
            let positive = matches!(d.cosine, Some(c) if c > 0.0);
            prop_assert_eq!(d.aux_applied, positive);
        }
    }

    proptest! {
        #[test]
        fn gate_is_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 5),
            b in prop::collection::vec(-10.0f64..10.0, 5),
            c in 1e-6f64..1e6,
        ) {
            let scaled: Vec<f64> = b.iter().map(|v| v * c).collect();
            let d1 = GcsDecision::new(cosine_similarity(&a, &b).unwrap(), true);
            let d2 = GcsDecision::new(cosine_similarity(&a, &scaled).unwrap(), true);
            prop_assert_eq!(d1.aux_applied, d2.aux_applied);
        }

        #[test]
        fn private_blocks_are_isolated(
            g_main in prop::collection::vec(-5.0f64..5.0, 4),
            g_aux in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let part = toy_partition();
            let base = vec![0.1, 0.2, 0.3, 0.4];
            let mut st = GcsStates::new(&part);
            let mut params = base.clone();
            gcs_update_params(&mut params, &part, &g_main, &g_aux, &mut st, 1e-3, true).unwrap();

            // Changing the aux gradient on φ_main, or the main gradient on φ_aux, has no effect.
            let mut g_aux2 = g_aux.clone();
            g_aux2[2] += 100.0;
            let mut g_main2 = g_main.clone();
            g_main2[3] -= 100.0;
            let mut st2 = GcsStates::new(&part);
            let mut params2 = base.clone();
            gcs_update_params(&mut params2, &part, &g_main2, &g_aux2, &mut st2, 1e-3, true).unwrap();
            prop_assert_eq!(params[2], params2[2]);
            prop_assert_eq!(params[3], params2[3]);
            prop_assert_eq!(&st.phi_main, &st2.phi_main);
            prop_assert_eq!(&st.phi_aux, &st2.phi_aux);
        }

        #[test]
        fn disabled_gate_equals_doubled_gradient(
            g in prop::collection::vec(-5.0f64..5.0, 4),
            steps in 1usize..5,
        ) {
            let part = toy_partition();
            let mut params = vec![0.1, 0.2, 0.3, 0.4];
            let mut st = GcsStates::new(&part);
            let mut theta = vec![0.1, 0.2];
            let mut plain = AdamState::new(2);
            let doubled = [2.0 * g[0], 2.0 * g[1]];
            for _ in 0..steps {
                gcs_update_params(&mut params, &part, &g, &g, &mut st, 1e-3, false).unwrap();
                adam_step(&mut plain, &mut theta, &doubled, 1e-3).unwrap();
            }
            prop_assert_eq!(&params[..2], &theta[..]);
        }
    }
}
