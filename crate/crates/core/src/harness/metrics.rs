use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result, RunReport, Variant};
use crate::nets::Mode;

/// `‖prediction − reference‖₂ / ‖reference‖₂`.
pub fn compute_l2(prediction: &[f64], reference: &[f64]) -> Result<f64> {
    if prediction.len() != reference.len() {
        return Err(HarnessError::Metric(format!(
            "prediction has {} values, reference {}",
            prediction.len(),
            reference.len()
        )));
    }
    let num: f64 = prediction.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum();
    let den: f64 = reference.iter().map(|r| r * r).sum();
    if den == 0.0 {
        return Err(HarnessError::Metric("reference norm is zero".into()));
    }
    Ok((num / den).sqrt())
}

/// Percentage reduction of `err_mode` relative to `err_baseline`.
pub fn compute_boost(err_baseline: f64, err_mode: f64) -> Result<f64> {
    if !(err_baseline > 0.0) {
        return Err(HarnessError::Metric(format!("baseline error {err_baseline} is not positive")));
    }
    Ok(100.0 * (err_baseline - err_mode) / err_baseline)
}

/// Gaussian smoothing with half-sample symmetric reflection at both ends.
/// The kernel is truncated at `⌊4σ + 0.5⌋` samples and normalised.
pub fn smooth_losses(history: &[f64], sigma: f64) -> Vec<f64> {
    let n = history.len();
    if n == 0 || !(sigma > 0.0) {
        return history.to_vec();
    }
    let radius = (4.0 * sigma + 0.5) as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= total);
    let period = 2 * n as i64;
    let reflect = |i: i64| {
        let m = i.rem_euclid(period);
        (if m >= n as i64 { period - 1 - m } else { m }) as usize
    };
    (0..n as i64)
        .map(|i| {
            kernel
                .iter()
                .zip(-radius..=radius)
                .map(|(w, k)| w * history[reflect(i + k)])
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: usize,
    pub l2: f64,
    pub baseline_l2: f64,
    pub boost_pct: f64,
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub mode: Mode,
    pub variant: Variant,
    pub mean_l2: f64,
    pub mean_boost_pct: f64,
    /// Mean over tasks with positive boost only.
    pub positive_boost_pct: Option<f64>,
    pub wins: usize,
    pub tasks: usize,
    /// Runs left out because they, or their baseline, failed.
    pub excluded: usize,
    pub scores: Vec<TaskScore>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub rows: Vec<AggregateRow>,
    pub failed_runs: usize,
}

impl AggregateTable {
    pub fn row(&self, mode: Mode, variant: Variant) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.mode == mode && r.variant == variant)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-mode means, boosts against the single-task baseline, and win counts.
pub fn aggregate(reports: &[RunReport]) -> Result<AggregateTable> {
    let mut baseline = BTreeMap::new();
    let mut failed_baseline = BTreeSet::new();
    for r in reports.iter().filter(|r| r.mode == Mode::Single) {
        match r.relative_l2 {
            Some(l2) if r.is_completed() => {
                baseline.insert(r.task_id, l2);
            }
            _ => {
                failed_baseline.insert(r.task_id);
            }
        }
    }
    let orphans: BTreeSet<usize> = reports
        .iter()
        .filter(|r| r.mode != Mode::Single)
        .map(|r| r.task_id)
        .filter(|t| !baseline.contains_key(t) && !failed_baseline.contains(t))
        .collect();
    if !orphans.is_empty() {
        return Err(HarnessError::MissingBaseline(orphans.into_iter().collect()));
    }

    let mut groups: BTreeMap<(Mode, Variant), (Vec<TaskScore>, usize)> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.mode != Mode::Single) {
        let entry = groups.entry((r.mode, r.variant)).or_default();
        match (r.relative_l2, baseline.get(&r.task_id)) {
            (Some(l2), Some(&b)) if r.is_completed() => entry.0.push(TaskScore {
                task_id: r.task_id,
                l2,
                baseline_l2: b,
                boost_pct: compute_boost(b, l2)?,
            }),
            _ => entry.1 += 1,
        }
    }

    let mut rows = Vec::new();
    if !baseline.is_empty() || !failed_baseline.is_empty() {
        rows.push(AggregateRow {
            mode: Mode::Single,
            variant: Variant::Baseline,
            mean_l2: mean(baseline.values().copied()).unwrap_or(f64::NAN),
            mean_boost_pct: 0.0,
            positive_boost_pct: None,
            wins: 0,
            tasks: baseline.len(),
            excluded: failed_baseline.len(),
            scores: baseline
                .iter()
                .map(|(&task_id, &l2)| TaskScore {
                    task_id,
                    l2,
                    baseline_l2: l2,
                    boost_pct: 0.0,
                })
                .collect(),
        });
    }
    for ((mode, variant), (mut scores, excluded)) in groups {
        scores.sort_by_key(|s| s.task_id);
        rows.push(AggregateRow {
            mode,
            variant,
            mean_l2: mean(scores.iter().map(|s| s.l2)).unwrap_or(f64::NAN),
            mean_boost_pct: mean(scores.iter().map(|s| s.boost_pct)).unwrap_or(f64::NAN),
            positive_boost_pct: mean(scores.iter().map(|s| s.boost_pct).filter(|b| *b > 0.0)),
            wins: scores.iter().filter(|s| s.l2 < s.baseline_l2).count(),
            tasks: scores.len(),
            excluded,
            scores,
        });
    }
    Ok(AggregateTable {
        rows,
        failed_runs: reports.iter().filter(|r| !r.is_completed()).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn l2_examples() {
        let u = [1.0, -2.0, 3.0, 0.5];
        assert_eq!(compute_l2(&u, &u).unwrap(), 0.0);
        let doubled: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
        assert_abs_diff_eq!(compute_l2(&doubled, &u).unwrap(), 1.0, epsilon = 1e-15);
        assert!(compute_l2(&u[..3], &u).is_err());
        assert!(compute_l2(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn boost_examples() {
        assert_abs_diff_eq!(compute_boost(7.19e-1, 2.43e-2).unwrap(), 96.62, epsilon = 0.01);
        assert_eq!(compute_boost(0.3, 0.3).unwrap(), 0.0);
        assert_eq!(compute_boost(0.25, 0.5).unwrap(), -100.0);
        assert!(compute_boost(0.0, 0.1).is_err());
    }

    #[test]
    fn smoothing_examples() {
        let flat = vec![3.5; 40];
        for v in smooth_losses(&flat, 2.0) {
            assert_abs_diff_eq!(v, 3.5, epsilon = 1e-14);
        }
        let mut impulse = vec![0.0; 21];
        impulse[10] = 1.0;
        let s = smooth_losses(&impulse, 1.0);
        assert_abs_diff_eq!(s[10], 0.3989, epsilon = 1e-4);
        let series: Vec<f64> = (0..57).map(|i| ((i * 37) % 11) as f64 + 0.1 * i as f64).collect();
        for sigma in [0.5, 1.0, 3.0, 40.0] {
            let out = smooth_losses(&series, sigma);
            assert_eq!(out.len(), series.len());
            let m0 = series.iter().sum::<f64>() / 57.0;
            let m1 = out.iter().sum::<f64>() / 57.0;
            assert!((m0 - m1).abs() < 1e-12, "sigma {sigma}");
        }
    }
}
