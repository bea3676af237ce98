//! Error metrics on the epoch grid and their aggregation over replicates.

use serde::Serialize;
use ttsem::engine::IterRecord;
use ttsem::models::gmm::quantile_sorted;

/// `min over permutations pi of sum_m (mu_m - mu*_pi(m))^2`.
///
/// Exhaustive over permutations, so meant for the handful of components used
/// in mixture experiments.
pub fn metric_precision_gmm(mu: &[f64], mu_star: &[f64]) -> f64 {
    assert_eq!(mu.len(), mu_star.len(), "component count mismatch");
    let mut perm: Vec<usize> = (0..mu.len()).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let cost: f64 = p.iter().enumerate().map(|(m, &j)| (mu[m] - mu_star[j]).powi(2)).sum();
        best = best.min(cost);
    });
    best
}

fn permute(p: &mut [usize], start: usize, f: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        f(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, f);
        p.swap(start, i);
    }
}

/// Epoch grid `1/res, 2/res, ..., ceil(epochs)`.
pub fn epoch_grid(epochs: f64, resolution: usize) -> Vec<f64> {
    let len = epochs.ceil() as usize * resolution;
    (1..=len).map(|g| g as f64 / resolution as f64).collect()
}

/// For every grid point, the index of the last record whose cumulative cost
/// does not exceed it. Records are sorted by epoch.
pub fn grid_indices(records: &[IterRecord], grid: &[f64]) -> Vec<usize> {
    let mut out = Vec::with_capacity(grid.len());
    let mut idx = 0;
    for &e in grid {
        while idx + 1 < records.len() && records[idx + 1].epoch <= e + 1e-9 {
            idx += 1;
        }
        out.push(idx);
    }
    out
}

/// One metric for one algorithm in one replicate, sampled on the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSeries {
    pub metric: String,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn last(&self) -> f64 {
        *self.values.last().expect("non-empty series")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Mean and linearly interpolated quartiles.
pub fn summarize(values: &[f64]) -> Summary {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Summary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: quantile_sorted(&sorted, 0.5),
        q25: quantile_sorted(&sorted, 0.25),
        q75: quantile_sorted(&sorted, 0.75),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn precision_examples() {
        assert_eq!(metric_precision_gmm(&[0.5, -0.5], &[0.5, -0.5]), 0.0);
        assert_eq!(metric_precision_gmm(&[0.5, -0.5], &[-0.5, 0.5]), 0.0);
        assert!((metric_precision_gmm(&[0.6, -0.5], &[0.5, -0.5]) - 0.01).abs() < 1e-15);
        assert!((metric_precision_gmm(&[3.0, 0.0, 1.0], &[0.0, 1.0, 3.1]) - 0.01).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn precision_ignores_labels(mu in prop::collection::vec(-5.0f64..5.0, 3), star in prop::collection::vec(-5.0f64..5.0, 3)) {
            let base = metric_precision_gmm(&mu, &star);
            let rotated = [mu[2], mu[0], mu[1]];
            prop_assert!((metric_precision_gmm(&rotated, &star) - base).abs() < 1e-12);
            let direct: f64 = mu.iter().zip(&star).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(base <= direct + 1e-12);
        }
    }

    fn rec(k: u64, epoch: f64) -> IterRecord {
        IterRecord {
            k,
            epoch,
            theta: vec![],
            delta_s_sq: 0.0,
            nll: None,
            wall_ns: 0,
        }
    }

    #[test]
    fn grid_picks_the_last_affordable_record() {
        let grid = epoch_grid(2.0, 2);
        assert_eq!(grid, vec![0.5, 1.0, 1.5, 2.0]);
        let batch: Vec<_> = (0..=2).map(|k| rec(k, k as f64)).collect();
        assert_eq!(grid_indices(&batch, &grid), vec![0, 1, 1, 2]);
        // vrTTEM-like accounting: a refresh costs a whole epoch up front
        let vr = vec![rec(0, 0.0), rec(1, 1.5), rec(2, 2.0), rec(3, 3.5)];
        assert_eq!(grid_indices(&vr, &grid), vec![0, 0, 1, 2]);
    }

    #[test]
    fn single_replicate_summary_is_the_value() {
        let s = summarize(&[0.3]);
        assert_eq!((s.mean, s.median, s.q25, s.q75), (0.3, 0.3, 0.3, 0.3));
        let s = summarize(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!((s.mean, s.median, s.q25, s.q75), (2.5, 2.5, 1.75, 3.25));
    }
}
