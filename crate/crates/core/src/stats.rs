//! Sufficient-statistic vectors and the per-sample statistic table.
//!
//! Every E-step variant produces and consumes [`StatVec`]s. The layout of the
//! entries is owned by the model (see each model module for its index map);
//! the engine only ever does affine arithmetic on them.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

/// Dense vector of sufficient statistics with a model-declared dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatVec(Vec<f64>);

impl StatVec {
    pub fn new(values: Vec<f64>) -> Self {
        StatVec(values)
    }

    pub fn zeros(dim: usize) -> Self {
        StatVec(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += other`
    pub fn add_assign(&mut self, other: &StatVec) {
        assert_eq!(self.dim(), other.dim(), "statistic dimension mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    /// `self *= c`
    pub fn scale(&mut self, c: f64) {
        for a in self.0.iter_mut() {
            *a *= c;
        }
    }

    /// Arithmetic mean of a non-empty collection, summed left to right.
    pub fn mean_of<'a, I>(items: I) -> Option<StatVec>
    where
        I: IntoIterator<Item = &'a StatVec>,
    {
        let mut iter = items.into_iter();
        let mut acc = iter.next()?.clone();
        let mut count = 1usize;
        for s in iter {
            acc.add_assign(s);
            count += 1;
        }
        acc.scale(1.0 / count as f64);
        Some(acc)
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &StatVec) -> bool {
        self.dim() == other.dim()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Deref for StatVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for StatVec {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for StatVec {
    fn from(v: Vec<f64>) -> Self {
        StatVec(v)
    }
}

/// Stored per-sample statistics at their last refresh, with an incrementally
/// maintained arithmetic mean.
///
/// The mean is re-derived from the entries every `n` replacements so that
/// rounding drift stays bounded on long runs.
#[derive(Debug, Clone)]
pub struct PerSampleStatTable {
    entries: Vec<StatVec>,
    mean: StatVec,
    refresh_iter: Vec<u64>,
    updates_since_resync: usize,
}

impl PerSampleStatTable {
    /// Builds a table from initial entries, all stamped with iteration 0.
    ///
    /// Panics if `entries` is empty or the dimensions disagree.
    pub fn new(entries: Vec<StatVec>) -> Self {
        assert!(!entries.is_empty(), "table needs at least one entry");
        let dim = entries[0].dim();
        assert!(entries.iter().all(|e| e.dim() == dim), "ragged table");
        let mean = StatVec::mean_of(&entries).expect("non-empty");
        let n = entries.len();
        PerSampleStatTable {
            entries,
            mean,
            refresh_iter: vec![0; n],
            updates_since_resync: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StatVec] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &StatVec {
        &self.entries[i]
    }

    pub fn mean(&self) -> &StatVec {
        &self.mean
    }

    pub fn refresh_iters(&self) -> &[u64] {
        &self.refresh_iter
    }

    /// Replaces entry `i` with `value` (refreshed at iteration `iter`) and
    /// shifts the mean by `(value - old) / n`.
    pub fn replace(&mut self, i: usize, value: StatVec, iter: u64) {
        assert!(i < self.entries.len(), "table index {i} out of range");
        assert_eq!(value.dim(), self.mean.dim(), "statistic dimension mismatch");
        let inv_n = 1.0 / self.entries.len() as f64;
        let old = &self.entries[i];
        for ((m, new), old) in self.mean.iter_mut().zip(value.iter()).zip(old.iter()) {
            *m += inv_n * (new - old);
        }
        self.entries[i] = value;
        self.refresh_iter[i] = iter;
        self.updates_since_resync += 1;
        if self.updates_since_resync >= self.entries.len() {
            self.resync();
        }
    }

    /// Recomputes the mean from scratch.
    pub fn resync(&mut self) {
        self.mean = StatVec::mean_of(&self.entries).expect("non-empty");
        self.updates_since_resync = 0;
    }

    /// Brute-force mean of the current entries, independent of the cached one.
    pub fn recomputed_mean(&self) -> StatVec {
        StatVec::mean_of(&self.entries).expect("non-empty")
    }
}

/// Max-norm relative difference `‖a - b‖∞ / max(‖b‖∞, 1e-300)`.
pub fn relative_max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-300);
    diff / scale
}
