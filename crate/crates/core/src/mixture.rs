//! Posterior memberships, hard labelings and the log-domain E-step shared by
//! every mixture fitter.

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, RowMatrix, CHUNK};

/// Posterior membership probabilities `τ_ik`, `n x K`, rows on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities(RowMatrix);

impl Responsibilities {
    /// Validates rows (entries in `[0, 1]`, sums within `1e-10` of one).
    pub fn new(tau: RowMatrix) -> Result<Self> {
        for (i, row) in tau.rows().enumerate() {
            if row.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
                return Err(Error::invalid(format!("responsibility row {i} leaves [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::invalid(format!("responsibility row {i} sums to {s}")));
            }
        }
        Ok(Self(tau))
    }

    pub(crate) fn new_unchecked(tau: RowMatrix) -> Self {
        Self(tau)
    }

    /// One-hot rows from hard labels.
    pub fn one_hot(labels: &[usize], k: usize) -> Self {
        let mut tau = RowMatrix::zeros(labels.len(), k);
        for (i, &l) in labels.iter().enumerate() {
            tau.row_mut(i)[l] = 1.0;
        }
        Self(tau)
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        Self(RowMatrix::from_vec(n, k, vec![1.0 / k as f64; n * k]).expect("shape"))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &RowMatrix {
        &self.0
    }

    /// Column sums `Σ_i τ_ik`.
    pub fn masses(&self) -> Vec<f64> {
        let k = self.k();
        let mut out = vec![0.0; k];
        for row in self.0.rows() {
            for (o, t) in out.iter_mut().zip(row) {
                *o += t;
            }
        }
        out
    }

    /// Bayes allocation: argmax per row, ties to the smallest index.
    pub fn labels(&self) -> Labeling {
        let labels = self
            .0
            .rows()
            .map(|row| {
                let mut best = 0;
                for (k, &t) in row.iter().enumerate() {
                    if t > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        Labeling::new(labels, self.k())
    }

    /// Drops the listed columns and renormalizes rows.
    pub(crate) fn without_columns(&self, drop: &[usize]) -> Self {
        let keep: Vec<usize> = (0..self.k()).filter(|c| !drop.contains(c)).collect();
        let mut m = self.0.select_columns(&keep);
        for i in 0..m.nrows() {
            let row = m.row_mut(i);
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|t| *t /= s);
            } else {
                row.iter_mut().for_each(|t| *t = 1.0 / keep.len() as f64);
            }
        }
        Self(m)
    }
}

/// Hard cluster assignment of every voxel row, ids in `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    labels: Vec<usize>,
    k: usize,
}

impl Labeling {
    pub fn new(labels: Vec<usize>, k: usize) -> Self {
        debug_assert!(labels.iter().all(|&l| l < k));
        Self { labels, k }
    }

    /// Infers `k` as one past the largest id.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Self { labels, k }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == cluster).then_some(i))
            .collect()
    }

    /// Member mean of each cluster over the rows of `features` (`None` when empty).
    pub fn centroids(&self, features: &RowMatrix) -> Vec<Option<Vec<f64>>> {
        let p = features.ncols();
        let mut sums = vec![vec![0.0; p]; self.k];
        let sizes = self.sizes();
        for (row, &l) in features.rows().zip(&self.labels) {
            for (s, v) in sums[l].iter_mut().zip(row) {
                *s += v;
            }
        }
        sums.into_iter()
            .zip(sizes)
            .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
            .collect()
    }
}

/// Log-domain E-step. `log_terms(i, out)` fills `log(gate_k(v_i) f_k(obs_i))` for
/// every component. Returns normalized responsibilities, the per-row log
/// normalizers, and the number of rows that fell back to uniform.
pub(crate) fn expectation<F>(n: usize, k: usize, log_terms: F) -> (Responsibilities, Vec<f64>, usize)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let mut tau = RowMatrix::zeros(n, k);
    let mut row_ll = vec![0.0; n];
    let fallbacks: usize = tau
        .as_mut_slice()
        .par_chunks_mut(k * CHUNK)
        .zip(row_ll.par_chunks_mut(CHUNK))
        .enumerate()
        .map(|(c, (block, lls))| {
            let mut bad = 0;
            for (r, (row, ll)) in block.chunks_exact_mut(k).zip(lls.iter_mut()).enumerate() {
                log_terms(c * CHUNK + r, row);
                let lse = log_sum_exp(row);
                *ll = lse;
                if lse.is_finite() {
                    row.iter_mut().for_each(|t| *t = (*t - lse).exp());
                } else {
                    row.iter_mut().for_each(|t| *t = 1.0 / k as f64);
                    bad += 1;
                }
            }
            bad
        })
        .sum();
    if fallbacks > 0 {
        warn!("{fallbacks} voxel rows had no finite component density; using uniform responsibilities");
    }
    (Responsibilities::new_unchecked(tau), row_ll, fallbacks)
}

/// Sums per-row log normalizers in index order.
pub(crate) fn total(row_ll: &[f64]) -> f64 {
    row_ll.iter().sum()
}
