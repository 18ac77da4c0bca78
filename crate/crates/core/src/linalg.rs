//! Dense helpers shared by the mixture fitters: row-major storage, log-sum-exp,
//! Gaussian log-densities and covariance repair.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue floor used when repairing fitted covariances.
pub const SPD_REL_FLOOR: f64 = 1e-6;
/// Absolute eigenvalue floor for covariances whose scatter vanishes entirely.
pub const SPD_ABS_FLOOR: f64 = 1e-9;

/// Row-major dense matrix used for per-voxel data (curves, coefficients,
/// responsibilities). Rows are contiguous so they can be handed out as slices.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            data: vec![0.0; nrows * ncols],
        }
    }

    pub fn from_vec(nrows: usize, ncols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nrows * ncols {
            return Err(Error::invalid(format!(
                "row matrix payload has {} values, expected {}x{}",
                data.len(),
                nrows,
                ncols
            )));
        }
        Ok(Self { nrows, ncols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let ncols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != ncols {
                return Err(Error::invalid("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            nrows: rows.len(),
            ncols,
            data,
        })
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.ncols + j]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        let width = self.ncols.max(1);
        self.data.chunks_exact(width).take(self.nrows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.ncols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            nrows: rows.len(),
            ncols: self.ncols,
            data,
        }
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.nrows * cols.len());
        for r in self.rows() {
            data.extend(cols.iter().map(|&c| r[c]));
        }
        Self {
            nrows: self.nrows,
            ncols: cols.len(),
            data,
        }
    }
}

/// `log(sum(exp(xs)))`, stable against overflow. Returns `-inf` when every
/// entry is `-inf` (or the slice is empty).
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Multivariate normal with a cached Cholesky factor of its covariance.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    /// Lower-triangular Cholesky factor.
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if cov.nrows() != p || cov.ncols() != p {
            return Err(Error::invalid("covariance shape does not match mean"));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical("covariance is not positive definite"))?
            .unpack();
        let log_det: f64 = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::numerical("covariance determinant is not finite"));
        }
        let log_norm = -0.5 * (p as f64 * LN_2PI + log_det);
        Ok(Self { mean, chol, log_norm })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log-density at `x`. Forward substitution on the cached factor, no allocation
    /// beyond a small stack buffer for dimensions up to 32.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let p = self.mean.len();
        debug_assert_eq!(x.len(), p);
        let mut buf = [0.0f64; 32];
        let mut heap;
        let z: &mut [f64] = if p <= 32 {
            &mut buf[..p]
        } else {
            heap = vec![0.0; p];
            &mut heap
        };
        let mut quad = 0.0;
        for i in 0..p {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * z[j];
            }
            z[i] = s / self.chol[(i, i)];
            quad += z[i] * z[i];
        }
        self.log_norm - 0.5 * quad
    }

    /// Squared Mahalanobis distance of `x` from the mean.
    pub fn mahalanobis2(&self, x: &[f64]) -> f64 {
        -2.0 * (self.log_pdf(x) - self.log_norm)
    }
}

/// Symmetrizes `cov` and floors its eigenvalues at
/// `max(rel_floor * mean_eigenvalue, abs_floor)`.
pub fn repair_spd(cov: &DMatrix<f64>, rel_floor: f64, abs_floor: f64) -> DMatrix<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let p = sym.nrows();
    if p == 0 {
        return sym;
    }
    let eig = SymmetricEigen::new(sym.clone());
    let mean_eig = eig.eigenvalues.iter().map(|e| e.max(0.0)).sum::<f64>() / p as f64;
    let floor = (rel_floor * mean_eig).max(abs_floor);
    if eig.eigenvalues.iter().all(|&e| e >= floor) {
        return sym;
    }
    let floored = eig.eigenvalues.map(|e| e.max(floor));
    let v = &eig.eigenvectors;
    let repaired = v * DMatrix::from_diagonal(&floored) * v.transpose();
    (&repaired + repaired.transpose()) * 0.5
}

/// Covariance eigenvalue floor for mixtures over the rows of `x`:
/// `max(SPD_REL_FLOOR * mean_eigenvalue, SPD_ABS_FLOOR)` of the unweighted
/// scatter of all rows. It depends on the data only, so every M-step clips
/// against the same bound.
pub fn eigen_floor(x: &RowMatrix) -> f64 {
    let n = x.nrows();
    let p = x.ncols();
    if n == 0 || p == 0 {
        return SPD_ABS_FLOOR;
    }
    let sums = par_chunk_reduce(
        n,
        || vec![0.0; p],
        |acc, i| {
            for (a, v) in acc.iter_mut().zip(x.row(i)) {
                *a += v;
            }
        },
    );
    let mean: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
    let ss = par_chunk_reduce(
        n,
        || vec![0.0],
        |acc, i| {
            acc[0] += x
                .row(i)
                .iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>();
        },
    );
    (SPD_REL_FLOOR * ss[0] / (n * p) as f64).max(SPD_ABS_FLOOR)
}

/// Responsibility-weighted moments of one mixture component.
#[derive(Debug, Clone)]
pub struct WeightedMoments {
    pub mass: f64,
    pub mean: DVector<f64>,
    /// MLE scatter (divided by `mass`, not `mass - 1`).
    pub scatter: DMatrix<f64>,
}

/// Weighted means and scatters of the rows of `x` for every column of `weights`
/// (an `n x K` responsibility matrix). Two passes (mean, then centered scatter);
/// partial sums are combined in a fixed chunk order so the result does not depend
/// on the number of worker threads.
pub fn weighted_moments(x: &RowMatrix, weights: &RowMatrix) -> Vec<WeightedMoments> {
    assert_eq!(x.nrows(), weights.nrows());
    let p = x.ncols();
    let k = weights.ncols();
    let n = x.nrows();

    let sums = par_chunk_reduce(
        n,
        || vec![0.0; k * (p + 1)],
        |acc, i| {
            let xi = x.row(i);
            for (c, &w) in weights.row(i).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let base = c * (p + 1);
                acc[base] += w;
                for j in 0..p {
                    acc[base + 1 + j] += w * xi[j];
                }
            }
        },
    );
    let means: Vec<(f64, DVector<f64>)> = (0..k)
        .map(|c| {
            let base = c * (p + 1);
            let mass = sums[base];
            let mut mean = DVector::from_column_slice(&sums[base + 1..base + 1 + p]);
            if mass > 0.0 {
                mean /= mass;
            }
            (mass, mean)
        })
        .collect();

    let tri = p * (p + 1) / 2;
    let scat = par_chunk_reduce(
        n,
        || vec![0.0; k * tri],
        |acc, i| {
            let xi = x.row(i);
            let mut d = [0.0f64; 64];
            let mut heap;
            let dev: &mut [f64] = if p <= 64 {
                &mut d[..p]
            } else {
                heap = vec![0.0; p];
                &mut heap
            };
            for (c, &w) in weights.row(i).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let mean = &means[c].1;
                for j in 0..p {
                    dev[j] = xi[j] - mean[j];
                }
                let base = c * tri;
                let mut t = 0;
                for a in 0..p {
                    let wa = w * dev[a];
                    for b in 0..=a {
                        acc[base + t] += wa * dev[b];
                        t += 1;
                    }
                }
            }
        },
    );

    means
        .into_iter()
        .enumerate()
        .map(|(c, (mass, mean))| {
            let mut scatter = DMatrix::zeros(p, p);
            let base = c * tri;
            let mut t = 0;
            for a in 0..p {
                for b in 0..=a {
                    let v = if mass > 0.0 { scat[base + t] / mass } else { 0.0 };
                    scatter[(a, b)] = v;
                    scatter[(b, a)] = v;
                    t += 1;
                }
            }
            WeightedMoments { mass, mean, scatter }
        })
        .collect()
}

/// Rows per work unit in the chunked parallel reductions.
pub(crate) const CHUNK: usize = 1024;

/// Folds `0..n` in fixed-size chunks on the current rayon pool and adds the
/// per-chunk accumulators in chunk order.
pub(crate) fn par_chunk_reduce<I, F>(n: usize, init: I, fold: F) -> Vec<f64>
where
    I: Fn() -> Vec<f64> + Sync + Send,
    F: Fn(&mut Vec<f64>, usize) + Sync + Send,
{
    use rayon::prelude::*;
    let nchunks = n.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                fold(&mut acc, i);
            }
            acc
        })
        .collect();
    let mut total = init();
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}
