//! Reference clusterings: a spectral-only Gaussian mixture and k-means on
//! concatenated spatial and spectral features.

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::init::{lloyd, voronoi_partition};
use crate::linalg::{eigen_floor, repair_spd, weighted_moments, GaussianDensity, RowMatrix};
use crate::mixture::{expectation, total, Labeling, Responsibilities};
use crate::volume::SpectralVolume;

/// Initial component count of the spectral mixture.
pub const DEFAULT_GMM_COMPONENTS: usize = 150;
/// Cluster count of the joint k-means baseline.
pub const DEFAULT_KMEANS_CLUSTERS: usize = 40;

const GMM_TOL: f64 = 1e-6;
const GMM_MAX_ITER: usize = 500;
const PRUNE_FRACTION: f64 = 1e-8;
const LLOYD_MAX_ITER: usize = 300;

/// Full-covariance Gaussian mixture over attenuation curves.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Responsibilities and per-row log-likelihood of `curves`.
    pub fn evaluate(&self, curves: &RowMatrix) -> Result<(Responsibilities, Vec<f64>)> {
        if self.means.iter().any(|m| m.len() != curves.ncols()) {
            return Err(Error::invalid("mixture dimension does not match the curves"));
        }
        let dens = self
            .means
            .iter()
            .zip(&self.covariances)
            .map(|(m, c)| GaussianDensity::new(m.clone(), c))
            .collect::<Result<Vec<_>>>()?;
        let logw: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        let (tau, row_ll, _) = expectation(curves.nrows(), self.k(), |i, out| {
            let y = curves.row(i);
            for (o, (d, lw)) in out.iter_mut().zip(dens.iter().zip(&logw)) {
                *o = lw + d.log_pdf(y);
            }
        });
        Ok((tau, row_ll))
    }

    pub fn label(&self, curves: &RowMatrix) -> Result<Labeling> {
        Ok(self.evaluate(curves)?.0.labels())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    pub labeling: Labeling,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub pruned: usize,
}

/// Farthest-first traversal from the row nearest the global mean.
fn farthest_first(points: &RowMatrix, k: usize) -> Vec<Vec<f64>> {
    let n = points.nrows();
    let p = points.ncols();
    let mut mean = vec![0.0; p];
    for r in points.rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let first = (0..n).fold(0, |b, i| {
        if d2(points.row(i), &mean) < d2(points.row(b), &mean) {
            i
        } else {
            b
        }
    });
    let mut centers = vec![points.row(first).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| d2(points.row(i), &centers[0])).collect();
    while centers.len() < k {
        let far = (0..n).fold(0, |b, i| if nearest[i] > nearest[b] { i } else { b });
        let c = points.row(far).to_vec();
        for i in 0..n {
            nearest[i] = nearest[i].min(d2(points.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn gmm_m_step(curves: &RowMatrix, tau: &Responsibilities, floor: f64) -> Result<GmmModel> {
    let n = curves.nrows() as f64;
    let moments = weighted_moments(curves, tau.matrix());
    if let Some(c) = moments.iter().position(|m| !(m.mass > 0.0)) {
        return Err(Error::numerical(format!("mixture component {c} has no mass")));
    }
    Ok(GmmModel {
        weights: moments.iter().map(|m| m.mass / n).collect(),
        covariances: moments
            .iter()
            .map(|m| repair_spd(&m.scatter, 0.0, floor))
            .collect(),
        means: moments.into_iter().map(|m| m.mean).collect(),
    })
}

/// EM for a Gaussian mixture on curves alone, seeded by farthest-first
/// traversal refined with Lloyd iterations. Components whose responsibility
/// mass falls below `1e-8 n` are removed.
pub fn gmm_spectral(vol: &SpectralVolume, k0: usize) -> Result<GmmFit> {
    let curves = vol.curves();
    let n = curves.nrows();
    if k0 == 0 || k0 > n {
        return Err(Error::invalid(format!(
            "cannot fit {k0} mixture components to {n} voxels"
        )));
    }
    let floor = eigen_floor(curves);
    let seeds = lloyd(curves, farthest_first(curves, k0), LLOYD_MAX_ITER)?;
    let mut model = gmm_m_step(curves, &Responsibilities::one_hot(&seeds.labels, k0), floor)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut pruned = 0;
    let tau = loop {
        let (tau, row_ll) = model.evaluate(curves)?;
        let ll = total(&row_ll);
        if !ll.is_finite() {
            return Err(Error::Diverged { trace });
        }
        if let Some(&prev) = trace.last() {
            if (ll - prev).abs() / prev.abs().max(1.0) < GMM_TOL {
                trace.push(ll);
                converged = true;
                break tau;
            }
        }
        trace.push(ll);
        if iterations == GMM_MAX_ITER {
            break tau;
        }
        let masses = tau.masses();
        let dead: Vec<usize> = (0..masses.len())
            .filter(|&c| masses[c] < PRUNE_FRACTION * n as f64)
            .collect();
        let tau = if dead.is_empty() {
            tau
        } else {
            if dead.len() == masses.len() {
                return Err(Error::numerical("every mixture component collapsed"));
            }
            debug!("pruning {} empty mixture components", dead.len());
            pruned += dead.len();
            tau.without_columns(&dead)
        };
        model = gmm_m_step(curves, &tau, floor)?;
        iterations += 1;
    };
    Ok(GmmFit {
        labeling: tau.labels(),
        model,
        loglik_trace: trace,
        iterations,
        converged,
        pruned,
    })
}

/// Column means and population standard deviations (zero spread maps to 1).
fn column_stats(x: &RowMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    let p = x.ncols();
    let mut mean = vec![0.0; p];
    for r in x.rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; p];
    for r in x.rows() {
        for j in 0..p {
            var[j] += (r[j] - mean[j]).powi(2);
        }
    }
    let sd = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

/// Affine feature map for the joint k-means: z-scored coordinates times a
/// spatial weight, followed by z-scored curves.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFeatures {
    pub spatial_weight: f64,
    pub coord_mean: Vec<f64>,
    pub coord_scale: Vec<f64>,
    pub curve_mean: Vec<f64>,
    pub curve_scale: Vec<f64>,
}

impl JointFeatures {
    pub fn fit(vol: &SpectralVolume, spatial_weight: f64) -> Self {
        let (coord_mean, coord_scale) = column_stats(&vol.coords());
        let (curve_mean, curve_scale) = column_stats(vol.curves());
        Self {
            spatial_weight,
            coord_mean,
            coord_scale,
            curve_mean,
            curve_scale,
        }
    }

    pub fn dim(&self) -> usize {
        3 + self.curve_mean.len()
    }

    pub fn apply(&self, vol: &SpectralVolume) -> Result<RowMatrix> {
        if vol.m() != self.curve_mean.len() {
            return Err(Error::invalid("feature map does not match the volume's energies"));
        }
        let p = self.dim();
        let mut out = RowMatrix::zeros(vol.n(), p);
        for i in 0..vol.n() {
            let c = vol.coord(i);
            let row = out.row_mut(i);
            for a in 0..3 {
                row[a] = self.spatial_weight * (c[a] - self.coord_mean[a]) / self.coord_scale[a];
            }
            for (j, y) in vol.curve(i).iter().enumerate() {
                row[3 + j] = (y - self.curve_mean[j]) / self.curve_scale[j];
            }
        }
        Ok(out)
    }
}

/// Nearest-center model in the joint feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub features: JointFeatures,
    pub centers: Vec<Vec<f64>>,
}

impl KMeansModel {
    pub fn label(&self, vol: &SpectralVolume) -> Result<Labeling> {
        let x = self.features.apply(vol)?;
        let labels = x
            .rows()
            .map(|r| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in self.centers.iter().enumerate() {
                    let d: f64 = r.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect();
        Ok(Labeling::new(labels, self.centers.len()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub model: KMeansModel,
    pub labeling: Labeling,
    /// Within-cluster sum of squares after each assignment step.
    pub sse_trace: Vec<f64>,
}

/// Lloyd's k-means on `[w · z(coords), z(curves)]`, started from the centroids
/// of the spatial Voronoi initialization.
pub fn kmeans_joint(vol: &SpectralVolume, k: usize, spatial_weight: f64) -> Result<KMeansFit> {
    if !(spatial_weight >= 0.0) || !spatial_weight.is_finite() {
        return Err(Error::invalid("spatial weight must be finite and non-negative"));
    }
    let features = JointFeatures::fit(vol, spatial_weight);
    let x = features.apply(vol)?;
    let init = voronoi_partition(&vol.coords(), k, [1.0; 3], None)?;
    let centers = init
        .centroids(&x)
        .into_iter()
        .map(|c| c.expect("spatial initialization leaves no empty cell"))
        .collect();
    let res = lloyd(&x, centers, LLOYD_MAX_ITER)?;
    Ok(KMeansFit {
        labeling: Labeling::new(res.labels, k),
        model: KMeansModel {
            features,
            centers: res.centers,
        },
        sse_trace: res.sse_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_populations() -> SpectralVolume {
        let dims = [6, 4, 1];
        let energies = vec![40.0, 60.0, 80.0];
        let mut curves = Vec::new();
        for g in 0..24 {
            let (x, y) = (g % 6, g / 6);
            let base = if x < 3 { 0.0 } else { 200.0 };
            let jitter = ((x * 7 + y * 3) % 5) as f64;
            curves.extend([base + jitter, base - jitter, base + 0.5 * jitter]);
        }
        let curves = RowMatrix::from_vec(24, 3, curves).unwrap();
        SpectralVolume::new(dims, energies, vec![true; 24], curves).unwrap()
    }

    #[test]
    fn gmm_separates_two_populations() {
        let vol = two_populations();
        let fit = gmm_spectral(&vol, 2).unwrap();
        let truth: Vec<usize> = (0..24).map(|g| usize::from(g % 6 >= 3)).collect();
        let ari = crate::metrics::adjusted_rand(fit.labeling.labels(), &truth).unwrap();
        assert_eq!(ari, 1.0);
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn single_component_is_global_mean() {
        let vol = two_populations();
        let fit = gmm_spectral(&vol, 1).unwrap();
        let global: Vec<f64> = (0..3)
            .map(|j| (0..24).map(|i| vol.curve(i)[j]).sum::<f64>() / 24.0)
            .collect();
        for j in 0..3 {
            assert!((fit.model.means[0][j] - global[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn kmeans_sse_never_increases() {
        let vol = two_populations();
        let fit = kmeans_joint(&vol, 3, 1.0).unwrap();
        for w in fit.sse_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert_eq!(fit.model.label(&vol).unwrap(), fit.labeling);
    }
}
