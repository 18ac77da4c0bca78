//! Spatial gating functions: softmax gates over bias-augmented coordinates and
//! normalized Gaussian gates, with their M-step updates.

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::linalg::{
    eigen_floor, log_sum_exp, par_chunk_reduce, repair_spd, weighted_moments, GaussianDensity, RowMatrix,
};
use crate::mixture::Responsibilities;

/// Clusters whose responsibility mass falls below this fraction of `n` are collapsed.
pub const COLLAPSE_FRACTION: f64 = 1e-8;
/// Gate weight given to a collapsed cluster.
pub const COLLAPSED_WEIGHT: f64 = 1e-8;

const NEWTON_MAX_ITER: usize = 50;
const NEWTON_GRAD_TOL: f64 = 1e-6;
const NEWTON_MAX_HALVINGS: usize = 20;

/// Softmax gate `π_k(v) ∝ exp(α_kᵀ(1, v))`; the last component is the zero reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxGate {
    alpha: Vec<[f64; 4]>,
    bias: bool,
}

impl SoftmaxGate {
    /// `alpha` holds the `K - 1` non-reference rows `(bias, a_x, a_y, a_z)`.
    pub fn new(alpha: Vec<[f64; 4]>, bias: bool) -> Result<Self> {
        if alpha.iter().flatten().any(|a| !a.is_finite()) {
            return Err(Error::invalid("softmax coefficients must be finite"));
        }
        if !bias && alpha.iter().any(|a| a[0] != 0.0) {
            return Err(Error::invalid("bias coefficient set on a bias-free gate"));
        }
        Ok(Self { alpha, bias })
    }

    /// All-zero coefficients: equal weights everywhere.
    pub fn uniform(k: usize, bias: bool) -> Self {
        Self {
            alpha: vec![[0.0; 4]; k.saturating_sub(1)],
            bias,
        }
    }

    pub fn k(&self) -> usize {
        self.alpha.len() + 1
    }

    pub fn alpha(&self) -> &[[f64; 4]] {
        &self.alpha
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    /// `log π_k(v)` for every component.
    pub fn log_weights(&self, v: &[f64], out: &mut [f64]) {
        let k = self.k();
        for (o, a) in out.iter_mut().zip(&self.alpha) {
            *o = a[0] + a[1] * v[0] + a[2] * v[1] + a[3] * v[2];
        }
        out[k - 1] = 0.0;
        let lse = log_sum_exp(&out[..k]);
        out[..k].iter_mut().for_each(|o| *o -= lse);
    }

    /// Re-expresses the gate with components reordered so that new component
    /// `j` is old component `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k();
        let full = |c: usize| if c + 1 == k { [0.0; 4] } else { self.alpha[c] };
        let reference = full(perm[k - 1]);
        let alpha = perm[..k - 1]
            .iter()
            .map(|&c| {
                let a = full(c);
                [0, 1, 2, 3].map(|j| a[j] - reference[j])
            })
            .collect();
        Self {
            alpha,
            bias: self.bias,
        }
    }

    /// Keeps only the listed components (ascending); the last kept one becomes
    /// the reference.
    pub(crate) fn retain(&self, keep: &[usize]) -> Self {
        let k = self.k();
        let full = |c: usize| if c + 1 == k { [0.0; 4] } else { self.alpha[c] };
        let reference = full(*keep.last().expect("at least one component"));
        let alpha = keep[..keep.len() - 1]
            .iter()
            .map(|&c| {
                let a = full(c);
                [0, 1, 2, 3].map(|j| a[j] - reference[j])
            })
            .collect();
        Self {
            alpha,
            bias: self.bias,
        }
    }
}

/// Softmax gate weights at one coordinate.
pub fn softmax_weights(gate: &SoftmaxGate, v: &[f64; 3]) -> Vec<f64> {
    let mut out = vec![0.0; gate.k()];
    gate.log_weights(v, &mut out);
    out.iter_mut().for_each(|o| *o = o.exp());
    out
}

/// Normalized Gaussian gate `π_k(v) ∝ w_k φ₃(v; μ_k, R_k)`.
#[derive(Debug, Clone)]
pub struct GaussianGate {
    weights: Vec<f64>,
    means: Vec<Vector3<f64>>,
    covs: Vec<Matrix3<f64>>,
    densities: Vec<GaussianDensity>,
}

impl PartialEq for GaussianGate {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights && self.means == other.means && self.covs == other.covs
    }
}

impl GaussianGate {
    pub fn new(weights: Vec<f64>, means: Vec<Vector3<f64>>, covs: Vec<Matrix3<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return Err(Error::invalid(
                "gate weights, means and covariances must have equal length",
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("gate weights must be non-negative"));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("gate weights sum to {s}, not 1")));
        }
        let densities = means
            .iter()
            .zip(&covs)
            .map(|(mu, r)| {
                let cov = DMatrix::from_iterator(3, 3, r.iter().copied());
                GaussianDensity::new(DVector::from_column_slice(mu.as_slice()), &cov)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights,
            means,
            covs,
            densities,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vector3<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Matrix3<f64>] {
        &self.covs
    }

    /// `log(w_k φ₃(v; μ_k, R_k))` for every component (unnormalized).
    pub fn log_joint(&self, v: &[f64], out: &mut [f64]) {
        for ((o, w), dens) in out.iter_mut().zip(&self.weights).zip(&self.densities) {
            *o = w.ln() + dens.log_pdf(v);
        }
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            weights: perm.iter().map(|&c| self.weights[c]).collect(),
            means: perm.iter().map(|&c| self.means[c]).collect(),
            covs: perm.iter().map(|&c| self.covs[c]).collect(),
            densities: perm.iter().map(|&c| self.densities[c].clone()).collect(),
        }
    }

    /// Keeps the listed components, renormalizing the weights.
    pub(crate) fn retain(&self, keep: &[usize]) -> Result<Self> {
        let mut weights: Vec<f64> = keep.iter().map(|&c| self.weights[c]).collect();
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        Self::new(
            weights,
            keep.iter().map(|&c| self.means[c]).collect(),
            keep.iter().map(|&c| self.covs[c]).collect(),
        )
    }
}

/// Gaussian gate weights at one coordinate. If every weighted density underflows,
/// the component with the nearest mean gets weight one.
pub fn gaussian_weights(gate: &GaussianGate, v: &[f64; 3]) -> Vec<f64> {
    let mut out = vec![0.0; gate.k()];
    gate.log_joint(v, &mut out);
    let lse = log_sum_exp(&out);
    if lse.is_finite() {
        out.iter_mut().for_each(|o| *o = (*o - lse).exp());
        return out;
    }
    let x = Vector3::from_column_slice(v);
    let nearest = gate
        .means
        .iter()
        .enumerate()
        .map(|(k, mu)| (k, (x - mu).norm_squared()))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
        .0;
    out.fill(0.0);
    out[nearest] = 1.0;
    out
}

/// Either gating family.
#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    Gaussian(GaussianGate),
    Softmax(SoftmaxGate),
}

impl Gate {
    pub fn k(&self) -> usize {
        match self {
            Gate::Gaussian(g) => g.k(),
            Gate::Softmax(g) => g.k(),
        }
    }

    /// Gate contribution to the E-step: `log w_k φ₃` for Gaussian gates (joint
    /// likelihood), `log π_k` for softmax gates (conditional likelihood).
    pub fn log_terms(&self, v: &[f64], out: &mut [f64]) {
        match self {
            Gate::Gaussian(g) => g.log_joint(v, out),
            Gate::Softmax(g) => g.log_weights(v, out),
        }
    }

    /// Normalized gate weights.
    pub fn weights(&self, v: &[f64; 3]) -> Vec<f64> {
        match self {
            Gate::Gaussian(g) => gaussian_weights(g, v),
            Gate::Softmax(g) => softmax_weights(g, v),
        }
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        match self {
            Gate::Gaussian(g) => Gate::Gaussian(g.permuted(perm)),
            Gate::Softmax(g) => Gate::Softmax(g.permuted(perm)),
        }
    }

    pub(crate) fn retain(&self, keep: &[usize]) -> Result<Self> {
        Ok(match self {
            Gate::Gaussian(g) => Gate::Gaussian(g.retain(keep)?),
            Gate::Softmax(g) => Gate::Softmax(g.retain(keep)),
        })
    }
}

/// Result of a gate M-step.
#[derive(Debug, Clone)]
pub struct GateUpdate<G> {
    pub gate: G,
    /// Components whose responsibility mass fell below `COLLAPSE_FRACTION * n`.
    pub collapsed: Vec<usize>,
}

/// Closed-form Gaussian gate M-step with the spatial covariance shrunk by `lambda`.
///
/// Collapsed components keep the mean and covariance of `prev` (or the global
/// moments when there is no previous gate) and get weight `COLLAPSED_WEIGHT`.
pub fn update_gaussian_gate(
    coords: &RowMatrix,
    tau: &Responsibilities,
    lambda: f64,
    prev: Option<&GaussianGate>,
) -> Result<GateUpdate<GaussianGate>> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    let n = coords.nrows();
    if tau.n() != n || coords.ncols() != 3 {
        return Err(Error::invalid(
            "coordinates and responsibilities disagree in shape",
        ));
    }
    let moments = weighted_moments(coords, tau.matrix());
    let floor = eigen_floor(coords);
    let threshold = COLLAPSE_FRACTION * n as f64;
    let collapsed: Vec<usize> = moments
        .iter()
        .enumerate()
        .filter_map(|(k, m)| (m.mass < threshold).then_some(k))
        .collect();

    let fallback = if !collapsed.is_empty() && prev.is_none() {
        let all = Responsibilities::uniform(n, 1);
        Some(weighted_moments(coords, all.matrix()).remove(0))
    } else {
        None
    };

    let mut weights = Vec::with_capacity(moments.len());
    let mut means = Vec::with_capacity(moments.len());
    let mut covs = Vec::with_capacity(moments.len());
    for (k, m) in moments.iter().enumerate() {
        if collapsed.contains(&k) {
            weights.push(COLLAPSED_WEIGHT.max(m.mass / n as f64));
            if let Some(p) = prev {
                means.push(p.means[k]);
                covs.push(p.covs[k]);
            } else {
                let g = fallback.as_ref().expect("global moments");
                means.push(Vector3::from_column_slice(g.mean.as_slice()));
                covs.push(to_matrix3(&repair_spd(&(&g.scatter * lambda), 0.0, floor)));
            }
        } else {
            weights.push(m.mass / n as f64);
            means.push(Vector3::from_column_slice(m.mean.as_slice()));
            covs.push(to_matrix3(&repair_spd(&(&m.scatter * lambda), 0.0, floor)));
        }
    }
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    Ok(GateUpdate {
        gate: GaussianGate::new(weights, means, covs)?,
        collapsed,
    })
}

fn to_matrix3(m: &DMatrix<f64>) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[(i, j)])
}

/// Outcome of the softmax Newton-Raphson M-step.
#[derive(Debug, Clone)]
pub struct SoftmaxUpdate {
    pub gate: SoftmaxGate,
    /// Weighted log-likelihood `Σ_i Σ_k τ_ik log π_k(v_i)` at the returned gate.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `Σ_i Σ_k τ_ik log π_k(v_i; α)`.
pub fn softmax_objective(coords: &RowMatrix, tau: &Responsibilities, gate: &SoftmaxGate) -> f64 {
    let k = gate.k();
    par_chunk_reduce(
        coords.nrows(),
        || vec![0.0],
        |acc, i| {
            let mut lw = vec![0.0; k];
            gate.log_weights(coords.row(i), &mut lw);
            acc[0] += tau
                .row(i)
                .iter()
                .zip(&lw)
                .map(|(t, l)| if *t == 0.0 { 0.0 } else { t * l })
                .sum::<f64>();
        },
    )[0]
}

/// Damped Newton-Raphson ascent on the weighted multinomial-logistic
/// log-likelihood, starting from `gate0`.
pub fn update_softmax_gate(
    coords: &RowMatrix,
    tau: &Responsibilities,
    gate0: &SoftmaxGate,
) -> Result<SoftmaxUpdate> {
    let k = gate0.k();
    if tau.k() != k || tau.n() != coords.nrows() {
        return Err(Error::invalid("responsibilities do not match the gate"));
    }
    let mut gate = gate0.clone();
    let mut obj = softmax_objective(coords, tau, &gate);
    if !obj.is_finite() {
        warn!("softmax objective is not finite at the starting gate; keeping it");
        return Ok(SoftmaxUpdate {
            gate,
            objective: obj,
            iterations: 0,
            converged: false,
        });
    }
    if k == 1 {
        return Ok(SoftmaxUpdate {
            gate,
            objective: obj,
            iterations: 0,
            converged: true,
        });
    }
    let first = if gate.bias { 0 } else { 1 };
    let p = 4 - first;
    let dim = (k - 1) * p;

    for iter in 0..NEWTON_MAX_ITER {
        let (grad, hess) = gradient_hessian(coords, tau, &gate, first);
        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if gmax < NEWTON_GRAD_TOL {
            return Ok(SoftmaxUpdate {
                gate,
                objective: obj,
                iterations: iter,
                converged: true,
            });
        }
        let step = newton_direction(hess, &grad, dim)?;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=NEWTON_MAX_HALVINGS {
            let mut alpha = gate.alpha.clone();
            for c in 0..k - 1 {
                for j in 0..p {
                    alpha[c][first + j] += scale * step[c * p + j];
                }
            }
            if alpha.iter().flatten().all(|a| a.is_finite()) {
                let cand = SoftmaxGate {
                    alpha,
                    bias: gate.bias,
                };
                let cand_obj = softmax_objective(coords, tau, &cand);
                if cand_obj.is_finite() && cand_obj >= obj {
                    let gain = cand_obj - obj;
                    gate = cand;
                    obj = cand_obj;
                    accepted = true;
                    if gain == 0.0 {
                        // no representable progress left
                        return Ok(SoftmaxUpdate {
                            gate,
                            objective: obj,
                            iterations: iter + 1,
                            converged: true,
                        });
                    }
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            return Ok(SoftmaxUpdate {
                gate,
                objective: obj,
                iterations: iter + 1,
                converged: false,
            });
        }
    }
    Ok(SoftmaxUpdate {
        gate,
        objective: obj,
        iterations: NEWTON_MAX_ITER,
        converged: false,
    })
}

/// Gradient and negated Hessian (positive semi-definite) of the softmax objective.
fn gradient_hessian(
    coords: &RowMatrix,
    tau: &Responsibilities,
    gate: &SoftmaxGate,
    first: usize,
) -> (Vec<f64>, Vec<f64>) {
    let k = gate.k();
    let p = 4 - first;
    let dim = (k - 1) * p;
    let acc = par_chunk_reduce(
        coords.nrows(),
        || vec![0.0; dim + dim * dim],
        |acc, i| {
            let v = coords.row(i);
            let full = [1.0, v[0], v[1], v[2]];
            let x = &full[first..];
            let mut pi = vec![0.0; k];
            gate.log_weights(v, &mut pi);
            pi.iter_mut().for_each(|l| *l = l.exp());
            let t = tau.row(i);
            let row_mass: f64 = t.iter().sum();
            let (g, h) = acc.split_at_mut(dim);
            for a in 0..k - 1 {
                let r = t[a] - row_mass * pi[a];
                for j in 0..p {
                    g[a * p + j] += r * x[j];
                }
                for b in 0..=a {
                    let w = row_mass * pi[a] * (if a == b { 1.0 } else { 0.0 } - pi[b]);
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..p {
                        let wx = w * x[j];
                        let row = (a * p + j) * dim;
                        for l in 0..p {
                            h[row + b * p + l] += wx * x[l];
                        }
                    }
                }
            }
        },
    );
    let grad = acc[..dim].to_vec();
    let mut hess = acc[dim..].to_vec();
    // only blocks with b <= a were accumulated
    for r in 0..dim {
        for c in r + 1..dim {
            let (ra, ca) = (r / p, c / p);
            if ca > ra {
                hess[r * dim + c] = hess[c * dim + r];
            }
        }
    }
    (grad, hess)
}

fn newton_direction(hess: Vec<f64>, grad: &[f64], dim: usize) -> Result<Vec<f64>> {
    let a = DMatrix::from_row_slice(dim, dim, &hess);
    let a = (&a + a.transpose()) * 0.5;
    let g = DVector::from_column_slice(grad);
    let scale = (a.trace() / dim as f64).abs().max(1e-300);
    let mut ridge = 1e-10 * scale;
    for _ in 0..12 {
        let reg = &a + DMatrix::identity(dim, dim) * ridge;
        if let Some(ch) = reg.cholesky() {
            let step = ch.solve(&g);
            if step.iter().all(|s| s.is_finite()) {
                return Ok(step.iter().copied().collect());
            }
        }
        ridge *= 100.0;
    }
    Err(Error::numerical("softmax Newton system could not be solved"))
}
