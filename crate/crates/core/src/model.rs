//! Fitted parameter sets and fitting configuration for the spatial mixtures.

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::gating::Gate;
use crate::volume::CoordFrame;

/// Default number of clusters.
pub const DEFAULT_K: usize = 40;
/// Default shrinkage of the spatial covariance update.
pub const DEFAULT_LAMBDA: f64 = 0.075;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 500;
/// Lower bound on regression noise variances (HU²).
pub const SIGMA2_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateFamily {
    Gaussian,
    Softmax,
}

/// Model family: gate type crossed with simultaneous vs two-fold fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Gaussian-gated mixture of functional regressions.
    SgMFR,
    /// Softmax-gated mixture of functional regressions.
    SsMFR,
    /// Gaussian-gated mixture on per-voxel OLS coefficients.
    SgMVFR,
    /// Softmax-gated mixture on per-voxel OLS coefficients.
    SsMVFR,
}

impl Variant {
    pub fn gate_family(self) -> GateFamily {
        match self {
            Variant::SgMFR | Variant::SgMVFR => GateFamily::Gaussian,
            Variant::SsMFR | Variant::SsMVFR => GateFamily::Softmax,
        }
    }

    pub fn is_twofold(self) -> bool {
        matches!(self, Variant::SgMVFR | Variant::SsMVFR)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::SgMFR => "SgMFR",
            Variant::SsMFR => "SsMFR",
            Variant::SgMVFR => "SgMVFR",
            Variant::SsMVFR => "SsMVFR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "SgMFR" => Some(Variant::SgMFR),
            "SsMFR" => Some(Variant::SsMFR),
            "SgMVFR" => Some(Variant::SgMVFR),
            "SsMVFR" => Some(Variant::SsMVFR),
            _ => None,
        }
    }
}

/// One functional regression expert: mean curve `B β`, isotropic noise `σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionComponent {
    pub beta: DVector<f64>,
    pub sigma2: f64,
}

/// One Gaussian expert over OLS coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefComponent {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Experts {
    Regression(Vec<RegressionComponent>),
    Coefficient(Vec<CoefComponent>),
}

impl Experts {
    pub fn k(&self) -> usize {
        match self {
            Experts::Regression(c) => c.len(),
            Experts::Coefficient(c) => c.len(),
        }
    }

    fn permuted(&self, perm: &[usize]) -> Self {
        match self {
            Experts::Regression(c) => Experts::Regression(perm.iter().map(|&j| c[j].clone()).collect()),
            Experts::Coefficient(c) => Experts::Coefficient(perm.iter().map(|&j| c[j].clone()).collect()),
        }
    }
}

/// Complete parameter set of a fitted spatial mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    pub gate: Gate,
    pub experts: Experts,
    pub basis: BasisSpec,
    pub lambda: f64,
    /// Map from voxel-index coordinates to the frame the gate lives in.
    pub coord_frame: CoordFrame,
}

impl ModelParams {
    pub fn k(&self) -> usize {
        self.gate.k()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gate.k() != self.experts.k() {
            return Err(Error::invalid(format!(
                "gate has {} components but there are {} experts",
                self.gate.k(),
                self.experts.k()
            )));
        }
        let gate_ok = matches!(
            (&self.gate, self.variant.gate_family()),
            (Gate::Gaussian(_), GateFamily::Gaussian) | (Gate::Softmax(_), GateFamily::Softmax)
        );
        let experts_ok = matches!(
            (&self.experts, self.variant.is_twofold()),
            (Experts::Regression(_), false) | (Experts::Coefficient(_), true)
        );
        if !gate_ok || !experts_ok {
            return Err(Error::invalid(format!(
                "parameters do not match variant {}",
                self.variant.name()
            )));
        }
        let d = self.basis.dim();
        let dims_ok = match &self.experts {
            Experts::Regression(c) => c.iter().all(|r| r.beta.len() == d && r.sigma2 > 0.0),
            Experts::Coefficient(c) => c
                .iter()
                .all(|r| r.mean.len() == d && r.cov.nrows() == d && r.cov.ncols() == d),
        };
        if !dims_ok {
            return Err(Error::invalid(
                "expert parameters do not match the basis dimension",
            ));
        }
        Ok(())
    }

    /// Same model with components reordered: new component `j` is old `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            gate: self.gate.permuted(perm),
            experts: self.experts.permuted(perm),
            ..self.clone()
        }
    }
}

/// Settings for [`crate::fmr::fit`] and [`crate::twofold::fit_twofold`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub variant: Variant,
    pub k: usize,
    pub basis: BasisSpec,
    pub lambda: f64,
    pub max_iter: usize,
    /// Relative log-likelihood change that counts as converged.
    pub tol: f64,
    /// Standardize coordinates per axis before they enter the gate.
    pub standardize_coords: bool,
    /// Physical voxel spacing used by the spatial k-means initialization.
    pub spacing: [f64; 3],
    /// `None`: lattice-seeded k-means. `Some`: randomly seeded k-means.
    pub seed: Option<u64>,
    /// Extra randomly seeded attempts after a numerical failure.
    pub restarts: usize,
    /// Delete collapsed clusters instead of freezing them.
    pub drop_collapsed: bool,
    /// Diagonal coefficient covariances (two-fold variants).
    pub diagonal_cov: bool,
    /// Intercept in the softmax gate.
    pub softmax_bias: bool,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub threads: Option<usize>,
}

impl FitConfig {
    pub fn new(variant: Variant, k: usize) -> Self {
        Self {
            variant,
            k,
            basis: BasisSpec::default(),
            lambda: DEFAULT_LAMBDA,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            standardize_coords: true,
            spacing: [1.0; 3],
            seed: None,
            restarts: 0,
            drop_collapsed: false,
            diagonal_cov: false,
            softmax_bias: true,
            threads: None,
        }
    }

    pub fn with_basis(mut self, basis: BasisSpec) -> Self {
        self.basis = basis;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub(crate) fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if n == 0 {
            return Err(Error::invalid("volume has no voxels"));
        }
        if self.k > n {
            return Err(Error::invalid(format!("k = {} exceeds the {n} voxels", self.k)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::invalid(format!(
                "lambda must lie in (0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("tol must be non-negative"));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("voxel spacing must be positive"));
        }
        Ok(())
    }
}

/// Trace and bookkeeping of one EM run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitReport {
    /// Log-likelihood of every parameter iterate, starting with the initialization.
    pub loglik_trace: Vec<f64>,
    /// Number of M-steps performed.
    pub iterations: usize,
    pub converged: bool,
    /// Components flagged as collapsed at any iteration (indices at that time).
    pub collapsed_clusters: Vec<usize>,
    /// Randomly seeded restarts used after numerical failures.
    pub restarts_used: usize,
}

impl FitReport {
    pub fn final_loglik(&self) -> Option<f64> {
        self.loglik_trace.last().copied()
    }
}
