//! Two-fold variants (SgMVFR / SsMVFR): per-voxel OLS coefficients first, then a
//! spatially gated Gaussian mixture on those coefficient vectors.
//!
//! The E-step normalizes the joint density `f(v, β̂)` for Gaussian gates; for
//! softmax gates it normalizes `f(β̂ | v)`. Both give the same memberships
//! since they differ by a factor constant in `k`.

use crate::basis::vectorize_volume;
use crate::em::{self, GaussianFamily};
use crate::error::{Error, Result};
use crate::linalg::RowMatrix;
use crate::mixture::Responsibilities;
use crate::model::{CoefComponent, Experts, FitConfig, FitReport, ModelParams};
use crate::volume::SpectralVolume;

/// Weighted mean and repaired scatter of coefficient vectors per component.
pub fn m_step_coef(coefs: &RowMatrix, tau: &Responsibilities) -> Result<Vec<CoefComponent>> {
    m_step_coef_with(coefs, tau, false)
}

/// As [`m_step_coef`], optionally restricted to diagonal covariances.
pub fn m_step_coef_with(
    coefs: &RowMatrix,
    tau: &Responsibilities,
    diagonal: bool,
) -> Result<Vec<CoefComponent>> {
    if tau.n() != coefs.nrows() {
        return Err(Error::invalid(
            "responsibilities do not match the coefficient rows",
        ));
    }
    em::gaussian_components(coefs, tau, None, &[], diagonal)
}

/// Fits SgMVFR or SsMVFR.
pub fn fit_twofold(vol: &SpectralVolume, config: &FitConfig) -> Result<(ModelParams, FitReport)> {
    if !config.variant.is_twofold() {
        return Err(Error::invalid(format!(
            "{} is a simultaneous variant; use fmr::fit",
            config.variant.name()
        )));
    }
    config.validate(vol.n())?;
    em::with_threads(config.threads, || {
        let coefs = vectorize_volume(vol, config.basis)?;
        fit_coefficients(vol, &coefs, config)
    })?
}

/// Stage two alone: EM on precomputed coefficients and the volume's coordinates.
pub fn fit_coefficients(
    vol: &SpectralVolume,
    coefs: &RowMatrix,
    config: &FitConfig,
) -> Result<(ModelParams, FitReport)> {
    if coefs.nrows() != vol.n() || coefs.ncols() != config.basis.dim() {
        return Err(Error::invalid(
            "coefficient matrix does not match volume and basis",
        ));
    }
    let family = GaussianFamily {
        data: coefs,
        diagonal: config.diagonal_cov,
    };
    em::fit_family(&family, vol, config, Experts::Coefficient)
}
