//! Simultaneous EM for spatially gated mixtures of functional regressions
//! (Gaussian gates: SgMFR, softmax gates: SsMFR).

use crate::basis::BasisSpec;
use crate::em::{self, Family, RegressionFamily};
use crate::error::{Error, Result};
use crate::mixture::{total, Labeling, Responsibilities};
use crate::model::{Experts, FitConfig, FitReport, ModelParams, RegressionComponent};
use crate::volume::SpectralVolume;

/// Joint (Gaussian gate) or conditional (softmax gate) log-likelihood.
pub fn log_likelihood(vol: &SpectralVolume, params: &ModelParams) -> Result<f64> {
    let (_, row_ll) = em::evaluate(vol, params)?;
    Ok(total(&row_ll))
}

/// Posterior memberships `τ_ik ∝ gate_k(v_i) f_k(y_i)`.
pub fn e_step(vol: &SpectralVolume, params: &ModelParams) -> Result<Responsibilities> {
    Ok(em::evaluate(vol, params)?.0)
}

/// Closed-form regression update from responsibilities, with no previous
/// state: every cluster needs positive responsibility mass.
pub fn m_step_regression(
    vol: &SpectralVolume,
    tau: &Responsibilities,
    spec: BasisSpec,
) -> Result<Vec<RegressionComponent>> {
    if tau.n() != vol.n() {
        return Err(Error::invalid("responsibilities do not match the volume"));
    }
    let family = RegressionFamily::new(vol, spec)?;
    family.m_step(tau, None, &[])
}

/// Bayes allocation under fitted parameters.
pub fn label(vol: &SpectralVolume, params: &ModelParams) -> Result<Labeling> {
    Ok(e_step(vol, params)?.labels())
}

/// Fits SgMFR or SsMFR: Voronoi initialization, then EM to convergence.
pub fn fit(vol: &SpectralVolume, config: &FitConfig) -> Result<(ModelParams, FitReport)> {
    if config.variant.is_twofold() {
        return Err(Error::invalid(format!(
            "{} is a two-fold variant; use fit_twofold",
            config.variant.name()
        )));
    }
    config.validate(vol.n())?;
    em::with_threads(config.threads, || fit_inner(vol, config))?
}

fn fit_inner(vol: &SpectralVolume, config: &FitConfig) -> Result<(ModelParams, FitReport)> {
    let family = RegressionFamily::new(vol, config.basis)?;
    em::fit_family(&family, vol, config, Experts::Regression)
}
