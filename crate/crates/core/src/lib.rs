//! Spatially gated mixtures of functional regressions for clustering spectral
//! CT volumes, with the evaluation metrics and baselines used to compare them.
//!
//! Each voxel carries an attenuation curve sampled at a set of energies and a
//! grid position. A model assigns voxels to `K` clusters through a spatial
//! gate (normalized Gaussian or softmax) and per-cluster experts (functional
//! regressions on a polynomial or B-spline basis, or Gaussians on per-voxel
//! least-squares coefficients), fitted by EM.
//!
//! ```no_run
//! use specmix::{fmr, FitConfig, PhantomConfig, Variant, synth_phantom};
//!
//! let phantom = synth_phantom(&PhantomConfig::new([30, 30, 4], 3, 10.0, 1))?;
//! let (params, report) = fmr::fit(&phantom.volume, &FitConfig::new(Variant::SgMFR, 3))?;
//! let labels = fmr::label(&phantom.volume, &params)?;
//! # Ok::<(), specmix::Error>(())
//! ```

pub mod baselines;
pub mod basis;
pub mod cli;
mod em;
pub mod error;
pub mod fmr;
pub mod gating;
pub mod init;
pub mod linalg;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod model_file;
pub mod twofold;
pub mod volume;

pub use error::{Error, Result};
pub use mixture::{Labeling, Responsibilities};
pub use model::{FitConfig, FitReport, ModelParams, Variant};
pub use volume::{synth_phantom, PhantomConfig, SpectralVolume};
