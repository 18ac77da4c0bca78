//! Generic EM driver for spatially gated mixtures, plus the two expert
//! families (functional regressions and Gaussians on coefficient vectors).

use log::{debug, warn};
use nalgebra::DMatrix;

use crate::basis::{build_design, vectorize_volume, OlsProjector};
use crate::error::{Error, Result};
use crate::gating::{update_gaussian_gate, update_softmax_gate, Gate, SoftmaxGate, COLLAPSE_FRACTION};
use crate::linalg::{
    eigen_floor, par_chunk_reduce, repair_spd, weighted_moments, GaussianDensity, RowMatrix, LN_2PI,
};
use crate::mixture::{expectation, total, Responsibilities};
use crate::model::{CoefComponent, Experts, GateFamily, ModelParams, RegressionComponent, SIGMA2_FLOOR};
use crate::volume::SpectralVolume;

/// Component densities of one mixture family over a fixed data set.
pub(crate) trait Family: Sync {
    type Component: Clone + Send + Sync;
    type Prepared: Sync;

    fn n(&self) -> usize;

    fn prepare(&self, comps: &[Self::Component]) -> Result<Self::Prepared>;

    /// Adds `log f_k(obs_i)` to `out[k]` for every component.
    fn add_log_density(&self, prep: &Self::Prepared, i: usize, out: &mut [f64]);

    /// Closed-form component update. Components listed in `frozen` keep their
    /// value from `prev`.
    fn m_step(
        &self,
        tau: &Responsibilities,
        prev: Option<&[Self::Component]>,
        frozen: &[usize],
    ) -> Result<Vec<Self::Component>>;
}

/// Functional Gaussian regressions `φ_m(y; Bβ_k, σ_k² I)` on a shared design.
pub(crate) struct RegressionFamily<'a> {
    pub curves: &'a RowMatrix,
    pub proj: OlsProjector,
}

pub(crate) struct PreparedRegression {
    means: Vec<Vec<f64>>,
    inv_two_var: Vec<f64>,
    log_norm: Vec<f64>,
}

impl<'a> RegressionFamily<'a> {
    pub fn new(vol: &'a SpectralVolume, basis: crate::basis::BasisSpec) -> Result<Self> {
        let design = build_design(vol.energies(), basis)?;
        Ok(Self {
            curves: vol.curves(),
            proj: OlsProjector::new(&design, true)?,
        })
    }
}

impl Family for RegressionFamily<'_> {
    type Component = RegressionComponent;
    type Prepared = PreparedRegression;

    fn n(&self) -> usize {
        self.curves.nrows()
    }

    fn prepare(&self, comps: &[RegressionComponent]) -> Result<PreparedRegression> {
        let m = self.curves.ncols() as f64;
        if comps.iter().any(|c| !(c.sigma2 > 0.0) || !c.sigma2.is_finite()) {
            return Err(Error::numerical("regression variance is not positive and finite"));
        }
        Ok(PreparedRegression {
            means: comps.iter().map(|c| self.proj.fitted(&c.beta)).collect(),
            inv_two_var: comps.iter().map(|c| 0.5 / c.sigma2).collect(),
            log_norm: comps
                .iter()
                .map(|c| -0.5 * m * (LN_2PI + c.sigma2.ln()))
                .collect(),
        })
    }

    fn add_log_density(&self, prep: &PreparedRegression, i: usize, out: &mut [f64]) {
        let y = self.curves.row(i);
        for (k, o) in out.iter_mut().enumerate() {
            let sse: f64 = y.iter().zip(&prep.means[k]).map(|(a, b)| (a - b) * (a - b)).sum();
            *o += prep.log_norm[k] - sse * prep.inv_two_var[k];
        }
    }

    fn m_step(
        &self,
        tau: &Responsibilities,
        prev: Option<&[RegressionComponent]>,
        frozen: &[usize],
    ) -> Result<Vec<RegressionComponent>> {
        let k = tau.k();
        let m = self.curves.ncols();
        // Σ_i τ_ik and Σ_i τ_ik y_i
        let sums = par_chunk_reduce(
            self.n(),
            || vec![0.0; k * (m + 1)],
            |acc, i| {
                let y = self.curves.row(i);
                for (c, &t) in tau.row(i).iter().enumerate() {
                    if t == 0.0 {
                        continue;
                    }
                    let base = c * (m + 1);
                    acc[base] += t;
                    for j in 0..m {
                        acc[base + 1 + j] += t * y[j];
                    }
                }
            },
        );
        let mut betas = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        for c in 0..k {
            let base = c * (m + 1);
            let mass = sums[base];
            if frozen.contains(&c) || mass <= 0.0 {
                let p = prev
                    .map(|p| p[c].clone())
                    .ok_or_else(|| Error::numerical(format!("cluster {c} is empty")))?;
                means.push(self.proj.fitted(&p.beta));
                betas.push(p.beta);
                continue;
            }
            let ybar: Vec<f64> = sums[base + 1..base + 1 + m].iter().map(|v| v / mass).collect();
            let beta = self.proj.coefficients(&ybar);
            means.push(self.proj.fitted(&beta));
            betas.push(beta);
        }
        let sse = par_chunk_reduce(
            self.n(),
            || vec![0.0; k],
            |acc, i| {
                let y = self.curves.row(i);
                for (c, &t) in tau.row(i).iter().enumerate() {
                    if t == 0.0 {
                        continue;
                    }
                    let r: f64 = y.iter().zip(&means[c]).map(|(a, b)| (a - b) * (a - b)).sum();
                    acc[c] += t * r;
                }
            },
        );
        Ok(betas
            .into_iter()
            .enumerate()
            .map(|(c, beta)| {
                let mass = sums[c * (m + 1)];
                let sigma2 = if frozen.contains(&c) || mass <= 0.0 {
                    prev.map_or(SIGMA2_FLOOR, |p| p[c].sigma2)
                } else {
                    (sse[c] / (m as f64 * mass)).max(SIGMA2_FLOOR)
                };
                RegressionComponent { beta, sigma2 }
            })
            .collect())
    }
}

/// Full (or diagonal) covariance Gaussians over the rows of a feature matrix.
pub(crate) struct GaussianFamily<'a> {
    pub data: &'a RowMatrix,
    pub diagonal: bool,
}

impl Family for GaussianFamily<'_> {
    type Component = CoefComponent;
    type Prepared = Vec<GaussianDensity>;

    fn n(&self) -> usize {
        self.data.nrows()
    }

    fn prepare(&self, comps: &[CoefComponent]) -> Result<Vec<GaussianDensity>> {
        comps
            .iter()
            .map(|c| GaussianDensity::new(c.mean.clone(), &c.cov))
            .collect()
    }

    fn add_log_density(&self, prep: &Vec<GaussianDensity>, i: usize, out: &mut [f64]) {
        let x = self.data.row(i);
        for (o, g) in out.iter_mut().zip(prep) {
            *o += g.log_pdf(x);
        }
    }

    fn m_step(
        &self,
        tau: &Responsibilities,
        prev: Option<&[CoefComponent]>,
        frozen: &[usize],
    ) -> Result<Vec<CoefComponent>> {
        gaussian_components(self.data, tau, prev, frozen, self.diagonal)
    }
}

/// Weighted mean and repaired scatter per component.
pub(crate) fn gaussian_components(
    data: &RowMatrix,
    tau: &Responsibilities,
    prev: Option<&[CoefComponent]>,
    frozen: &[usize],
    diagonal: bool,
) -> Result<Vec<CoefComponent>> {
    let floor = eigen_floor(data);
    weighted_moments(data, tau.matrix())
        .into_iter()
        .enumerate()
        .map(|(c, m)| {
            if frozen.contains(&c) || m.mass <= 0.0 {
                return prev
                    .map(|p| p[c].clone())
                    .ok_or_else(|| Error::numerical(format!("cluster {c} is empty")));
            }
            let scatter = if diagonal {
                DMatrix::from_diagonal(&m.scatter.diagonal())
            } else {
                m.scatter
            };
            Ok(CoefComponent {
                mean: m.mean,
                cov: repair_spd(&scatter, 0.0, floor),
            })
        })
        .collect()
}

/// E-step against fixed gate and components: responsibilities and per-row
/// log-likelihood contributions.
pub(crate) fn e_step_with<F: Family>(
    family: &F,
    comps: &[F::Component],
    gate: &Gate,
    coords: &RowMatrix,
) -> Result<(Responsibilities, Vec<f64>)> {
    let prep = family.prepare(comps)?;
    let k = gate.k();
    let (tau, row_ll, _) = expectation(family.n(), k, |i, out| {
        gate.log_terms(coords.row(i), out);
        family.add_log_density(&prep, i, out);
    });
    Ok((tau, row_ll))
}

pub(crate) struct EmSettings {
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub drop_collapsed: bool,
}

pub(crate) struct EmOutcome<C> {
    pub gate: Gate,
    pub comps: Vec<C>,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub collapsed: Vec<usize>,
}

/// Gate M-step for either family.
pub(crate) fn update_gate(
    gate: &Gate,
    coords: &RowMatrix,
    tau: &Responsibilities,
    lambda: f64,
) -> Result<Gate> {
    Ok(match gate {
        Gate::Gaussian(g) => Gate::Gaussian(update_gaussian_gate(coords, tau, lambda, Some(g))?.gate),
        Gate::Softmax(g) => Gate::Softmax(update_softmax_gate(coords, tau, g)?.gate),
    })
}

/// Initial gate from hard (one-hot) responsibilities.
pub(crate) fn initial_gate(
    family: GateFamily,
    coords: &RowMatrix,
    tau: &Responsibilities,
    lambda: f64,
    bias: bool,
) -> Result<Gate> {
    Ok(match family {
        GateFamily::Gaussian => Gate::Gaussian(update_gaussian_gate(coords, tau, lambda, None)?.gate),
        GateFamily::Softmax => {
            Gate::Softmax(update_softmax_gate(coords, tau, &SoftmaxGate::uniform(tau.k(), bias))?.gate)
        }
    })
}

/// Alternates E- and M-steps until the relative log-likelihood change drops
/// below `tol` or `max_iter` M-steps have run.
pub(crate) fn run_em<F: Family>(
    family: &F,
    coords: &RowMatrix,
    mut gate: Gate,
    mut comps: Vec<F::Component>,
    settings: &EmSettings,
) -> Result<EmOutcome<F::Component>> {
    let n = family.n();
    let mut trace: Vec<f64> = Vec::new();
    let mut collapsed_any: Vec<usize> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let (tau, row_ll) = e_step_with(family, &comps, &gate, coords)?;
        let ll = total(&row_ll);
        if !ll.is_finite() {
            warn!("log-likelihood became non-finite at iteration {iterations}");
            return Err(Error::Diverged { trace });
        }
        if let Some(&prev) = trace.last() {
            let rel = (ll - prev).abs() / prev.abs().max(1.0);
            debug!("EM iteration {iterations}: loglik {ll:.10e} (rel change {rel:.3e})");
            if rel < settings.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iterations == settings.max_iter {
            break;
        }

        let threshold = COLLAPSE_FRACTION * n as f64;
        let collapsed: Vec<usize> = tau
            .masses()
            .iter()
            .enumerate()
            .filter_map(|(c, &m)| (m < threshold).then_some(c))
            .collect();
        for &c in &collapsed {
            if !collapsed_any.contains(&c) {
                collapsed_any.push(c);
            }
        }
        gate = update_gate(&gate, coords, &tau, settings.lambda)?;
        comps = family.m_step(&tau, Some(&comps), &collapsed)?;
        iterations += 1;

        if settings.drop_collapsed && !collapsed.is_empty() && collapsed.len() < gate.k() {
            let keep: Vec<usize> = (0..gate.k()).filter(|c| !collapsed.contains(c)).collect();
            gate = gate.retain(&keep)?;
            comps = keep.iter().map(|&c| comps[c].clone()).collect();
            debug!("dropped {} collapsed clusters", collapsed.len());
        }
    }
    Ok(EmOutcome {
        gate,
        comps,
        trace,
        iterations,
        converged,
        collapsed: collapsed_any,
    })
}

/// Gate coordinates of a volume in the model's frame.
pub(crate) fn gate_coords(vol: &SpectralVolume, params: &ModelParams) -> RowMatrix {
    params.coord_frame.apply(&vol.coords())
}

/// Responsibilities and per-row log-likelihood of any fitted spatial mixture.
pub(crate) fn evaluate(vol: &SpectralVolume, params: &ModelParams) -> Result<(Responsibilities, Vec<f64>)> {
    params.validate()?;
    let coords = gate_coords(vol, params);
    match &params.experts {
        Experts::Regression(comps) => {
            let family = RegressionFamily::new(vol, params.basis)?;
            e_step_with(&family, comps, &params.gate, &coords)
        }
        Experts::Coefficient(comps) => {
            let coefs = vectorize_volume(vol, params.basis)?;
            let family = GaussianFamily {
                data: &coefs,
                diagonal: false,
            };
            e_step_with(&family, comps, &params.gate, &coords)
        }
    }
}

/// Runs `f` on a dedicated pool with `threads` workers, or inline when `None`.
pub(crate) fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Voronoi initialization, EM, and randomly seeded restarts after numerical
/// failures, for any expert family.
pub(crate) fn fit_family<F: Family>(
    family: &F,
    vol: &SpectralVolume,
    config: &crate::model::FitConfig,
    into_experts: impl Fn(Vec<F::Component>) -> Experts,
) -> Result<(ModelParams, crate::model::FitReport)> {
    let frame = if config.standardize_coords {
        crate::volume::CoordFrame::standardizing(&vol.coords())
    } else {
        crate::volume::CoordFrame::identity()
    };
    let coords = frame.apply(&vol.coords());
    let settings = EmSettings {
        lambda: config.lambda,
        max_iter: config.max_iter,
        tol: config.tol,
        drop_collapsed: config.drop_collapsed,
    };
    let mut attempt = 0;
    let mut seed = config.seed;
    loop {
        let result = (|| {
            let init = crate::init::voronoi_partition(&vol.coords(), config.k, config.spacing, seed)?;
            let tau0 = Responsibilities::one_hot(init.labels(), config.k);
            let gate0 = initial_gate(
                config.variant.gate_family(),
                &coords,
                &tau0,
                config.lambda,
                config.softmax_bias,
            )?;
            let comps0 = family.m_step(&tau0, None, &[])?;
            run_em(family, &coords, gate0, comps0, &settings)
        })();
        match result {
            Ok(out) => {
                let params = ModelParams {
                    variant: config.variant,
                    gate: out.gate,
                    experts: into_experts(out.comps),
                    basis: config.basis,
                    lambda: config.lambda,
                    coord_frame: frame,
                };
                let report = crate::model::FitReport {
                    loglik_trace: out.trace,
                    iterations: out.iterations,
                    converged: out.converged,
                    collapsed_clusters: out.collapsed,
                    restarts_used: attempt,
                };
                return Ok((params, report));
            }
            Err(e) if !e.is_validation() && attempt < config.restarts => {
                attempt += 1;
                let next = config.seed.unwrap_or(0).wrapping_add(attempt as u64);
                warn!("fit failed ({e}); restarting k-means with random centers (seed {next})");
                seed = Some(next);
            }
            Err(e) => return Err(e),
        }
    }
}
