//! Polynomial and B-spline design matrices over the energy grid, and the
//! least-squares projection of curves onto them.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{RowMatrix, CHUNK};
use crate::volume::SpectralVolume;

/// Gram condition number above which a ridge term is added.
const MAX_GRAM_CONDITION: f64 = 1e12;
/// Ridge size relative to `trace(BᵀB) / d`.
const RIDGE_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisFamily {
    Polynomial,
    BSpline,
}

impl BasisFamily {
    pub fn name(self) -> &'static str {
        match self {
            BasisFamily::Polynomial => "polynomial",
            BasisFamily::BSpline => "bspline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "polynomial" | "poly" => Some(BasisFamily::Polynomial),
            "bspline" | "bspl" => Some(BasisFamily::BSpline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub degree: usize,
    /// Uniform interior knots (B-splines only).
    pub interior_knots: usize,
}

impl BasisSpec {
    pub fn polynomial(degree: usize) -> Self {
        Self {
            family: BasisFamily::Polynomial,
            degree,
            interior_knots: 0,
        }
    }

    pub fn bspline(degree: usize, interior_knots: usize) -> Self {
        Self {
            family: BasisFamily::BSpline,
            degree,
            interior_knots,
        }
    }

    /// Number of basis functions.
    pub fn dim(&self) -> usize {
        match self.family {
            BasisFamily::Polynomial => self.degree + 1,
            BasisFamily::BSpline => self.interior_knots + self.degree + 1,
        }
    }
}

impl Default for BasisSpec {
    /// Cubic B-splines with four uniform interior knots (d = 8).
    fn default() -> Self {
        Self::bspline(3, 4)
    }
}

/// Basis functions evaluated on an energy grid: an `m x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    spec: BasisSpec,
    energies: Vec<f64>,
}

impl DesignMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// `B β` as a plain vector.
    pub fn evaluate(&self, beta: &DVector<f64>) -> Vec<f64> {
        (&self.values * beta).iter().copied().collect()
    }
}

pub fn build_design(energies: &[f64], spec: BasisSpec) -> Result<DesignMatrix> {
    if energies.is_empty() || energies.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("energies not strictly increasing"));
    }
    let m = energies.len();
    let d = spec.dim();
    if d > m {
        return Err(Error::invalid(format!(
            "basis dimension {d} exceeds the {m} energy levels"
        )));
    }
    let values = match spec.family {
        BasisFamily::Polynomial => polynomial_design(energies, spec.degree),
        BasisFamily::BSpline => {
            let knots = clamped_knots(energies[0], energies[m - 1], spec.degree, spec.interior_knots)?;
            bspline_design(energies, &knots, spec.degree)?
        }
    };
    Ok(DesignMatrix {
        values,
        spec,
        energies: energies.to_vec(),
    })
}

/// Columns `((x - mean) / sd)^j`, `j = 0..=degree`.
fn polynomial_design(x: &[f64], degree: usize) -> DMatrix<f64> {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    DMatrix::from_fn(x.len(), degree + 1, |i, j| ((x[i] - mean) / sd).powi(j as i32))
}

/// Clamped knot vector: `degree + 1` copies of each end, uniform interior knots.
pub fn clamped_knots(lo: f64, hi: f64, degree: usize, interior: usize) -> Result<Vec<f64>> {
    if !(hi > lo) {
        return Err(Error::invalid("degenerate knot vector: empty energy range"));
    }
    let mut knots = vec![lo; degree + 1];
    let step = (hi - lo) / (interior + 1) as f64;
    knots.extend((1..=interior).map(|j| lo + step * j as f64));
    knots.extend(std::iter::repeat_n(hi, degree + 1));
    Ok(knots)
}

/// Cox-de Boor evaluation of all `knots.len() - degree - 1` basis functions.
pub fn bspline_design(x: &[f64], knots: &[f64], degree: usize) -> Result<DMatrix<f64>> {
    if knots.len() < degree + 2 {
        return Err(Error::invalid("degenerate knot vector: too few knots"));
    }
    if knots.windows(2).any(|w| w[1] < w[0]) || knots.iter().any(|k| !k.is_finite()) {
        return Err(Error::invalid(
            "degenerate knot vector: knots must be non-decreasing",
        ));
    }
    let nbasis = knots.len() - degree - 1;
    let lo = knots[degree];
    let hi = knots[nbasis];
    if !(hi > lo) {
        return Err(Error::invalid("degenerate knot vector: zero-length domain"));
    }
    let mut out = DMatrix::zeros(x.len(), nbasis);
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    let mut vals = vec![0.0; degree + 1];
    for (row, &xv) in x.iter().enumerate() {
        if xv < lo || xv > hi {
            return Err(Error::invalid(format!("x = {xv} outside spline domain")));
        }
        let span = find_span(knots, degree, nbasis, xv);
        // NURBS-book style triangular recurrence for the degree+1 nonzero values
        vals[0] = 1.0;
        for j in 1..=degree {
            left[j] = xv - knots[span + 1 - j];
            right[j] = knots[span + j] - xv;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { vals[r] / denom } else { 0.0 };
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        for (j, &v) in vals.iter().enumerate() {
            out[(row, span - degree + j)] = v;
        }
    }
    Ok(out)
}

/// Index `s` with `knots[s] <= x < knots[s + 1]`; the right end belongs to the
/// last non-empty span.
fn find_span(knots: &[f64], degree: usize, nbasis: usize, x: f64) -> usize {
    if x >= knots[nbasis] {
        let mut s = nbasis - 1;
        while s > degree && knots[s] == knots[s + 1] {
            s -= 1;
        }
        return s;
    }
    let mut lo = degree;
    let mut hi = nbasis;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if x < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Least-squares projector `β = P y` for a fixed design.
///
/// Computed from the SVD of the design (`P = V Σ⁻¹ Uᵀ`). When the Gram matrix is
/// ill-conditioned a ridge `RIDGE_SCALE * trace / d` is added instead, if allowed.
#[derive(Debug, Clone)]
pub struct OlsProjector {
    design: DMatrix<f64>,
    pinv: DMatrix<f64>,
    ridge: Option<f64>,
}

impl OlsProjector {
    pub fn new(design: &DesignMatrix, ridge_fallback: bool) -> Result<Self> {
        Self::from_matrix(design.values().clone(), ridge_fallback)
    }

    pub fn from_matrix(b: DMatrix<f64>, ridge_fallback: bool) -> Result<Self> {
        let d = b.ncols();
        let svd = b.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 {
            (smax / smin).powi(2)
        } else {
            f64::INFINITY
        };
        if cond <= MAX_GRAM_CONDITION && b.nrows() >= d {
            let u = svd.u.as_ref().expect("svd computed with u");
            let vt = svd.v_t.as_ref().expect("svd computed with v_t");
            let inv_s = DMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / s));
            let pinv = vt.transpose() * inv_s * u.transpose();
            return Ok(Self {
                design: b,
                pinv,
                ridge: None,
            });
        }
        if !ridge_fallback {
            return Err(Error::numerical(format!(
                "design is rank deficient (Gram condition {cond:.3e})"
            )));
        }
        let gram = b.transpose() * &b;
        let ridge = RIDGE_SCALE * gram.trace() / d as f64;
        warn!("ill-conditioned design (Gram condition {cond:.3e}); adding ridge {ridge:.3e}");
        let reg = gram + DMatrix::identity(d, d) * ridge;
        let chol = reg
            .cholesky()
            .ok_or_else(|| Error::numerical("ridge-regularized Gram matrix not positive definite"))?;
        let pinv = chol.solve(&b.transpose());
        Ok(Self {
            design: b,
            pinv,
            ridge: Some(ridge),
        })
    }

    pub fn ridge(&self) -> Option<f64> {
        self.ridge
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    pub fn coefficients(&self, y: &[f64]) -> DVector<f64> {
        &self.pinv * DVector::from_column_slice(y)
    }

    pub fn fitted(&self, beta: &DVector<f64>) -> Vec<f64> {
        (&self.design * beta).iter().copied().collect()
    }
}

/// Basis coefficients of one curve, `(BᵀB)⁻¹Bᵀy`.
pub fn ols_fit(design: &DesignMatrix, y: &[f64]) -> Result<DVector<f64>> {
    if y.len() != design.values().nrows() {
        return Err(Error::invalid("curve length does not match design"));
    }
    Ok(OlsProjector::new(design, true)?.coefficients(y))
}

/// Per-voxel OLS coefficients, one row per curve (`n x d`).
pub fn vectorize_volume(vol: &SpectralVolume, spec: BasisSpec) -> Result<RowMatrix> {
    let design = build_design(vol.energies(), spec)?;
    let proj = OlsProjector::new(&design, true)?;
    let d = proj.dim();
    let mut out = RowMatrix::zeros(vol.n(), d);
    out.as_mut_slice()
        .par_chunks_mut(d * CHUNK)
        .enumerate()
        .for_each(|(c, block)| {
            for (r, row) in block.chunks_exact_mut(d).enumerate() {
                let beta = proj.coefficients(vol.curve(c * CHUNK + r));
                row.copy_from_slice(beta.as_slice());
            }
        });
    Ok(out)
}
