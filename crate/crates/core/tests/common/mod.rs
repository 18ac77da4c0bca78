//! Independent reference implementations shared by the integration tests.
//! Sums and products run in double-double arithmetic.
#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specmix::linalg::RowMatrix;
use specmix::SpectralVolume;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn ln(self) -> Dd {
        // one Newton step on exp(y) = x from the f64 logarithm
        let y = self.hi.ln();
        let e = Dd::new(y.exp());
        Dd::new(y) + (self - e) / e
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::new(x)
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi));
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

pub fn dd_sum(xs: impl IntoIterator<Item = Dd>) -> Dd {
    xs.into_iter().fold(Dd::ZERO, |a, b| a + b)
}

/// Solves `a x = b` by Gauss-Jordan elimination with partial pivoting.
pub fn dd_solve(mut a: Vec<Vec<Dd>>, mut b: Vec<Dd>) -> Vec<Dd> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].hi.abs().total_cmp(&a[j][col].hi.abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        let p = a[col][col];
        for j in 0..n {
            a[col][j] = a[col][j] / p;
        }
        b[col] = b[col] / p;
        for i in 0..n {
            if i != col {
                let f = a[i][col];
                for j in 0..n {
                    a[i][j] = a[i][j] - f * a[col][j];
                }
                b[i] = b[i] - f * b[col];
            }
        }
    }
    b
}

/// Log-determinant via elimination (matrix must be SPD).
pub fn dd_logdet(mut a: Vec<Vec<Dd>>) -> Dd {
    let n = a.len();
    let mut acc = Dd::ZERO;
    for col in 0..n {
        let p = a[col][col];
        acc = acc + p.ln();
        for i in col + 1..n {
            let f = a[i][col] / p;
            for j in col..n {
                a[i][j] = a[i][j] - f * a[col][j];
            }
        }
    }
    acc
}

/// Log-density of `N(mean, cov)` at `x`.
pub fn dd_gauss_logpdf(x: &[f64], mean: &[f64], cov: &[Vec<f64>]) -> Dd {
    let d = x.len();
    let a: Vec<Vec<Dd>> = cov
        .iter()
        .map(|r| r.iter().map(|&v| Dd::new(v)).collect())
        .collect();
    let diff: Vec<Dd> = x
        .iter()
        .zip(mean)
        .map(|(&u, &m)| Dd::new(u) - Dd::new(m))
        .collect();
    let sol = dd_solve(a.clone(), diff.clone());
    let quad = dd_sum(diff.iter().zip(&sol).map(|(&u, &s)| u * s));
    let two_pi = Dd::new(2.0)
        * Dd {
            hi: std::f64::consts::PI,
            lo: 1.2246467991473532e-16,
        };
    Dd::new(-0.5) * (Dd::new(d as f64) * two_pi.ln() + dd_logdet(a) + quad)
}

/// Normalizes log-weights per row into probabilities.
pub fn dd_normalize(logs: &[Dd]) -> Vec<f64> {
    let mx = logs.iter().map(|l| l.hi).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<Dd> = logs
        .iter()
        .map(|&l| Dd::new((l - Dd::new(mx)).to_f64().exp()))
        .collect();
    let s = dd_sum(e.iter().copied());
    e.iter().map(|&v| (v / s).to_f64()).collect()
}

/// B-spline basis by the textbook Cox-de Boor recursion (right-closed at the last knot).
pub fn cox_de_boor(x: f64, knots: &[f64], i: usize, p: usize) -> f64 {
    if p == 0 {
        let last = *knots.last().unwrap();
        let inside = knots[i] <= x && x < knots[i + 1];
        let at_end = x == last && knots[i] < knots[i + 1] && knots[i + 1] == last;
        return if inside || at_end { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + p] - knots[i];
    if d1 > 0.0 {
        v += (x - knots[i]) / d1 * cox_de_boor(x, knots, i, p - 1);
    }
    let d2 = knots[i + p + 1] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + p + 1] - x) / d2 * cox_de_boor(x, knots, i + 1, p - 1);
    }
    v
}

/// Design matrix rows of a clamped uniform B-spline basis over the energy range.
pub fn oracle_bspline_design(energies: &[f64], degree: usize, interior: usize) -> Vec<Vec<f64>> {
    let lo = energies[0];
    let hi = *energies.last().unwrap();
    let mut knots = vec![lo; degree + 1];
    for j in 1..=interior {
        knots.push(lo + (hi - lo) * j as f64 / (interior + 1) as f64);
    }
    knots.extend(std::iter::repeat_n(hi, degree + 1));
    let d = interior + degree + 1;
    energies
        .iter()
        .map(|&x| (0..d).map(|i| cox_de_boor(x, &knots, i, degree)).collect())
        .collect()
}

/// Weighted least squares `argmin Σ_i w_i ||y_i - B β||²` by normal equations.
pub fn oracle_wls(design: &[Vec<f64>], ys: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let d = design[0].len();
    let m = design.len();
    let mut gram = vec![vec![Dd::ZERO; d]; d];
    let mut rhs = vec![Dd::ZERO; d];
    let wsum = dd_sum(weights.iter().map(|&w| Dd::new(w)));
    for a in 0..d {
        for b in 0..d {
            gram[a][b] = wsum * dd_sum((0..m).map(|r| Dd::new(design[r][a]) * Dd::new(design[r][b])));
        }
        rhs[a] = dd_sum(
            ys.iter()
                .zip(weights)
                .flat_map(|(y, &w)| (0..m).map(move |r| Dd::new(w) * Dd::new(design[r][a]) * Dd::new(y[r]))),
        );
    }
    dd_solve(gram, rhs).into_iter().map(Dd::to_f64).collect()
}

/// Weighted mean and scatter (divided by the weight total).
pub fn oracle_moments(rows: &[&[f64]], weights: &[f64]) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let p = rows[0].len();
    let mass = dd_sum(weights.iter().map(|&w| Dd::new(w)));
    let mean: Vec<Dd> = (0..p)
        .map(|j| dd_sum(rows.iter().zip(weights).map(|(r, &w)| Dd::new(w) * Dd::new(r[j]))) / mass)
        .collect();
    let cov: Vec<Vec<f64>> =
        (0..p)
            .map(|a| {
                (0..p)
                    .map(|b| {
                        (dd_sum(rows.iter().zip(weights).map(|(r, &w)| {
                            Dd::new(w) * (Dd::new(r[a]) - mean[a]) * (Dd::new(r[b]) - mean[b])
                        })) / mass)
                            .to_f64()
                    })
                    .collect()
            })
            .collect();
    (mass.to_f64(), mean.into_iter().map(Dd::to_f64).collect(), cov)
}

/// Largest entrywise difference relative to the largest reference magnitude.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want
        .iter()
        .fold(0.0f64, |a, b| a.max(b.abs()))
        .max(f64::MIN_POSITIVE);
    got.iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn dmatrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn dvec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Volume of `n` voxels on an `nx`-wide slab with random smooth curves.
pub fn random_volume(n: usize, m: usize, seed: u64) -> SpectralVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = 5;
    let dims = [nx, n.div_ceil(nx), 1];
    let energies: Vec<f64> = (0..m).map(|j| 40.0 + 100.0 * j as f64 / (m - 1) as f64).collect();
    let mut mask = vec![false; dims[0] * dims[1]];
    mask[..n].iter_mut().for_each(|b| *b = true);
    let mut data = Vec::with_capacity(n * m);
    for _ in 0..n {
        let level = rng.random_range(-100.0..300.0);
        let slope = rng.random_range(-3.0..1.0);
        for &e in &energies {
            data.push(level + slope * (e - 40.0) + rng.random_range(-20.0..20.0));
        }
    }
    SpectralVolume::new(dims, energies, mask, RowMatrix::from_vec(n, m, data).unwrap()).unwrap()
}

/// Random responsibilities with every entry bounded away from zero.
pub fn random_tau(n: usize, k: usize, seed: u64) -> RowMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    RowMatrix::from_vec(n, k, data).unwrap()
}
