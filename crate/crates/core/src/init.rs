//! Reproducible EM initialization: spatial k-means seeded from a regular
//! lattice of centers, yielding a Voronoi partition of the voxels.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::basis::vectorize_volume;
use crate::em::{initial_gate, Family, GaussianFamily, RegressionFamily};
use crate::error::{Error, Result};
use crate::linalg::{RowMatrix, CHUNK};
use crate::mixture::{Labeling, Responsibilities};
use crate::model::{Experts, FitConfig, ModelParams};
use crate::volume::{CoordFrame, SpectralVolume};

const LLOYD_MAX_ITER: usize = 300;

/// Lattice counts per axis for `k` centers over a box with the given extents.
///
/// Chooses the triple `(a, b, c)` with `k <= abc <= 2k` minimizing
/// `Σ (ln(count_axis / ideal_axis))²`, where `ideal_axis = extent_axis *
/// (k / Π extents)^(1/3)`. Ties go to the smaller product, then lexicographic order.
pub fn lattice_shape(extent: [f64; 3], k: usize) -> [usize; 3] {
    let vol: f64 = extent.iter().product();
    let s = (k as f64 / vol).cbrt();
    let ideal = extent.map(|e| e * s);
    let mut best = [k, 1, 1];
    let mut best_cost = f64::INFINITY;
    for total in k..=2 * k {
        for a in 1..=total {
            if total % a != 0 {
                continue;
            }
            let rest = total / a;
            for b in 1..=rest {
                if rest % b != 0 {
                    continue;
                }
                let c = rest / b;
                let counts = [a, b, c];
                let cost: f64 = (0..3).map(|j| (counts[j] as f64 / ideal[j]).ln().powi(2)).sum();
                if cost < best_cost - 1e-12 {
                    best_cost = cost;
                    best = counts;
                }
            }
        }
    }
    best
}

/// Regularly spaced centers covering the bounding box of `points` (at least
/// `k`, in x-fastest lattice order). Each voxel is taken to span `spacing`.
pub fn lattice_centers(points: &RowMatrix, k: usize, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for r in points.rows() {
        for a in 0..3 {
            lo[a] = lo[a].min(r[a]);
            hi[a] = hi[a].max(r[a]);
        }
    }
    let extent = [0, 1, 2].map(|a| hi[a] - lo[a] + spacing[a]);
    let shape = lattice_shape(extent, k);
    let mut centers = Vec::with_capacity(shape.iter().product());
    for iz in 0..shape[2] {
        for iy in 0..shape[1] {
            for ix in 0..shape[0] {
                let idx = [ix, iy, iz];
                centers.push(
                    [0, 1, 2].map(|a| {
                        lo[a] - 0.5 * spacing[a] + (idx[a] as f64 + 0.5) * extent[a] / shape[a] as f64
                    }),
                );
            }
        }
    }
    centers
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center for every point (ties to the smaller index) and its squared distance.
fn assign(points: &RowMatrix, centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let n = points.nrows();
    let mut labels = vec![0usize; n];
    let mut d2 = vec![0.0; n];
    labels
        .par_chunks_mut(CHUNK)
        .zip(d2.par_chunks_mut(CHUNK))
        .enumerate()
        .for_each(|(c, (ls, ds))| {
            for (r, (l, d)) in ls.iter_mut().zip(ds.iter_mut()).enumerate() {
                let x = points.row(c * CHUNK + r);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (j, ctr) in centers.iter().enumerate() {
                    let dd = dist2(x, ctr);
                    if dd < best_d {
                        best_d = dd;
                        best = j;
                    }
                }
                *l = best;
                *d = best_d;
            }
        });
    (labels, d2)
}

/// Result of Lloyd's algorithm.
#[derive(Debug, Clone)]
pub struct LloydResult {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after every assignment step.
    pub sse_trace: Vec<f64>,
}

/// Lloyd's k-means from the given centers. An empty cluster is re-seeded at the
/// point farthest from its center among clusters with at least two members.
pub fn lloyd(points: &RowMatrix, mut centers: Vec<Vec<f64>>, max_iter: usize) -> Result<LloydResult> {
    let n = points.nrows();
    let k = centers.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    let p = points.ncols();
    let mut prev: Option<Vec<usize>> = None;
    let mut sse_trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        let (mut labels, mut d2) = assign(points, &centers);
        reseed_empty(&mut labels, &mut d2, k);
        sse_trace.push(d2.iter().sum());
        if prev.as_ref() == Some(&labels) {
            return Ok(LloydResult {
                labels,
                centers,
                sse_trace,
            });
        }
        // centroid update
        let mut sums = vec![vec![0.0; p]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for (c, (s, &cnt)) in sums.into_iter().zip(&counts).enumerate() {
            centers[c] = s.into_iter().map(|v| v / cnt as f64).collect();
        }
        prev = Some(labels);
    }
    let (mut labels, mut d2) = assign(points, &centers);
    reseed_empty(&mut labels, &mut d2, k);
    sse_trace.push(d2.iter().sum());
    Ok(LloydResult {
        labels,
        centers,
        sse_trace,
    })
}

fn reseed_empty(labels: &mut [usize], d2: &mut [f64], k: usize) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..labels.len())
            .filter(|&i| counts[labels[i]] >= 2)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if d2[b] >= d2[i] => Some(b),
                _ => Some(i),
            })
            .expect("k <= n guarantees a donor cluster");
        counts[labels[far]] -= 1;
        labels[far] = c;
        d2[far] = 0.0;
        counts[c] = 1;
    }
}

/// Spatial k-means partition of voxel coordinates (index units times `spacing`).
///
/// Without a seed the centers start on a regular lattice over the bounding box;
/// surplus lattice centers (those whose initial cells hold the fewest voxels,
/// later lattice positions first on ties) are dropped. With a seed the centers
/// start at `k` distinct random voxels.
pub fn voronoi_partition(
    coords: &RowMatrix,
    k: usize,
    spacing: [f64; 3],
    seed: Option<u64>,
) -> Result<Labeling> {
    let n = coords.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "cannot initialize {k} clusters from {n} voxels"
        )));
    }
    let mut points = coords.clone();
    for i in 0..n {
        let r = points.row_mut(i);
        for a in 0..3 {
            r[a] *= spacing[a];
        }
    }
    let centers: Vec<Vec<f64>> = match seed {
        None => {
            let lattice: Vec<Vec<f64>> = lattice_centers(&points, k, spacing)
                .into_iter()
                .map(|c| c.to_vec())
                .collect();
            select_centers(&points, lattice, k)
        }
        Some(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| points.row(i).to_vec()).collect()
        }
    };
    let result = lloyd(&points, centers, LLOYD_MAX_ITER)?;
    Ok(Labeling::new(result.labels, k))
}

/// Keeps the `k` lattice centers whose initial cells are most populated.
fn select_centers(points: &RowMatrix, lattice: Vec<Vec<f64>>, k: usize) -> Vec<Vec<f64>> {
    if lattice.len() == k {
        return lattice;
    }
    let (labels, _) = assign(points, &lattice);
    let mut counts = vec![0usize; lattice.len()];
    for l in labels {
        counts[l] += 1;
    }
    let mut order: Vec<usize> = (0..lattice.len()).collect();
    // most populated first; among equals, earlier lattice positions first
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order.into_iter().take(k).collect();
    keep.sort_unstable();
    keep.into_iter().map(|c| lattice[c].clone()).collect()
}

/// Initial partition plus the parameters obtained from hard-assignment M-steps.
pub fn voronoi_init(vol: &SpectralVolume, config: &FitConfig) -> Result<(Labeling, ModelParams)> {
    config.validate(vol.n())?;
    let raw = vol.coords();
    let labels = voronoi_partition(&raw, config.k, config.spacing, config.seed)?;
    let frame = if config.standardize_coords {
        CoordFrame::standardizing(&raw)
    } else {
        CoordFrame::identity()
    };
    let coords = frame.apply(&raw);
    let tau = Responsibilities::one_hot(labels.labels(), config.k);
    let gate = initial_gate(
        config.variant.gate_family(),
        &coords,
        &tau,
        config.lambda,
        config.softmax_bias,
    )?;
    let experts = if config.variant.is_twofold() {
        let coefs = vectorize_volume(vol, config.basis)?;
        let family = GaussianFamily {
            data: &coefs,
            diagonal: config.diagonal_cov,
        };
        Experts::Coefficient(family.m_step(&tau, None, &[])?)
    } else {
        let family = RegressionFamily::new(vol, config.basis)?;
        Experts::Regression(family.m_step(&tau, None, &[])?)
    };
    Ok((
        labels,
        ModelParams {
            variant: config.variant,
            gate,
            experts,
            basis: config.basis,
            lambda: config.lambda,
            coord_frame: frame,
        },
    ))
}
