//! Synthetic spectral phantoms with known region labels, used in place of
//! annotated clinical scans.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SpectralVolume;
use crate::error::{Error, Result};
use crate::linalg::RowMatrix;

/// Minimum pairwise mean-curve gap (HU) even when the phantom is noiseless.
const MIN_ABS_SEPARATION_HU: f64 = 25.0;
const CURVE_DRAWS: usize = 20_000;
const LAYOUT_DRAWS: usize = 200;

/// Cubic decay curve `sum_j c_j u^j` with `u = (energy - origin) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicCurve {
    pub coeffs: [f64; 4],
    pub origin: f64,
    pub scale: f64,
}

impl CubicCurve {
    pub fn eval(&self, energy: f64) -> f64 {
        let u = (energy - self.origin) / self.scale;
        let c = &self.coeffs;
        c[0] + u * (c[1] + u * (c[2] + u * c[3]))
    }

    pub fn sample(&self, energies: &[f64]) -> Vec<f64> {
        energies.iter().map(|&e| self.eval(e)).collect()
    }

    /// Constant curve, handy for hand-built phantoms.
    pub fn constant(level: f64) -> Self {
        Self {
            coeffs: [level, 0.0, 0.0, 0.0],
            origin: 0.0,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub energies: Vec<f64>,
    pub k_true: usize,
    /// Per-sample Gaussian noise, HU.
    pub noise_sd: f64,
    pub seed: u64,
}

impl PhantomConfig {
    pub fn new(dims: [usize; 3], k_true: usize, noise_sd: f64, seed: u64) -> Self {
        Self {
            dims,
            energies: super::default_energies(),
            k_true,
            noise_sd,
            seed,
        }
    }
}

/// A generated volume plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: SpectralVolume,
    /// Region id per voxel row, `0..k_true`.
    pub true_labels: Vec<usize>,
    pub tumor_mask: Vec<bool>,
    /// Generating mean curve of each region.
    pub region_curves: Vec<CubicCurve>,
    /// Region designated as tumor (`None` when there is only one region).
    pub tumor_region: Option<usize>,
}

impl Phantom {
    pub fn k_true(&self) -> usize {
        self.region_curves.len()
    }

    pub fn region_size(&self, k: usize) -> usize {
        self.true_labels.iter().filter(|&&l| l == k).count()
    }
}

/// Generates a phantom of `k_true` compact ellipsoidal regions covering the
/// whole grid, each with its own cubic decay curve plus i.i.d. Gaussian noise.
///
/// Region 0 is treated as background; the tumor is one of the other regions.
pub fn synth_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    let [nx, ny, nz] = cfg.dims;
    let total = nx * ny * nz;
    if cfg.k_true == 0 {
        return Err(Error::invalid("k_true must be at least 1"));
    }
    if !(cfg.noise_sd >= 0.0) || !cfg.noise_sd.is_finite() {
        return Err(Error::invalid("noise_sd must be finite and non-negative"));
    }
    if total < cfg.k_true {
        return Err(Error::invalid(format!(
            "grid {:?} has fewer voxels than k_true = {}",
            cfg.dims, cfg.k_true
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = layout_regions(cfg.dims, cfg.k_true, &mut rng)?;
    let curves = draw_curves(&cfg.energies, cfg.k_true, cfg.noise_sd, &mut rng)?;
    let tumor = (cfg.k_true > 1).then(|| rng.random_range(1..cfg.k_true));
    render_phantom(
        cfg.dims,
        cfg.energies.clone(),
        labels,
        curves,
        tumor,
        cfg.noise_sd,
        &mut rng,
    )
}

/// Builds a phantom from an explicit full-grid region map (x-fastest) and
/// region curves.
pub fn render_phantom(
    dims: [usize; 3],
    energies: Vec<f64>,
    grid_labels: Vec<usize>,
    region_curves: Vec<CubicCurve>,
    tumor_region: Option<usize>,
    noise_sd: f64,
    rng: &mut impl Rng,
) -> Result<Phantom> {
    let total = dims[0] * dims[1] * dims[2];
    if grid_labels.len() != total {
        return Err(Error::invalid("region map does not cover the grid"));
    }
    let k = region_curves.len();
    if let Some(bad) = grid_labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("region id {bad} has no curve")));
    }
    let m = energies.len();
    let means: Vec<Vec<f64>> = region_curves.iter().map(|c| c.sample(&energies)).collect();
    let mut values = Vec::with_capacity(total * m);
    let noise = if noise_sd > 0.0 {
        Some(Normal::new(0.0, noise_sd).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    for &l in &grid_labels {
        for &mu in &means[l] {
            let eps = noise.as_ref().map_or(0.0, |d| d.sample(rng));
            values.push(mu + eps);
        }
    }
    let volume = SpectralVolume::new(
        dims,
        energies,
        vec![true; total],
        RowMatrix::from_vec(total, m, values)?,
    )?;
    let tumor_mask = grid_labels.iter().map(|&l| Some(l) == tumor_region).collect();
    Ok(Phantom {
        volume,
        true_labels: grid_labels,
        tumor_mask,
        region_curves,
        tumor_region,
    })
}

/// Anisotropic Voronoi tiling: every voxel goes to the region minimizing its
/// per-region scaled distance, giving compact ellipsoid-like regions.
fn layout_regions(dims: [usize; 3], k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let total = dims[0] * dims[1] * dims[2];
    let min_size = (total / (4 * k)).max(1);
    for _ in 0..LAYOUT_DRAWS {
        // best-candidate sampling spreads the centers out
        let mut centers: Vec<[f64; 3]> = Vec::with_capacity(k);
        while centers.len() < k {
            let mut best = None;
            let mut best_gap = f64::NEG_INFINITY;
            for _ in 0..16 {
                let c = [0, 1, 2].map(|a| rng.random_range(0.0..dims[a] as f64) - 0.5);
                let gap = centers.iter().map(|o| dist2(o, &c)).fold(f64::INFINITY, f64::min);
                if gap > best_gap {
                    best_gap = gap;
                    best = Some(c);
                }
            }
            centers.push(best.unwrap());
        }
        let axes: Vec<[f64; 3]> = (0..k)
            .map(|_| [0, 1, 2].map(|_| rng.random_range(0.75..1.35)))
            .collect();
        let mut labels = Vec::with_capacity(total);
        let mut sizes = vec![0usize; k];
        for g in 0..total {
            let p = super::grid_position(dims, g).map(|v| v as f64);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (r, (c, s)) in centers.iter().zip(&axes).enumerate() {
                let d: f64 = (0..3).map(|a| ((p[a] - c[a]) / s[a]).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = r;
                }
            }
            labels.push(best);
            sizes[best] += 1;
        }
        if sizes.iter().all(|&s| s >= min_size) {
            return Ok(labels);
        }
    }
    Err(Error::invalid(format!(
        "could not place {k} regions of at least {min_size} voxels in grid {dims:?}"
    )))
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Draws decay curves `L + A * (s (1-t)^3 + (1-s)(1-t))` on `t in [0, 1]`,
/// rejecting any that come closer than the separation threshold to an earlier one.
fn draw_curves(energies: &[f64], k: usize, noise_sd: f64, rng: &mut impl Rng) -> Result<Vec<CubicCurve>> {
    let origin = energies[0];
    let span = energies[energies.len() - 1] - origin;
    let scale = if span > 0.0 { span } else { 1.0 };
    let min_sep = (5.0 * noise_sd).max(MIN_ABS_SEPARATION_HU);
    let mut curves: Vec<CubicCurve> = Vec::with_capacity(k);
    let mut sampled: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut draws = 0;
    while curves.len() < k {
        if draws == CURVE_DRAWS {
            return Err(Error::invalid(format!(
                "cannot draw {k} curves separated by {min_sep} HU (noise_sd = {noise_sd})"
            )));
        }
        draws += 1;
        let level = rng.random_range(-60.0..160.0);
        let amp = rng.random_range(-60.0..420.0);
        let s = rng.random_range(0.0..1.0);
        let curve = CubicCurve {
            coeffs: [level + amp, -amp * (1.0 + 2.0 * s), 3.0 * amp * s, -amp * s],
            origin,
            scale,
        };
        let ys = curve.sample(energies);
        let separated = sampled.iter().all(|other| {
            ys.iter()
                .zip(other)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
                >= min_sep
        });
        if separated {
            curves.push(curve);
            sampled.push(ys);
        }
    }
    Ok(curves)
}

/// Writes the `row,true_label,is_tumor` sidecar. Labels are 1-based on disk.
pub fn write_truth_csv(phantom: &Phantom, w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["row", "true_label", "is_tumor"])
        .map_err(|e| Error::format(e.to_string()))?;
    for (i, (&l, &t)) in phantom.true_labels.iter().zip(&phantom.tumor_mask).enumerate() {
        wtr.write_record([i.to_string(), (l + 1).to_string(), (t as u8).to_string()])
            .map_err(|e| Error::format(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads the sidecar written by [`write_truth_csv`]: 0-based labels and tumor flags.
pub fn read_truth_csv(r: impl Read) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut labels = Vec::new();
    let mut tumor = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(e.to_string()))?;
        let bad = || Error::format(format!("labels row {}: malformed", line + 2));
        if rec.len() != 3 {
            return Err(bad());
        }
        let row: usize = rec[0].trim().parse().map_err(|_| bad())?;
        if row != labels.len() {
            return Err(Error::format(format!("labels row {} out of order", line + 2)));
        }
        let l: usize = rec[1].trim().parse().map_err(|_| bad())?;
        if l == 0 {
            return Err(Error::format("true_label is 1-based"));
        }
        labels.push(l - 1);
        tumor.push(match rec[2].trim() {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        });
    }
    Ok((labels, tumor))
}
