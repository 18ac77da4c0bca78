//! Spectral volumes: voxel grid, shared energy grid, one attenuation curve per
//! unmasked voxel.

mod io;
mod phantom;

pub use io::{load_volume, save_volume, VolumeFormat};
pub use phantom::{
    read_truth_csv, render_phantom, synth_phantom, write_truth_csv, CubicCurve, Phantom, PhantomConfig,
};

use crate::error::{Error, Result};
use crate::linalg::RowMatrix;

/// Default air-masking threshold in HU (mean curve attenuation).
pub const DEFAULT_AIR_THRESHOLD_HU: f64 = -400.0;

/// 40 to 140 keV in 5 keV steps.
pub fn default_energies() -> Vec<f64> {
    (0..21).map(|i| 40.0 + 5.0 * i as f64).collect()
}

/// A 4-D spectral image restricted to its unmasked voxels.
///
/// Rows of `curves` follow the mask in x-fastest grid order, so row `i` is the
/// `i`-th `true` entry of the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralVolume {
    dims: [usize; 3],
    energies: Vec<f64>,
    curves: RowMatrix,
    mask: Vec<bool>,
    /// Linear grid index of every curve row.
    grid_index: Vec<usize>,
}

impl SpectralVolume {
    /// Builds a volume from a full-grid mask and the curves of the unmasked
    /// voxels in mask order.
    pub fn new(dims: [usize; 3], energies: Vec<f64>, mask: Vec<bool>, curves: RowMatrix) -> Result<Self> {
        let total = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::invalid("grid dimensions overflow"))?;
        if mask.len() != total {
            return Err(Error::invalid(format!(
                "mask has {} entries but dims {:?} need {}",
                mask.len(),
                dims,
                total
            )));
        }
        check_energies(&energies)?;
        let grid_index: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(g, &on)| on.then_some(g))
            .collect();
        if curves.nrows() != grid_index.len() {
            return Err(Error::invalid(format!(
                "{} curves for {} unmasked voxels",
                curves.nrows(),
                grid_index.len()
            )));
        }
        if curves.ncols() != energies.len() {
            return Err(Error::invalid(format!(
                "curves have {} samples but there are {} energies",
                curves.ncols(),
                energies.len()
            )));
        }
        if curves.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "attenuation values must be finite (found NaN or inf)",
            ));
        }
        Ok(Self {
            dims,
            energies,
            curves,
            mask,
            grid_index,
        })
    }

    /// Builds a volume from voxels given by grid position, in any order.
    pub fn from_positions(
        dims: [usize; 3],
        energies: Vec<f64>,
        positions: &[[usize; 3]],
        curves: &RowMatrix,
    ) -> Result<Self> {
        if positions.len() != curves.nrows() {
            return Err(Error::invalid("one curve per position required"));
        }
        let total = dims[0] * dims[1] * dims[2];
        let mut row_of = vec![usize::MAX; total];
        for (r, p) in positions.iter().enumerate() {
            if p[0] >= dims[0] || p[1] >= dims[1] || p[2] >= dims[2] {
                return Err(Error::invalid(format!("position {p:?} outside grid {dims:?}")));
            }
            let g = linear_index(dims, *p);
            if row_of[g] != usize::MAX {
                return Err(Error::invalid(format!("duplicate voxel at {p:?}")));
            }
            row_of[g] = r;
        }
        let mask: Vec<bool> = row_of.iter().map(|&r| r != usize::MAX).collect();
        let order: Vec<usize> = row_of.into_iter().filter(|&r| r != usize::MAX).collect();
        Self::new(dims, energies, mask, curves.select_rows(&order))
    }

    /// Number of unmasked voxels.
    pub fn n(&self) -> usize {
        self.grid_index.len()
    }

    /// Number of energy levels per curve.
    pub fn m(&self) -> usize {
        self.energies.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn curves(&self) -> &RowMatrix {
        &self.curves
    }

    pub fn curve(&self, i: usize) -> &[f64] {
        self.curves.row(i)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Linear (x-fastest) grid index of curve row `i`.
    pub fn grid_index(&self, i: usize) -> usize {
        self.grid_index[i]
    }

    /// Grid position (voxel indices) of curve row `i`.
    pub fn position(&self, i: usize) -> [usize; 3] {
        grid_position(self.dims, self.grid_index[i])
    }

    /// Spatial coordinate of curve row `i` in voxel-index units.
    pub fn coord(&self, i: usize) -> [f64; 3] {
        let p = self.position(i);
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    /// All coordinates as an `n x 3` matrix.
    pub fn coords(&self) -> RowMatrix {
        let mut out = RowMatrix::zeros(self.n(), 3);
        for i in 0..self.n() {
            out.row_mut(i).copy_from_slice(&self.coord(i));
        }
        out
    }

    /// Curve row of a grid position, if that voxel is unmasked.
    pub fn row_of(&self, pos: [usize; 3]) -> Option<usize> {
        let g = linear_index(self.dims, pos);
        self.grid_index.binary_search(&g).ok()
    }

    /// Keeps the listed rows (ascending), updating the mask.
    pub fn retain_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("rows to retain must be strictly ascending"));
        }
        let mut mask = vec![false; self.mask.len()];
        for &r in rows {
            mask[self.grid_index[r]] = true;
        }
        Self::new(
            self.dims,
            self.energies.clone(),
            mask,
            self.curves.select_rows(rows),
        )
    }

    /// Mean of every curve over the energy grid.
    pub fn curve_means(&self) -> Vec<f64> {
        let m = self.m() as f64;
        self.curves.rows().map(|r| r.iter().sum::<f64>() / m).collect()
    }
}

pub(crate) fn linear_index(dims: [usize; 3], p: [usize; 3]) -> usize {
    p[0] + dims[0] * (p[1] + dims[1] * p[2])
}

pub(crate) fn grid_position(dims: [usize; 3], g: usize) -> [usize; 3] {
    [g % dims[0], (g / dims[0]) % dims[1], g / (dims[0] * dims[1])]
}

fn check_energies(energies: &[f64]) -> Result<()> {
    if energies.is_empty() {
        return Err(Error::invalid("energy grid is empty"));
    }
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(Error::invalid("energies must be finite"));
    }
    if energies.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("energies not strictly increasing"));
    }
    Ok(())
}

/// Removes every voxel whose mean attenuation is below `threshold_hu`.
pub fn mask_air(vol: &SpectralVolume, threshold_hu: f64) -> Result<SpectralVolume> {
    if !threshold_hu.is_finite() {
        return Err(Error::invalid("air threshold must be finite"));
    }
    let keep: Vec<usize> = vol
        .curve_means()
        .into_iter()
        .enumerate()
        .filter_map(|(i, mean)| (mean >= threshold_hu).then_some(i))
        .collect();
    if keep.is_empty() {
        return Err(Error::invalid(format!(
            "every voxel is below the air threshold {threshold_hu} HU"
        )));
    }
    vol.retain_rows(&keep)
}

/// Per-axis affine map applied to voxel coordinates before they enter a gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordFrame {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
}

impl CoordFrame {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            scale: [1.0; 3],
        }
    }

    /// Zero mean and unit variance per axis. Axes with no spread keep scale 1.
    pub fn standardizing(coords: &RowMatrix) -> Self {
        let n = coords.nrows().max(1) as f64;
        let mut mean = [0.0; 3];
        for r in coords.rows() {
            for a in 0..3 {
                mean[a] += r[a];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; 3];
        for r in coords.rows() {
            for a in 0..3 {
                var[a] += (r[a] - mean[a]).powi(2);
            }
        }
        let scale = var.map(|v| {
            let sd = (v / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        });
        Self { mean, scale }
    }

    pub fn apply(&self, coords: &RowMatrix) -> RowMatrix {
        let mut out = coords.clone();
        for i in 0..out.nrows() {
            let r = out.row_mut(i);
            for a in 0..3 {
                r[a] = (r[a] - self.mean[a]) / self.scale[a];
            }
        }
        out
    }
}
