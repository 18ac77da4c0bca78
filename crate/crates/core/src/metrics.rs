//! Cluster evaluation: Davies-Bouldin indices, Dice overlap, tumor-cluster
//! selection and the adjusted Rand index.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::RowMatrix;
use crate::mixture::Labeling;
use crate::volume::SpectralVolume;

/// Which voxel attributes a separation index is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSpace {
    /// Voxel grid coordinates.
    Spatial,
    /// Raw attenuation curves (HU).
    Spectral,
}

impl FeatureSpace {
    pub fn features(self, vol: &SpectralVolume) -> RowMatrix {
        match self {
            FeatureSpace::Spatial => vol.coords(),
            FeatureSpace::Spectral => vol.curves().clone(),
        }
    }
}

/// Members and exact member-mean centroids of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    pub members: Vec<usize>,
    pub spatial_centroid: [f64; 3],
    pub spectral_centroid: Vec<f64>,
}

/// Summaries of all nonempty clusters, keyed by cluster id.
pub fn summarize(vol: &SpectralVolume, labeling: &Labeling) -> Result<Vec<(usize, ClusterSummary)>> {
    check_len(labeling, vol.n())?;
    let spatial = labeling.centroids(&vol.coords());
    let spectral = labeling.centroids(vol.curves());
    Ok(spatial
        .into_iter()
        .zip(spectral)
        .enumerate()
        .filter_map(|(c, (s, f))| {
            let s = s?;
            Some((
                c,
                ClusterSummary {
                    members: labeling.members(c),
                    spatial_centroid: [s[0], s[1], s[2]],
                    spectral_centroid: f?,
                },
            ))
        })
        .collect())
}

fn check_len(labeling: &Labeling, n: usize) -> Result<()> {
    if labeling.len() != n {
        return Err(Error::invalid(format!(
            "labeling has {} entries but there are {n} feature rows",
            labeling.len()
        )));
    }
    Ok(())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Centroid and mean member-to-centroid distance of a voxel group.
fn spread(features: &RowMatrix, members: &[usize]) -> (Vec<f64>, f64) {
    let p = features.ncols();
    let mut c = vec![0.0; p];
    for &i in members {
        for (s, v) in c.iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    let n = members.len() as f64;
    c.iter_mut().for_each(|v| *v /= n);
    let s = members
        .iter()
        .map(|&i| distance(features.row(i), &c))
        .sum::<f64>()
        / n;
    (c, s)
}

fn groups(labeling: &Labeling) -> Vec<Vec<usize>> {
    let mut g = vec![Vec::new(); labeling.k()];
    for (i, &l) in labeling.labels().iter().enumerate() {
        g[l].push(i);
    }
    g.retain(|m| !m.is_empty());
    g
}

fn ratio(a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)) -> Result<f64> {
    let d = distance(&a.0, &b.0);
    if d == 0.0 {
        return Err(Error::invalid(
            "two clusters share a centroid; Davies-Bouldin ratio undefined",
        ));
    }
    Ok((a.1 + b.1) / d)
}

/// Davies-Bouldin index over the nonempty clusters of `labeling`.
pub fn davies_bouldin(labeling: &Labeling, features: &RowMatrix) -> Result<f64> {
    check_len(labeling, features.nrows())?;
    let stats: Vec<_> = groups(labeling).iter().map(|m| spread(features, m)).collect();
    if stats.len() < 2 {
        return Err(Error::invalid(
            "Davies-Bouldin index needs at least two nonempty clusters",
        ));
    }
    let worst: Vec<f64> = (0..stats.len())
        .into_par_iter()
        .map(|a| {
            (0..stats.len())
                .filter(|&b| b != a)
                .map(|b| ratio(&stats[a], &stats[b]))
                .try_fold(f64::NEG_INFINITY, |acc, r| r.map(|r| acc.max(r)))
        })
        .collect::<Result<_>>()?;
    Ok(worst.iter().sum::<f64>() / stats.len() as f64)
}

/// Tumor Davies-Bouldin index: the merged tumor clusters against each other
/// nonempty cluster, worst ratio.
pub fn davies_bouldin_tumor(
    labeling: &Labeling,
    tumor_clusters: &[usize],
    features: &RowMatrix,
) -> Result<f64> {
    check_len(labeling, features.nrows())?;
    if tumor_clusters.is_empty() {
        return Err(Error::invalid("no tumor clusters given"));
    }
    if let Some(&c) = tumor_clusters.iter().find(|&&c| c >= labeling.k()) {
        return Err(Error::invalid(format!("tumor cluster {c} is out of range")));
    }
    let is_tumor = |l: usize| tumor_clusters.contains(&l);
    let tumor: Vec<usize> = (0..labeling.len())
        .filter(|&i| is_tumor(labeling.labels()[i]))
        .collect();
    if tumor.is_empty() {
        return Err(Error::invalid("tumor clusters have no members"));
    }
    let mut others = vec![Vec::new(); labeling.k()];
    for (i, &l) in labeling.labels().iter().enumerate() {
        if !is_tumor(l) {
            others[l].push(i);
        }
    }
    others.retain(|m| !m.is_empty());
    if others.is_empty() {
        return Err(Error::invalid(
            "tumor clusters cover every cluster; tumor index undefined",
        ));
    }
    let t = spread(features, &tumor);
    others
        .iter()
        .map(|m| ratio(&t, &spread(features, m)))
        .try_fold(f64::NEG_INFINITY, |acc, r| r.map(|r| acc.max(r)))
}

/// Dice overlap of two voxel masks.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("masks differ in length"));
    }
    let na = a.iter().filter(|&&x| x).count();
    let nb = b.iter().filter(|&&x| x).count();
    if na + nb == 0 {
        return Err(Error::invalid("Dice undefined for two empty regions"));
    }
    let both = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Clusters chosen to cover the truth region and the Dice they achieve merged.
#[derive(Debug, Clone, PartialEq)]
pub struct TumorSelection {
    pub clusters: Vec<usize>,
    pub dice: f64,
}

/// Subset of clusters whose union has maximal Dice with `truth`.
///
/// Dice of a union is `2Σa/(Σs + t)` with `a` the overlap and `s` the size of
/// each chosen cluster. An optimal union takes every cluster whose precision
/// `a/s` exceeds half the optimal Dice, so the best union is a prefix of the
/// clusters sorted by precision. All prefixes are scanned.
pub fn select_tumor_clusters(labeling: &Labeling, truth: &[bool]) -> Result<TumorSelection> {
    if labeling.len() != truth.len() {
        return Err(Error::invalid("truth mask does not match the labeling"));
    }
    let t = truth.iter().filter(|&&x| x).count();
    if t == 0 {
        return Err(Error::invalid("truth region is empty"));
    }
    let mut size = vec![0usize; labeling.k()];
    let mut overlap = vec![0usize; labeling.k()];
    for (&l, &inside) in labeling.labels().iter().zip(truth) {
        size[l] += 1;
        overlap[l] += inside as usize;
    }
    let mut order: Vec<usize> = (0..labeling.k()).filter(|&c| overlap[c] > 0).collect();
    // precision descending, compared exactly by cross-multiplication
    order.sort_by(|&x, &y| {
        (overlap[y] * size[x])
            .cmp(&(overlap[x] * size[y]))
            .then(x.cmp(&y))
    });
    let (mut a, mut s) = (0usize, 0usize);
    let mut best = (0.0, 0usize);
    for (j, &c) in order.iter().enumerate() {
        a += overlap[c];
        s += size[c];
        let d = 2.0 * a as f64 / (s + t) as f64;
        if d > best.0 {
            best = (d, j + 1);
        }
    }
    let mut clusters = order[..best.1].to_vec();
    clusters.sort_unstable();
    Ok(TumorSelection {
        clusters,
        dice: best.0,
    })
}

/// Adjusted Rand index between two labelings of the same items. Returns 1 when
/// both labelings are trivial in the same way (the index is 0/0).
pub fn adjusted_rand(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("labelings differ in length"));
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let pairs = |v: u64| (v * v.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&v| pairs(v)).sum();
    let sa: f64 = rows.iter().map(|&v| pairs(v)).sum();
    let sb: f64 = cols.iter().map(|&v| pairs(v)).sum();
    let total = pairs(a.len() as u64);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}
