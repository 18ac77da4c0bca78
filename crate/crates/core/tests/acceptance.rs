//! Acceptance gate: runs every criterion and prints one PASS/FAIL line each.
//! Exits non-zero when any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::*;
use specmix::baselines::{gmm_spectral, kmeans_joint};
use specmix::basis::{BasisSpec, OlsProjector};
use specmix::fmr;
use specmix::gating::{update_gaussian_gate, update_softmax_gate, Gate, GaussianGate, SoftmaxGate};
use specmix::linalg::RowMatrix;
use specmix::metrics::{adjusted_rand, davies_bouldin, dice, select_tumor_clusters};
use specmix::model::{
    CoefComponent, Experts, FitConfig, ModelParams, RegressionComponent, Variant, SIGMA2_FLOOR,
};
use specmix::twofold::{self, m_step_coef};
use specmix::volume::{render_phantom, synth_phantom, CoordFrame, CubicCurve, PhantomConfig};
use specmix::{Labeling, Responsibilities, SpectralVolume};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn fit_any(vol: &SpectralVolume, cfg: &FitConfig) -> (ModelParams, specmix::FitReport) {
    if cfg.variant.is_twofold() {
        twofold::fit_twofold(vol, cfg).expect("two-fold fit")
    } else {
        fmr::fit(vol, cfg).expect("fit")
    }
}

fn monotonicity() -> Outcome {
    let start = Instant::now();
    let mut worst = f64::INFINITY;
    let mut runs = 0;
    let mut bad = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for v in 0..50u64 {
        let nz = rng.random_range(2..=5);
        let nx = rng.random_range(8..=20);
        let ny = rng.random_range(8..=(2000 / (nx * nz)).min(20));
        let k_true = rng.random_range(2..=5);
        let noise = rng.random_range(5.0..25.0);
        let phantom = synth_phantom(&PhantomConfig::new([nx, ny, nz], k_true, noise, 1000 + v)).unwrap();
        let vol = &phantom.volume;
        assert!(vol.n() <= 2000 && vol.m() == 21);
        let k = [2, 3, 5][v as usize % 3];
        for variant in [Variant::SgMFR, Variant::SgMVFR] {
            let cfg = FitConfig::new(variant, k).with_lambda(1.0);
            let (_, report) = fit_any(vol, &cfg);
            runs += 1;
            for (i, w) in report.loglik_trace.windows(2).enumerate() {
                let step = w[1] - w[0];
                worst = worst.min(step);
                if step < -1e-8 {
                    bad.push(format!("volume {v} {} step {i}: {step:.3e}", variant.name()));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = bad.is_empty() && secs < 300.0;
    outcome(
        pass,
        format!(
            "{runs} fits, smallest step {worst:.3e}, {} violations{}, {secs:.1} s",
            bad.len(),
            bad.first().map(|b| format!(" (first: {b})")).unwrap_or_default()
        ),
    )
}

fn exact_recovery() -> Outcome {
    let phantom = synth_phantom(&PhantomConfig::new([30, 30, 4], 3, 0.0, 11)).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, basis) in [
        ("poly", BasisSpec::polynomial(3)),
        ("bspl", BasisSpec::bspline(3, 4)),
    ] {
        let start = Instant::now();
        let cfg = FitConfig::new(Variant::SgMFR, 3).with_basis(basis);
        let (params, report) = fmr::fit(&phantom.volume, &cfg).unwrap();
        let labels = fmr::label(&phantom.volume, &params).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let ari = adjusted_rand(labels.labels(), &phantom.true_labels).unwrap();
        let Experts::Regression(comps) = &params.experts else {
            unreachable!()
        };
        let max_s2 = comps.iter().map(|c| c.sigma2).fold(0.0, f64::max);
        let ok = ari == 1.0 && max_s2 <= SIGMA2_FLOOR && report.converged && secs < 30.0;
        pass &= ok;
        detail.push(format!("{name}: ARI {ari}, max sigma2 {max_s2:.3e}, {secs:.2} s"));
    }
    outcome(pass, detail.join("; "))
}

fn max_curve_gap(phantom: &specmix::volume::Phantom) -> f64 {
    let e = phantom.volume.energies();
    let mut min_pair = f64::INFINITY;
    for a in 0..phantom.region_curves.len() {
        for b in a + 1..phantom.region_curves.len() {
            let gap = e
                .iter()
                .map(|&x| (phantom.region_curves[a].eval(x) - phantom.region_curves[b].eval(x)).abs())
                .fold(0.0, f64::max);
            min_pair = min_pair.min(gap);
        }
    }
    min_pair
}

fn noisy_recovery() -> Outcome {
    let mut aris = Vec::new();
    let mut min_gap = f64::INFINITY;
    for seed in 0..10 {
        let phantom = synth_phantom(&PhantomConfig::new([30, 30, 4], 3, 10.0, 300 + seed)).unwrap();
        min_gap = min_gap.min(max_curve_gap(&phantom));
        let (params, _) = fmr::fit(&phantom.volume, &FitConfig::new(Variant::SgMFR, 3)).unwrap();
        let labels = fmr::label(&phantom.volume, &params).unwrap();
        aris.push(adjusted_rand(labels.labels(), &phantom.true_labels).unwrap());
    }
    let med = median(aris.clone());
    outcome(
        med >= 0.9 && min_gap >= 50.0,
        format!(
            "median ARI {med:.4} (min {:.4}), smallest curve separation {min_gap:.1} HU",
            aris.iter().cloned().fold(f64::INFINITY, f64::min)
        ),
    )
}

fn selected_dice(labeling: &Labeling, tumor: &[bool]) -> f64 {
    select_tumor_clusters(labeling, tumor).unwrap().dice
}

fn method_ordering() -> Outcome {
    let mut holds = 0;
    let mut table: Vec<[f64; 4]> = Vec::new();
    for seed in 0..10 {
        let phantom = synth_phantom(&PhantomConfig::new([30, 30, 4], 4, 20.0, 500 + seed)).unwrap();
        let vol = &phantom.volume;
        let tumor = &phantom.tumor_mask;
        let sg = {
            let (p, _) = fmr::fit(vol, &FitConfig::new(Variant::SgMFR, 6)).unwrap();
            selected_dice(&fmr::label(vol, &p).unwrap(), tumor)
        };
        let sgv = {
            let (p, _) = twofold::fit_twofold(vol, &FitConfig::new(Variant::SgMVFR, 6)).unwrap();
            selected_dice(&fmr::label(vol, &p).unwrap(), tumor)
        };
        let km = selected_dice(&kmeans_joint(vol, 6, 1.0).unwrap().labeling, tumor);
        let gmm = selected_dice(&gmm_spectral(vol, 24).unwrap().labeling, tumor);
        if sg >= km && sgv >= km && km >= gmm {
            holds += 1;
        }
        table.push([sg, sgv, km, gmm]);
    }
    let med: Vec<f64> = (0..4)
        .map(|j| median(table.iter().map(|r| r[j]).collect()))
        .collect();
    outcome(
        holds >= 8,
        format!(
            "ordering holds on {holds}/10; median Dice SgMFR {:.3}, SgMVFR {:.3}, kmeans {:.3}, gmm {:.3}",
            med[0], med[1], med[2], med[3]
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut worst = [0.0f64; 4];
    for seed in 0..5u64 {
        let n = 12 + seed as usize * 2;
        let vol = random_volume(n, 21, 40 + seed);
        let k = 3;
        let spec = BasisSpec::bspline(3, 4);
        let design = oracle_bspline_design(vol.energies(), 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // E-step under a Gaussian gate and regression experts
        let proj =
            OlsProjector::from_matrix(DMatrix::from_fn(21, spec.dim(), |i, j| design[i][j]), false).unwrap();
        let comps: Vec<RegressionComponent> = (0..k)
            .map(|_| {
                let i = rng.random_range(0..n);
                RegressionComponent {
                    beta: proj.coefficients(vol.curve(i)),
                    sigma2: rng.random_range(150.0..600.0),
                }
            })
            .collect();
        let means: Vec<Vector3<f64>> = (0..k)
            .map(|_| {
                Vector3::new(
                    rng.random_range(0.0..5.0),
                    rng.random_range(0.0..4.0),
                    rng.random_range(-0.5..0.5),
                )
            })
            .collect();
        let covs: Vec<Matrix3<f64>> = (0..k)
            .map(|_| {
                let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                a * a.transpose() + Matrix3::identity() * 0.5
            })
            .collect();
        let weights = vec![0.5, 0.3, 0.2];
        let gate = GaussianGate::new(weights.clone(), means.clone(), covs.clone()).unwrap();
        let params = ModelParams {
            variant: Variant::SgMFR,
            gate: Gate::Gaussian(gate),
            experts: Experts::Regression(comps.clone()),
            basis: spec,
            lambda: 1.0,
            coord_frame: CoordFrame::identity(),
        };
        let tau = fmr::e_step(&vol, &params).unwrap();
        let mut want = Vec::new();
        for i in 0..n {
            let v = vol.coord(i);
            let logs: Vec<Dd> = (0..k)
                .map(|c| {
                    let cov: Vec<Vec<f64>> = (0..3)
                        .map(|a| (0..3).map(|b| covs[c][(a, b)]).collect())
                        .collect();
                    let mean = [means[c][0], means[c][1], means[c][2]];
                    let mut acc = Dd::new(weights[c]).ln() + dd_gauss_logpdf(&v, &mean, &cov);
                    let s2 = Dd::new(comps[c].sigma2);
                    for (r, &y) in vol.curve(i).iter().enumerate() {
                        let fit = dd_sum(
                            (0..spec.dim()).map(|j| Dd::new(design[r][j]) * Dd::new(comps[c].beta[j])),
                        );
                        let res = Dd::new(y) - fit;
                        acc = acc
                            - Dd::new(0.5) * (Dd::new(2.0 * std::f64::consts::PI) * s2).ln()
                            - res * res / (Dd::new(2.0) * s2);
                    }
                    acc
                })
                .collect();
            want.extend(dd_normalize(&logs));
        }
        worst[0] = worst[0].max(rel_err(tau.matrix().as_slice(), &want));

        // regression M-step
        let soft = Responsibilities::new(random_tau(n, k, 90 + seed)).unwrap();
        let got = fmr::m_step_regression(&vol, &soft, spec).unwrap();
        for c in 0..k {
            let w: Vec<f64> = (0..n).map(|i| soft.row(i)[c]).collect();
            let ys: Vec<&[f64]> = (0..n).map(|i| vol.curve(i)).collect();
            let beta = oracle_wls(&design, &ys, &w);
            let mut rss = Dd::ZERO;
            for i in 0..n {
                for r in 0..21 {
                    let fit = dd_sum((0..beta.len()).map(|j| Dd::new(design[r][j]) * Dd::new(beta[j])));
                    let res = Dd::new(vol.curve(i)[r]) - fit;
                    rss = rss + Dd::new(w[i]) * res * res;
                }
            }
            let s2 = (rss / (Dd::new(21.0) * dd_sum(w.iter().map(|&x| Dd::new(x))))).to_f64();
            worst[1] = worst[1]
                .max(rel_err(&dvec(&got[c].beta), &beta))
                .max(rel_err(&[got[c].sigma2], &[s2]));
        }

        // Gaussian gate M-step
        let coords = RowMatrix::from_vec(
            n,
            3,
            (0..3 * n)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 4.0 + 10.0)
                .collect(),
        )
        .unwrap();
        let lambda = 0.3;
        let upd = update_gaussian_gate(&coords, &soft, lambda, None).unwrap().gate;
        for c in 0..k {
            let w: Vec<f64> = (0..n).map(|i| soft.row(i)[c]).collect();
            let rows: Vec<&[f64]> = coords.rows().collect();
            let (mass, mean, cov) = oracle_moments(&rows, &w);
            let cov_l: Vec<f64> = flatten(&cov).iter().map(|v| v * lambda).collect();
            let got_cov: Vec<f64> = (0..3)
                .flat_map(|a| (0..3).map(move |b| (a, b)))
                .map(|(a, b)| upd.covariances()[c][(a, b)])
                .collect();
            worst[2] = worst[2]
                .max(rel_err(&[upd.weights()[c]], &[mass / n as f64]))
                .max(rel_err(upd.means()[c].as_slice(), &mean))
                .max(rel_err(&got_cov, &cov_l));
        }

        // coefficient M-step
        let d = 6;
        let coefs = RowMatrix::from_vec(
            n,
            d,
            (0..n * d)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 50.0)
                .collect(),
        )
        .unwrap();
        let got: Vec<CoefComponent> = m_step_coef(&coefs, &soft).unwrap();
        for c in 0..k {
            let w: Vec<f64> = (0..n).map(|i| soft.row(i)[c]).collect();
            let rows: Vec<&[f64]> = coefs.rows().collect();
            let (_, mean, cov) = oracle_moments(&rows, &w);
            worst[3] = worst[3]
                .max(rel_err(&dvec(&got[c].mean), &mean))
                .max(rel_err(&flatten(&dmatrix_rows(&got[c].cov)), &flatten(&cov)));
        }
    }
    outcome(
        worst.iter().all(|&w| w <= 1e-8),
        format!(
            "max relative error: e_step {:.2e}, m_step_regression {:.2e}, update_gaussian_gate {:.2e}, m_step_coef {:.2e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

/// Gradient ascent with backtracking on the weighted multinomial-logistic
/// log-likelihood, written without reference to the library's gate code.
fn oracle_softmax_optimum(x: &[[f64; 4]], tau: &[Vec<f64>], k: usize) -> f64 {
    let p = (k - 1) * 4;
    let objective = |a: &[f64]| -> f64 {
        x.iter()
            .zip(tau)
            .map(|(xi, ti)| {
                let mut eta: Vec<f64> = (0..k - 1)
                    .map(|c| (0..4).map(|j| a[c * 4 + j] * xi[j]).sum())
                    .collect();
                eta.push(0.0);
                let mx = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + eta.iter().map(|e| (e - mx).exp()).sum::<f64>().ln();
                ti.iter().zip(&eta).map(|(t, e)| t * (e - lse)).sum::<f64>()
            })
            .sum()
    };
    let gradient = |a: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; p];
        for (xi, ti) in x.iter().zip(tau) {
            let mut eta: Vec<f64> = (0..k - 1)
                .map(|c| (0..4).map(|j| a[c * 4 + j] * xi[j]).sum())
                .collect();
            eta.push(0.0);
            let mx = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = eta.iter().map(|e| (e - mx).exp()).sum();
            for c in 0..k - 1 {
                let pi = (eta[c] - mx).exp() / z;
                for j in 0..4 {
                    g[c * 4 + j] += (ti[c] - pi) * xi[j];
                }
            }
        }
        g
    };
    let mut a = vec![0.0; p];
    let mut f = objective(&a);
    let mut step = 1e-2;
    for _ in 0..200_000 {
        let g = gradient(&a);
        let gn2: f64 = g.iter().map(|v| v * v).sum();
        if gn2.sqrt() < 1e-11 {
            break;
        }
        loop {
            let trial: Vec<f64> = a.iter().zip(&g).map(|(ai, gi)| ai + step * gi).collect();
            let ft = objective(&trial);
            if ft >= f + 1e-4 * step * gn2 {
                a = trial;
                f = ft;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                return f;
            }
        }
    }
    f
}

fn softmax_cross_check() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let n = 40;
        let k = 3 + seed as usize % 2;
        let coords =
            RowMatrix::from_vec(n, 3, (0..3 * n).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let tau = Responsibilities::new(random_tau(n, k, 800 + seed)).unwrap();
        let upd = update_softmax_gate(&coords, &tau, &SoftmaxGate::uniform(k, true)).unwrap();
        let x: Vec<[f64; 4]> = coords.rows().map(|r| [1.0, r[0], r[1], r[2]]).collect();
        let t: Vec<Vec<f64>> = (0..n).map(|i| tau.row(i).to_vec()).collect();
        let oracle = oracle_softmax_optimum(&x, &t, k);
        worst = worst.max((upd.objective - oracle).abs());
    }
    outcome(
        worst <= 1e-6,
        format!("max |objective - oracle| = {worst:.3e} over 5 instances"),
    )
}

/// Mean over nonempty clusters of the mean squared member distance to the
/// spatial centroid.
fn spatial_scatter(vol: &SpectralVolume, labeling: &Labeling) -> f64 {
    let coords = vol.coords();
    let cents = labeling.centroids(&coords);
    let mut per = Vec::new();
    for (c, cent) in cents.iter().enumerate() {
        let Some(cent) = cent else { continue };
        let members = labeling.members(c);
        let s: f64 = members
            .iter()
            .map(|&i| {
                coords
                    .row(i)
                    .iter()
                    .zip(cent)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum();
        per.push(s / members.len() as f64);
    }
    per.iter().sum::<f64>() / per.len() as f64
}

fn lambda_behavior() -> Outcome {
    let dims = [40, 10, 1];
    let grid: Vec<usize> = (0..400).map(|g| usize::from((g / 40) >= 5)).collect();
    let curves = vec![CubicCurve::constant(50.0), CubicCurve::constant(54.0)];
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let phantom = render_phantom(
            dims,
            specmix::volume::default_energies(),
            grid.clone(),
            curves.clone(),
            Some(1),
            10.0,
            &mut rng,
        )
        .unwrap();
        let scatter = |lambda: f64| {
            let cfg = FitConfig::new(Variant::SgMFR, 2).with_lambda(lambda);
            let (p, _) = fmr::fit(&phantom.volume, &cfg).unwrap();
            spatial_scatter(&phantom.volume, &fmr::label(&phantom.volume, &p).unwrap())
        };
        let (small, full) = (scatter(0.075), scatter(1.0));
        pass &= small < full;
        detail.push(format!("seed {seed}: {small:.2} vs {full:.2}"));
    }
    outcome(
        pass,
        format!("scatter at lambda 0.075 vs 1.0: {}", detail.join(", ")),
    )
}

fn metric_goldens() -> Outcome {
    let lab = Labeling::new(vec![0, 0, 1, 1], 2);
    let x = RowMatrix::from_vec(4, 1, vec![0.0, 2.0, 10.0, 12.0]).unwrap();
    let db = davies_bouldin(&lab, &x).unwrap();
    let a = [true, true, true, true, false, false];
    let b = [false, false, true, true, true, true];
    let dc = dice(&a, &b).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut mismatches = 0;
    for _ in 0..100 {
        let k = rng.random_range(1..=10);
        let n = rng.random_range(10..80);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let p_in = rng.random_range(0.1..0.9);
        let mut truth: Vec<bool> = (0..n).map(|_| rng.random_bool(p_in)).collect();
        truth[0] = true;
        let labeling = Labeling::new(labels.clone(), k);
        let got = select_tumor_clusters(&labeling, &truth).unwrap();
        let mut best = 0.0f64;
        for subset in 0u32..(1 << k) {
            let mask: Vec<bool> = labels.iter().map(|&l| subset >> l & 1 == 1).collect();
            if mask.iter().any(|&m| m) {
                best = best.max(dice(&mask, &truth).unwrap());
            }
        }
        let mask: Vec<bool> = labels.iter().map(|l| got.clusters.contains(l)).collect();
        let achieved = if mask.iter().any(|&m| m) {
            dice(&mask, &truth).unwrap()
        } else {
            0.0
        };
        if (got.dice - best).abs() > 1e-12 || (achieved - got.dice).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    outcome(
        (db - 0.2).abs() < 1e-12 && dc == 0.5 && mismatches == 0,
        format!("DB {db}, Dice {dc}, selection mismatches vs exhaustive {mismatches}/100"),
    )
}

fn performance() -> Outcome {
    let phantom = synth_phantom(&PhantomConfig::new([50, 50, 2], 5, 10.0, 77)).unwrap();
    let mut cfg = FitConfig::new(Variant::SgMFR, 10);
    cfg.threads = Some(1);
    let start = Instant::now();
    let (_, report) = fmr::fit(&phantom.volume, &cfg).unwrap();
    let single = start.elapsed().as_secs_f64();
    let envelope = report.converged && single < 60.0;

    let big = synth_phantom(&PhantomConfig::new([100, 100, 5], 5, 10.0, 78)).unwrap();
    let timed = |threads: usize| {
        let mut cfg = FitConfig::new(Variant::SgMFR, 10);
        cfg.threads = Some(threads);
        cfg.tol = 0.0;
        cfg.max_iter = 10;
        let start = Instant::now();
        let (p, _) = fmr::fit(&big.volume, &cfg).unwrap();
        (start.elapsed().as_secs_f64(), p)
    };
    let (t1, p1) = timed(1);
    let (t4, p4) = timed(4);
    let speedup = t1 / t4;
    let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
    outcome(
        envelope && speedup >= 2.0,
        format!(
            "n=5000 K=10: converged={} in {single:.2} s ({} iterations); n=50000: 1 thread {t1:.2} s, 4 threads {t4:.2} s, speedup {speedup:.2}x on {cores} available core(s); results identical across thread counts: {}",
            report.converged,
            report.iterations,
            p1 == p4
        ),
    )
}

fn run_cli(args: &[&str], dir: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_specmix"))
        .args(args)
        .current_dir(dir)
        .status()
        .expect("spawn specmix");
    assert!(status.success(), "specmix {args:?} failed");
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut differing = Vec::new();
    for run in ["a", "b"] {
        run_cli(
            &[
                "synth",
                "--dims",
                "16,16,3",
                "--k-true",
                "3",
                "--seed",
                "7",
                "--noise-sd",
                "10",
                "--out",
                &format!("ph_{run}"),
            ],
            dir,
        );
    }
    for f in ["volume.svol", "labels.csv"] {
        if std::fs::read(dir.join("ph_a").join(f)).unwrap()
            != std::fs::read(dir.join("ph_b").join(f)).unwrap()
        {
            differing.push(format!("synth {f}"));
        }
    }
    let methods = [
        "sgmfr-bspl",
        "sgmfr-poly",
        "ssmfr-bspl",
        "sgmvfr-bspl",
        "ssmvfr-bspl",
        "gmm",
        "kmeans",
    ];
    for m in methods {
        for (run, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
            let out = format!("fit_{m}_{run}");
            run_cli(
                &[
                    "fit",
                    "--volume",
                    "ph_a/volume.svol",
                    "--method",
                    m,
                    "--k",
                    "4",
                    "--seed",
                    "5",
                    "--threads",
                    threads,
                    "--out",
                    &out,
                ],
                dir,
            );
            run_cli(
                &[
                    "label",
                    "--model",
                    &format!("{out}/model.json"),
                    "--volume",
                    "ph_a/volume.svol",
                    "--out",
                    &format!("{out}/relabel.csv"),
                ],
                dir,
            );
        }
        for f in ["model.json", "labels.csv", "relabel.csv"] {
            let a = std::fs::read(dir.join(format!("fit_{m}_a")).join(f)).unwrap();
            for run in ["b", "c"] {
                if a != std::fs::read(dir.join(format!("fit_{m}_{run}")).join(f)).unwrap() {
                    differing.push(format!("{m} {f} (run {run})"));
                }
            }
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "synth plus {} fit/label pipelines byte-identical across repeated runs and thread counts",
                methods.len()
            )
        } else {
            format!("differences: {}", differing.join(", "))
        },
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("EM monotonicity", monotonicity),
        ("exact recovery", exact_recovery),
        ("noisy recovery", noisy_recovery),
        ("method ordering", method_ordering),
        ("oracle equivalence", oracle_equivalence),
        ("softmax M-step cross-check", softmax_cross_check),
        ("lambda behavior", lambda_behavior),
        ("metric golden values", metric_goldens),
        ("performance envelope", performance),
        ("CLI determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.1} s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
        if !result.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all criteria pass");
}
