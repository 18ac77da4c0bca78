//! Command-line front end: phantom synthesis, fitting, labeling, evaluation
//! and parameter sweeps.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use crate::baselines::{self, DEFAULT_GMM_COMPONENTS};
use crate::basis::BasisSpec;
use crate::em;
use crate::error::{Error, Result};
use crate::metrics::{
    adjusted_rand, davies_bouldin, davies_bouldin_tumor, dice, select_tumor_clusters, FeatureSpace,
};
use crate::mixture::Labeling;
use crate::model::{FitConfig, FitReport, Variant, DEFAULT_K, DEFAULT_LAMBDA, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::model_file::{load_model, save_model, to_canonical_json, SavedModel};
use crate::volume::{
    load_volume, read_truth_csv, save_volume, synth_phantom, PhantomConfig, SpectralVolume, VolumeFormat,
};
use crate::{fmr, twofold};

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "SPECMIX_THREADS";

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "specmix",
    version,
    about = "Spatially gated functional mixtures for spectral CT volumes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom volume and its ground truth.
    Synth(SynthArgs),
    /// Fit a clustering model to a volume.
    Fit(FitArgs),
    /// Label a volume with a fitted model.
    Label(LabelArgs),
    /// Score a labeling against ground truth.
    Eval(EvalArgs),
    /// Alternating sweep over cluster count and spatial shrinkage.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Grid size as nx,ny,nz.
    #[arg(long, default_value = "30,30,4", value_parser = parse_dims)]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub k_true: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gaussian noise standard deviation in HU.
    #[arg(long, default_value_t = 10.0)]
    pub noise_sd: f64,
    /// Output directory for volume.svol and labels.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    SgmfrBspl,
    SgmfrPoly,
    SsmfrBspl,
    SgmvfrBspl,
    SsmvfrBspl,
    Gmm,
    Kmeans,
}

impl Method {
    fn variant(self) -> Option<Variant> {
        match self {
            Method::SgmfrBspl | Method::SgmfrPoly => Some(Variant::SgMFR),
            Method::SsmfrBspl => Some(Variant::SsMFR),
            Method::SgmvfrBspl => Some(Variant::SgMVFR),
            Method::SsmvfrBspl => Some(Variant::SsMVFR),
            Method::Gmm | Method::Kmeans => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Method::SgmfrBspl => "sgmfr-bspl",
            Method::SgmfrPoly => "sgmfr-poly",
            Method::SsmfrBspl => "ssmfr-bspl",
            Method::SgmvfrBspl => "sgmvfr-bspl",
            Method::SsmvfrBspl => "ssmvfr-bspl",
            Method::Gmm => "gmm",
            Method::Kmeans => "kmeans",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Spectral volume (.svol or .csv).
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::SgmfrBspl)]
    pub method: Method,
    #[arg(long, default_value_t = 3)]
    pub basis_degree: usize,
    /// Interior knots of the B-spline basis.
    #[arg(long, default_value_t = 4)]
    pub knots: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    /// Seed for randomly started k-means initialization (lattice start when absent).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to SPECMIX_THREADS, then all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Weight of the standardized coordinates in the joint k-means baseline.
    #[arg(long, default_value_t = 1.0)]
    pub spatial_weight: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of clusters (initial components for gmm, default 150 there).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Output directory for model.json, report.json and labels.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    /// Labels CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for one PNG per axial slice.
    #[arg(long)]
    pub png_dir: Option<PathBuf>,
    /// Ground-truth labels.csv whose tumor outline is drawn on the renders.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Pixels per voxel edge in the renders.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    pub scale: u32,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labels CSV written by fit or label.
    #[arg(long)]
    pub labels: PathBuf,
    /// Ground-truth labels.csv written by synth.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    /// report.json of the fit, for the runtime column.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Ground truth; sweeps maximize Dice when given, else minimize spectral DB.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![10usize, 20, 40])]
    pub k_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.025, 0.075, 0.25, 1.0])]
    pub lambda_grid: Vec<f64>,
    /// Cluster count held fixed in the first lambda sweep.
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k_start: usize,
    /// Number of (lambda sweep, K sweep) rounds.
    #[arg(long, default_value_t = 1)]
    pub rounds: usize,
    /// Sweep results CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected nx,ny,nz, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("bad dimension {p:?}"))?;
        if *o == 0 {
            return Err("dimensions must be positive".into());
        }
    }
    Ok(out)
}

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_NUMERICAL
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Label(a) => cmd_label(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => cmd_bench(&a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn load(path: &Path) -> Result<SpectralVolume> {
    load_volume(path, VolumeFormat::from_path(path))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = PhantomConfig::new(args.dims, args.k_true as usize, args.noise_sd, args.seed);
    let phantom = synth_phantom(&cfg)?;
    fs::create_dir_all(&args.out)?;
    save_volume(
        &phantom.volume,
        &args.out.join("volume.svol"),
        VolumeFormat::SvolBinary,
    )?;
    let mut w = create(&args.out.join("labels.csv"))?;
    crate::volume::write_truth_csv(&phantom, &mut w)?;
    w.flush()?;
    info!("wrote {} voxels to {}", phantom.volume.n(), args.out.display());
    Ok(())
}

fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        _ => Ok(None),
    }
}

/// Outcome of one fit from the command line.
pub struct FitOutcome {
    pub model: SavedModel,
    /// Final log-likelihood, or within-cluster SSE for k-means.
    pub score: Option<f64>,
    pub labeling: Labeling,
    pub report: FitReport,
    pub runtime_s: f64,
}

/// Runs the fitter selected by `args.method`.
pub fn fit_method(
    vol: &SpectralVolume,
    args: &ModelArgs,
    k: Option<usize>,
    lambda: f64,
) -> Result<FitOutcome> {
    let threads = resolve_threads(args.threads)?;
    let start = Instant::now();
    let (model, score, labeling, report) = match args.method.variant() {
        Some(variant) => {
            let basis = match args.method {
                Method::SgmfrPoly => BasisSpec::polynomial(args.basis_degree),
                _ => BasisSpec::bspline(args.basis_degree, args.knots),
            };
            let mut cfg = FitConfig::new(variant, k.unwrap_or(DEFAULT_K))
                .with_basis(basis)
                .with_lambda(lambda);
            cfg.tol = args.tol;
            cfg.max_iter = args.max_iter;
            cfg.seed = args.seed;
            cfg.threads = threads;
            let (params, report) = if variant.is_twofold() {
                twofold::fit_twofold(vol, &cfg)?
            } else {
                fmr::fit(vol, &cfg)?
            };
            let labeling = em::with_threads(threads, || fmr::label(vol, &params))??;
            let score = report.final_loglik();
            (SavedModel::Spatial(params), score, labeling, report)
        }
        None if args.method == Method::Gmm => {
            let k0 = k.unwrap_or(DEFAULT_GMM_COMPONENTS);
            let fit = em::with_threads(threads, || baselines::gmm_spectral(vol, k0))??;
            let report = FitReport {
                converged: fit.converged,
                iterations: fit.iterations,
                loglik_trace: fit.loglik_trace.clone(),
                ..FitReport::default()
            };
            let score = fit.loglik_trace.last().copied();
            (SavedModel::Gmm(fit.model), score, fit.labeling, report)
        }
        None => {
            let k = k.unwrap_or(DEFAULT_K);
            let fit = em::with_threads(threads, || baselines::kmeans_joint(vol, k, args.spatial_weight))??;
            let report = FitReport {
                converged: true,
                iterations: fit.sse_trace.len(),
                ..FitReport::default()
            };
            let score = fit.sse_trace.last().copied();
            (SavedModel::KMeans(fit.model), score, fit.labeling, report)
        }
    };
    Ok(FitOutcome {
        model,
        score,
        labeling,
        report,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    method: &'a str,
    #[serde(rename = "K")]
    k: usize,
    lambda: Option<f64>,
    iterations: usize,
    converged: bool,
    restarts_used: usize,
    collapsed_clusters: &'a [usize],
    loglik_trace: &'a [f64],
    runtime_s: f64,
}

/// Writes `row,x,y,z,label` with 1-based labels.
pub fn write_labels(vol: &SpectralVolume, labeling: &Labeling, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(create(path)?);
    let fmt = |e: csv::Error| Error::format(e.to_string());
    wtr.write_record(["row", "x", "y", "z", "label"]).map_err(fmt)?;
    for (i, &l) in labeling.labels().iter().enumerate() {
        let [x, y, z] = vol.position(i);
        wtr.write_record([
            i.to_string(),
            x.to_string(),
            y.to_string(),
            z.to_string(),
            (l + 1).to_string(),
        ])
        .map_err(fmt)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads the `label` column of a labels CSV as 0-based ids.
pub fn read_labels(path: &Path) -> Result<Labeling> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::format(e.to_string()))?.clone();
    let col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::format(format!("{} has no label column", path.display())))?;
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(e.to_string()))?;
        let l: usize = rec
            .get(col)
            .and_then(|v| v.trim().parse().ok())
            .filter(|&l| l >= 1)
            .ok_or_else(|| Error::format(format!("labels line {}: bad label", line + 2)))?;
        labels.push(l - 1);
    }
    Ok(Labeling::from_labels(labels))
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let vol = load(&args.model.volume)?;
    let out = fit_method(&vol, &args.model, args.k.map(|k| k as usize), args.lambda)?;
    fs::create_dir_all(&args.out)?;
    save_model(&out.model, out.score, &args.out.join("model.json"))?;
    let report = ReportDoc {
        method: args.model.method.name(),
        k: out.model.k(),
        lambda: args.model.method.variant().map(|_| args.lambda),
        iterations: out.report.iterations,
        converged: out.report.converged,
        restarts_used: out.report.restarts_used,
        collapsed_clusters: &out.report.collapsed_clusters,
        loglik_trace: &out.report.loglik_trace,
        runtime_s: out.runtime_s,
    };
    fs::write(args.out.join("report.json"), to_canonical_json(&report)?)?;
    write_labels(&vol, &out.labeling, &args.out.join("labels.csv"))?;
    info!(
        "{} with K = {}: {} iterations, converged = {}, {:.3} s",
        args.model.method.name(),
        out.model.k(),
        out.report.iterations,
        out.report.converged,
        out.runtime_s
    );
    Ok(())
}

/// Bayes labels of `vol` under any saved model.
pub fn label_with(model: &SavedModel, vol: &SpectralVolume) -> Result<Labeling> {
    match model {
        SavedModel::Spatial(p) => fmr::label(vol, p),
        SavedModel::Gmm(g) => g.label(vol.curves()),
        SavedModel::KMeans(km) => km.label(vol),
    }
}

const PALETTE: [[u8; 3]; 40] = [
    [242, 36, 36],
    [77, 110, 191],
    [91, 140, 21],
    [242, 97, 224],
    [29, 191, 164],
    [140, 102, 56],
    [88, 36, 242],
    [81, 191, 77],
    [140, 21, 61],
    [97, 188, 242],
    [178, 191, 29],
    [123, 56, 140],
    [36, 242, 139],
    [191, 100, 77],
    [21, 31, 140],
    [152, 242, 97],
    [191, 29, 137],
    [56, 137, 140],
    [242, 190, 36],
    [129, 77, 191],
    [21, 140, 41],
    [242, 97, 115],
    [29, 97, 191],
    [116, 140, 56],
    [242, 36, 242],
    [77, 191, 157],
    [140, 70, 21],
    [115, 97, 242],
    [56, 191, 29],
    [140, 56, 95],
    [36, 192, 242],
    [191, 186, 77],
    [100, 21, 140],
    [97, 242, 151],
    [191, 42, 29],
    [56, 74, 140],
    [140, 242, 36],
    [191, 77, 168],
    [21, 140, 130],
    [242, 187, 97],
];

/// Color of a cluster id in label renders.
pub fn palette_color(label: usize) -> [u8; 3] {
    PALETTE[label % PALETTE.len()]
}

/// RGB render of axial slice `z`: one palette color per cluster, masked voxels
/// black, and tumor boundary voxels white when `tumor` is given.
pub fn render_slice(
    vol: &SpectralVolume,
    labeling: &Labeling,
    tumor: Option<&[bool]>,
    z: usize,
    scale: usize,
) -> Vec<u8> {
    let [nx, ny, _] = vol.dims();
    let (w, h) = (nx * scale, ny * scale);
    let mut img = vec![0u8; w * h * 3];
    let in_tumor = |x: isize, y: isize| -> bool {
        if x < 0 || y < 0 || x as usize >= nx || y as usize >= ny {
            return false;
        }
        match (tumor, vol.row_of([x as usize, y as usize, z])) {
            (Some(t), Some(r)) => t[r],
            _ => false,
        }
    };
    for y in 0..ny {
        for x in 0..nx {
            let Some(r) = vol.row_of([x, y, z]) else { continue };
            let (xi, yi) = (x as isize, y as isize);
            let edge = in_tumor(xi, yi)
                && [(1, 0), (-1, 0), (0, 1), (0, -1)]
                    .iter()
                    .any(|(dx, dy)| !in_tumor(xi + dx, yi + dy));
            let color = if edge {
                [255; 3]
            } else {
                palette_color(labeling.labels()[r])
            };
            for py in y * scale..(y + 1) * scale {
                for px in x * scale..(x + 1) * scale {
                    let o = (py * w + px) * 3;
                    img[o..o + 3].copy_from_slice(&color);
                }
            }
        }
    }
    img
}

fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(create(path)?, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| Error::format(format!("png encoding failed: {e}"));
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(rgb).map_err(fmt)?;
    writer.finish().map_err(fmt)?;
    Ok(())
}

pub fn cmd_label(args: &LabelArgs) -> Result<()> {
    let (model, _) = load_model(&args.model)?;
    let vol = load(&args.volume)?;
    let labeling = label_with(&model, &vol)?;
    write_labels(&vol, &labeling, &args.out)?;
    if let Some(dir) = &args.png_dir {
        let tumor = match &args.truth {
            Some(p) => {
                let (_, t) = read_truth_csv(File::open(p)?)?;
                if t.len() != vol.n() {
                    return Err(Error::invalid("truth file does not match the volume"));
                }
                Some(t)
            }
            None => None,
        };
        fs::create_dir_all(dir)?;
        let scale = args.scale as usize;
        let [nx, ny, nz] = vol.dims();
        for z in 0..nz {
            let img = render_slice(&vol, &labeling, tumor.as_deref(), z, scale);
            write_png(
                &dir.join(format!("slice_{z:03}.png")),
                nx * scale,
                ny * scale,
                &img,
            )?;
        }
    }
    Ok(())
}

/// Quantities reported by `eval`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub dice: f64,
    pub spat_db: f64,
    pub spec_db: f64,
    pub spat_dbt: f64,
    pub spec_dbt: f64,
    pub runtime_s: f64,
    pub ari: f64,
}

/// Dice of the best tumor cluster union, DB and tumor DB on both feature
/// spaces, and the ARI against the true regions. Undefined tumor indices are NaN.
pub fn evaluate_labeling(
    vol: &SpectralVolume,
    labeling: &Labeling,
    truth_labels: &[usize],
    tumor: &[bool],
) -> Result<EvalRow> {
    if labeling.len() != vol.n() || truth_labels.len() != vol.n() || tumor.len() != vol.n() {
        return Err(Error::invalid("labels, truth and volume differ in voxel count"));
    }
    let spatial = FeatureSpace::Spatial.features(vol);
    let spectral = FeatureSpace::Spectral.features(vol);
    let (dice_score, selected) = if tumor.iter().any(|&t| t) {
        let sel = select_tumor_clusters(labeling, tumor)?;
        let mask: Vec<bool> = labeling
            .labels()
            .iter()
            .map(|l| sel.clusters.contains(l))
            .collect();
        (dice(&mask, tumor)?, sel.clusters)
    } else {
        (f64::NAN, Vec::new())
    };
    let tumor_db = |x| {
        if selected.is_empty() {
            return f64::NAN;
        }
        davies_bouldin_tumor(labeling, &selected, x).unwrap_or_else(|e| {
            warn!("tumor Davies-Bouldin index undefined: {e}");
            f64::NAN
        })
    };
    Ok(EvalRow {
        dice: dice_score,
        spat_db: davies_bouldin(labeling, &spatial)?,
        spec_db: davies_bouldin(labeling, &spectral)?,
        spat_dbt: tumor_db(&spatial),
        spec_dbt: tumor_db(&spectral),
        runtime_s: f64::NAN,
        ari: adjusted_rand(labeling.labels(), truth_labels)?,
    })
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let vol = load(&args.volume)?;
    let labeling = read_labels(&args.labels)?;
    let (truth, tumor) = read_truth_csv(File::open(&args.truth)?)?;
    let mut row = evaluate_labeling(&vol, &labeling, &truth, &tumor)?;
    if let Some(p) = &args.report {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p)?)?;
        row.runtime_s = v
            .get("runtime_s")
            .and_then(|r| r.as_f64())
            .ok_or_else(|| Error::format("report has no runtime_s"))?;
    }
    let mut wtr = csv::Writer::from_writer(create(&args.out)?);
    let fmt = |e: csv::Error| Error::format(e.to_string());
    wtr.write_record(["dice", "spat_db", "spec_db", "spat_dbt", "spec_dbt", "runtime_s"])
        .map_err(fmt)?;
    wtr.write_record(
        [
            row.dice,
            row.spat_db,
            row.spec_db,
            row.spat_dbt,
            row.spec_dbt,
            row.runtime_s,
        ]
        .map(num),
    )
    .map_err(fmt)?;
    wtr.flush()?;
    println!("ARI {:.6}", row.ari);
    Ok(())
}

struct BenchPoint {
    k: usize,
    lambda: f64,
    loglik: f64,
    eval: EvalRow,
    runtime_s: f64,
}

impl BenchPoint {
    /// Larger is better: Dice against truth, else negative spectral DB.
    fn score(&self, with_truth: bool) -> f64 {
        let s = if with_truth {
            self.eval.dice
        } else {
            -self.eval.spec_db
        };
        if s.is_nan() {
            f64::NEG_INFINITY
        } else {
            s
        }
    }
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    if args.model.method.variant().is_none() {
        return Err(Error::invalid("--method must be a spatial mixture for bench"));
    }
    if args.k_grid.is_empty() || args.lambda_grid.is_empty() || args.rounds == 0 {
        return Err(Error::invalid(
            "--k-grid, --lambda-grid and --rounds must be nonempty",
        ));
    }
    let vol = load(&args.model.volume)?;
    let truth = match &args.truth {
        Some(p) => Some(read_truth_csv(File::open(p)?)?),
        None => None,
    };
    let (truth_labels, tumor) = match &truth {
        Some((l, t)) => (l.clone(), t.clone()),
        None => (vec![0; vol.n()], vec![false; vol.n()]),
    };
    let run_point = |k: usize, lambda: f64| -> Result<BenchPoint> {
        let out = fit_method(&vol, &args.model, Some(k), lambda)?;
        let eval = evaluate_labeling(&vol, &out.labeling, &truth_labels, &tumor)?;
        Ok(BenchPoint {
            k,
            lambda,
            loglik: out.score.unwrap_or(f64::NAN),
            eval,
            runtime_s: out.runtime_s,
        })
    };
    let mut wtr = csv::Writer::from_writer(create(&args.out)?);
    let fmt = |e: csv::Error| Error::format(e.to_string());
    wtr.write_record([
        "round",
        "phase",
        "k",
        "lambda",
        "loglik",
        "dice",
        "spat_db",
        "spec_db",
        "runtime_s",
    ])
    .map_err(fmt)?;
    let mut k = args.k_start;
    let mut lambda = args.lambda_grid[0];
    let with_truth = truth.is_some();
    for round in 0..args.rounds {
        for phase in ["lambda", "k"] {
            let points: Vec<BenchPoint> = if phase == "lambda" {
                args.lambda_grid
                    .iter()
                    .map(|&l| run_point(k, l))
                    .collect::<Result<_>>()?
            } else {
                args.k_grid
                    .iter()
                    .map(|&kk| run_point(kk, lambda))
                    .collect::<Result<_>>()?
            };
            for p in &points {
                wtr.write_record([
                    round.to_string(),
                    phase.to_string(),
                    p.k.to_string(),
                    num(p.lambda),
                    num(p.loglik),
                    num(p.eval.dice),
                    num(p.eval.spat_db),
                    num(p.eval.spec_db),
                    num(p.runtime_s),
                ])
                .map_err(fmt)?;
            }
            let best = points.iter().fold(&points[0], |b, p| {
                if p.score(with_truth) > b.score(with_truth) {
                    p
                } else {
                    b
                }
            });
            k = best.k;
            lambda = best.lambda;
            info!("round {round}, {phase} sweep: best K = {k}, lambda = {lambda}");
        }
    }
    wtr.flush()?;
    println!("best K {k} lambda {lambda}");
    Ok(())
}
