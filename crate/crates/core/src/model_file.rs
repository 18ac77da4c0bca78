//! JSON persistence of fitted models with canonical key order and floats
//! written at 17 significant digits, so identical models give identical bytes.

use std::io;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::baselines::{GmmModel, JointFeatures, KMeansModel};
use crate::basis::{BasisFamily, BasisSpec};
use crate::error::{Error, Result};
use crate::gating::{Gate, GaussianGate, SoftmaxGate};
use crate::model::{CoefComponent, Experts, ModelParams, RegressionComponent, Variant};
use crate::volume::CoordFrame;

/// Pretty printer that writes every float in `{:.16e}` form.
struct CanonicalFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for CanonicalFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes any value with the canonical float format and a trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut buf, CanonicalFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::format(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct BasisDoc {
    family: String,
    degree: usize,
    knots: usize,
}

#[derive(Serialize, Deserialize)]
struct FrameDoc {
    mean: [f64; 3],
    scale: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum GateDoc {
    Gaussian {
        weights: Vec<f64>,
        means: Vec<[f64; 3]>,
        covariances: Vec<[[f64; 3]; 3]>,
    },
    Softmax {
        bias: bool,
        alpha: Vec<[f64; 4]>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ComponentDoc {
    Regression {
        beta: Vec<f64>,
        sigma2: f64,
    },
    Coefficient {
        m: Vec<f64>,
        #[serde(rename = "C")]
        cov: Vec<Vec<f64>>,
    },
}

#[derive(Serialize, Deserialize)]
struct SpatialDoc {
    variant: String,
    #[serde(rename = "K")]
    k: usize,
    lambda: f64,
    basis: BasisDoc,
    coord_frame: FrameDoc,
    gate: GateDoc,
    components: Vec<ComponentDoc>,
    loglik: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct GmmDoc {
    variant: String,
    #[serde(rename = "K")]
    k: usize,
    weights: Vec<f64>,
    components: Vec<ComponentDoc>,
    loglik: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct KMeansDoc {
    variant: String,
    #[serde(rename = "K")]
    k: usize,
    spatial_weight: f64,
    coord_mean: Vec<f64>,
    coord_scale: Vec<f64>,
    curve_mean: Vec<f64>,
    curve_scale: Vec<f64>,
    centers: Vec<Vec<f64>>,
    sse: Option<f64>,
}

const GMM_TAG: &str = "GMM";
const KMEANS_TAG: &str = "KMeans";

/// Any model the command-line tools can write and reload.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Spatial(ModelParams),
    Gmm(GmmModel),
    KMeans(KMeansModel),
}

impl SavedModel {
    pub fn k(&self) -> usize {
        match self {
            SavedModel::Spatial(p) => p.k(),
            SavedModel::Gmm(g) => g.k(),
            SavedModel::KMeans(m) => m.centers.len(),
        }
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::format(format!("covariance must be {d} x {d}")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn spatial_doc(params: &ModelParams, loglik: Option<f64>) -> SpatialDoc {
    let gate = match &params.gate {
        Gate::Gaussian(g) => GateDoc::Gaussian {
            weights: g.weights().to_vec(),
            means: g.means().iter().map(|m| [m[0], m[1], m[2]]).collect(),
            covariances: g
                .covariances()
                .iter()
                .map(|c| [0, 1, 2].map(|i| [c[(i, 0)], c[(i, 1)], c[(i, 2)]]))
                .collect(),
        },
        Gate::Softmax(g) => GateDoc::Softmax {
            bias: g.has_bias(),
            alpha: g.alpha().to_vec(),
        },
    };
    let components = match &params.experts {
        Experts::Regression(c) => c
            .iter()
            .map(|r| ComponentDoc::Regression {
                beta: r.beta.iter().copied().collect(),
                sigma2: r.sigma2,
            })
            .collect(),
        Experts::Coefficient(c) => c
            .iter()
            .map(|r| ComponentDoc::Coefficient {
                m: r.mean.iter().copied().collect(),
                cov: matrix_rows(&r.cov),
            })
            .collect(),
    };
    SpatialDoc {
        variant: params.variant.name().to_string(),
        k: params.k(),
        lambda: params.lambda,
        basis: BasisDoc {
            family: params.basis.family.name().to_string(),
            degree: params.basis.degree,
            knots: params.basis.interior_knots,
        },
        coord_frame: FrameDoc {
            mean: params.coord_frame.mean,
            scale: params.coord_frame.scale,
        },
        gate,
        components,
        loglik,
    }
}

fn spatial_params(doc: SpatialDoc) -> Result<ModelParams> {
    let variant = Variant::parse(&doc.variant)
        .ok_or_else(|| Error::format(format!("unknown variant {:?}", doc.variant)))?;
    let family = BasisFamily::parse(&doc.basis.family)
        .ok_or_else(|| Error::format(format!("unknown basis family {:?}", doc.basis.family)))?;
    let basis = match family {
        BasisFamily::Polynomial => BasisSpec::polynomial(doc.basis.degree),
        BasisFamily::BSpline => BasisSpec::bspline(doc.basis.degree, doc.basis.knots),
    };
    let gate = match doc.gate {
        GateDoc::Gaussian {
            weights,
            means,
            covariances,
        } => Gate::Gaussian(GaussianGate::new(
            weights,
            means.iter().map(|m| Vector3::from(*m)).collect(),
            covariances
                .iter()
                .map(|c| Matrix3::from_fn(|i, j| c[i][j]))
                .collect(),
        )?),
        GateDoc::Softmax { bias, alpha } => Gate::Softmax(SoftmaxGate::new(alpha, bias)?),
    };
    let d = basis.dim();
    let experts = if variant.is_twofold() {
        Experts::Coefficient(
            doc.components
                .into_iter()
                .map(|c| match c {
                    ComponentDoc::Coefficient { m, cov } => Ok(CoefComponent {
                        mean: DVector::from_vec(m),
                        cov: matrix_from_rows(&cov, d)?,
                    }),
                    ComponentDoc::Regression { .. } => {
                        Err(Error::format("regression component in a two-fold model"))
                    }
                })
                .collect::<Result<_>>()?,
        )
    } else {
        Experts::Regression(
            doc.components
                .into_iter()
                .map(|c| match c {
                    ComponentDoc::Regression { beta, sigma2 } => Ok(RegressionComponent {
                        beta: DVector::from_vec(beta),
                        sigma2,
                    }),
                    ComponentDoc::Coefficient { .. } => {
                        Err(Error::format("coefficient component in a regression model"))
                    }
                })
                .collect::<Result<_>>()?,
        )
    };
    let params = ModelParams {
        variant,
        gate,
        experts,
        basis,
        lambda: doc.lambda,
        coord_frame: CoordFrame {
            mean: doc.coord_frame.mean,
            scale: doc.coord_frame.scale,
        },
    };
    if params.k() != doc.k {
        return Err(Error::format(format!(
            "K = {} but {} components stored",
            doc.k,
            params.k()
        )));
    }
    params.validate()?;
    Ok(params)
}

/// Canonical JSON text of a model. `score` is the log-likelihood (spatial and
/// GMM models) or the within-cluster sum of squares (k-means).
pub fn model_to_json(model: &SavedModel, score: Option<f64>) -> Result<String> {
    match model {
        SavedModel::Spatial(p) => to_canonical_json(&spatial_doc(p, score)),
        SavedModel::Gmm(g) => to_canonical_json(&GmmDoc {
            variant: GMM_TAG.to_string(),
            k: g.k(),
            weights: g.weights.clone(),
            components: g
                .means
                .iter()
                .zip(&g.covariances)
                .map(|(m, c)| ComponentDoc::Coefficient {
                    m: m.iter().copied().collect(),
                    cov: matrix_rows(c),
                })
                .collect(),
            loglik: score,
        }),
        SavedModel::KMeans(km) => to_canonical_json(&KMeansDoc {
            variant: KMEANS_TAG.to_string(),
            k: km.centers.len(),
            spatial_weight: km.features.spatial_weight,
            coord_mean: km.features.coord_mean.clone(),
            coord_scale: km.features.coord_scale.clone(),
            curve_mean: km.features.curve_mean.clone(),
            curve_scale: km.features.curve_scale.clone(),
            centers: km.centers.clone(),
            sse: score,
        }),
    }
}

/// Parses a model written by [`model_to_json`], with its stored score.
pub fn model_from_json(text: &str) -> Result<(SavedModel, Option<f64>)> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let variant = value
        .get("variant")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::format("model file has no variant"))?
        .to_string();
    match variant.as_str() {
        GMM_TAG => {
            let doc: GmmDoc = serde_json::from_value(value)?;
            let mut means = Vec::new();
            let mut covariances = Vec::new();
            for c in doc.components {
                match c {
                    ComponentDoc::Coefficient { m, cov } => {
                        let d = m.len();
                        covariances.push(matrix_from_rows(&cov, d)?);
                        means.push(DVector::from_vec(m));
                    }
                    ComponentDoc::Regression { .. } => {
                        return Err(Error::format("mixture components need a mean and covariance"))
                    }
                }
            }
            if doc.weights.len() != doc.k || means.len() != doc.k {
                return Err(Error::format("mixture component count does not match K"));
            }
            Ok((
                SavedModel::Gmm(GmmModel {
                    weights: doc.weights,
                    means,
                    covariances,
                }),
                doc.loglik,
            ))
        }
        KMEANS_TAG => {
            let doc: KMeansDoc = serde_json::from_value(value)?;
            let p = 3 + doc.curve_mean.len();
            if doc.centers.len() != doc.k
                || doc.centers.iter().any(|c| c.len() != p)
                || doc.coord_mean.len() != 3
                || doc.coord_scale.len() != 3
                || doc.curve_scale.len() != doc.curve_mean.len()
            {
                return Err(Error::format("k-means model dimensions are inconsistent"));
            }
            Ok((
                SavedModel::KMeans(KMeansModel {
                    features: JointFeatures {
                        spatial_weight: doc.spatial_weight,
                        coord_mean: doc.coord_mean,
                        coord_scale: doc.coord_scale,
                        curve_mean: doc.curve_mean,
                        curve_scale: doc.curve_scale,
                    },
                    centers: doc.centers,
                }),
                doc.sse,
            ))
        }
        _ => {
            let doc: SpatialDoc = serde_json::from_value(value)?;
            let score = doc.loglik;
            Ok((SavedModel::Spatial(spatial_params(doc)?), score))
        }
    }
}

pub fn save_model(model: &SavedModel, score: Option<f64>, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_json(model, score)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(SavedModel, Option<f64>)> {
    model_from_json(&std::fs::read_to_string(path)?)
}
