//! Model file format: a single JSON document holding the aggregation
//! parameters, the scoring head, and an optional whitening block.
//!
//! Schema (`version` = `"setnet-model/1"`): `{version, mode, K, D_e, D, a, b,
//! c, W, scale, shift, w, b_head, gem_p, whitening?, config?}` with all
//! arrays flat in row-major order (`a`/`c`: K x D_e, `W`: D x (D_e*K)).
//! Readers reject unknown versions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregator::{
    AggregatorModel, GemPower, LogisticHead, NetVladParams, PoolingMode, ReductionParams,
};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::{from_f64, to_f64, Real};
use crate::whitening::{StagedWhitening, WhitenStage, WhitenTransform};

pub const MODEL_FORMAT_VERSION: &str = "setnet-model/1";

/// A model plus the optional artifacts serialized alongside it.
#[derive(Debug, Clone)]
pub struct SavedModel<F> {
    pub model: AggregatorModel<F>,
    pub whitening: Option<StagedWhitening<F>>,
    /// Resolved configuration the model was produced with, kept for
    /// provenance; opaque to the engine.
    pub config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GemPowerField {
    Shared(f64),
    PerDim(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
struct WhiteningField {
    stage: String,
    mean: Vec<f64>,
    #[serde(rename = "M")]
    matrix: Vec<f64>,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: String,
    mode: String,
    #[serde(rename = "K")]
    clusters: usize,
    #[serde(rename = "D_e")]
    elem_dim: usize,
    #[serde(rename = "D")]
    set_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    a: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    b: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c: Option<Vec<f64>>,
    #[serde(rename = "W", skip_serializing_if = "Option::is_none")]
    reduction_weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    shift: Option<Vec<f64>>,
    w: f64,
    b_head: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gem_p: Option<GemPowerField>,
    #[serde(skip_serializing_if = "Option::is_none")]
    whitening: Option<WhiteningField>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

fn vec_f64<F: Real>(v: &[F]) -> Vec<f64> {
    v.iter().map(|x| to_f64(*x)).collect()
}

fn vec_from_f64<F: Real>(v: Vec<f64>) -> Vec<F> {
    v.into_iter().map(from_f64::<F>).collect()
}

impl<F: Real> SavedModel<F> {
    pub fn new(model: AggregatorModel<F>) -> Self {
        SavedModel {
            model,
            whitening: None,
            config: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let file = ModelFile {
            version: MODEL_FORMAT_VERSION.to_string(),
            mode: m.mode.as_str().to_string(),
            clusters: m.netvlad.as_ref().map(|nv| nv.clusters()).unwrap_or(0),
            elem_dim: m.elem_dim,
            set_dim: m.set_dim,
            a: m.netvlad.as_ref().map(|nv| vec_f64(nv.assign_weights.data())),
            b: m.netvlad.as_ref().map(|nv| vec_f64(&nv.assign_bias)),
            c: m.netvlad.as_ref().map(|nv| vec_f64(nv.centers.data())),
            reduction_weights: m.reduction.as_ref().map(|r| vec_f64(r.weights.data())),
            scale: m.reduction.as_ref().map(|r| vec_f64(&r.scale)),
            shift: m.reduction.as_ref().map(|r| vec_f64(&r.shift)),
            w: to_f64(m.head.weight),
            b_head: to_f64(m.head.bias),
            gem_p: m.gem_power.as_ref().map(|g| match g {
                GemPower::Shared(p) => GemPowerField::Shared(to_f64(*p)),
                GemPower::PerDim(v) => GemPowerField::PerDim(vec_f64(v)),
            }),
            whitening: self.whitening.as_ref().map(|w| WhiteningField {
                stage: w.stage.as_str().to_string(),
                mean: vec_f64(&w.transform.mean),
                matrix: vec_f64(w.transform.matrix.data()),
                epsilon: to_f64(w.transform.epsilon),
            }),
            config: self.config.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {:?} (this reader supports {:?})",
                file.version, MODEL_FORMAT_VERSION
            )));
        }
        let mode = PoolingMode::from_str(&file.mode)?;
        let netvlad = match (file.a, file.b, file.c) {
            (Some(a), Some(b), Some(c)) => Some(NetVladParams {
                assign_weights: Mat::from_flat(file.clusters, file.elem_dim, vec_from_f64(a))?,
                assign_bias: vec_from_f64(b),
                centers: Mat::from_flat(file.clusters, file.elem_dim, vec_from_f64(c))?,
            }),
            (None, None, None) => None,
            _ => {
                return Err(Error::Format(
                    "model file has a partial VLAD parameter block".into(),
                ))
            }
        };
        let reduction = match (file.reduction_weights, file.scale, file.shift) {
            (Some(w), Some(scale), Some(shift)) => Some(ReductionParams {
                weights: Mat::from_flat(
                    file.set_dim,
                    file.elem_dim * file.clusters,
                    vec_from_f64(w),
                )?,
                scale: vec_from_f64(scale),
                shift: vec_from_f64(shift),
            }),
            (None, None, None) => None,
            _ => {
                return Err(Error::Format(
                    "model file has a partial reduction block".into(),
                ))
            }
        };
        let gem_power = file.gem_p.map(|g| match g {
            GemPowerField::Shared(p) => GemPower::Shared(from_f64::<F>(p)),
            GemPowerField::PerDim(v) => GemPower::PerDim(vec_from_f64(v)),
        });
        let model = AggregatorModel {
            mode,
            elem_dim: file.elem_dim,
            set_dim: file.set_dim,
            netvlad,
            reduction,
            gem_power,
            head: LogisticHead::new(from_f64::<F>(file.w), from_f64::<F>(file.b_head)),
        };
        model.validate()?;
        let whitening = match file.whitening {
            Some(w) => {
                let dim = w.mean.len();
                Some(StagedWhitening {
                    stage: WhitenStage::from_str(&w.stage)?,
                    transform: WhitenTransform {
                        mean: vec_from_f64(w.mean),
                        matrix: Mat::from_flat(dim, dim, vec_from_f64(w.matrix))?,
                        epsilon: from_f64::<F>(w.epsilon),
                    },
                })
            }
            None => None,
        };
        Ok(SavedModel {
            model,
            whitening,
            config: file.config,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_json()?.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_model_round_trips_without_vlad_block() {
        let model = AggregatorModel::<f64>::average_baseline(8);
        let saved = SavedModel::new(model.clone());
        let json = saved.to_json().unwrap();
        assert!(!json.contains("\"a\""));
        assert!(json.contains("\"setnet-model/1\""));
        let back = SavedModel::<f64>::from_json(&json).unwrap();
        assert_eq!(back.model, model);
        assert!(back.whitening.is_none());
    }

    #[test]
    fn unknown_version_is_rejected_with_both_versions() {
        let model = AggregatorModel::<f64>::average_baseline(4);
        let json = SavedModel::new(model).to_json().unwrap();
        let tampered = json.replace("setnet-model/1", "setnet-model/9");
        let err = SavedModel::<f64>::from_json(&tampered).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("setnet-model/9") && msg.contains("setnet-model/1"), "{msg}");
    }
}
