//! Model files: human-readable JSON with an explicit format version.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "kernel": {"kind": "gaussian", "lambda": 0.5, "nu": null, "m": null, "components": null},
//!   "target_a": [2.0],
//!   "layers": [{"weights": [[0.1, -0.3]], "bias": [0.0], "activation": "relu"}],
//!   "metadata": {"seed": 42, "created": "morse-net 0.1.0 train_unsupervised", "config_hash": "…"}
//! }
//! ```
//!
//! Supervised models store `"target_a": {"supervised": true, "num_classes": C, "a_scale": a}`.
//! Ensembles wrap complete model documents: `{"format_version": 1, "members": [...]}`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, DenseLayer, FeatureMap};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::model::{DensityModel, Metadata, ModelEnsemble, MorseModel, Target};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u64,
    kernel: KernelSpec,
    target_a: TargetRecord,
    layers: Vec<LayerRecord>,
    metadata: Metadata,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum TargetRecord {
    Point(Vec<f64>),
    Supervised(SupervisedRecord),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupervisedRecord {
    supervised: bool,
    num_classes: usize,
    a_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    weights: Vec<Vec<f64>>,
    bias: Option<Vec<f64>>,
    activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleFile {
    format_version: u64,
    members: Vec<serde_json::Value>,
}

fn schema(path: impl Into<String>, message: impl ToString) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.to_string(),
    }
}

fn to_record(model: &MorseModel) -> ModelFile {
    let target_a = match model.target() {
        Target::Point(a) => TargetRecord::Point(a.clone()),
        Target::OneHot { num_classes, scale } => TargetRecord::Supervised(SupervisedRecord {
            supervised: true,
            num_classes: *num_classes,
            a_scale: *scale,
        }),
    };
    let layers = model
        .map()
        .layers()
        .iter()
        .map(|l| LayerRecord {
            weights: l.weights().rows().into_iter().map(|r| r.to_vec()).collect(),
            bias: l.bias().map(|b| b.to_vec()),
            activation: l.activation(),
        })
        .collect();
    ModelFile {
        format_version: FORMAT_VERSION,
        kernel: model.kernel().clone(),
        target_a,
        layers,
        metadata: model.metadata().clone(),
    }
}

fn from_record(file: ModelFile) -> Result<MorseModel> {
    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, l) in file.layers.into_iter().enumerate() {
        let rows = l.weights.len();
        let cols = l.weights.first().map_or(0, Vec::len);
        if let Some(r) = l.weights.iter().position(|r| r.len() != cols) {
            return Err(schema(
                format!("layers[{i}].weights[{r}]"),
                format!("expected {cols} columns, found {}", l.weights[r].len()),
            ));
        }
        let weights = Array2::from_shape_vec((rows, cols), l.weights.concat()).expect("rectangular");
        let layer = DenseLayer::new(weights, l.bias.map(Array1::from), l.activation).map_err(|e| schema(format!("layers[{i}]"), e))?;
        layers.push(layer);
    }
    let map = FeatureMap::new(layers).map_err(|e| schema("layers", e))?;
    let target = match file.target_a {
        TargetRecord::Point(a) => Target::Point(a),
        TargetRecord::Supervised(s) => {
            if !s.supervised {
                return Err(schema("target_a.supervised", "must be true for a class-target record"));
            }
            Target::OneHot {
                num_classes: s.num_classes,
                scale: s.a_scale,
            }
        }
    };
    Ok(MorseModel::new(map, file.kernel, target)
        .map_err(|e| schema("target_a", e))?
        .with_metadata(file.metadata))
}

fn check_version(value: &serde_json::Value) -> Result<()> {
    match value.get("format_version") {
        None => Err(schema("format_version", "missing field")),
        Some(v) => match v.as_u64() {
            Some(FORMAT_VERSION) => Ok(()),
            Some(found) => Err(Error::Version {
                found,
                expected: FORMAT_VERSION,
            }),
            None => Err(schema("format_version", format!("expected an integer, found {v}"))),
        },
    }
}

fn decode<T: serde::de::DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        schema(path, e.into_inner())
    })
}

fn parse_document(text: &str) -> Result<serde_json::Value> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if !value.is_object() {
        return Err(schema(".", "model file must be a JSON object"));
    }
    check_version(&value)?;
    Ok(value)
}

pub fn model_to_json(model: &MorseModel) -> String {
    let mut s = serde_json::to_string_pretty(&to_record(model)).expect("model serializes");
    s.push('\n');
    s
}

pub fn model_from_json(text: &str) -> Result<MorseModel> {
    model_from_value(parse_document(text)?)
}

fn model_from_value(value: serde_json::Value) -> Result<MorseModel> {
    check_version(&value)?;
    from_record(decode(value)?)
}

pub fn ensemble_to_json(ensemble: &ModelEnsemble) -> String {
    let file = EnsembleFile {
        format_version: FORMAT_VERSION,
        members: ensemble
            .members()
            .iter()
            .map(|m| serde_json::to_value(to_record(m)).expect("model serializes"))
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("ensemble serializes");
    s.push('\n');
    s
}

pub fn ensemble_from_json(text: &str) -> Result<ModelEnsemble> {
    let file: EnsembleFile = decode(parse_document(text)?)?;
    let members = file
        .members
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            model_from_value(v).map_err(|e| match e {
                Error::Schema { path, message } => schema(format!("members[{i}].{path}"), message),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ModelEnsemble::new(members).map_err(|e| schema("members", e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_model(model: &MorseModel, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &model_to_json(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MorseModel> {
    let path = path.as_ref();
    model_from_json(&read_text(path)?)
}

pub fn save_ensemble(ensemble: &ModelEnsemble, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &ensemble_to_json(ensemble))
}

pub fn load_ensemble(path: impl AsRef<Path>) -> Result<ModelEnsemble> {
    let path = path.as_ref();
    ensemble_from_json(&read_text(path)?)
}

/// Either kind of model file.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Single(MorseModel),
    Ensemble(ModelEnsemble),
}

impl SavedModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            SavedModel::Single(m) => save_model(m, path),
            SavedModel::Ensemble(e) => save_ensemble(e, path),
        }
    }
}

/// Loads a single model or an ensemble, whichever the file holds.
pub fn load_any(path: impl AsRef<Path>) -> Result<SavedModel> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let value = parse_document(&text)?;
    if value.get("members").is_some() {
        ensemble_from_json(&text).map(SavedModel::Ensemble)
    } else {
        model_from_value(value).map(SavedModel::Single)
    }
}

impl DensityModel for SavedModel {
    fn input_dim(&self) -> usize {
        match self {
            SavedModel::Single(m) => m.input_dim(),
            SavedModel::Ensemble(e) => e.input_dim(),
        }
    }

    fn density_rows(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        match self {
            SavedModel::Single(m) => m.density_rows(x),
            SavedModel::Ensemble(e) => e.density_rows(x),
        }
    }
}
