//! Versioned model persistence.
//!
//! A model file is a JSON object with a mandatory integer `format_version`.
//! Version 1 layout:
//!
//! | key | content |
//! |-----|---------|
//! | `spec` | the sequence: module kinds, dimensions, kernel widths, steps, `s`, `r`, `λ` |
//! | `standardization` | `mu_x`, `sigma_x`, `mu_y`, `sigma_y` (packed) and `pad` |
//! | `sigma_sq`, `n_subset`, `seed` | scalars |
//! | `modules` | one entry per spec module, see below |
//! | `report` | training report (plain JSON) |
//!
//! Affine entries hold `m` (`out_dim × in_dim`, row-major) and `b`. Flow
//! entries hold `controls` (`[steps][anchors][dim]`) and `trajectory`, the
//! cached anchor states `[steps + 1][anchors][dim]`.
//!
//! Packed arrays are standard base64 (with padding) of the values as
//! consecutive little-endian IEEE-754 binary64, so every bit is preserved.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::flow::{AnchorTrajectory, TrajectoryCache};
use crate::preprocess::Standardization;
use crate::sequence::{AffineParams, ControlField, ModelParams, ModuleParams, SequenceSpec};
use crate::trainer::{TrainReport, TrainedModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
struct Packed(Vec<f64>);

impl Serialize for Packed {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = self.0.iter().flat_map(|v| v.to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }
}

impl<'de> Deserialize<'de> for Packed {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let text = String::deserialize(d)?;
        let bytes = STANDARD.decode(text.as_bytes()).map_err(D::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(D::Error::custom(format!(
                "packed array of {} bytes is not a whole number of f64 values",
                bytes.len()
            )));
        }
        Ok(Packed(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        ))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StandardizationV1 {
    mu_x: Packed,
    sigma_x: Packed,
    mu_y: Packed,
    sigma_y: Packed,
    pad: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ModuleV1 {
    Affine {
        in_dim: usize,
        out_dim: usize,
        m: Packed,
        b: Packed,
    },
    Diffeo {
        steps: usize,
        anchors: usize,
        dim: usize,
        controls: Packed,
        trajectory: Packed,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFileV1 {
    format_version: u32,
    spec: SequenceSpec,
    standardization: StandardizationV1,
    sigma_sq: f64,
    n_subset: usize,
    seed: u64,
    modules: Vec<ModuleV1>,
    report: TrainReport,
}

fn encode(model: &TrainedModel) -> Result<ModelFileV1> {
    let st = &model.standardization;
    let mut modules = Vec::with_capacity(model.params.modules.len());
    for (i, p) in model.params.modules.iter().enumerate() {
        modules.push(match p {
            ModuleParams::Affine(a) => ModuleV1::Affine {
                in_dim: a.in_dim,
                out_dim: a.out_dim,
                m: Packed(a.m.clone()),
                b: Packed(a.b.clone()),
            },
            ModuleParams::Diffeo(c) => {
                let traj = model
                    .cache
                    .get(i)
                    .ok_or_else(|| Error::CorruptCache(format!("module {i} has no cached anchor trajectory")))?;
                ModuleV1::Diffeo {
                    steps: c.steps,
                    anchors: c.anchors,
                    dim: c.dim,
                    controls: Packed(c.data.clone()),
                    trajectory: Packed(traj.data.clone()),
                }
            }
        });
    }
    Ok(ModelFileV1 {
        format_version: FORMAT_VERSION,
        spec: model.spec.clone(),
        standardization: StandardizationV1 {
            mu_x: Packed(st.mu_x.clone()),
            sigma_x: Packed(st.sigma_x.clone()),
            mu_y: Packed(st.mu_y.clone()),
            sigma_y: Packed(st.sigma_y.clone()),
            pad: st.pad,
        },
        sigma_sq: model.sigma_sq,
        n_subset: model.n_subset,
        seed: model.seed,
        modules,
        report: model.report.clone(),
    })
}

fn decode(file: ModelFileV1, origin: &str) -> Result<TrainedModel> {
    let bad = |msg: String| Error::parse(origin, msg);
    file.spec.validate()?;
    if file.modules.len() != file.spec.modules.len() {
        return Err(bad(format!(
            "{} module entries for a {}-module sequence",
            file.modules.len(),
            file.spec.modules.len()
        )));
    }
    let mut params = Vec::with_capacity(file.modules.len());
    let mut cache = Vec::with_capacity(file.modules.len());
    for (i, m) in file.modules.into_iter().enumerate() {
        match m {
            ModuleV1::Affine { in_dim, out_dim, m, b } => {
                params.push(ModuleParams::Affine(AffineParams {
                    in_dim,
                    out_dim,
                    m: m.0,
                    b: b.0,
                }));
                cache.push(None);
            }
            ModuleV1::Diffeo {
                steps,
                anchors,
                dim,
                controls,
                trajectory,
            } => {
                let expected = (steps + 1) * anchors * dim;
                if trajectory.0.len() != expected {
                    return Err(bad(format!(
                        "module {i}: trajectory holds {} values, expected {expected}",
                        trajectory.0.len()
                    )));
                }
                params.push(ModuleParams::Diffeo(ControlField {
                    steps,
                    anchors,
                    dim,
                    data: controls.0,
                }));
                cache.push(Some(AnchorTrajectory {
                    steps,
                    anchors,
                    dim,
                    data: trajectory.0,
                }));
            }
        }
    }
    let params = ModelParams { modules: params };
    params
        .check_shapes(&file.spec, file.n_subset)
        .map_err(|e| bad(e.to_string()))?;
    let s = file.standardization;
    let standardization = Standardization {
        mu_x: s.mu_x.0,
        sigma_x: s.sigma_x.0,
        mu_y: s.mu_y.0,
        sigma_y: s.sigma_y.0,
        pad: s.pad,
    };
    standardization.validate().map_err(|e| bad(e.to_string()))?;
    if standardization.x_dim() != file.spec.x_dim
        || standardization.y_dim() != file.spec.y_dim
        || standardization.pad != file.spec.pad
    {
        return Err(bad("standardization does not match the sequence dimensions".into()));
    }
    Ok(TrainedModel {
        spec: file.spec,
        params,
        cache: TrajectoryCache { modules: cache },
        standardization,
        sigma_sq: file.sigma_sq,
        n_subset: file.n_subset,
        seed: file.seed,
        report: file.report,
    })
}

pub fn to_json(model: &TrainedModel) -> Result<String> {
    serde_json::to_string_pretty(&encode(model)?).map_err(|e| Error::invalid(format!("serializing model: {e}")))
}

/// Parses a model file; `origin` names the source in diagnostics.
pub fn from_json(text: &str, origin: &str) -> Result<TrainedModel> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
    let version = value
        .get("format_version")
        .ok_or_else(|| Error::parse(origin, "missing format_version"))?;
    let version = version
        .as_u64()
        .ok_or_else(|| Error::parse(origin, format!("format_version must be an integer, found {version}")))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::UnsupportedVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: FORMAT_VERSION,
        });
    }
    let file: ModelFileV1 = serde_json::from_value(value).map_err(|e| Error::parse(origin, e.to_string()))?;
    decode(file, origin)
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let text = to_json(model)?;
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_json(&text, &path.display().to_string())
}
