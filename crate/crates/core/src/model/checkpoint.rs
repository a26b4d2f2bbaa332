use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fusion::{Model, ModelDescriptor};
use super::params::ParamSpec;
use super::ModelError;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "wetmap-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// JSON side of a checkpoint; the payload sits next to it with a `.bin`
/// extension, every tensor little-endian in spec order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub payload: String,
    pub descriptor: ModelDescriptor,
    pub frozen: Vec<String>,
    pub params: Vec<ParamSpec>,
}

fn payload_path(manifest_path: &Path, payload: &str) -> PathBuf {
    manifest_path.with_file_name(payload)
}

/// Writes `path` (JSON manifest) and its `.bin` payload.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let payload = path
        .with_extension("bin")
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| ModelError::Format(format!("bad checkpoint path {}", path.display())))?
        .to_string();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.into(),
        payload: payload.clone(),
        descriptor: *model.descriptor(),
        frozen: model.frozen_set().iter().cloned().collect(),
        params: model.store().specs().to_vec(),
    };
    let mut bytes = Vec::with_capacity(model.param_count() * T::BYTES);
    for &v in model.params() {
        v.write_le(&mut bytes);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(payload_path(path, &payload), bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], converting the stored
/// dtype to `T` when they differ.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>, ModelError> {
    let path = path.as_ref();
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(path)?)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(ModelError::Format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let bytes = fs::read(payload_path(path, &manifest.payload))?;
    let values: Vec<f64> = match manifest.dtype.as_str() {
        "float32" => decode::<f32>(&bytes)?,
        "float64" => decode::<f64>(&bytes)?,
        other => return Err(ModelError::Format(format!("unsupported dtype {other}"))),
    };
    let mut model = Model::<T>::from_descriptor(manifest.descriptor, 0)?;
    if model.store().specs() != manifest.params.as_slice() {
        for spec in model.store().specs() {
            match manifest.params.iter().find(|p| p.name == spec.name) {
                None => return Err(ModelError::MissingParameter(spec.name.clone())),
                Some(p) if p.shape != spec.shape => {
                    return Err(ModelError::ShapeMismatch {
                        name: spec.name.clone(),
                        expected: spec.shape.clone(),
                        found: p.shape.clone(),
                    })
                }
                _ => {}
            }
        }
        return Err(ModelError::Format("parameter layout differs from descriptor".into()));
    }
    if values.len() != model.param_count() {
        return Err(ModelError::Format(format!(
            "payload holds {} values, expected {}",
            values.len(),
            model.param_count()
        )));
    }
    let frozen: Vec<String> = model.frozen_set().iter().cloned().collect();
    if frozen != manifest.frozen {
        return Err(ModelError::Format("frozen set differs from descriptor".into()));
    }
    for (dst, v) in model.store_mut().data_mut().iter_mut().zip(values) {
        *dst = T::of(v);
    }
    Ok(model)
}

fn decode<S: Scalar>(bytes: &[u8]) -> Result<Vec<f64>, ModelError> {
    if bytes.len() % S::BYTES != 0 {
        return Err(ModelError::Format("payload length is not a whole number of values".into()));
    }
    Ok(bytes.chunks_exact(S::BYTES).map(|c| S::read_le(c).as_f64()).collect())
}
