//! JSON files for encoder weights and raw-AD pose tables.
//!
//! Values are stored as JSON numbers in shortest round-trip form, so a
//! reload reproduces every f64 exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use cryoslice_core::encoder::{EncoderConfig, EncoderWeights};
use cryoslice_core::so3::HeadKind;

use crate::fsio;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderFile {
    config: EncoderConfig,
    tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseTableFile {
    head: HeadKind,
    /// Row-major `[images, raw_dim]` head inputs.
    rows: Vec<Vec<f64>>,
}

fn write_json(path: &Path, value: &impl Serialize) -> std::io::Result<()> {
    let mut bytes = serde_json::to_vec(value).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    fsio::write_atomic(path, &bytes)
}

pub fn write_encoder(path: &Path, config: &EncoderConfig, w: &EncoderWeights) -> std::io::Result<()> {
    let tensors = config
        .manifest()
        .into_iter()
        .zip(w.tensors())
        .map(|((name, shape), data)| NamedTensor { name, shape, data: data.clone() })
        .collect();
    write_json(path, &EncoderFile { config: config.clone(), tensors })
}

pub fn read_encoder(path: &Path) -> Result<(EncoderConfig, EncoderWeights), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let file: EncoderFile = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    file.config.validate().map_err(|e| format!("{}: {e}", path.display()))?;
    for ((name, shape), t) in file.config.manifest().iter().zip(&file.tensors) {
        if *name != t.name || *shape != t.shape {
            return Err(format!("{}: tensor `{}` {:?} where `{name}` {shape:?} was expected", path.display(), t.name, t.shape));
        }
    }
    let tensors = file.tensors.into_iter().map(|t| t.data).collect();
    let w = EncoderWeights::from_tensors(&file.config, tensors).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok((file.config, w))
}

pub fn write_pose_table(path: &Path, head: HeadKind, table: &[f64]) -> std::io::Result<()> {
    let rows = table.chunks_exact(head.raw_dim()).map(<[f64]>::to_vec).collect();
    write_json(path, &PoseTableFile { head, rows })
}
