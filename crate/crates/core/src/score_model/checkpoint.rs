//! Checkpoints: a JSON manifest next to a flat little-endian f64 parameter
//! file (per layer: weights row-major, then bias).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score_model::mlp::{Activation, Mlp};
use crate::score_model::net::{ScoreNet, TIME_FEATURES};
use crate::score_model::train::LossWeightMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub loss_weight_mode: LossWeightMode,
    pub time_features: usize,
    pub conditioned: bool,
    pub data_scale: f64,
    pub anchor: Vec<f64>,
    pub parameter_count: usize,
    /// File name of the parameter blob, relative to the manifest.
    pub parameters: String,
}

/// Write `<dir>/<name>.json` and `<dir>/<name>.bin`; returns the manifest path.
pub fn save_checkpoint(net: &ScoreNet, mode: LossWeightMode, dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let params = net.mlp().params_flat();
    let blob_name = format!("{name}.bin");
    let manifest = CheckpointManifest {
        widths: net.mlp().widths(),
        activation: net.mlp().activation(),
        seed: net.seed(),
        loss_weight_mode: mode,
        time_features: TIME_FEATURES,
        conditioned: net.conditioned(),
        data_scale: net.data_scale(),
        anchor: net.anchor().to_vec(),
        parameter_count: params.len(),
        parameters: blob_name.clone(),
    };
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for p in &params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(dir.join(&blob_name), bytes)?;
    let path = dir.join(format!("{name}.json"));
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<(ScoreNet, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.time_features != TIME_FEATURES {
        return Err(Error::Invalid(format!(
            "checkpoint uses {} time features, expected {TIME_FEATURES}",
            manifest.time_features
        )));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(&manifest.parameters))?;
    if bytes.len() != manifest.parameter_count * 8 {
        return Err(Error::Invalid(format!(
            "parameter file holds {} bytes, manifest expects {}",
            bytes.len(),
            manifest.parameter_count * 8
        )));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut mlp = Mlp::new(&manifest.widths, manifest.activation, manifest.seed)?;
    mlp.set_params_flat(&params)?;
    let net = ScoreNet::from_mlp(mlp, manifest.conditioned, manifest.anchor.clone(), manifest.data_scale, manifest.seed)?;
    Ok((net, manifest))
}
