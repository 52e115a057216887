//! On-disk dataset schema (NeRF-Blender transforms plus a light angle per
//! frame) and the generator's metadata file.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Aabb;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    /// Image path relative to the dataset root, without extension.
    pub file_path: String,
    /// Camera-to-world matrix, camera looking down its local `-z`.
    pub transform_matrix: [[f64; 4]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub light_angle_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformsFile {
    pub camera_angle_x: f64,
    pub frames: Vec<FrameEntry>,
}

/// Written by the generator next to the transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub scene: String,
    pub angles_deg: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub extent: f64,
    pub seed: u64,
    #[serde(default)]
    pub region: Option<Aabb>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
