//! On-disk formats: JSON parameter checkpoints and raw frame directories.
//!
//! A checkpoint is one JSON object
//! `{"format_version": 1, "config": {...}, "params": [{"name", "shape", "data"}]}`
//! with row-major `data`, in parameter order.
//!
//! A frame directory holds `manifest.json`
//! `{"T", "H", "W", "channels", "dtype": "f64le", "data": "frames.bin"}` and the
//! named file of little-endian doubles in `[T, H, W, channels]` order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

pub fn checkpoint_to_string(config: &ModelConfig, params: &ParamSet) -> Result<String> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        config: config.clone(),
        params: params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

/// Parses a checkpoint and checks its layout against a fresh parameter set
/// for the stored config.
pub fn checkpoint_from_str(s: &str) -> Result<(ModelConfig, ParamSet)> {
    let file: CheckpointFile = serde_json::from_str(s)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
            file.format_version
        )));
    }
    let mut params = ParamSet::new();
    for e in file.params {
        params.insert(e.name, Tensor::new(e.shape, e.data)?)?;
    }
    let reference = init_params(&file.config, 0)?;
    reference.ensure_same_layout(&params)?;
    if !params.all_finite() {
        return Err(Error::Data("checkpoint holds non-finite values".into()));
    }
    Ok((file.config, params))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamSet) -> Result<()> {
    fs::write(path, checkpoint_to_string(config, params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub channels: usize,
    pub dtype: String,
    pub data: String,
}

pub fn write_frames(dir: &Path, video: &Tensor) -> Result<()> {
    let [t, h, w, c] = video.shape()[..] else {
        return Err(Error::Dimension(format!("video must be rank 4, got {:?}", video.shape())));
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = FrameManifest {
        frames: t,
        height: h,
        width: w,
        channels: c,
        dtype: "f64le".into(),
        data: "frames.bin".into(),
    };
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let bytes: Vec<u8> = video.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let dpath = dir.join(&manifest.data);
    fs::write(&dpath, bytes).map_err(|e| Error::io(&dpath, e))
}

pub fn read_frames(dir: &Path) -> Result<Tensor> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: FrameManifest = serde_json::from_str(&text)?;
    if m.dtype != "f64le" {
        return Err(Error::Data(format!("unsupported dtype {:?}", m.dtype)));
    }
    if m.data.contains(['/', '\\']) || m.data == ".." {
        return Err(Error::Data(format!("data file {:?} must be a plain file name", m.data)));
    }
    let dpath = dir.join(&m.data);
    let bytes = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
    let n = m.frames * m.height * m.width * m.channels;
    if bytes.len() != n * 8 {
        return Err(Error::Data(format!(
            "{} holds {} bytes, manifest implies {}",
            dpath.display(),
            bytes.len(),
            n * 8
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{} holds non-finite values", dpath.display())));
    }
    Tensor::new(vec![m.frames, m.height, m.width, m.channels], data)
}
