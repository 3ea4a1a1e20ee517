//! On-disk model archives: a safetensors parameter file plus a JSON sidecar
//! at `<path>.json` holding human-readable metadata.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::enhancer::{EnhancerConfig, EnhancerModel, ModelInfo, Stage};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `tensors` and the `meta` sidecar.
pub fn write_archive(path: &Path, tensors: &HashMap<String, Tensor>, meta: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    candle_core::safetensors::save(tensors, path)
        .map_err(|e| Error::checkpoint(path, format!("cannot write parameters: {e}")))?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Reads an archive written by [`write_archive`].
pub fn read_archive<M: DeserializeOwned>(path: &Path, device: &Device) -> Result<(HashMap<String, Tensor>, M)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)
        .map_err(|e| Error::checkpoint(path, format!("cannot read metadata {}: {e}", side.display())))?;
    let meta = serde_json::from_str(&text)
        .map_err(|e| Error::checkpoint(path, format!("malformed metadata: {e}")))?;
    let tensors = candle_core::safetensors::load(path, device)
        .map_err(|e| Error::checkpoint(path, format!("unreadable parameter archive: {e}")))?;
    Ok((tensors, meta))
}

fn check_version(path: &Path, kind: &str, expected_kind: &str, version: u32) -> Result<()> {
    if kind != expected_kind {
        return Err(Error::checkpoint(
            path,
            format!("expected a {expected_kind} checkpoint, found {kind}"),
        ));
    }
    if version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            path,
            format!("format version {version} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhancerMeta {
    pub format_version: u32,
    pub kind: String,
    pub depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub stage: Stage,
    pub seed: u64,
    pub epoch: usize,
}

pub const ENHANCER_KIND: &str = "enhancer";

pub fn save_enhancer(model: &EnhancerModel, path: &Path) -> Result<()> {
    let c = model.config();
    let meta = EnhancerMeta {
        format_version: FORMAT_VERSION,
        kind: ENHANCER_KIND.into(),
        depth: c.depth,
        base_channels: c.base_channels,
        num_classes: c.num_classes,
        stage: model.info.stage,
        seed: model.info.seed,
        epoch: model.info.epoch,
    };
    write_archive(path, &model.params().tensors(), &meta)
}

pub fn load_enhancer(path: &Path, device: &Device) -> Result<EnhancerModel> {
    let (tensors, meta): (_, EnhancerMeta) = read_archive(path, device)?;
    check_version(path, &meta.kind, ENHANCER_KIND, meta.format_version)?;
    let config = EnhancerConfig {
        depth: meta.depth,
        base_channels: meta.base_channels,
        num_classes: meta.num_classes,
    };
    let mut model = EnhancerModel::new(config, meta.seed, DType::F32, device)
        .map_err(|e| Error::checkpoint(path, format!("invalid architecture: {e}")))?;
    model
        .params()
        .load_tensors(&tensors)
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
    model.info = ModelInfo {
        stage: meta.stage,
        seed: meta.seed,
        epoch: meta.epoch,
    };
    Ok(model)
}
