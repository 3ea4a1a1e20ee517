//! Presets, config files and `key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use sfuda_core::degrade::{DegradationFamily, DegradationKind, ParamRanges, SynthConfig};
use sfuda_core::enhancer::EnhancerConfig;
use sfuda_core::picker::{IqaConfig, IsdConfig};
use sfuda_core::sfuda::{AdaptConfig, PerturbConfig};
use sfuda_core::train::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    PaperScale,
    DeskScale,
}

/// Every tunable of the pipeline; each command reads the sections it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub image_size: usize,
    pub clean_count: usize,
    pub per_image: usize,
    pub target_count: usize,
    pub picker_clean_count: usize,
    pub source_family: DegradationFamily,
    pub target_family: DegradationFamily,
    /// Degradations of the low-quality examples the assessor learns to reject.
    pub quality_negatives: SynthConfig,
    pub model: EnhancerConfig,
    pub train: TrainConfig,
    pub iqa: IqaConfig,
    pub isd: IsdConfig,
    pub adapt: AdaptConfig,
}

/// Heavy haze and heavy blur, well beyond what either family produces.
pub fn heavy_degradation() -> SynthConfig {
    SynthConfig {
        modes: vec![DegradationKind::Blur, DegradationKind::CataractHaze],
        ranges: ParamRanges {
            blur_sigma: (2.5, 4.0),
            haze_alpha: (0.6, 0.85),
            haze_color: [(0.85, 1.0), (0.8, 0.95), (0.7, 0.9)],
            ..ParamRanges::zero()
        },
    }
}

impl PipelineConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        match preset {
            Preset::DeskScale => Self::desk_scale(seed),
            Preset::PaperScale => Self::paper_scale(seed),
        }
    }

    pub fn desk_scale(seed: u64) -> Self {
        Self {
            seed,
            image_size: 64,
            clean_count: 32,
            per_image: 16,
            target_count: 48,
            picker_clean_count: 32,
            source_family: DegradationFamily::Interference,
            target_family: DegradationFamily::Cataract,
            quality_negatives: heavy_degradation(),
            model: EnhancerConfig::desk_scale(),
            train: TrainConfig {
                seed,
                ..TrainConfig::desk_scale()
            },
            iqa: IqaConfig {
                seed,
                ..IqaConfig::default()
            },
            isd: IsdConfig {
                seed,
                ..IsdConfig::default()
            },
            adapt: AdaptConfig {
                epochs: 20,
                lr: 2e-3,
                ema_decay: 0.99,
                perturb: PerturbConfig {
                    brightness_delta: 0.025,
                    contrast_range: 0.025,
                    color_jitter: 0.0125,
                },
                seed,
                ..AdaptConfig::default()
            },
        }
    }

    pub fn paper_scale(seed: u64) -> Self {
        Self {
            image_size: 256,
            model: EnhancerConfig::paper_scale(),
            train: TrainConfig {
                seed,
                ..TrainConfig::paper_scale()
            },
            adapt: AdaptConfig {
                seed,
                ..AdaptConfig::default()
            },
            ..Self::desk_scale(seed)
        }
    }

    /// Seed of an independent random stream derived from the run seed.
    pub fn stream(&self, k: u64) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(k)
    }

    /// Applies a JSON file's fields and then `key=value` overrides.
    pub fn resolve(
        preset: Preset,
        seed: u64,
        file: Option<&Path>,
        overrides: &[String],
    ) -> Result<Self, CliError> {
        let mut tree = serde_json::to_value(Self::preset(preset, seed)).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
            merge(&mut tree, &patch, "")?;
        }
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{ov}` is not of the form key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, key, value)?;
        }
        serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
    }
}

fn merge(dst: &mut Value, patch: &Value, prefix: &str) -> Result<(), CliError> {
    match (dst, patch) {
        (Value::Object(d), Value::Object(p)) => {
            for (k, v) in p {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = d
                    .get_mut(k)
                    .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (d, p) => {
            *d = p.clone();
            Ok(())
        }
    }
}

/// Replaces the value at a dotted path; the path must already exist.
fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = tree;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CliError::Usage(format!("unknown override key `{key}`")))?;
    }
    *node = value;
    Ok(())
}

/// What a command ran with, written next to its outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub command: String,
    pub preset: Preset,
    pub seed: u64,
    pub paths: BTreeMap<String, PathBuf>,
    pub overrides: Vec<String>,
    pub config: PipelineConfig,
}

impl RunSnapshot {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self).expect("snapshot serializes"))?;
        Ok(())
    }
}
