//! Experiment configuration: JSON with a `version` field, unknown keys
//! rejected, every field validated on load.

use std::fs;
use std::path::{Path, PathBuf};

use calmix_core::datasets::{BaselineAugment, DEFAULT_HOLDOUT_FRACTION, MANIFEST_FILE};
use calmix_core::settings::{CalConfig, TrainOptions, TrEvSetting, DEFAULT_FEATURE_SCALE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;
pub const OUT_ENV: &str = "CALMIX_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    /// Defaults to `<root>/manifest.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Label used to group results; defaults to the root's file name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl DatasetConfig {
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.root.join(MANIFEST_FILE))
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.root
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThroughputConfig {
    #[serde(default = "d_32")]
    pub batch_size: usize,
    #[serde(default = "d_512")]
    pub num_samples: usize,
    #[serde(default = "d_2")]
    pub warmup_batches: usize,
}

impl Default for ThroughputConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            num_samples: 512,
            warmup_batches: 2,
        }
    }
}

fn d_2() -> usize {
    2
}
fn d_32() -> usize {
    32
}
fn d_512() -> usize {
    512
}
fn d_backbone() -> String {
    "tiny".into()
}
fn d_image_size() -> usize {
    224
}
fn d_lr() -> f64 {
    0.01
}
fn d_epochs() -> usize {
    50
}
fn d_seeds() -> usize {
    3
}
fn d_maps() -> usize {
    32
}
fn d_half() -> f32 {
    0.5
}
fn d_padding() -> f32 {
    0.1
}
fn d_one() -> f64 {
    1.0
}
fn d_one_usize() -> usize {
    1
}
fn d_feature_scale() -> f64 {
    DEFAULT_FEATURE_SCALE
}
fn d_holdout() -> f64 {
    DEFAULT_HOLDOUT_FRACTION
}
fn d_true() -> bool {
    true
}
fn d_out() -> PathBuf {
    PathBuf::from("runs")
}
fn d_eval_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub dataset: DatasetConfig,
    #[serde(default = "d_backbone")]
    pub backbone: String,
    pub setting: TrEvSetting,
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_32")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_seeds")]
    pub num_seeds: usize,
    #[serde(default = "d_maps")]
    pub attention_maps: usize,
    #[serde(default = "d_half")]
    pub crop_threshold: f32,
    #[serde(default = "d_half")]
    pub mask_threshold: f32,
    #[serde(default = "d_padding")]
    pub crop_padding: f32,
    #[serde(default = "d_one")]
    pub lambda_cf: f64,
    #[serde(default = "d_one_usize")]
    pub counterfactual_samples: usize,
    #[serde(default = "d_feature_scale")]
    pub feature_scale: f64,
    #[serde(default = "d_holdout")]
    pub holdout_fraction: f64,
    #[serde(default = "d_true")]
    pub baseline_augment: bool,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "d_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub throughput: ThroughputConfig,
    #[serde(default = "d_out")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// A config with every optional field at its default.
    pub fn new(dataset_root: impl Into<PathBuf>, setting: TrEvSetting) -> Self {
        let json = serde_json::json!({
            "version": CONFIG_VERSION,
            "dataset": { "root": dataset_root.into() },
            "setting": setting,
        });
        serde_json::from_value(json).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                CliError::Config(e.inner().to_string())
            } else {
                CliError::Config(format!("field `{path}`: {}", e.inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(CliError::Config(format!("field `{field}`: {why}")));
        if self.version != CONFIG_VERSION {
            return bad("version", format!("unsupported version {}, expected {CONFIG_VERSION}", self.version));
        }
        if !(64..=512).contains(&self.image_size) {
            return bad("image_size", format!("{} outside 64..=512", self.image_size));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", format!("{} must be finite and > 0", self.learning_rate));
        }
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("attention_maps", self.attention_maps),
            ("counterfactual_samples", self.counterfactual_samples),
            ("eval_batch_size", self.eval_batch_size),
            ("throughput.batch_size", self.throughput.batch_size),
        ] {
            if v == 0 {
                return bad(field, "must be ≥ 1".into());
            }
        }
        if self.num_seeds < 2 {
            return bad("num_seeds", format!("{} < 2; a sample std needs two seeds", self.num_seeds));
        }
        for (field, v) in [("crop_threshold", self.crop_threshold), ("mask_threshold", self.mask_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(field, format!("{v} outside (0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.crop_padding) {
            return bad("crop_padding", format!("{} outside [0, 1)", self.crop_padding));
        }
        if !(self.lambda_cf.is_finite() && self.lambda_cf >= 0.0) {
            return bad("lambda_cf", format!("{} must be finite and ≥ 0", self.lambda_cf));
        }
        if !(self.feature_scale.is_finite() && self.feature_scale > 0.0) {
            return bad("feature_scale", format!("{} must be finite and > 0", self.feature_scale));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction", format!("{} outside (0, 1)", self.holdout_fraction));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad("grad_clip", format!("{c} must be finite and > 0"));
            }
        }
        let t = &self.throughput;
        if t.num_samples < t.batch_size * (t.warmup_batches + 1) {
            return bad(
                "throughput.num_samples",
                format!(
                    "{} < batch_size·(warmup_batches+1) = {}",
                    t.num_samples,
                    t.batch_size * (t.warmup_batches + 1)
                ),
            );
        }
        if self.backbone.trim().is_empty() {
            return bad("backbone", "empty name".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canon).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    /// Identifier shared by runs that differ only in seed and learning rate.
    pub fn config_id(&self) -> String {
        let mut canon = self.clone();
        canon.seed = 0;
        canon.learning_rate = d_lr();
        format!(
            "{}-{}-{}-{}",
            self.dataset.display_name(),
            self.backbone,
            self.setting,
            &canon.hash()[..12]
        )
    }

    /// `CALMIX_OUT` wins over the configured directory.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn cal_config(&self) -> CalConfig {
        CalConfig {
            maps: self.attention_maps,
            lambda_cf: self.lambda_cf,
            counterfactual_samples: self.counterfactual_samples,
            crop_threshold: self.crop_threshold,
            mask_threshold: self.mask_threshold,
            crop_padding: self.crop_padding,
            feature_scale: self.feature_scale,
        }
    }

    pub fn train_options(&self, seed: u64, learning_rate: f64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate,
            momentum: 0.9,
            weight_decay: 0.0,
            seed,
            grad_clip: self.grad_clip,
            baseline: if self.baseline_augment {
                BaselineAugment::default()
            } else {
                BaselineAugment::disabled()
            },
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::new("data/synth", TrEvSetting::CalMixNc);
        assert_eq!(cfg.image_size, 224);
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.num_seeds, 3);
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_field() {
        let err = ExperimentConfig::from_json(
            r#"{"version":1,"dataset":{"root":"x"},"setting":"CAL","learning_rat":0.1}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err =
            ExperimentConfig::from_json(r#"{"version":1,"dataset":{"root":"x"},"setting":"NOPE"}"#).unwrap_err();
        assert!(err.to_string().contains("setting"), "{err}");
        let err = ExperimentConfig::from_json(
            r#"{"version":1,"dataset":{"root":"x"},"setting":"FT","image_size":32}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("image_size"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"version":2,"dataset":{"root":"x"},"setting":"FT"}"#).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn config_id_ignores_seed_and_lr_but_hash_does_not() {
        let a = ExperimentConfig::new("d", TrEvSetting::Ft);
        let mut b = a.clone();
        b.seed = 9;
        b.learning_rate = 0.3;
        assert_eq!(a.config_id(), b.config_id());
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), c.hash());
    }
}
