//! Checkpoints: a JSON manifest plus one little-endian `f32` blob per
//! tensor, each blob verified by its SHA-256 on load.

use std::fs;
use std::path::{Path, PathBuf};

use calmix_core::backbones::Registry;
use calmix_core::settings::{build_model, CalConfig, ModelBundle, NamedTensor, TrEvSetting};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{CliError, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FORMAT: &str = "calmix-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub format_version: u32,
    pub config_hash: String,
    pub setting: TrEvSetting,
    pub backbone: String,
    pub num_classes: usize,
    pub image_size: usize,
    pub cal: CalConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metrics: Option<serde_json::Value>,
}

fn blob_name(index: usize, name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{index:04}_{safe}.f32")
}

/// Refuses to reuse a non-empty directory unless `overwrite` is set.
pub fn ensure_writable_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(CliError::io(dir))?.next().is_some();
        if non_empty && !overwrite {
            return Err(CliError::WouldClobber { path: dir.to_path_buf() });
        }
        if non_empty {
            fs::remove_dir_all(dir).map_err(CliError::io(dir))?;
        }
    }
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

pub fn save_checkpoint(
    dir: &Path,
    model: &ModelBundle<f32>,
    config_hash: &str,
    metrics: Option<serde_json::Value>,
    overwrite: bool,
) -> Result<CheckpointManifest> {
    ensure_writable_dir(dir, overwrite)?;
    let mut tensors = Vec::new();
    for (i, t) in model.state_tensors().into_iter().enumerate() {
        let bytes: Vec<u8> = t.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = blob_name(i, &t.name);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(CliError::io(&path))?;
        tensors.push(TensorEntry {
            name: t.name,
            shape: t.shape,
            dtype: "f32-le".into(),
            file,
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        format_version: FORMAT_VERSION,
        config_hash: config_hash.into(),
        setting: model.setting,
        backbone: model.backbone_name.clone(),
        num_classes: model.num_classes,
        image_size: model.image_size,
        cal: model.cal,
        tensors,
        metrics,
    };
    let path = dir.join(MANIFEST_NAME);
    let tmp = dir.join(format!("{MANIFEST_NAME}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?).map_err(CliError::io(&tmp))?;
    fs::rename(&tmp, &path).map_err(CliError::io(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Corrupt(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT || m.format_version != FORMAT_VERSION {
        return Err(CliError::Corrupt(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            m.format,
            m.format_version
        )));
    }
    Ok(m)
}

fn read_tensors(dir: &Path, manifest: &CheckpointManifest) -> Result<Vec<NamedTensor<f32>>> {
    manifest
        .tensors
        .iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(CliError::io(&path))?;
            let expected = e.shape.iter().product::<usize>() * 4;
            if bytes.len() != expected {
                return Err(CliError::Corrupt(format!(
                    "tensor `{}`: blob has {} bytes, shape {:?} needs {expected}",
                    e.name,
                    bytes.len(),
                    e.shape
                )));
            }
            if hex(&Sha256::digest(&bytes)) != e.sha256 {
                return Err(CliError::Corrupt(format!("tensor `{}`: sha256 mismatch", e.name)));
            }
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                values,
            })
        })
        .collect()
}

/// Loads tensors into an existing model; shapes must match.
pub fn load_checkpoint(dir: &Path, model: &mut ModelBundle<f32>) -> Result<CheckpointManifest> {
    let manifest = read_manifest(dir)?;
    let tensors = read_tensors(dir, &manifest)?;
    model.load_state_tensors(tensors).map_err(CliError::Core)?;
    Ok(manifest)
}

/// Rebuilds the model described by the manifest and loads its tensors.
pub fn load_model(dir: &Path, registry: &Registry<f32>) -> Result<(ModelBundle<f32>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = build_model(
        registry,
        manifest.setting,
        &manifest.backbone,
        manifest.num_classes,
        manifest.image_size,
        manifest.cal,
        0,
    )?;
    load_checkpoint(dir, &mut model)?;
    Ok((model, manifest))
}

/// Order-sensitive SHA-256 over every state tensor's name and bytes.
pub fn state_checksum(model: &ModelBundle<f32>) -> String {
    let mut h = Sha256::new();
    for t in model.state_tensors() {
        h.update(t.name.as_bytes());
        for v in &t.values {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}
