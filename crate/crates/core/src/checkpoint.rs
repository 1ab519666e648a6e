//! Checkpoint directories: a JSON manifest plus safetensors blobs.
//!
//! ```text
//! ckpt-00001000/
//!   manifest.json
//!   generator.safetensors
//!   discriminator.safetensors
//!   optimizer.safetensors   (optional)
//!   losses.csv              (optional)
//! ```
//!
//! Every blob is listed in the manifest with its SHA-256 digest, which is
//! verified on load. Directories are written under a temporary name and
//! renamed into place.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::Tensor;
use thiserror::Error;

use crate::geometry::BoxSet;
use crate::networks::{config::hex, FaceModel, ModelConfig, NetworkError};
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GENERATOR_BLOB: &str = "generator.safetensors";
pub const DISCRIMINATOR_BLOB: &str = "discriminator.safetensors";
pub const OPTIMIZER_BLOB: &str = "optimizer.safetensors";
pub const LOSS_FILE: &str = "losses.csv";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} is not supported (expected {expected}); migrate it with a matching release first")]
    Version { found: u32, expected: u32 },
    #[error("blob {file} is corrupt: sha256 {actual} does not match manifest {expected}")]
    Corrupt {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("parameter {name}: {detail}")]
    Parameter { name: String, detail: String },
    #[error("parameter {name} is not finite")]
    NonFinite { name: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Torch(#[from] tch::TchError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pixel range conventions of the stored model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub image_range: [f64; 2],
    pub network_range: [f64; 2],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            image_range: [0.0, 1.0],
            network_range: [-1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEntry {
    pub name: String,
    pub shape: Vec<i64>,
    pub blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub generator_step: u64,
    pub discriminator_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub created_at: String,
    pub iteration: u64,
    pub config_hash: String,
    pub config: ModelConfig,
    pub boxes: BoxSet,
    pub normalization: Normalization,
    pub parameters: Vec<ParameterEntry>,
    pub blobs: Vec<BlobEntry>,
    #[serde(default)]
    pub optimizer: Option<OptimizerEntry>,
    #[serde(default)]
    pub training: Option<TrainConfig>,
}

/// Adam moments keyed by `"{generator|discriminator}.{m|v}.{parameter}"`.
#[derive(Debug)]
pub struct OptimizerSnapshot {
    pub generator_step: u64,
    pub discriminator_step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl OptimizerSnapshot {
    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }
}

/// What to store in a checkpoint besides the model.
#[derive(Debug, Default, Clone, Copy)]
pub struct SaveOptions<'a> {
    pub iteration: u64,
    pub optimizer: Option<&'a OptimizerSnapshot>,
    pub training: Option<&'a TrainConfig>,
    pub loss_curve: Option<&'a str>,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub manifest: Manifest,
    pub model: FaceModel,
    pub optimizer: Option<OptimizerSnapshot>,
    pub loss_curve: Option<String>,
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt-{iteration:08}")
}

pub fn sha256_file(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Write a checkpoint of `model` to `dir`, replacing any existing directory.
pub fn save_checkpoint(dir: &Path, model: &FaceModel, opts: SaveOptions<'_>) -> Result<Manifest, CheckpointError> {
    let params = model.named_parameters();
    for (name, t) in &params {
        if !bool::try_from(t.isfinite().all())? {
            return Err(CheckpointError::NonFinite { name: name.clone() });
        }
    }
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let file_name = dir
        .file_name()
        .ok_or_else(|| CheckpointError::Manifest(format!("{} has no directory name", dir.display())))?
        .to_string_lossy()
        .to_string();
    let tmp = parent.join(format!(".{file_name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;

    let mut entries = Vec::new();
    let mut gen = Vec::new();
    let mut disc = Vec::new();
    for (name, t) in &params {
        let blob = if name.starts_with("discriminator.") {
            disc.push((name.clone(), t.detach().contiguous()));
            DISCRIMINATOR_BLOB
        } else {
            gen.push((name.clone(), t.detach().contiguous()));
            GENERATOR_BLOB
        };
        entries.push(ParameterEntry {
            name: name.clone(),
            shape: t.size(),
            blob: blob.to_string(),
        });
    }
    let mut blobs = Vec::new();
    let mut write_blob = |file: &str, tensors: &[(String, Tensor)]| -> Result<(), CheckpointError> {
        let path = tmp.join(file);
        Tensor::write_safetensors(tensors, &path)?;
        blobs.push(BlobEntry {
            file: file.to_string(),
            sha256: sha256_file(&path)?,
        });
        Ok(())
    };
    write_blob(GENERATOR_BLOB, &gen)?;
    write_blob(DISCRIMINATOR_BLOB, &disc)?;
    let optimizer = match opts.optimizer {
        Some(o) => {
            let tensors: Vec<(String, Tensor)> =
                o.tensors.iter().map(|(k, t)| (k.clone(), t.detach().contiguous())).collect();
            write_blob(OPTIMIZER_BLOB, &tensors)?;
            Some(OptimizerEntry {
                generator_step: o.generator_step,
                discriminator_step: o.discriminator_step,
            })
        }
        None => None,
    };
    if let Some(curve) = opts.loss_curve {
        let path = tmp.join(LOSS_FILE);
        fs::write(&path, curve).map_err(io_err(&path))?;
        blobs.push(BlobEntry {
            file: LOSS_FILE.to_string(),
            sha256: hex(&Sha256::digest(curve.as_bytes())),
        });
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        created_at: chrono::Utc::now().to_rfc3339(),
        iteration: opts.iteration,
        config_hash: model.config().hash(),
        config: model.config().clone(),
        boxes: model.boxes().clone(),
        normalization: Normalization::default(),
        parameters: entries,
        blobs,
        optimizer,
        training: opts.training.cloned(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mpath = tmp.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(io_err(&mpath))?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io_err(dir))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Manifest("missing format_version".into()))? as u32;
    if found != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| CheckpointError::Manifest(e.to_string()))
}

fn read_blob(dir: &Path, manifest: &Manifest, file: &str) -> Result<Option<HashMap<String, Tensor>>, CheckpointError> {
    let Some(entry) = manifest.blobs.iter().find(|b| b.file == file) else {
        return Ok(None);
    };
    let path = dir.join(file);
    let actual = sha256_file(&path)?;
    if actual != entry.sha256 {
        return Err(CheckpointError::Corrupt {
            file: file.to_string(),
            expected: entry.sha256.clone(),
            actual,
        });
    }
    Ok(Some(Tensor::read_safetensors(&path)?.into_iter().collect()))
}

/// Load and verify a checkpoint. The model is rebuilt from the manifest's
/// configuration and box set, so edited boxes take effect.
pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let manifest = read_manifest(dir)?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(CheckpointError::Manifest(format!(
            "config hash {} does not match the stored configuration ({})",
            manifest.config_hash,
            manifest.config.hash()
        )));
    }
    let model = FaceModel::new(manifest.config.clone(), manifest.boxes.clone())?;
    let mut stored = HashMap::new();
    for file in [GENERATOR_BLOB, DISCRIMINATOR_BLOB] {
        let tensors = read_blob(dir, &manifest, file)?
            .ok_or_else(|| CheckpointError::Manifest(format!("blob {file} is not listed")))?;
        stored.extend(tensors);
    }
    let listed: HashMap<&str, &ParameterEntry> = manifest.parameters.iter().map(|p| (p.name.as_str(), p)).collect();
    let params = model.named_parameters();
    for (name, p) in &params {
        let entry = listed.get(name.as_str()).ok_or_else(|| CheckpointError::Parameter {
            name: name.clone(),
            detail: "missing from manifest".into(),
        })?;
        let t = stored.get(name).ok_or_else(|| CheckpointError::Parameter {
            name: name.clone(),
            detail: format!("missing from {}", entry.blob),
        })?;
        if t.size() != p.size() || entry.shape != p.size() {
            return Err(CheckpointError::Parameter {
                name: name.clone(),
                detail: format!("stored shape {:?} but the model expects {:?}", t.size(), p.size()),
            });
        }
        tch::no_grad(|| p.shallow_clone().copy_(&t.to_kind(p.kind())));
    }
    if let Some(extra) = manifest.parameters.iter().find(|e| !params.iter().any(|(n, _)| n == &e.name)) {
        return Err(CheckpointError::Parameter {
            name: extra.name.clone(),
            detail: "not a parameter of this model".into(),
        });
    }
    let optimizer = match (manifest.optimizer, read_blob(dir, &manifest, OPTIMIZER_BLOB)?) {
        (Some(o), Some(t)) => {
            let mut tensors: Vec<(String, Tensor)> = t.into_iter().collect();
            tensors.sort_by(|a, b| a.0.cmp(&b.0));
            Some(OptimizerSnapshot {
                generator_step: o.generator_step,
                discriminator_step: o.discriminator_step,
                tensors,
            })
        }
        _ => None,
    };
    let loss_curve = match manifest.blobs.iter().find(|b| b.file == LOSS_FILE) {
        Some(entry) => {
            let path = dir.join(LOSS_FILE);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let actual = hex(&Sha256::digest(text.as_bytes()));
            if actual != entry.sha256 {
                return Err(CheckpointError::Corrupt {
                    file: LOSS_FILE.to_string(),
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
            Some(text)
        }
        None => None,
    };
    Ok(LoadedCheckpoint {
        manifest,
        model,
        optimizer,
        loss_curve,
    })
}

/// The checkpoint directory with the highest iteration under `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>, CheckpointError> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(run_dir).map_err(io_err(run_dir))? {
        let entry = entry.map_err(io_err(run_dir))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(n) = name.strip_prefix("ckpt-").and_then(|s| s.parse::<u64>().ok()) {
            if entry.path().join(MANIFEST_FILE).exists() && best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, entry.path()));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
