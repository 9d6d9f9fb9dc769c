//! Training checkpoints.
//!
//! A checkpoint is a directory with `checkpoint.json` and four little-endian
//! `f64` blobs: `theta.bin` (best-validation parameters), `last_theta.bin`
//! (parameters after the last update), `first_moment.bin` and
//! `second_moment.bin` (ADAM state). Every blob is one flat vector laid out as
//! `W_1 … W_{H+1}` (each `m × d²`, row-major), then `δ_0 … δ_H`, then
//! `τ_1 … τ_{H+1}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Theta, ThetaGrad, LAYER_CONVENTION};
use crate::storage::{manifest_digest, read_blob, write_blob, BlobInfo};
use crate::training::{TrainConfig, TrainState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};

pub const CHECKPOINT_FORMAT: &str = "lsvt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FIELD_ORDER: &str = "weights[row-major m x d^2, layer 1..H+1];deltas[0..H];taus[1..H+1]";
const MANIFEST: &str = "checkpoint.json";
const BLOBS: [&str; 4] = ["theta", "last_theta", "first_moment", "second_moment"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConstants {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConstants {
    pub const CURRENT: AdamConstants = AdamConstants {
        beta1: ADAM_BETA1,
        beta2: ADAM_BETA2,
        epsilon: ADAM_EPSILON,
    };
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `manifest_sha256` of the training dataset.
    pub dataset_sha256: String,
    pub dataset_seed: u64,
    pub operator_seed: u64,
    pub init_tau: f64,
    pub init_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub rows: usize,
    pub hidden_layers: usize,
    pub layer_convention: String,
    pub field_order: String,
    pub adam: AdamConstants,
    pub train_config: TrainConfig,
    pub step: usize,
    pub best_val_mse: f64,
    pub since_improvement: usize,
    pub provenance: Provenance,
    pub blobs: BTreeMap<String, BlobInfo>,
    #[serde(default)]
    pub manifest_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train_config: TrainConfig,
    pub provenance: Provenance,
}

fn flatten(weights: &[DMatrix<f64>], deltas: &[f64], taus: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for w in weights {
        // nalgebra stores column-major; the transpose's storage is W row-major.
        out.extend_from_slice(w.transpose().as_slice());
    }
    out.extend_from_slice(deltas);
    out.extend_from_slice(taus);
    out
}

fn unflatten(values: &[f64], dim: usize, rows: usize, layers: usize) -> ThetaGrad {
    let per = rows * dim * dim;
    let weights = (0..layers)
        .map(|l| DMatrix::from_row_slice(rows, dim * dim, &values[l * per..(l + 1) * per]))
        .collect();
    let tail = &values[layers * per..];
    ThetaGrad {
        weights,
        deltas: tail[..layers].to_vec(),
        taus: tail[layers..].to_vec(),
    }
}

fn grad_to_theta(g: ThetaGrad, dim: usize, rows: usize) -> Theta {
    Theta {
        dim,
        rows,
        weights: g.weights,
        deltas: g.deltas,
        taus: g.taus,
    }
}

impl CheckpointManifest {
    fn verify(&self) -> Result<()> {
        let mut blank = self.clone();
        blank.manifest_sha256.clear();
        if manifest_digest(&blank)? != self.manifest_sha256 {
            return Err(Error::Checksum(MANIFEST.to_string()));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.hidden_layers + 1
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<CheckpointManifest> {
    let state = &ckpt.state;
    state.theta.validate()?;
    state.best_theta.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (d, m) = (state.theta.dim, state.theta.rows);
    let flat = [
        flatten(&state.best_theta.weights, &state.best_theta.deltas, &state.best_theta.taus),
        flatten(&state.theta.weights, &state.theta.deltas, &state.theta.taus),
        flatten(
            &state.first_moment.weights,
            &state.first_moment.deltas,
            &state.first_moment.taus,
        ),
        flatten(
            &state.second_moment.weights,
            &state.second_moment.deltas,
            &state.second_moment.taus,
        ),
    ];
    let mut blobs = BTreeMap::new();
    for (name, values) in BLOBS.iter().zip(&flat) {
        blobs.insert(name.to_string(), write_blob(dir, name, values.len(), 1, values)?);
    }
    let mut manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dim: d,
        rows: m,
        hidden_layers: state.theta.hidden_layers(),
        layer_convention: LAYER_CONVENTION.into(),
        field_order: FIELD_ORDER.into(),
        adam: AdamConstants::CURRENT,
        train_config: ckpt.train_config,
        step: state.step,
        best_val_mse: state.best_val,
        since_improvement: state.since_improvement,
        provenance: ckpt.provenance.clone(),
        blobs,
        manifest_sha256: String::new(),
    };
    manifest.manifest_sha256 = manifest_digest(&manifest)?;
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Format {
        blob: MANIFEST.into(),
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        blob: MANIFEST.into(),
        reason: e.to_string(),
    })?;
    manifest.verify()?;
    if manifest.format != CHECKPOINT_FORMAT
        || manifest.layer_convention != LAYER_CONVENTION
        || manifest.field_order != FIELD_ORDER
    {
        return Err(Error::Format {
            blob: MANIFEST.into(),
            reason: format!(
                "unsupported format `{}` / layer convention `{}`",
                manifest.format, manifest.layer_convention
            ),
        });
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Checkpoint, CheckpointManifest)> {
    let manifest = read_checkpoint_manifest(dir)?;
    let (d, m, layers) = (manifest.dim, manifest.rows, manifest.layers());
    let expected = layers * (m * d * d + 2);
    let mut parts = Vec::with_capacity(BLOBS.len());
    for name in BLOBS {
        let info = manifest.blobs.get(name).ok_or_else(|| Error::Format {
            blob: name.into(),
            reason: "not listed in checkpoint manifest".into(),
        })?;
        let values = read_blob(dir, name, info)?;
        if values.len() != expected {
            return Err(Error::Format {
                blob: name.into(),
                reason: format!("expected {expected} values, found {}", values.len()),
            });
        }
        parts.push(unflatten(&values, d, m, layers));
    }
    let second_moment = parts.pop().expect("four blobs");
    let first_moment = parts.pop().expect("four blobs");
    let theta = grad_to_theta(parts.pop().expect("four blobs"), d, m);
    let best_theta = grad_to_theta(parts.pop().expect("four blobs"), d, m);
    best_theta.validate()?;
    theta.validate()?;
    let ckpt = Checkpoint {
        state: TrainState {
            theta,
            first_moment,
            second_moment,
            step: manifest.step,
            best_val: manifest.best_val_mse,
            best_theta,
            since_improvement: manifest.since_improvement,
        },
        train_config: manifest.train_config,
        provenance: manifest.provenance.clone(),
    };
    Ok((ckpt, manifest))
}

/// The best-validation parameters of a checkpoint.
pub fn load_theta(dir: &Path) -> Result<(Theta, CheckpointManifest)> {
    let (ckpt, manifest) = load_checkpoint(dir)?;
    Ok((ckpt.state.best_theta, manifest))
}
