//! Binary checkpoint container: magic, version, length-prefixed JSON
//! metadata, then the parameters as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{Arch, DenoiserError, DenoiserModel};
use crate::metrics::{ClassifierArch, MlpClassifier};
use crate::numerics::Tensor;
use crate::schedule::ScheduleSpec;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DDPMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("checkpoint holds {found} parameters, metadata says {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error("checkpoint holds a {found}, expected a {expected}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error("invalid classifier: {0}")]
    Classifier(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Position of one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelMeta {
    Denoiser { arch: Arch, schedule: ScheduleSpec },
    Classifier { arch: ClassifierArch },
}

impl ModelMeta {
    fn kind(&self) -> &'static str {
        match self {
            ModelMeta::Denoiser { .. } => "denoiser",
            ModelMeta::Classifier { .. } => "classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelMeta,
    pub step: u64,
    pub rng: Vec<RngState>,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f32>,
}

fn to_f32(t: &Tensor) -> Vec<f32> {
    t.data().iter().map(|&v| v as f32).collect()
}

fn to_tensor(p: &[f32]) -> Tensor {
    Tensor::from_vec(p.iter().map(|&v| v as f64).collect())
}

impl Checkpoint {
    pub fn from_denoiser(model: &DenoiserModel, schedule: ScheduleSpec, step: u64, rng: Vec<RngState>) -> Self {
        Self {
            meta: CheckpointMeta {
                model: ModelMeta::Denoiser { arch: model.arch().clone(), schedule },
                step,
                rng,
                n_params: model.num_params(),
            },
            params: to_f32(model.params()),
        }
    }

    pub fn from_classifier(model: &MlpClassifier, step: u64, rng: Vec<RngState>) -> Self {
        Self {
            meta: CheckpointMeta {
                model: ModelMeta::Classifier { arch: model.arch().clone() },
                step,
                rng,
                n_params: model.num_params(),
            },
            params: to_f32(model.params()),
        }
    }

    pub fn to_denoiser(&self) -> Result<(DenoiserModel, ScheduleSpec), CheckpointError> {
        match &self.meta.model {
            ModelMeta::Denoiser { arch, schedule } => {
                Ok((DenoiserModel::from_params(arch.clone(), to_tensor(&self.params))?, *schedule))
            }
            other => Err(CheckpointError::WrongKind { expected: "denoiser", found: other.kind() }),
        }
    }

    pub fn to_classifier(&self) -> Result<MlpClassifier, CheckpointError> {
        match &self.meta.model {
            ModelMeta::Classifier { arch } => MlpClassifier::from_params(arch.clone(), to_tensor(&self.params))
                .map_err(|e| CheckpointError::Classifier(e.to_string())),
            other => Err(CheckpointError::WrongKind { expected: "classifier", found: other.kind() }),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(16 + meta.len() + 4 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(raw: &[u8]) -> Result<Self, CheckpointError> {
        if raw.len() < 16 {
            return Err(if raw.starts_with(CHECKPOINT_MAGIC) || raw.len() < 8 {
                CheckpointError::Truncated
            } else {
                CheckpointError::BadMagic
            });
        }
        if &raw[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let word = |o: usize| u32::from_le_bytes([raw[o], raw[o + 1], raw[o + 2], raw[o + 3]]);
        let version = word(8);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = word(12) as usize;
        let body = raw.get(16..16 + meta_len).ok_or(CheckpointError::Truncated)?;
        let meta: CheckpointMeta = serde_json::from_slice(body)?;
        let rest = &raw[16 + meta_len..];
        if !rest.len().is_multiple_of(4) {
            return Err(CheckpointError::Truncated);
        }
        let params: Vec<f32> = rest.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if params.len() != meta.n_params {
            return Err(CheckpointError::ParamCount { expected: meta.n_params, found: params.len() });
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read(path)?)
    }
}
