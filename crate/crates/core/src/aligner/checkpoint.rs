//! Checkpoints hold only the trainable tensors plus provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AlignError, AlignParams};
use crate::scalar::Scalar;
use crate::tensorfile;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TOPACK01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Fingerprint of the producing configuration.
    pub fingerprint: String,
    pub backbone_descriptor: String,
    pub backbone_digest: String,
    pub encoder_descriptor: String,
    pub feature_dim: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub params: AlignParams<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_value(&self.header).expect("header serializes");
        tensorfile::encode(CHECKPOINT_MAGIC, &meta, &self.params.named())
    }

    pub fn save(&self, path: &Path) -> Result<(), AlignError> {
        let meta = serde_json::to_value(&self.header).expect("header serializes");
        Ok(tensorfile::write(path, CHECKPOINT_MAGIC, &meta, &self.params.named())?)
    }

    pub fn load(path: &Path) -> Result<Self, AlignError> {
        let bytes = std::fs::read(path).map_err(|source| AlignError::Io { path: path.to_path_buf(), source })?;
        Self::decode(path, &bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AlignError> {
        Self::decode(Path::new("<memory>"), bytes)
    }

    fn decode(path: &Path, bytes: &[u8]) -> Result<Self, AlignError> {
        let (meta, tensors) = tensorfile::decode::<T>(path, bytes, CHECKPOINT_MAGIC)?;
        let header: CheckpointHeader =
            serde_json::from_value(meta).map_err(|e| AlignError::BadCheckpoint(e.to_string()))?;
        let params = AlignParams::from_named(tensors)?;
        if params.feature_dim() != header.feature_dim {
            return Err(AlignError::BadCheckpoint(format!(
                "projection expects {} features, header says {}",
                params.feature_dim(),
                header.feature_dim
            )));
        }
        Ok(Self { header, params })
    }
}
