//! Self-describing JSON checkpoints.
//!
//! One archive carries everything inference needs: a version stamp, the
//! family-tagged model config, the vocabulary's phone list, the label set,
//! and every named parameter tensor. A checkpoint therefore reconstructs the
//! exact encoder/classifier without reference to the training setup.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamSet;
use crate::model::ModelConfig;
use crate::phone_text::{PhoneToken, Vocabulary};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
}

/// Row-major tensor payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn from_array(a: &Array2<f64>) -> Self {
        let (rows, cols) = a.dim();
        TensorData {
            rows,
            cols,
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>, CheckpointError> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone()).map_err(|_| {
            CheckpointError::Malformed(format!(
                "tensor payload of {} values does not fill {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    /// Phone symbols in id order (id = index + 4).
    pub phones: Vec<String>,
    /// Class labels in logit order. Empty for pretraining-only checkpoints.
    pub labels: Vec<String>,
    pub params: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn new(
        config: ModelConfig,
        vocab: &Vocabulary,
        labels: Vec<String>,
        params: &ParamSet,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            phones: vocab.phones().iter().map(|t| t.as_str().to_string()).collect(),
            labels,
            params: params
                .iter()
                .map(|(name, tensor)| (name.clone(), TensorData::from_array(tensor)))
                .collect(),
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary, CheckpointError> {
        let phones = self
            .phones
            .iter()
            .map(|s| {
                PhoneToken::new(s.clone())
                    .map_err(|e| CheckpointError::Malformed(format!("bad phone symbol: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Vocabulary::from_phones(phones))
    }

    pub fn param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (name, tensor) in &self.params {
            set.insert(
                name,
                tensor
                    .to_array()
                    .expect("checkpoint validated before use"),
            );
        }
        set
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let json = serde_json::to_string(self)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let json = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&json)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: ck.version,
                supported: CHECKPOINT_VERSION,
            });
        }
        for (name, tensor) in &ck.params {
            if tensor.data.len() != tensor.rows * tensor.cols {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name:?} payload does not match its shape"
                )));
            }
        }
        Ok(ck)
    }
}
