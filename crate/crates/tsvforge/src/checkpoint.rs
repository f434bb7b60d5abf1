//! Named-tensor checkpoint container shared by encoder parameters and
//! fitted forecast heads. JSON manifest with a versioned header field.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TsvError};
use crate::numerics::Tensor;

pub const CKPT_FORMAT: &str = "tsvforge.ckpt.v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    /// Free-form metadata (configs, dims); ordering is preserved as written.
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            format: CKPT_FORMAT.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|nt| nt.name == name)
            .map(|nt| &nt.tensor)
            .ok_or_else(|| TsvError::Data(format!("checkpoint missing tensor '{name}'")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.format != CKPT_FORMAT {
            return Err(TsvError::Data(format!(
                "unsupported checkpoint format '{}', expected '{CKPT_FORMAT}'",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }
}
