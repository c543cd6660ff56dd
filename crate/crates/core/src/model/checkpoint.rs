//! Binary checkpoint: `MATW`, u32 version, u32-length JSON header holding
//! the config, target standardization and metadata, then a u32 count of
//! parameter records (u32 name length, name, u32 rank, rank × u32 dims,
//! f32 little-endian payload). All integers are little-endian.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{MatConfig, Model, ModelError};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MATW";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint parameter '{0}' is malformed")]
    Param(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean and standard deviation applied to regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub step: Option<usize>,
    /// Validation metric (RMSE or AUC) at `epoch`.
    pub val_metric: Option<f64>,
    /// Validation loss at `epoch`.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: MatConfig,
    standardization: Option<Standardization>,
    meta: CheckpointMeta,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: MatConfig,
    pub params: ParamStore,
    pub standardization: Option<Standardization>,
    pub meta: CheckpointMeta,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, standardization: Option<Standardization>, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            config: model.config.clone(),
            params: model.params.clone(),
            standardization,
            meta,
        }
    }

    pub fn model(&self) -> Result<Model, ModelError> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            standardization: self.standardization,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| CheckpointError::Param("<utf8>".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Param(name.clone()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|_| CheckpointError::Param(name.clone()))?;
            params.insert(name.clone(), t).map_err(|_| CheckpointError::Param(name))?;
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Param("<trailing bytes>".into()));
        }
        // Confirms every parameter the config needs is present.
        Model::from_params(header.config.clone(), params.clone())?;
        Ok(Checkpoint {
            config: header.config,
            params,
            standardization: header.standardization,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
