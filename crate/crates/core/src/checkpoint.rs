// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "KHOPCKPT"
//! version    u32      1
//! header_len u64
//! header     JSON     config, step, stage position, tensor table, metadata
//! params     f32 × n  flat parameter vector in tensor-table order
//! moments    f64 × 2n AdamW first then second moments (if header says so)
//! digest     32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ModelConfig, ModelState, TensorInfo};
use crate::train::{AdamW, TrainState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KHOPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    stage: usize,
    stage_step: u64,
    num_params: usize,
    tensors: Vec<TensorInfo>,
    optimizer_t: Option<u64>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelState,
    pub optimizer: Option<AdamW>,
    pub stage: usize,
    pub stage_step: u64,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn of_model(model: ModelState) -> Self {
        Self { model, optimizer: None, stage: 0, stage_step: 0, meta: serde_json::Value::Null }
    }

    pub fn of_state(state: &TrainState) -> Self {
        Self {
            model: state.model.clone(),
            optimizer: Some(state.optimizer.clone()),
            stage: state.stage,
            stage_step: state.stage_step,
            meta: serde_json::Value::Null,
        }
    }

    /// Training state to resume from; fails if the checkpoint has no moments.
    pub fn into_state(self) -> Result<TrainState> {
        let optimizer = self.optimizer.ok_or_else(|| Error::Checkpoint("no optimizer state".into()))?;
        Ok(TrainState { model: self.model, optimizer, stage: self.stage, stage_step: self.stage_step })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.model.config().clone(),
            step: self.model.step,
            stage: self.stage,
            stage_step: self.stage_step,
            num_params: self.model.num_params(),
            tensors: self.model.layout().tensors().to_vec(),
            optimizer_t: self.optimizer.as_ref().map(|o| o.t),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(64 + json.len() + self.model.num_params() * 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.model.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        if let Some(o) = &self.optimizer {
            for x in o.m.iter().chain(&o.v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        if &body[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let rest = &body[20..];
        if hlen > rest.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..hlen])?;
        let data = &rest[hlen..];
        let n = header.num_params;
        let moments = header.optimizer_t.map_or(0, |_| 16 * n);
        if data.len() != 4 * n + moments {
            return Err(bad("payload length does not match header"));
        }
        let params = data[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
        let model = ModelState::from_params(header.config, params, header.step)?;
        if model.layout().tensors() != header.tensors.as_slice() {
            return Err(bad("tensor table does not match config"));
        }
        let optimizer = header.optimizer_t.map(|t| {
            let vals: Vec<f64> =
                data[4 * n..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
            AdamW { m: vals[..n].to_vec(), v: vals[n..].to_vec(), t }
        });
        Ok(Self { model, optimizer, stage: header.stage, stage_step: header.stage_step, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_tamper() {
        let m = ModelState::init(ModelConfig::new(1, 2, 8, 12, 6), 4).unwrap();
        let mut state = TrainState::new(m);
        state.optimizer.m[3] = 0.5;
        state.optimizer.t = 7;
        state.stage_step = 2;
        let bytes = Checkpoint::of_state(&state).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model.params, state.model.params);
        assert_eq!(back.optimizer.unwrap(), state.optimizer);
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }
}
