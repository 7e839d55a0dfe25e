//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MXCPT1\0\0"
//! version      u32
//! vocab_size, d_model, n_layers, n_heads, max_seq_len   5 × u32
//! step         u64
//! seed         u64
//! parameters   f32 × parameter_count, canonical order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MXCPT1\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 4 + 5 * 4 + 8 + 8;

/// Model weights plus the training position they were saved at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters<f32>,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(params: Parameters<f32>, step: u64, seed: u64) -> Self {
        Self { params, step, seed }
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.params.config();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.params.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.max_seq_len] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "truncated header: {} bytes, need {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let config = ModelConfig {
            vocab_size: u32_at(12) as usize,
            d_model: u32_at(16) as usize,
            n_layers: u32_at(20) as usize,
            n_heads: u32_at(24) as usize,
            max_seq_len: u32_at(28) as usize,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("embedded config invalid: {e}")))?;
        let step = u64_at(32);
        let seed = u64_at(40);
        let expected = HEADER_LEN + 4 * config.parameter_count();
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes but the embedded config needs {expected}",
                bytes.len()
            )));
        }
        let mut off = HEADER_LEN;
        let mut tensors = Vec::new();
        for (_, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data = bytes[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 4 * n;
            tensors.push(Tensor::new(&shape, data)?);
        }
        Ok(Self {
            params: Parameters::from_tensors(config, tensors)?,
            step,
            seed,
        })
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
