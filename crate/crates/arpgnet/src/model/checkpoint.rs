//! Binary checkpoint format.
//!
//! Layout: the magic bytes `ARPG1`, a little-endian `u32` length followed by
//! the JSON-serialized configuration, then every parameter in canonical
//! order as `(u32 name length, name bytes, u32 rank, u32 extents.., f32
//! little-endian values..)`. Saving and reloading reproduces the file byte
//! for byte, and a reloaded model produces bit-identical logits.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{ArpgNet, ArpgNetConfig, ModelError};
use crate::numerics::Tape;

const MAGIC: &[u8; 5] = b"ARPG1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {reason}")]
    Corrupt { reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn corrupt(reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt {
        reason: reason.into(),
    }
}

/// Sequential reader over the checkpoint bytes; any shortfall is reported as
/// corruption rather than an io error, since the bytes are already in memory.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(format!(
                "unexpected end of file while reading {what} at byte {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let raw = self.take(4, what)?;
        Ok(u32::from_le_bytes(raw.try_into().expect("four bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl ArpgNet<f32> {
    /// Serializes the configuration and every parameter to `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let config_json = serde_json::to_vec(self.config())
            .expect("the configuration serializes infallibly");
        out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&config_json);
        for (name, tensor) in self.named_params() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for extent in &shape {
                out.extend_from_slice(&(*extent as u32).to_le_bytes());
            }
            for v in tensor.value() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Reconstructs a model from `path`, placing its parameters on `tape`.
    pub fn load(path: impl AsRef<Path>, tape: &Tape<f32>) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
        };
        if r.take(MAGIC.len(), "the magic header")? != MAGIC {
            return Err(corrupt("not a model checkpoint (bad magic bytes)"));
        }
        let config_len = r.u32("the configuration length")? as usize;
        let config_bytes = r.take(config_len, "the configuration")?;
        let config: ArpgNetConfig = serde_json::from_slice(config_bytes)
            .map_err(|e| corrupt(format!("unreadable configuration: {e}")))?;

        // Parameter values are overwritten below, so the init seed is
        // irrelevant; a fixed one keeps loading deterministic.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ArpgNet::new(config, tape, &mut rng)?;
        for (name, tensor) in model.named_params() {
            let name_len = r.u32("a parameter name length")? as usize;
            let stored_name = std::str::from_utf8(r.take(name_len, "a parameter name")?)
                .map_err(|_| corrupt("parameter name is not valid text"))?;
            if stored_name != name {
                return Err(corrupt(format!(
                    "expected parameter {name}, found {stored_name}"
                )));
            }
            let rank = r.u32("a parameter rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("a parameter extent")? as usize);
            }
            if shape != tensor.shape() {
                return Err(corrupt(format!(
                    "parameter {name} has shape {shape:?}, expected {:?}",
                    tensor.shape()
                )));
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4, &format!("the values of {name}"))?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            tensor
                .set_data(&values)
                .map_err(|e| corrupt(format!("rejected values for {name}: {e}")))?;
        }
        if !r.done() {
            return Err(corrupt(format!(
                "{} trailing bytes after the last parameter",
                bytes.len() - r.pos
            )));
        }
        Ok(model)
    }
}
