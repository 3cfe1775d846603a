//! Checkpoint serialization.
//!
//! File layout: magic bytes `PRCK`, a u32 format version, a u64-length
//! canonical JSON metadata blob (config snapshot, epoch, best metrics, RNG
//! state), then named tensors: u32 name length, UTF-8 name, u32 rank, u64
//! extents, f64 little-endian values. Velocity buffers are stored under a
//! `velocity:` name prefix. Floats round-trip bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::models::ModelParams;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 4] = b"PRCK";
const VERSION: u32 = 1;

/// RNG bookkeeping needed to reproduce or resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub train_seed: u64,
    pub epochs_done: usize,
}

/// Everything needed to reload a trained model and reproduce its recorded
/// validation metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub epoch: usize,
    pub best_val_adv_acc: Option<f64>,
    pub val_clean_acc: f64,
    pub val_adv_acc: Option<f64>,
    pub rng: RngState,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor)> {
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("bad tensor name".into()))?;
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = r.take(numel * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("meta encode: {e}")))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());
        for (name, t) in self.params.entries() {
            write_tensor(&mut buf, name, t);
        }
        for ((name, _), v) in self.params.entries().iter().zip(self.params.velocities()) {
            write_tensor(&mut buf, &format!("velocity:{name}"), v);
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("meta decode: {e}")))?;
        let mut entries = Vec::new();
        let mut velocities = Vec::new();
        while !r.done() {
            let (name, t) = read_tensor(&mut r)?;
            if let Some(stripped) = name.strip_prefix("velocity:") {
                let _ = stripped;
                velocities.push(t);
            } else {
                entries.push((name, t));
            }
        }
        if velocities.len() != entries.len() {
            return Err(Error::Checkpoint(format!(
                "{} velocity buffers for {} params",
                velocities.len(),
                entries.len()
            )));
        }
        Ok(Checkpoint {
            meta,
            params: ModelParams::from_entries(entries, velocities),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, ModelConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            classes: 3,
            parts: 2,
            height: 8,
            width: 8,
            pool: 2,
            width_base: 4,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg).unwrap();
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                config: TrainConfig {
                    model: cfg,
                    ..TrainConfig::default()
                },
                epoch: 3,
                best_val_adv_acc: Some(0.25),
                val_clean_acc: 0.5,
                val_adv_acc: Some(0.25),
                rng: RngState {
                    train_seed: 7,
                    epochs_done: 4,
                },
            },
            params,
        };
        let bytes = ckpt.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.params, ckpt.params);
        assert_eq!(back.meta.epoch, 3);
        assert_eq!(back.meta.best_val_adv_acc, Some(0.25));
        // Re-encode gives identical bytes.
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn corrupted_file_rejected() {
        assert!(Checkpoint::decode(b"nope").is_err());
        assert!(Checkpoint::decode(b"PRCK\x02\x00\x00\x00").is_err());
    }
}
