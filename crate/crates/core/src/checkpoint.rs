//! Parameter archive.
//!
//! ```text
//! magic        8 bytes  "TSCKPT01"
//! meta_len     u32 LE
//! meta         JSON object (config hash, stage, epoch, seed, config text)
//! count        u32 LE
//! per tensor:  name_len u32 LE, name UTF-8, ndim u32 LE, dims u64 LE x ndim,
//!              values f64 LE row-major
//! ```
//!
//! Tensors are stored in name order, so identical parameters give identical
//! files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::nn::ParamStore;
use crate::tensor::Array;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config_hash: String,
    pub stage: u8,
    pub epoch: usize,
    pub seed: u64,
    /// Full configuration in `key = value` form.
    pub config: String,
}

impl Metadata {
    pub fn new(config: &TrainConfig, epoch: usize) -> Self {
        Self { config_hash: config.hash(), stage: config.stage, epoch, seed: config.seed, config: config.to_kv() }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        TrainConfig::from_kv(&self.config)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub params: ParamStore,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        put_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.params.len());
        for (name, value) in self.params.iter() {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, value.ndim());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let meta_len = r.u32()?;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::format("checkpoint metadata", e.to_string()))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?.to_string();
            let ndim = r.u32()?;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64()).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(8 * n)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let array = Array::from_shape_vec(ndarray::IxDyn(&shape), values).expect("length matches shape");
            params.insert(name, array);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn roundtrip() {
        let mut params = ParamStore::new();
        params.insert("a.weight", Array::from_shape_fn(IxDyn(&[2, 3]), |d| d[0] as f64 - 0.1 * d[1] as f64));
        params.insert("b", Array::from_elem(IxDyn(&[]), std::f64::consts::PI));
        let ck = Checkpoint { meta: Metadata::new(&TrainConfig::default(), 3), params };
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta.train_config().unwrap(), TrainConfig::default());
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
