//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DYCK"  u32 version=1
//! u32 config_len, config_len bytes of JSON ModelConfig
//! u32 entry_count
//! per entry (sorted by name):
//!   u32 name_len, UTF-8 name
//!   u8  trainable (0/1)
//!   u32 ndim, ndim × u64 dims
//!   product(dims) × f64 values, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"DYCK";
const VERSION: u32 = 1;

/// Parameters plus the configuration that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamStore) -> Self {
        Self { config, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::from(t.requires_grad()));
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = read_u32(&mut r)? as usize;
        let cfg_bytes = take(&mut r, cfg_len)?;
        let config: ModelConfig =
            serde_json::from_slice(cfg_bytes).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let n = read_u32(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name_len = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|e| ModelError::Checkpoint(e.to_string()))?
                .to_string();
            let mut flag = [0u8; 1];
            read_exact(&mut r, &mut flag)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let count: usize = shape.iter().product();
            let raw = take(&mut r, count.checked_mul(8).ok_or_else(|| ModelError::Checkpoint("size overflow".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            match flag[0] {
                1 => params.insert(name, &shape, values)?,
                0 => params.insert_frozen(name, &shape, values)?,
                f => return Err(ModelError::Checkpoint(format!("bad trainable flag {f}"))),
            }
        }
        if !r.is_empty() {
            return Err(ModelError::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| ModelError::Checkpoint("truncated checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(ModelError::Checkpoint("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}
