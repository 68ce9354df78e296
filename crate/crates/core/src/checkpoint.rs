//! Versioned binary parameter files.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   b"MCGCKPT\0"
//! version u32
//! n_meta  u32, then n_meta × (key: str, value: str)
//! n_ten   u32, then n_ten × (name: str, ndim: u32, dims: ndim × u64, values: f64 × prod(dims))
//! str     u32 byte length + UTF-8 bytes
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Adam, AdamConfig, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"MCGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint has no entry `{0}`")]
    Missing(String),
    #[error("{0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Missing(key.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// Writes every parameter of `store` under `section.`.
    pub fn put_store(&mut self, section: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            let mut t = t.clone();
            t.set_requires_grad(false);
            self.tensors.insert(format!("{section}.{name}"), t);
        }
    }

    /// Overwrites the values of `store` from `section.`; every parameter must be present.
    pub fn load_store(&self, section: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self.tensor(&format!("{section}.{name}"))?;
            store.set_value(&name, t).map_err(CheckpointError::Mismatch)?;
        }
        Ok(())
    }

    pub fn has_section(&self, section: &str) -> bool {
        let prefix = format!("{section}.");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    pub fn put_adam(&mut self, section: &str, opt: &Adam, store: &ParamStore) {
        for (name, t) in opt.export(store) {
            self.tensors.insert(format!("{section}.{name}"), t);
        }
    }

    pub fn load_adam(&self, section: &str, config: AdamConfig, store: &ParamStore) -> Result<Adam> {
        Adam::import(config, store, |k| self.tensors.get(&format!("{section}.{k}")).cloned())
            .map_err(CheckpointError::Mismatch)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(CheckpointError::Corrupt(format!("{name}: rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: shape overflow")))?;
            if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(CheckpointError::Truncated);
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
            ck.tensors.insert(name, t);
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Corrupt("invalid utf-8".into()))
    }
}
