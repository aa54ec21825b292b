//! Named-tensor checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    "GRMCKPT\0"
//! version  u32
//! meta     u32 length + UTF-8 JSON
//! count    u32
//! tensor*  u32 name length + name, dtype u8, ndim u8, dims u64 × ndim, data
//! ```
//!
//! Values are written as raw bits, so a save/load round trip is exact.

use std::path::Path;

use serde_json::Value;

use super::params::ModelParams;
use super::tensor::{DType, Mat, Real};
use super::ModelConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GRMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    /// Free-form JSON: model config, trainer state, provenance.
    pub meta: Value,
    pub tensors: Vec<(String, Mat<F>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.pos, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        let at = self.pos;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::parse(at, "invalid UTF-8"))
    }
}

impl<F: Real> Checkpoint<F> {
    pub fn new(meta: Value) -> Self {
        Checkpoint {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: &Mat<F>) {
        self.tensors.push((name.into(), m.clone()));
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat<F>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// All parameters of `params` under their stable names, with the model
    /// config stored as `meta.config`.
    pub fn from_params(params: &ModelParams<F>, mut meta: Value) -> Self {
        if let Value::Object(map) = &mut meta {
            map.insert(
                "config".into(),
                serde_json::to_value(&params.config).expect("serializable config"),
            );
        }
        let mut ck = Checkpoint::new(meta);
        for (name, m) in params.named() {
            ck.push(name, m);
        }
        ck
    }

    pub fn config(&self) -> Result<ModelConfig> {
        let c = self
            .meta
            .get("config")
            .ok_or_else(|| Error::Config("checkpoint has no model config".into()))?;
        serde_json::from_value(c.clone()).map_err(|e| Error::Config(format!("model config: {e}")))
    }

    /// Rebuilds model parameters; every named tensor must be present with
    /// the shape the stored config implies.
    pub fn to_params(&self) -> Result<ModelParams<F>> {
        let config = self.config()?;
        config.validate()?;
        let mut params = ModelParams::zeros(&config);
        self.fill(params.named_mut(), "")?;
        Ok(params)
    }

    /// Copies tensors named `prefix + name` into `targets`.
    pub fn fill(&self, targets: Vec<(String, &mut Mat<F>)>, prefix: &str) -> Result<()> {
        for (name, dst) in targets {
            let key = format!("{prefix}{name}");
            let src = self
                .tensor(&key)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {key}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Config(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = self.meta.to_string();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(F::DTYPE.code());
            out.push(2);
            out.extend_from_slice(&(m.rows as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols as u64).to_le_bytes());
            for &v in &m.data {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let at = r.pos;
        let meta: Value = serde_json::from_str(r.string()?)
            .map_err(|e| Error::parse(at, format!("checkpoint metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?.to_string();
            let at = r.pos;
            let dtype = DType::from_code(r.u8()?)
                .ok_or_else(|| Error::parse(at, "unknown dtype"))?;
            if dtype != F::DTYPE {
                return Err(Error::Config(format!(
                    "tensor {name} stored as {dtype:?}, loading as {:?}",
                    F::DTYPE
                )));
            }
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => return Err(Error::parse(at, format!("unsupported rank {ndim}"))),
            };
            let size = dtype.size();
            let raw = r.take(rows * cols * size)?;
            let data = raw.chunks_exact(size).map(F::read_le).collect();
            tensors.push((name, Mat::from_vec(rows, cols, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::parse(r.pos, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
