//! Binary checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "SDLGM1" | u32 version | u32 header_len | header JSON
//! u32 n_tensors | per tensor: u32 name_len, name, u32 ndim, u64 dims.., f64 data..
//! u8 has_standardizer | [u32 d, f64 mean.., f64 std..]
//! ```
//!
//! Serialization is canonical, so save → load → save is byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, Standardizer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{ParamStore, Tensor};
use crate::supervised::SupervisedConfig;

pub const MAGIC: &[u8; 6] = b"SDLGM1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// `unsup`, `multilabel` or `counts`.
    pub task: String,
    pub supervised: Option<SupervisedConfig>,
    pub n_labels: Option<usize>,
    pub label_names: Vec<String>,
    pub with_decoder: bool,
    /// Seed of the run that produced the parameters.
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub standardizer: Option<Standardizer>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, header.len())?;
        out.extend_from_slice(&header);
        put_u32(&mut out, self.params.store.len())?;
        for p in self.params.store.iter() {
            put_u32(&mut out, p.name.len())?;
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.ndim())?;
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, p.value.data());
        }
        match &self.standardizer {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                put_u32(&mut out, s.mean.len())?;
                put_f64s(&mut out, &s.mean);
                put_f64s(&mut out, &s.std);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not an SDLGM1 checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
            let len = len.ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let data = r.f64s(len)?;
            let value = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            store.add(name, value);
        }
        let standardizer = match r.u8()? {
            0 => None,
            1 => {
                let d = r.u32()? as usize;
                let mean = r.f64s(d)?;
                let std = r.f64s(d)?;
                Some(Standardizer { mean, std })
            }
            other => return Err(Error::Checkpoint(format!("bad standardizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = ModelParams::from_store(&header.model, header.meta.with_decoder, store)?;
        if let Some(s) = &standardizer {
            if s.mean.len() != header.model.d {
                return Err(Error::Checkpoint(format!(
                    "standardizer has {} columns, model expects d = {}",
                    s.mean.len(),
                    header.model.d
                )));
            }
        }
        Ok(Self {
            model: header.model,
            meta: header.meta,
            params,
            standardizer,
        })
    }

    /// Atomic write: the file is complete or absent.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
