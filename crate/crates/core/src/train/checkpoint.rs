//! Binary checkpoint format.
//!
//! Little-endian throughout: the magic `BSSL`, a `u32` format version, a
//! `u32`-length-prefixed JSON block echoing the run configuration and
//! progress, a `u32` record count, then one record per tensor:
//! `u32` name length, UTF-8 name, `u8` dtype (0 = f32, 1 = f64), `u32` rank,
//! `u32` dims, raw element bytes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochAccumulator, EpochLog, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numcore::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"BSSL";
pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "opt.momentum.";

/// Everything besides tensors needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub model_version: u32,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// All random streams are keyed by `(seed, step, ...)`, so these two
    /// numbers are the complete generator state.
    pub rng_seed: u64,
    pub rng_step: u64,
    pub history: Vec<EpochLog>,
    pub partial_epoch: EpochAccumulator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub meta: CheckpointMeta,
    pub state: ModelState<S>,
    /// Optimizer velocity, aligned with `state.params()`.
    pub momentum: Vec<Tensor<S>>,
}

fn dtype_code(name: &str) -> u8 {
    if name == "f64" {
        1
    } else {
        0
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<S>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    out.push(dtype_code(S::DTYPE));
    put_u32(out, t.ndim())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for &v in t.data() {
        if S::DTYPE == "f64" {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        } else {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn tensor<S: Scalar>(&mut self) -> Result<(String, Tensor<S>)> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = self.take(1)?[0];
        let ndim = self.u32()?;
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let data: Vec<S> = match dtype {
            0 => self
                .take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                .chunks_exact(4)
                .map(|b| S::of(f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes")))))
                .collect(),
            1 => self
                .take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                .chunks_exact(8)
                .map(|b| S::of(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect(),
            other => return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype code {other}"))),
        };
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.meta)?;
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        let params = self.state.params();
        if self.momentum.len() != params.len() {
            return Err(Error::Checkpoint("momentum buffers do not match parameters".into()));
        }
        put_u32(&mut out, self.state.tensors().count() + self.momentum.len())?;
        for t in self.state.tensors() {
            put_tensor(&mut out, &t.name, &t.value)?;
        }
        for (p, v) in params.iter().zip(&self.momentum) {
            put_tensor(&mut out, &format!("{MOMENTUM_PREFIX}{}", p.name), v)?;
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = r.u32()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("malformed config block: {e}")))?;
        let count = r.u32()?;
        let mut model = HashMap::new();
        let mut moms = HashMap::new();
        for _ in 0..count {
            let (name, t) = r.tensor::<S>()?;
            let slot = match name.strip_prefix(MOMENTUM_PREFIX) {
                Some(rest) => moms.insert(rest.to_string(), t),
                None => model.insert(name.clone(), t),
            };
            if slot.is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        let state = ModelState::from_tensors(meta.config.model.clone(), model)?;
        let momentum = state
            .params()
            .iter()
            .map(|p| {
                let v = moms
                    .remove(&p.name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing momentum for {}", p.name)))?;
                if v.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!("momentum shape mismatch for {}", p.name)));
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = moms.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected momentum buffer {extra}")));
        }
        Ok(Self { meta, state, momentum })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(detail) => Error::Load {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }
}
