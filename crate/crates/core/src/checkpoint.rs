//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "RPNCKPT1" (last byte is the format version)
//! count    u32 LE   number of records
//! record:  u32 LE name length, UTF-8 name,
//!          u32 LE rank, rank × u32 LE dims,
//!          prod(dims) × f32 LE values
//! ```
//!
//! Network tensors use their layout names (`stem.weight`, …). Metadata lives
//! in `meta.*` records and optimizer moments in `adam.*` records. Values that
//! are not naturally `f32` (epoch, step counter, the `f64` loss settings) are
//! stored as raw bit words reinterpreted as `f32`, so every field survives a
//! round trip bit-exactly.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::objective::{LossConfig, StatScope};
use crate::optim::AdamWState;
use crate::rpn::{self, RpnParams};
use crate::speckle::SpeckleSpec;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"RPNCKPT1";
const MAGIC_STEM: &[u8; 7] = b"RPNCKPT";
pub const FORMAT_VERSION: u8 = b'1';

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version '{found}' (expected '{expected}')", found = *.0 as char, expected = FORMAT_VERSION as char)]
    VersionMismatch(u8),
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("record name is not valid UTF-8")]
    BadName,
    #[error("record '{0}' appears twice")]
    Duplicate(String),
    #[error("unknown record '{0}'")]
    UnknownRecord(String),
    #[error("missing record '{0}'")]
    MissingRecord(String),
    #[error("record '{name}' has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("record '{name}' has unsupported rank {rank}")]
    BadRank { name: String, rank: usize },
    #[error("invalid metadata: {0}")]
    BadMeta(String),
    #[error("trailing bytes after the last record")]
    TrailingBytes,
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Network parameters plus everything needed to resume or reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: RpnParams<f32>,
    /// Number of completed training epochs.
    pub epoch: u32,
    pub loss: LossConfig,
    pub speckle: SpeckleSpec,
    pub optimizer: Option<AdamWState<f32>>,
}

impl Checkpoint {
    /// An untrained checkpoint around `params`.
    pub fn fresh(params: RpnParams<f32>, loss: LossConfig, speckle: SpeckleSpec) -> Self {
        Self { params, epoch: 0, loss, speckle, optimizer: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        for (name, t) in self.params.named() {
            records.push((name, t.shape().dims().to_vec(), t.data().to_vec()));
        }
        records.push(("meta.epoch".into(), vec![1], vec![f32::from_bits(self.epoch)]));
        records.push(("meta.loss".into(), vec![LOSS_FIELDS * 2], encode_f64s(&loss_fields(&self.loss))));
        records.push(("meta.speckle".into(), vec![4], encode_f64s(&[self.speckle.looks, self.speckle.sigma2_tgt])));
        if let Some(st) = &self.optimizer {
            records.push(("adam.step".into(), vec![2], encode_u64(st.step)));
            let names = rpn::layout();
            for (kind, moments) in [("m", &st.m), ("v", &st.v)] {
                for ((name, _), t) in names.iter().zip(moments) {
                    records.push((format!("adam.{kind}.{name}"), t.shape().dims().to_vec(), t.data().to_vec()));
                }
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, dims, data) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic[..7] != MAGIC_STEM {
            return Err(CheckpointError::BadMagic);
        }
        if magic[7] != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch(magic[7]));
        }
        let count = read_u32(&mut cur, "record count")? as usize;
        let mut records = Records::new();
        for _ in 0..count {
            let len = read_u32(&mut cur, "name length")? as usize;
            let name_bytes = take(&mut cur, len, "record name")?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| CheckpointError::BadName)?;
            let rank = read_u32(&mut cur, "rank")? as usize;
            if rank == 0 || rank > 4 {
                return Err(CheckpointError::BadRank { name, rank });
            }
            let dims = (0..rank).map(|_| read_u32(&mut cur, "dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated("tensor data"))?;
            let raw = take(&mut cur, n.checked_mul(4).ok_or(CheckpointError::Truncated("tensor data"))?, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if records.insert(name.clone(), (dims, data)).is_some() {
                return Err(CheckpointError::Duplicate(name));
            }
        }
        if !cur.is_empty() {
            return Err(CheckpointError::TrailingBytes);
        }

        let layout = rpn::layout();
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            tensors.push(take_tensor(&mut records, name, *shape)?);
        }
        let params = RpnParams::from_tensors(tensors).map_err(|e| CheckpointError::BadMeta(e.to_string()))?;

        let epoch = take_tensor(&mut records, "meta.epoch", Shape::new(1, 1, 1, 1))?.data()[0].to_bits();
        let loss = loss_from_fields(&decode_f64s(take_tensor(&mut records, "meta.loss", Shape::new(LOSS_FIELDS * 2, 1, 1, 1))?.data()))?;
        let sp = decode_f64s(take_tensor(&mut records, "meta.speckle", Shape::new(4, 1, 1, 1))?.data());
        let speckle = SpeckleSpec { looks: sp[0], sigma2_tgt: sp[1] };

        let optimizer = if records.contains_key("adam.step") {
            let step = decode_u64(take_tensor(&mut records, "adam.step", Shape::new(2, 1, 1, 1))?.data());
            let mut moments = |kind: &str| -> Result<Vec<Tensor<f32>>> {
                layout.iter().map(|(name, shape)| take_tensor(&mut records, &format!("adam.{kind}.{name}"), *shape)).collect()
            };
            let m = moments("m")?;
            let v = moments("v")?;
            Some(AdamWState { step, m, v })
        } else {
            None
        };

        if let Some(name) = records.keys().min() {
            return Err(CheckpointError::UnknownRecord(name.clone()));
        }
        Ok(Self { params, epoch, loss, speckle, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // Write then rename, so an interrupted save never leaves a half-written checkpoint.
        let tmp = path.with_extension("tmp");
        {
            let mut f = io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(&self.to_bytes())?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

type Records = HashMap<String, (Vec<usize>, Vec<f32>)>;

fn take_tensor(records: &mut Records, name: &str, shape: Shape) -> Result<Tensor<f32>> {
    let (dims, data) = records.remove(name).ok_or_else(|| CheckpointError::MissingRecord(name.to_string()))?;
    let expected = shape.dims().to_vec();
    if pad_dims(&dims) != expected {
        return Err(CheckpointError::ShapeMismatch { name: name.to_string(), expected, found: dims });
    }
    Ok(Tensor::new(shape, data).expect("length checked against dims"))
}

const LOSS_FIELDS: usize = 8;

fn loss_fields(c: &LossConfig) -> [f64; LOSS_FIELDS] {
    let scope = match c.stat_scope {
        StatScope::Patch => 0.0,
        StatScope::Batch => 1.0,
    };
    [c.beta0, c.horizon as f64, c.gamma, c.lambda, c.sigma_edge, c.median_window as f64, c.eps, scope]
}

fn loss_from_fields(f: &[f64]) -> Result<LossConfig> {
    let stat_scope = match f[7] {
        0.0 => StatScope::Patch,
        1.0 => StatScope::Batch,
        other => return Err(CheckpointError::BadMeta(format!("stat scope code {other}"))),
    };
    let c = LossConfig {
        beta0: f[0],
        horizon: f[1] as u32,
        gamma: f[2],
        lambda: f[3],
        sigma_edge: f[4],
        median_window: f[5] as usize,
        eps: f[6],
        stat_scope,
    };
    c.validate().map_err(|e| CheckpointError::BadMeta(e.to_string()))?;
    Ok(c)
}

fn encode_u64(v: u64) -> Vec<f32> {
    vec![f32::from_bits(v as u32), f32::from_bits((v >> 32) as u32)]
}

fn decode_u64(w: &[f32]) -> u64 {
    w[0].to_bits() as u64 | (w[1].to_bits() as u64) << 32
}

fn encode_f64s(values: &[f64]) -> Vec<f32> {
    values.iter().flat_map(|v| encode_u64(v.to_bits())).collect()
}

fn decode_f64s(words: &[f32]) -> Vec<f64> {
    words.chunks_exact(2).map(|w| f64::from_bits(decode_u64(w))).collect()
}

/// Right-pads lower-rank dims with ones so `[96]` matches `[96, 1, 1, 1]`.
fn pad_dims(dims: &[usize]) -> Vec<usize> {
    let mut d = dims.to_vec();
    d.resize(4, 1);
    d
}

fn take<'a>(cur: &mut &'a [u8], n: usize, what: &'static str) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(CheckpointError::Truncated(what));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

fn read_u32(cur: &mut &[u8], what: &'static str) -> Result<u32> {
    let b = take(cur, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}
