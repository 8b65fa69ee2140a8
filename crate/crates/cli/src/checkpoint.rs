//! `KVDT` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"KVDT"  u32 version
//! u64 header length, header bytes (JSON: model config, step, seed, optimizer scalars)
//! u32 tensor count, then per tensor:
//!     u32 name length, name (UTF-8), u8 dtype (1 = f32, 2 = f64),
//!     u32 rank, rank x u64 dims, payload
//! u64 FNV-1a checksum of every preceding byte
//! ```
//!
//! Tensors are the model parameters (`param.*`), the Adam moments
//! (`adam.m.*`, `adam.v.*`) and the loss history (`train.loss_history`),
//! so a resumed run continues exactly where the saved one stopped.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use kvdit::diffusion::{Adam, TrainState};
use kvdit::{Dit, ModelConfig, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"KVDT";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub step: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub adam_t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        let opt = &state.opt;
        let header = Header {
            model: state.model.config().clone(),
            step: state.step,
            seed: state.seed,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            adam_t: opt.t,
        };
        let params = state.model.params();
        let mut tensors: Vec<(String, Tensor)> = params
            .iter()
            .map(|(n, t)| (format!("param.{n}"), Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")))
            .collect();
        for (prefix, moments) in [("adam.m", &opt.m), ("adam.v", &opt.v)] {
            for ((n, t), m) in params.iter().zip(moments) {
                tensors.push((format!("{prefix}.{n}"), Tensor::new(t.shape(), m.clone()).expect("moment matches its parameter")));
            }
        }
        let history = Tensor::new(&[state.loss_history.len()], state.loss_history.clone()).expect("1-d");
        tensors.push(("train.loss_history".into(), history));
        Self { header, tensors }
    }

    /// Rebuilds the trainer state. Tensors must match the header's model
    /// layout exactly.
    pub fn into_state(self) -> kvdit::Result<TrainState> {
        let h = self.header;
        let mut params = Vec::new();
        let mut m = std::collections::HashMap::new();
        let mut v = std::collections::HashMap::new();
        let mut history = None;
        for (name, t) in self.tensors {
            if let Some(n) = name.strip_prefix("param.") {
                params.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("adam.m.") {
                m.insert(n.to_string(), t.into_data());
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                v.insert(n.to_string(), t.into_data());
            } else if name == "train.loss_history" {
                history = Some(t.into_data());
            } else {
                return Err(kvdit::Error::Config(format!("unexpected checkpoint tensor {name}")));
            }
        }
        let model = Dit::from_tensors(h.model, params)?;
        let mut opt = Adam::new(h.lr, model.params());
        (opt.beta1, opt.beta2, opt.eps, opt.t) = (h.beta1, h.beta2, h.eps, h.adam_t);
        for (i, name) in model.params().names().iter().enumerate() {
            for (store, slot) in [(&mut m, &mut opt.m[i]), (&mut v, &mut opt.v[i])] {
                let data = store.remove(name).ok_or_else(|| kvdit::Error::Config(format!("missing optimizer moment for {name}")))?;
                if data.len() != slot.len() {
                    return Err(kvdit::Error::Config(format!("optimizer moment for {name} has {} values, expected {}", data.len(), slot.len())));
                }
                *slot = data;
            }
        }
        if let Some(name) = m.keys().chain(v.keys()).next() {
            return Err(kvdit::Error::Config(format!("optimizer moment for unknown tensor {name}")));
        }
        let loss_history = history.unwrap_or_default();
        Ok(TrainState { model, opt, step: h.step, seed: h.seed, loss_history })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Parses a checkpoint; the error string says what is wrong.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 4 + 4 + 8 || &bytes[..4] != MAGIC {
            return Err("not a KVDT checkpoint (bad magic)".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(format!("format version {version}, this build reads version {VERSION}"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if checksum(body) != stored {
            return Err("checksum mismatch".into());
        }
        let mut r = Reader { buf: body, pos: 8 };
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| format!("header: {e}"))?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => r.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                DTYPE_F32 => r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                d => return Err(format!("tensor {name}: unknown dtype {d}")),
            };
            let t = Tensor::new(&shape, data).map_err(|e| format!("tensor {name}: {e}"))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(format!("{} trailing bytes", body.len() - r.pos));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::from_bytes(&bytes).map_err(|reason| CliError::Checkpoint { path: path.to_path_buf(), reason })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated checkpoint")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
