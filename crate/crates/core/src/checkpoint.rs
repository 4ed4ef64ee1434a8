//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "MANNERCK"
//! version      u32      FORMAT_VERSION
//! header_len   u64
//! header       UTF-8 TOML: step, best_val, [config.*] run configuration
//! entries      u32
//!   name_len   u32, name UTF-8
//!   kind       u8       0 trainable, 1 buffer
//!   rank       u32, dims u64 × rank
//!   data       f32 × numel
//! adam_step    u64
//! beta1 beta2 eps   f64 × 3
//! moments      u32      equal to the number of trainable entries
//!   m, v       f32 × numel each, shapes of the trainable entries in order
//! end          8 bytes  "MANNREND"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{build_model, Manner};
use crate::nn::{Kind, ParameterTree};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MANNERCK";
pub const END_MARKER: &[u8; 8] = b"MANNREND";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Lowest validation loss seen, if any epoch finished.
    pub best_val: Option<f64>,
    pub params: ParameterTree<f32>,
    pub optimizer: AdamState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    best_val: Option<f64>,
    config: RunConfig,
}

impl Checkpoint {
    /// A fresh model and optimizer for `config`.
    pub fn initial(config: &RunConfig) -> Result<(Manner, Self)> {
        config.validate()?;
        let (model, params) = build_model::<f32>(&config.model, config.train.seed)?;
        let optimizer = AdamState::new(config.train.adam(), &params);
        Ok((model, Checkpoint { config: config.clone(), step: 0, best_val: None, params, optimizer }))
    }

    /// Model structure for the stored config, checked against the stored tensors.
    pub fn model(&self) -> Result<Manner> {
        let (model, fresh) = build_model::<f32>(&self.config.model, 0)?;
        if fresh.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} tensors, checkpoint has {}",
                fresh.len(),
                self.params.len()
            )));
        }
        for ((_, a, ka, ta), (_, b, kb, tb)) in fresh.iter().zip(self.params.iter()) {
            if a != b || ka != kb || ta.shape() != tb.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{b}` {:?} does not match model entry `{a}` {:?}",
                    tb.shape(),
                    ta.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = Header { step: self.step, best_val: self.best_val, config: self.config.clone() };
        let header = toml::to_string(&header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, kind, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match kind {
                Kind::Param => 0,
                Kind::Buffer => 1,
            });
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
        let opt = &self.optimizer;
        out.extend_from_slice(&opt.step.to_le_bytes());
        for x in [opt.config.beta1, opt.config.beta2, opt.config.eps] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(opt.m.len() as u32).to_le_bytes());
        for (m, v) in opt.m.iter().zip(&opt.v) {
            put_f32s(&mut out, m.data());
            put_f32s(&mut out, v.data());
        }
        out.extend_from_slice(END_MARKER);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = r.u64()? as usize;
        let header = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let header: Header = toml::from_str(header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header.config.validate()?;

        let mut params = ParameterTree::new();
        for _ in 0..r.u32()? {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let kind = match r.u8()? {
                0 => Kind::Param,
                1 => Kind::Buffer,
                k => return Err(Error::Checkpoint(format!("`{name}`: unknown entry kind {k}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape {shape:?} overflows")))?;
            let data = r.f32s(numel)?;
            params
                .insert(&name, kind, Tensor::new(&shape, data)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }

        let step = r.u64()?;
        let config = AdamConfig { beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let ids = params.param_ids();
        let count = r.u32()? as usize;
        if count != ids.len() {
            return Err(Error::Checkpoint(format!(
                "{count} optimizer moments for {} trainable tensors",
                ids.len()
            )));
        }
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for &id in &ids {
            let shape = params.get(id).shape().to_vec();
            let n = params.get(id).numel();
            m.push(Tensor::new(&shape, r.f32s(n)?)?);
            v.push(Tensor::new(&shape, r.f32s(n)?)?);
        }
        if r.take(8)? != END_MARKER {
            return Err(Error::Checkpoint("missing end marker".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            best_val: header.best_val,
            params,
            optimizer: AdamState { config, step, m, v },
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
