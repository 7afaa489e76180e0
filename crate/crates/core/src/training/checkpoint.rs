//! Binary checkpoint format.
//!
//! ```text
//! magic "PVSEGCKP" | version u32
//! meta_len u32 | meta JSON (model config, train config, epoch)
//! step u64
//! count u32, then per parameter:
//!   name_len u32 | name | ndim u32 | dims u32 × ndim | f32 × numel
//! has_optimizer u8, then if 1:
//!   adam_step u64 | per parameter: m f64 × numel, v f64 × numel
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

use super::optim::AdamW;
use super::TrainConfig;

pub const MAGIC: &[u8; 8] = b"PVSEGCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub step: u64,
}

pub fn encode(model: &Model, optimizer: Option<&AdamW>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta).expect("checkpoint metadata always serializes");
    b.extend_from_slice(&(json.len() as u32).to_le_bytes());
    b.extend_from_slice(&json);
    b.extend_from_slice(&meta.step.to_le_bytes());
    let params = model.params.params();
    b.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        b.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        b.extend_from_slice(p.name.as_bytes());
        b.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    match optimizer {
        None => b.push(0),
        Some(opt) => {
            b.push(1);
            b.extend_from_slice(&opt.step.to_le_bytes());
            for (m, v) in opt.m.iter().zip(&opt.v) {
                for x in m.iter().chain(v) {
                    b.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
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

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads only the header and metadata.
pub fn decode_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let mut r = Reader { buf: bytes, pos: 0 };
    read_meta(&mut r)
}

fn read_meta(r: &mut Reader) -> Result<CheckpointMeta> {
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {VERSION})"
        )));
    }
    let len = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    Ok(meta)
}

pub fn decode(bytes: &[u8]) -> Result<(Model, Option<AdamW>, CheckpointMeta)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let meta = read_meta(&mut r)?;
    let step = r.u64()?;
    if step != meta.step {
        return Err(Error::Checkpoint("step counter disagrees with metadata".into()));
    }
    let mut model = Model::new(&meta.model, 0)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, model config has {}",
            model.params.len()
        )));
    }
    for i in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let param = &mut model.params.params_mut()[i];
        if param.name != name || param.value.shape() != dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {i} is {name} {dims:?}, model expects {} {:?}",
                param.name,
                param.value.shape()
            )));
        }
        for v in param.value.data_mut() {
            *v = r.f32()? as f64;
        }
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let train = meta.train.clone().unwrap_or_default();
            let mut opt = AdamW::new(&model.params, train.lr, train.weight_decay);
            opt.step = r.u64()?;
            for (m, v) in opt.m.iter_mut().zip(opt.v.iter_mut()) {
                for x in m.iter_mut().chain(v.iter_mut()) {
                    *x = r.f64()?;
                }
            }
            Some(opt)
        }
        other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
    }
    Ok((model, optimizer, meta))
}

pub fn save_checkpoint(path: &Path, model: &Model, optimizer: Option<&AdamW>, meta: &CheckpointMeta) -> Result<()> {
    crate::write_atomic(path, &encode(model, optimizer, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<AdamW>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
