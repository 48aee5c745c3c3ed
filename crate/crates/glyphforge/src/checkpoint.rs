//! Binary checkpoint container (little endian):
//!
//! ```text
//! "GFCK" | u32 version | u32 header length | header JSON
//! 3 x tensor section: parameters, Adam first moments, Adam second moments
//! ```
//!
//! A section is a `u32` count followed by records
//! `u16 name length | name | u8 rank | u32 dims.. | f32 data..`, in the
//! model's parameter visiting order. Moments reuse the parameter names.

use std::fs;
use std::path::Path;

use glyphforge_core::model::{ModelConfig, ModelParams};
use glyphforge_core::optim::Adam;
use glyphforge_core::trainer::{TrainConfig, TrainState};
use glyphforge_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::write_bytes;

const MAGIC: &[u8; 4] = b"GFCK";
pub const VERSION: u32 = 1;

/// Training state plus the settings that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
}

fn put_section(out: &mut Vec<u8>, names: &[String], tensors: &[&Tensor]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let params = &ck.state.params;
    let mut train = ck.train.clone();
    train.optimizer = ck.state.optimizer.config;
    let header = Header { model: params.config.clone(), train, step: ck.state.step() };
    let json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let names = params.weights.names();
    put_section(&mut out, &names, &params.weights.flat());
    let opt = &ck.state.optimizer;
    put_section(&mut out, &names, &opt.m.iter().collect::<Vec<_>>());
    put_section(&mut out, &names, &opt.v.iter().collect::<Vec<_>>());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn section(&mut self) -> std::result::Result<Vec<(String, Tensor)>, String> {
        let count = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u16()? as usize;
            let name = std::str::from_utf8(self.take(len)?).map_err(|e| e.to_string())?.to_string();
            let rank = self.u8()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = self.take(4 * n)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            out.push((name, Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?));
        }
        Ok(out)
    }
}

fn tensors(section: Vec<(String, Tensor)>, names: &[String]) -> std::result::Result<Vec<Tensor>, String> {
    if section.len() != names.len() {
        return Err(format!("section holds {} tensors, model has {}", section.len(), names.len()));
    }
    section
        .into_iter()
        .zip(names)
        .map(|((got, t), want)| if &got == want { Ok(t) } else { Err(format!("tensor '{got}' where '{want}' was expected")) })
        .collect()
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err("not a glyphforge checkpoint".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("checkpoint format version {version}, expected {VERSION}"));
    }
    let len = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(len)?).map_err(|e| e.to_string())?;
    header.model.validate().map_err(|e| e.to_string())?;
    let (params, m, v) = (c.section()?, c.section()?, c.section()?);
    if c.pos != bytes.len() {
        return Err("trailing bytes after checkpoint".into());
    }
    let stored: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let params = ModelParams::from_flat(header.model, params.into_iter().map(|(_, t)| t).collect())
        .map_err(|e| e.to_string())?;
    let names = params.weights.names();
    if stored != names {
        return Err("parameter names do not match the model configuration".into());
    }
    let (m, v) = (tensors(m, &names)?, tensors(v, &names)?);
    let optimizer =
        Adam::from_state(header.train.optimizer, header.step, m, v, &params.weights).map_err(|e| e.to_string())?;
    Ok(Checkpoint { state: TrainState { params, optimizer }, train: header.train })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_bytes(path, &encode(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}
