//! `PCGK` checkpoints: parameters, optimizer moments and progress counters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PCGK" | version u8 | config_hash u64 | pretrain_epochs u32 | joint_epochs u32
//! tensor table: count u32, then per tensor
//!     name_len u32 | name bytes | ndim u32 | dims u32 x ndim | f32 x prod(dims)
//! optimizer count u32, then per optimizer
//!     name_len u32 | name bytes | steps u64 | tensor table of its moments
//! ```

use std::path::Path;

use crate::autodiff::{Optimizer, ParamStore, Shape};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCGK";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub name: String,
    pub steps: u64,
    /// For Adam, `{param}.m` and `{param}.v` per parameter; empty for SGD.
    pub moments: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub pretrain_epochs: u32,
    pub joint_epochs: u32,
    pub params: Vec<NamedTensor>,
    pub optimizers: Vec<OptimizerState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.pretrain_epochs.to_le_bytes());
        out.extend_from_slice(&self.joint_epochs.to_le_bytes());
        write_table(&mut out, &self.params);
        put_u32(&mut out, self.optimizers.len());
        for opt in &self.optimizers {
            put_str(&mut out, &opt.name);
            out.extend_from_slice(&opt.steps.to_le_bytes());
            write_table(&mut out, &opt.moments);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a PCGK checkpoint".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.u64()?;
        let pretrain_epochs = r.u32()?;
        let joint_epochs = r.u32()?;
        let params = read_table(&mut r)?;
        let n = r.u32()? as usize;
        let mut optimizers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let name = r.string()?;
            let steps = r.u64()?;
            optimizers.push(OptimizerState { name, steps, moments: read_table(&mut r)? });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config_hash, pretrain_epochs, joint_epochs, params, optimizers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies every stored parameter into `store`; names and shapes must
    /// match exactly and every parameter of `store` must be present.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for t in &self.params {
            let id = store.find(&t.name).ok_or_else(|| Error::shape(format!("unknown parameter {}", t.name)))?;
            if shape_vec(store.entry(id).shape()) != t.shape {
                return Err(Error::shape(format!("parameter {} has shape {:?}", t.name, t.shape)));
            }
            store.set_value(id, &t.data)?;
        }
        Ok(())
    }

    pub fn optimizer(&self, name: &str) -> Option<&OptimizerState> {
        self.optimizers.iter().find(|o| o.name == name)
    }
}

pub fn params_table(store: &ParamStore<f32>) -> Vec<NamedTensor> {
    store
        .entries()
        .iter()
        .map(|e| NamedTensor { name: e.name().to_string(), shape: shape_vec(e.shape()), data: e.value().to_vec() })
        .collect()
}

pub fn optimizer_state(name: &str, opt: &Optimizer<f32>, store: &ParamStore<f32>) -> OptimizerState {
    let mut moments = Vec::new();
    for (id, m, v) in opt.moments() {
        if m.is_empty() {
            continue;
        }
        let e = store.entry(id);
        for (suffix, data) in [("m", m), ("v", v)] {
            moments.push(NamedTensor {
                name: format!("{}.{suffix}", e.name()),
                shape: shape_vec(e.shape()),
                data: data.to_vec(),
            });
        }
    }
    OptimizerState { name: name.to_string(), steps: opt.steps(), moments }
}

pub fn restore_optimizer(state: &OptimizerState, opt: &mut Optimizer<f32>, store: &ParamStore<f32>) -> Result<()> {
    let mut pairs = Vec::with_capacity(opt.group().len());
    let lookup = |name: &str| {
        state.moments.iter().find(|t| t.name == name).map(|t| t.data.clone())
    };
    for &id in opt.group() {
        let base = store.entry(id).name();
        match (lookup(&format!("{base}.m")), lookup(&format!("{base}.v"))) {
            (Some(m), Some(v)) => pairs.push((m, v)),
            (None, None) => pairs.push((Vec::new(), Vec::new())),
            _ => return Err(Error::Format(format!("incomplete optimizer moments for {base}"))),
        }
    }
    opt.restore(state.steps, pairs)
}

fn shape_vec(s: Shape) -> Vec<u32> {
    s.iter().map(|&d| d as u32).collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn write_table(out: &mut Vec<u8>, table: &[NamedTensor]) {
    put_u32(out, table.len());
    for t in table {
        put_str(out, &t.name);
        put_u32(out, t.shape.len());
        for &d in &t.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 name".into()))
    }
}

fn read_table(r: &mut Reader) -> Result<Vec<NamedTensor>> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        let count = count.ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

/// 64-bit FNV-1a, used to fingerprint resolved configurations.
pub fn fingerprint(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
