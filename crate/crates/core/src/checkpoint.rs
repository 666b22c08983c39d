//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HIDE"  u16 version  u32 config_len  config text (key = value lines)
//! u32 param_count
//! per parameter, in name order:
//!   u16 name_len  name  u8 dtype (0 = f32, 1 = f64)  u8 rank  u32 dims[rank]  values
//! ```

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{DType, Real};

pub const MAGIC: &[u8; 4] = b"HIDE";
pub const VERSION: u16 = 1;

pub fn to_bytes<T: Real>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config.to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, id) in model.store.sorted() {
        let t = model.store.value(id);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Reads only the configuration block.
pub fn read_config(bytes: &[u8]) -> Result<ModelConfig> {
    let mut r = Reader { bytes, pos: 0 };
    header(&mut r)
}

fn header(r: &mut Reader<'_>) -> Result<ModelConfig> {
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(n, "config")?).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    ModelConfig::from_text(text)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let config = header(&mut r)?;
    let mut model = Model::<T>::new(config)?;
    let count = r.u32("parameter count")? as usize;
    if count != model.store.len() {
        return Err(Error::ModelMismatch(format!("checkpoint has {count} parameters, the configuration defines {}", model.store.len())));
    }
    let mut seen = 0;
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let id = model.store.id(name).ok_or_else(|| Error::ModelMismatch(format!("unexpected parameter {name}")))?;
        let dtype = DType::from_tag(r.u8("dtype")?).ok_or_else(|| Error::Format(format!("unknown dtype for {name}")))?;
        if dtype != T::DTYPE {
            return Err(Error::ModelMismatch(format!("{name} is stored as {}, expected {}", dtype.name(), T::DTYPE.name())));
        }
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let target = model.store.value_mut(id);
        if shape != target.shape() {
            return Err(Error::ModelMismatch(format!("{name} has shape {shape:?}, expected {:?}", target.shape())));
        }
        let raw = r.take(target.numel() * dtype.size(), name)?;
        for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(dtype.size())) {
            *dst = T::read_le(chunk);
        }
        seen += 1;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    debug_assert_eq!(seen, count);
    Ok(model)
}

pub fn save<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    from_bytes(&std::fs::read(path)?)
}
