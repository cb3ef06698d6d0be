//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AMHN" | u32 version
//! u64 config length | config as key=value UTF-8 text
//! u64 tensor count | per tensor: u64 name length, name, u64 ndim, u64 dims.., u64 offset
//! u64 value count | f64 values
//! ```
//!
//! Offsets count `f64` values from the start of the data block.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::kv::KvMap;

pub const MAGIC: &[u8; 4] = b"AMHN";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let config = model.config().to_kv().to_text();
    let params = model.params();
    let mut out = Vec::with_capacity(64 + config.len() + 8 * params.total_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u64(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    put_u64(&mut out, params.len());
    let mut offset = 0;
    for e in params.entries() {
        put_u64(&mut out, e.name.len());
        out.extend_from_slice(e.name.as_bytes());
        let dims = e.shape.dims();
        put_u64(&mut out, dims.len());
        for d in dims {
            put_u64(&mut out, d);
        }
        put_u64(&mut out, offset);
        offset += e.values.len();
    }
    put_u64(&mut out, offset);
    for e in params.entries() {
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not an AMHN checkpoint".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u64("config length")?;
    let text = std::str::from_utf8(r.take(n, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config is not UTF-8: {e}")))?;
    let config = ModelConfig::from_kv(&KvMap::parse(text)?)?;
    let mut model = Model::new(config)?;

    let count = r.u64("tensor count")?;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, configuration defines {}",
            model.params().len()
        )));
    }
    let mut manifest = Vec::with_capacity(count);
    for (i, e) in model.params().entries().iter().enumerate() {
        let len = r.u64("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?;
        if name != e.name {
            return Err(Error::Checkpoint(format!(
                "tensor {i} is {name:?}, expected {:?}",
                e.name
            )));
        }
        let ndim = r.u64("rank")?;
        let dims = (0..ndim)
            .map(|_| r.u64("dimension"))
            .collect::<Result<Vec<_>>>()?;
        if dims != e.shape.dims() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {dims:?}, expected {:?}",
                e.shape.dims()
            )));
        }
        manifest.push(r.u64("offset")?);
    }
    let total = r.u64("value count")?;
    if total != model.params().total_len() {
        return Err(Error::Checkpoint(format!(
            "{total} values stored, expected {}",
            model.params().total_len()
        )));
    }
    let data = r.take(total.checked_mul(8).ok_or_else(|| Error::Checkpoint("value count overflows".into()))?, "values")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for (id, offset) in ids.into_iter().zip(manifest) {
        let dst = model.params_mut().values_mut(id);
        let end = offset + dst.len();
        if end > total {
            return Err(Error::Checkpoint(format!("offset {offset} past the data block")));
        }
        for (d, chunk) in dst.iter_mut().zip(data[offset * 8..end * 8].chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok(model)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&fs::read(path)?)
}
