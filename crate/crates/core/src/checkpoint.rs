//! Binary checkpoint format.
//!
//! ```text
//! magic  "HOOKNET\0"            8 bytes
//! version                       u32 LE
//! config length, config text    u32 LE + UTF-8 `key=value` lines
//! tensor count                  u32 LE
//! per tensor, declaration order:
//!   name length, name           u32 LE + UTF-8
//!   rank, dims                  u32 LE + rank × u32 LE
//!   values                      product(dims) × f32 LE
//! ```
//!
//! Batch-norm running statistics are stored alongside trainable tensors.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Parameterized;

pub const MAGIC: &[u8; 8] = b"HOOKNET\0";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config().to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let mut count = 0u32;
    model.visit("", &mut |_, _| count += 1);
    out.extend_from_slice(&count.to_le_bytes());
    model.visit("", &mut |name, p| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.file, field, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, field: &str) -> Result<&'a str> {
        let n = self.u32(field)? as usize;
        std::str::from_utf8(self.take(n, field)?).map_err(|_| Error::parse(self.file, field, "invalid UTF-8"))
    }
}

/// Decodes a checkpoint; `file` only labels errors.
pub fn from_bytes(bytes: &[u8], file: &Path) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0, file };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::parse(file, "magic", "not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(file, "version", format!("unsupported version {version}")));
    }
    let cfg = ModelConfig::from_text(r.string("config")?).map_err(|e| Error::parse(file, "config", e.to_string()))?;
    let mut model = Model::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut expected = 0usize;
    model.visit("", &mut |_, _| expected += 1);
    let count = r.u32("tensor count")? as usize;
    if count != expected {
        return Err(Error::parse(file, "tensor count", format!("{count} tensors, model has {expected}")));
    }

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("tensor name")?.to_string();
        let rank = r.u32(&name)? as usize;
        let dims = (0..rank).map(|_| r.u32(&name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, &name)?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((name, dims, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(file, "trailer", "trailing bytes after last tensor"));
    }

    let mut err = None;
    let mut it = tensors.into_iter();
    model.visit_mut("", &mut |name, p| {
        let (stored, dims, values) = it.next().expect("count checked");
        if err.is_none() && (stored != name || dims != p.shape()) {
            err = Some(Error::parse(
                file,
                stored.clone(),
                format!("expected tensor {name} {:?}, found {dims:?}", p.shape()),
            ));
        }
        if err.is_none() {
            p.value = values;
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
