//! `RPDN` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RPDN" | version u16 | config_len u32 | config JSON | count u32 | entries
//! entry: name_len u16 | name | dtype u8 (0 f32, 1 f64) | ndim u8 | dims u32 x ndim | payload
//! ```
//!
//! Entries cover every learnable tensor and BN running statistic, in
//! parameter traversal order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, RapidNetModel};
use crate::params::Parameterized;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RPDN";
pub const VERSION: u16 = 1;

/// Serializes `model` into checkpoint bytes.
pub fn to_bytes<T: Scalar>(model: &RapidNetModel<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let mut entries = Vec::new();
    model.visit_params("", &mut |name, t, _| entries.push((name.to_string(), t.clone())));
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        let name_len = u16::try_from(nb.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(T::DTYPE.code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save<T: Scalar>(model: &RapidNetModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptFile(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parsed header: the embedded config and the position of the entry table.
fn header(bytes: &[u8]) -> Result<(ModelConfig, Reader<'_>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing RPDN magic".into()));
    }
    r.pos = 4;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let len = r.u32("config length")? as usize;
    let cfg = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::CorruptFile(format!("config blob: {e}")))?;
    Ok((cfg, r))
}

/// Element type of the tensors stored in a checkpoint.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    let (_, mut r) = header(bytes)?;
    if r.u32("tensor count")? == 0 {
        return Err(Error::Integrity("checkpoint holds no tensors".into()));
    }
    let n = r.u16("name length")? as usize;
    r.take(n, "name")?;
    let code = r.u8("dtype")?;
    DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))
}

pub fn peek_dtype_file(path: impl AsRef<Path>) -> Result<DType> {
    peek_dtype(&read_file(path)?)
}

/// Rebuilds the model from the embedded config, then overwrites every
/// tensor with the stored values.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<RapidNetModel<T>> {
    let (cfg, mut r) = header(bytes)?;
    let mut model = build_model::<T>(&cfg).map_err(|e| Error::Integrity(format!("embedded config: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut stored = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::CorruptFile("parameter name is not UTF-8".into()))?
            .to_string();
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Integrity(format!(
                "{name} is stored as {dtype}, requested {}",
                T::DTYPE
            )));
        }
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * dtype.size_of(), "payload")?;
        let data = payload.chunks_exact(dtype.size_of()).map(T::read_le).collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Integrity(format!("{name}: {e}")))?;
        stored.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptFile(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - r.pos
        )));
    }
    let mut expected = 0;
    model.visit_params("", &mut |_, _, _| expected += 1);
    if expected != stored.len() {
        return Err(Error::Integrity(format!(
            "config expects {expected} tensors, file holds {}",
            stored.len()
        )));
    }
    let mut entries = stored.into_iter();
    let mut failure = None;
    model.visit_params_mut("", &mut |name, t, _| {
        if failure.is_some() {
            return;
        }
        let Some((stored_name, value)) = entries.next() else {
            return;
        };
        if stored_name != name {
            failure = Some(format!("expected {name}, found {stored_name}"));
        } else if value.shape() != t.shape() {
            failure = Some(format!("{name}: shape {:?}, expected {:?}", value.shape(), t.shape()));
        } else {
            *t = value;
        }
    });
    match failure {
        Some(msg) => Err(Error::Integrity(msg)),
        None => Ok(model),
    }
}

fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<RapidNetModel<T>> {
    from_bytes(&read_file(path)?)
}
