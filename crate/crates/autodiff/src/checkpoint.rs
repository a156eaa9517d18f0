//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TNV2" | version: u16 | meta_len: u32 | meta: UTF-8 bytes
//! count: u32
//! count x { name_len: u16 | name | dtype: u8 | ndim: u8 | dims: u32 x ndim | values }
//! crc32: u32   (IEEE, over every preceding byte)
//! ```
//!
//! `dtype` is 0 for f64 and 1 for f32. The metadata block is free-form; the
//! model stores its configuration there as JSON.

use std::io::Write;
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TNV2";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }
}

pub fn encode_checkpoint(store: &ParamStore, meta: &str, dtype: DType) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + store.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dtype.code());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            match dtype {
                DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "unexpected end of data at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| AutodiffError::Checkpoint("invalid UTF-8".into()))
    }
}

/// Decodes a checkpoint, returning the store and the metadata string.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, String)> {
    if bytes.len() < 4 + 2 + 4 + 4 + 4 {
        return Err(AutodiffError::Checkpoint("file too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(AutodiffError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = match dtype {
            0 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            1 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            other => {
                return Err(AutodiffError::Checkpoint(format!(
                    "unknown dtype code {other} for {name}"
                )))
            }
        };
        if store.id(&name).is_some() {
            return Err(AutodiffError::Checkpoint(format!("duplicate tensor {name}")));
        }
        store.insert(name, Tensor::new(shape, data));
    }
    if r.pos != body.len() {
        return Err(AutodiffError::Checkpoint("trailing bytes before checksum".into()));
    }
    Ok((store, meta))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &str, dtype: DType) -> Result<()> {
    let bytes = encode_checkpoint(store, meta, dtype);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String)> {
    decode_checkpoint(&std::fs::read(path)?)
}
