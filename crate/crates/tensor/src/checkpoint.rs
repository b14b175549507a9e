//! Checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "IVCK"
//! version    u32      1
//! kind_len   u16      followed by `kind_len` bytes of UTF-8 (model kind)
//! meta_len   u32      followed by `meta_len` bytes of UTF-8 (free-form, JSON by convention)
//! count      u32      number of tensors
//! table      count x { name_len u16, name bytes, ndim u8, ndim x u32 extents }
//! payload    for each table entry in order: product(extents) x f32
//! ```
//!
//! Nothing may follow the last payload value.

use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: String,
    pub tensors: ParamSet,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let kind_len = u16::try_from(self.kind.len()).map_err(|_| bad("kind too long"))?;
        out.extend_from_slice(&kind_len.to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        let meta_len = u32::try_from(self.meta.len()).map_err(|_| bad("meta too long"))?;
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| bad("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in self.tensors.iter() {
            let name_len = u16::try_from(name.len()).map_err(|_| bad("name too long"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let ndim = u8::try_from(t.ndim()).map_err(|_| bad("too many axes"))?;
            out.push(ndim);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| bad("extent too large"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        for (_, t) in self.tensors.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = r.u16()? as usize;
        let kind = r.string(n)?;
        let n = r.u32()? as usize;
        let meta = r.string(n)?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = r.string(n)?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, shape));
        }
        let mut tensors = ParamSet::new();
        for (name, shape) in table {
            let numel: usize = shape.iter().product();
            let bytes = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| bad("payload overflow"))?,
            )?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            if tensors.get(&name).is_some() {
                return Err(bad(format!("duplicate tensor `{name}`")));
            }
            tensors.insert(name, t);
        }
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            kind,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
