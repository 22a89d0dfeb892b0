//! `TDAFCKPT` files: every parameter and running statistic as little-endian
//! f32, followed by an FNV-1a 64 checksum of everything before it.

use std::path::Path;

use tdaf_core::params::fnv1a64;
use tdaf_core::{ParamStore, Tensor};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"TDAFCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

fn err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            err(format!("truncated payload at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>) -> Self {
        Self {
            entries: store.named_tensors().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 16 {
            return Err(err("file too short"));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if &payload[..8] != MAGIC {
            return Err(err("bad magic"));
        }
        let actual = fnv1a64(payload);
        if stored != actual {
            return Err(err(format!("checksum mismatch (stored {stored:016x}, computed {actual:016x})")));
        }
        let mut r = Reader { buf: payload, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| err("entry name is not UTF-8"))?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != payload.len() {
            return Err(err(format!("{} trailing bytes", payload.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| HarnessError::io(path, e))?)
    }

    /// Copies every entry into `store`. The name sets must match exactly and
    /// dims must agree; the first offending entry is named.
    pub fn restore(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let expected: Vec<(&str, [usize; 4])> = store.named_tensors().map(|(n, t)| (n, t.dims())).collect();
        for (i, (name, dims)) in expected.iter().enumerate() {
            match self.entries.get(i) {
                Some((n, t)) if n == name && t.dims() == *dims => {}
                Some((n, t)) if n == name => {
                    return Err(err(format!("entry '{n}' has dims {:?}, model expects {dims:?}", t.dims())))
                }
                Some((n, _)) => return Err(err(format!("entry '{n}' where model expects '{name}'"))),
                None => return Err(err(format!("missing entry '{name}'"))),
            }
        }
        if let Some((n, _)) = self.entries.get(expected.len()) {
            return Err(err(format!("unexpected entry '{n}'")));
        }
        for (name, t) in &self.entries {
            store.set_named(name, t.clone())?;
        }
        Ok(())
    }
}
