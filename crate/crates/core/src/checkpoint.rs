//! Binary parameter container.
//!
//! Layout: magic `VLTC`, format version (u32), then records until end of
//! input. Each record is name length (u32), UTF-8 name, dtype tag (u8, 0 =
//! f32), rank (u32), dims (u32 each), and the little-endian f32 payload.
//! All integers are little-endian.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::param::ParamStore;
use crate::{Error, Real, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"VLTC";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode<F: Real>(store: &ParamStore<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses every record of a checkpoint, in file order.
pub fn decode<F: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<F>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = core::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("unknown dtype tag {dtype} for {name}")));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_needed = numel.and_then(|n| n.checked_mul(4));
        let Some(bytes_needed) = bytes_needed else {
            return Err(Error::Checkpoint(format!("oversized tensor {name}")));
        };
        let payload = r.take(bytes_needed, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| F::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        records.push((String::from(name), t));
    }
    Ok(records)
}

/// Decodes `bytes` into `store`, requiring exactly the same parameter names
/// and shapes.
pub fn load_into<F: Real>(store: &mut ParamStore<F>, bytes: &[u8]) -> Result<()> {
    store.load_named(decode(bytes)?)
}
