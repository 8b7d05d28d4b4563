//! Little-endian tensor containers.
//!
//! `SQWT` (weights, calibration bundles):
//! `magic[4] | u32 count | { u16 name_len | name | u8 rank | u32 extents[rank] | f32 data[] }*`
//!
//! `SQWQ` (quantized payloads) has the same layout with a `u8 dtype` byte
//! (0 = f32, 1 = i32) between the name and the rank.
//! Entries are written in name order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{IntTensor, Tensor};

const MAGIC_FLOAT: &[u8; 4] = b"SQWT";
const MAGIC_MIXED: &[u8; 4] = b"SQWQ";

#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    F32(Tensor),
    I32(IntTensor),
}

impl Stored {
    fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.shape(),
            Stored::I32(t) => t.shape(),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    ctx: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse(&self.ctx, format!("truncated at byte {}", self.pos)));
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
}

fn encode(entries: &BTreeMap<String, Stored>, mixed: bool) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(if mixed { MAGIC_MIXED } else { MAGIC_FLOAT });
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        if mixed {
            out.push(match t {
                Stored::F32(_) => 0,
                Stored::I32(_) => 1,
            });
        } else if matches!(t, Stored::I32(_)) {
            return Err(Error::InvalidArgument("SQWT holds f32 tensors only".into()));
        }
        let shape = t.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match t {
            Stored::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Stored::I32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

fn decode(buf: &[u8], ctx: &str) -> Result<BTreeMap<String, Stored>> {
    let mut r = Reader {
        buf,
        pos: 0,
        ctx: ctx.to_string(),
    };
    let magic = r.take(4)?;
    let mixed = match magic {
        m if m == MAGIC_FLOAT => false,
        m if m == MAGIC_MIXED => true,
        _ => return Err(Error::parse(ctx, "bad magic")),
    };
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::parse(ctx, e))?
            .to_string();
        let dtype = if mixed { r.u8()? } else { 0 };
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let words = raw.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
        let t = match dtype {
            0 => Stored::F32(
                Tensor::new(shape, words.map(f32::from_le_bytes).collect())
                    .map_err(|e| Error::parse(ctx, format!("tensor `{name}`: {e}")))?,
            ),
            1 => Stored::I32(
                IntTensor::new(shape, words.map(i32::from_le_bytes).collect())
                    .map_err(|e| Error::parse(ctx, format!("tensor `{name}`: {e}")))?,
            ),
            d => return Err(Error::parse(ctx, format!("unknown dtype {d}"))),
        };
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::parse(ctx, format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::parse(ctx, "trailing bytes"));
    }
    Ok(out)
}

pub fn write_weights(path: &Path, weights: &BTreeMap<String, Tensor>) -> Result<()> {
    let entries = weights
        .iter()
        .map(|(k, v)| (k.clone(), Stored::F32(v.clone())))
        .collect();
    let bytes = encode(&entries, false)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf, &path.display().to_string())?
        .into_iter()
        .map(|(k, v)| match v {
            Stored::F32(t) => Ok((k, t)),
            Stored::I32(_) => Err(Error::parse(path.display().to_string(), "expected f32 tensors")),
        })
        .collect()
}

/// Write a mixed-dtype `SQWQ` container.
pub fn write_container(path: &Path, entries: &BTreeMap<String, Stored>) -> Result<()> {
    let bytes = encode(entries, true)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read either container flavour.
pub fn read_container(path: &Path) -> Result<BTreeMap<String, Stored>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf, &path.display().to_string())
}
