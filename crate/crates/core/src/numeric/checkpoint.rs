//! `CKPT` files: magic, u32 tensor count, then per tensor a u32-prefixed
//! UTF-8 name, u32 rank, u32 dims and f32 values, all little-endian.

use std::path::Path;

use super::{NumericError, ParamStore, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";

pub fn checkpoint_bytes(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.num_values() * 4);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.named() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NumericError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(NumericError::Format {
                offset: self.pos,
                reason: format!("truncated {what}"),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, NumericError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, NumericError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(NumericError::Format {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32("name length")?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| NumericError::Format {
                offset: at,
                reason: "name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = r.u32("rank")?;
        if rank > 3 {
            return Err(NumericError::Format {
                offset: r.pos - 4,
                reason: format!("rank {rank} exceeds 3"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| NumericError::Format {
                offset: r.pos,
                reason: "dimension overflow".into(),
            })?;
        let raw = r.take(n, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(NumericError::Format {
            offset: r.pos,
            reason: "trailing bytes".into(),
        });
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, params: &ParamStore) -> Result<(), NumericError> {
    let bytes = checkpoint_bytes(params);
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, NumericError> {
    parse_checkpoint(&std::fs::read(path)?)
}
