//! Flat binary container for named `f32` tensors.
//!
//! Layout: the magic `MVPSW1\n`, then per tensor the name length (u32 LE),
//! the UTF-8 name, the rank (u32 LE), each dimension (u32 LE) and the raw
//! little-endian `f32` payload. Entries run until end of input.

use std::io::{Read, Write};

use crate::error::{DiffError, Result};
use crate::Tensor;

pub const MAGIC: &[u8; 7] = b"MVPSW1\n";

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| DiffError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_tensors<'a>(w: &mut impl Write, entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in entries {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads exactly `buf.len()` bytes; `Ok(false)` on clean end of input.
fn read_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(DiffError::Format("truncated entry header".into()));
        }
        filled += n;
    }
    Ok(true)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| DiffError::Format(format!("truncated entry: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn read_tensors(r: &mut impl Read) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| DiffError::Format("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(DiffError::Format("bad magic".into()));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        if !read_or_eof(r, &mut len)? {
            break;
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name)
            .map_err(|e| DiffError::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| DiffError::Format(e.to_string()))?;
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * numel];
        r.read_exact(&mut raw)
            .map_err(|e| DiffError::Format(format!("truncated payload for {name}: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
