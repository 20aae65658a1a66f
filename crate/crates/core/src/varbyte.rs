//! Delta + variable-byte coding for sorted id lists.
//!
//! Each delta is written little-endian in 7-bit groups; a set high bit means
//! another byte follows.

use crate::error::{Error, Result};

pub fn encode_u32(mut value: u32, out: &mut Vec<u8>) {
    loop {
        let byte = (value & 0x7f) as u8;
        value >>= 7;
        if value == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

/// Decodes one value starting at `*pos`, advancing it.
pub fn decode_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let mut value = 0u32;
    let mut shift = 0u32;
    loop {
        let byte = *bytes
            .get(*pos)
            .ok_or_else(|| Error::format("varbyte stream", "truncated"))?;
        *pos += 1;
        let part = (byte & 0x7f) as u32;
        if shift == 28 && part > 0x0f {
            return Err(Error::format("varbyte stream", "value overflows u32"));
        }
        value |= part << shift;
        if byte & 0x80 == 0 {
            return Ok(value);
        }
        shift += 7;
        if shift > 28 {
            return Err(Error::format("varbyte stream", "value overflows u32"));
        }
    }
}

/// Encodes a strictly increasing list as deltas (the first value as-is).
pub fn encode_sorted(values: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len() * 2);
    let mut prev = None;
    for (position, &v) in values.iter().enumerate() {
        let delta = match prev {
            None => v,
            Some(p) if v > p => v - p,
            Some(_) => return Err(Error::Encoding { position }),
        };
        encode_u32(delta, &mut out);
        prev = Some(v);
    }
    Ok(out)
}

/// Decodes exactly `count` values produced by [`encode_sorted`].
pub fn decode_sorted(bytes: &[u8], count: usize) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(count);
    decode_sorted_into(bytes, count, &mut out)?;
    Ok(out)
}

pub fn decode_sorted_into(bytes: &[u8], count: usize, out: &mut Vec<u32>) -> Result<()> {
    let mut pos = 0;
    let mut acc: Option<u32> = None;
    for _ in 0..count {
        let delta = decode_u32(bytes, &mut pos)?;
        let v = match acc {
            None => delta,
            Some(p) => {
                if delta == 0 {
                    return Err(Error::format("posting list", "zero delta"));
                }
                p.checked_add(delta)
                    .ok_or_else(|| Error::format("posting list", "id overflow"))?
            }
        };
        out.push(v);
        acc = Some(v);
    }
    if pos != bytes.len() {
        return Err(Error::format("posting list", "trailing bytes"));
    }
    Ok(())
}
