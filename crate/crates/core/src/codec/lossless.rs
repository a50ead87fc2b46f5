//! Lossless integer packing: fixed-width bit packing, zigzag + LEB128 varints,
//! and DEFLATE (RFC 1951) over arbitrary bytes.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::CodecError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum LosslessId {
    /// Values packed at the quantization bit width.
    Raw = 0,
    /// Zigzag then LEB128 varint.
    Varint = 1,
    /// Varint output passed through DEFLATE.
    Deflate = 2,
}

impl TryFrom<u8> for LosslessId {
    type Error = CodecError;

    fn try_from(b: u8) -> Result<Self, Self::Error> {
        match b {
            0 => Ok(LosslessId::Raw),
            1 => Ok(LosslessId::Varint),
            2 => Ok(LosslessId::Deflate),
            other => Err(CodecError::UnknownLossless(other)),
        }
    }
}

impl From<LosslessId> for u8 {
    fn from(id: LosslessId) -> u8 {
        id as u8
    }
}

pub fn zigzag(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

pub fn unzigzag(u: u32) -> i32 {
    ((u >> 1) as i32) ^ -((u & 1) as i32)
}

pub fn write_varint(mut u: u32, out: &mut Vec<u8>) {
    while u >= 0x80 {
        out.push((u as u8 & 0x7f) | 0x80);
        u >>= 7;
    }
    out.push(u as u8);
}

/// Reads one varint at `*pos`, advancing it.
pub fn read_varint(buf: &[u8], pos: &mut usize) -> Result<u32, CodecError> {
    let start = *pos;
    let mut value: u64 = 0;
    for i in 0..5 {
        let Some(&b) = buf.get(*pos) else {
            return Err(CodecError::MalformedVarint { offset: start });
        };
        *pos += 1;
        value |= ((b & 0x7f) as u64) << (7 * i);
        if b & 0x80 == 0 {
            return u32::try_from(value).map_err(|_| CodecError::MalformedVarint { offset: start });
        }
    }
    Err(CodecError::MalformedVarint { offset: start })
}

pub fn varint_encode(ints: &[i32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ints.len());
    for &v in ints {
        write_varint(zigzag(v), &mut out);
    }
    out
}

/// Decodes every varint in `buf`.
pub fn varint_decode(buf: &[u8]) -> Result<Vec<i32>, CodecError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < buf.len() {
        out.push(unzigzag(read_varint(buf, &mut pos)?));
    }
    Ok(out)
}

/// Packs the low `bits` bits of each value, least-significant first.
pub fn pack_bits(ints: &[i32], bits: u8) -> Vec<u8> {
    let mask = (1u32 << bits) - 1;
    let mut out = Vec::with_capacity((ints.len() * bits as usize).div_ceil(8));
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &v in ints {
        acc |= ((v as u32 & mask) as u64) << filled;
        filled += bits as u32;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

/// Unpacks `count` unsigned `bits`-wide values.
pub fn unpack_bits(buf: &[u8], bits: u8, count: usize) -> Result<Vec<i32>, CodecError> {
    let needed = (count * bits as usize).div_ceil(8);
    if buf.len() < needed {
        return Err(CodecError::Truncated {
            offset: buf.len(),
            needed: needed - buf.len(),
        });
    }
    if buf.len() > needed {
        return Err(CodecError::TrailingBytes { offset: needed });
    }
    let mask = (1u64 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut bytes = buf.iter();
    for _ in 0..count {
        while filled < bits as u32 {
            acc |= (*bytes.next().expect("length checked") as u64) << filled;
            filled += 8;
        }
        out.push((acc & mask) as i32);
        acc >>= bits;
        filled -= bits as u32;
    }
    Ok(out)
}

pub fn deflate(bytes: &[u8]) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

/// Inflates at most `limit` bytes; more output is an error.
pub fn inflate(bytes: &[u8], limit: usize) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    DeflateDecoder::new(bytes)
        .take(limit as u64 + 1)
        .read_to_end(&mut out)
        .map_err(|e| CodecError::Deflate(e.to_string()))?;
    if out.len() > limit {
        return Err(CodecError::Deflate(format!(
            "inflated size exceeds {limit} bytes"
        )));
    }
    Ok(out)
}

/// Encodes an integer stream. `bits` is only used by [`LosslessId::Raw`].
pub fn lossless_encode(ints: &[i32], id: LosslessId, bits: u8) -> Vec<u8> {
    match id {
        LosslessId::Raw => pack_bits(ints, bits),
        LosslessId::Varint => varint_encode(ints),
        LosslessId::Deflate => deflate(&varint_encode(ints)),
    }
}

/// Inverse of [`lossless_encode`]. Raw streams decode to unsigned values.
pub fn lossless_decode(buf: &[u8], id: LosslessId, bits: u8, count: usize) -> Result<Vec<i32>, CodecError> {
    let ints = match id {
        LosslessId::Raw => unpack_bits(buf, bits, count)?,
        LosslessId::Varint => varint_decode(buf)?,
        LosslessId::Deflate => varint_decode(&inflate(buf, count.saturating_mul(5))?)?,
    };
    if ints.len() != count {
        return Err(CodecError::CountMismatch {
            expected: count,
            actual: ints.len(),
        });
    }
    Ok(ints)
}
