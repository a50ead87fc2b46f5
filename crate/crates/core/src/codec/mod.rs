//! KV-cache compression: per-group quantization, anchor/delta coding of the
//! integer codes, then a lossless stage. The result is wrapped in a
//! [`CompressedChunk`], which is both the store's blob format and the body of a
//! delivery `CHUNK` frame.
//!
//! Chunk layout, little-endian:
//!
//! ```text
//! "KDNC" | version u8 | quant_bits u8 | group_size u32 | anchor_stride u32 | lossless_id u8
//!        | key_mode u8 | key digest [32]
//!        | n_layers u16 | n_heads u16 | d_head u16 | n_tokens u32 | start_pos u64
//!        | uncompressed_len u64 | payload_len u64 | payload | crc32c(payload) u32
//! ```
//!
//! The payload body is `K scales | K zeros | V scales | V zeros` (f32 each,
//! one per `(layer, head, channel, group)`) followed by the lossless-coded
//! delta stream (K then V). With DEFLATE the whole body is varint-coded and
//! then deflated.

mod delta;
mod lossless;
mod quant;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Geometry, KvCache};
use crate::store::{ChunkKey, KeyMode};

pub use delta::{delta_decode, delta_decode_codes, delta_encode, delta_encode_codes};
pub use lossless::{
    deflate, inflate, lossless_decode, lossless_encode, pack_bits, read_varint, unpack_bits, unzigzag,
    varint_decode, varint_encode, write_varint, zigzag, LosslessId,
};
pub use quant::{dequantize, levels, n_groups, quantize, QuantTensor, QuantizedCache};

pub const CHUNK_MAGIC: &[u8; 4] = b"KDNC";
pub const CHUNK_VERSION: u8 = 1;
pub const CHUNK_HEADER_LEN: usize = 82;

#[derive(Debug, Error, PartialEq, Clone)]
pub enum CodecError {
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("invalid codec profile: {0}")]
    InvalidProfile(String),
    #[error("truncated input at byte {offset}: {needed} more bytes needed")]
    Truncated { offset: usize, needed: usize },
    #[error("bad chunk magic")]
    BadMagic,
    #[error("unsupported chunk version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown lossless codec id {0}")]
    UnknownLossless(u8),
    #[error("unknown key mode {0}")]
    UnknownKeyMode(u8),
    #[error("malformed varint at byte {offset}")]
    MalformedVarint { offset: usize },
    #[error("unexpected trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize },
    #[error("expected {expected} integers, decoded {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("crc32c mismatch: header {expected:#010x}, payload {actual:#010x}")]
    CrcMismatch { expected: u32, actual: u32 },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("deflate stream error: {0}")]
    Deflate(String),
}

/// Knobs of the compression pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodecProfile {
    pub quant_bits: u8,
    pub group_size: u32,
    pub anchor_stride: u32,
    pub lossless_id: LosslessId,
}

impl Default for CodecProfile {
    fn default() -> Self {
        Self {
            quant_bits: 8,
            group_size: 16,
            anchor_stride: 16,
            lossless_id: LosslessId::Deflate,
        }
    }
}

impl CodecProfile {
    pub fn new(quant_bits: u8, lossless_id: LosslessId) -> Self {
        Self {
            quant_bits,
            lossless_id,
            ..Self::default()
        }
    }

    pub fn with_group_size(mut self, group_size: u32) -> Self {
        self.group_size = group_size;
        self
    }

    pub fn with_anchor_stride(mut self, anchor_stride: u32) -> Self {
        self.anchor_stride = anchor_stride;
        self
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.quant_bits != 4 && self.quant_bits != 8 {
            return Err(CodecError::InvalidProfile(format!(
                "quant_bits must be 4 or 8, got {}",
                self.quant_bits
            )));
        }
        if self.group_size == 0 || self.anchor_stride == 0 {
            return Err(CodecError::InvalidProfile(
                "group_size and anchor_stride must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for CodecProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stage = match self.lossless_id {
            LosslessId::Raw => "raw",
            LosslessId::Varint => "varint",
            LosslessId::Deflate => "deflate",
        };
        write!(f, "q{}-{}", self.quant_bits, stage)?;
        if self.group_size != 16 {
            write!(f, "-g{}", self.group_size)?;
        }
        if self.anchor_stride != 16 {
            write!(f, "-s{}", self.anchor_stride)?;
        }
        Ok(())
    }
}

/// Parses names like `q4-deflate`, `q8-raw-g1024` or `q8-varint-g32-s8`.
impl FromStr for CodecProfile {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CodecError::InvalidProfile(format!("unrecognised profile name {s:?}"));
        let mut parts = s.split('-');
        let bits = match parts.next() {
            Some("q4") => 4,
            Some("q8") => 8,
            _ => return Err(bad()),
        };
        let lossless = match parts.next() {
            Some("raw") => LosslessId::Raw,
            Some("varint") => LosslessId::Varint,
            Some("deflate") => LosslessId::Deflate,
            _ => return Err(bad()),
        };
        let mut profile = CodecProfile::new(bits, lossless);
        for part in parts {
            let (which, num) = part.split_at(1);
            let n: u32 = num.parse().map_err(|_| bad())?;
            match which {
                "g" => profile.group_size = n,
                "s" => profile.anchor_stride = n,
                _ => return Err(bad()),
            }
        }
        profile.validate()?;
        Ok(profile)
    }
}

/// Codec-encoded KV payload for one token chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedChunk {
    pub key: ChunkKey,
    pub profile: CodecProfile,
    pub geometry: Geometry,
    pub n_tokens: usize,
    pub start_pos: u64,
    pub uncompressed_len: u64,
    pub payload: Vec<u8>,
    pub crc32c: u32,
}

fn uncompressed_len(geometry: Geometry, n_tokens: usize) -> Option<u64> {
    (geometry.elements_per_token() as u64)
        .checked_mul(n_tokens as u64)?
        .checked_mul(8)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(CodecError::Truncated {
                offset: self.buf.len(),
                needed: n - remaining,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl CompressedChunk {
    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        CHUNK_HEADER_LEN + self.payload.len() + 4
    }

    /// `uncompressed_len / encoded_len`.
    pub fn compression_ratio(&self) -> f64 {
        self.uncompressed_len as f64 / self.encoded_len() as f64
    }

    pub fn verify_crc(&self) -> Result<(), CodecError> {
        let actual = crc32c::crc32c(&self.payload);
        if actual != self.crc32c {
            return Err(CodecError::CrcMismatch {
                expected: self.crc32c,
                actual,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.encoded_len());
        b.extend_from_slice(CHUNK_MAGIC);
        b.push(CHUNK_VERSION);
        b.push(self.profile.quant_bits);
        b.extend_from_slice(&self.profile.group_size.to_le_bytes());
        b.extend_from_slice(&self.profile.anchor_stride.to_le_bytes());
        b.push(self.profile.lossless_id.into());
        b.push(self.key.mode.as_u8());
        b.extend_from_slice(&self.key.digest);
        b.extend_from_slice(&(self.geometry.n_layers as u16).to_le_bytes());
        b.extend_from_slice(&(self.geometry.n_heads as u16).to_le_bytes());
        b.extend_from_slice(&(self.geometry.d_head as u16).to_le_bytes());
        b.extend_from_slice(&(self.n_tokens as u32).to_le_bytes());
        b.extend_from_slice(&self.start_pos.to_le_bytes());
        b.extend_from_slice(&self.uncompressed_len.to_le_bytes());
        b.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        b.extend_from_slice(&self.payload);
        b.extend_from_slice(&self.crc32c.to_le_bytes());
        b
    }

    /// Parses a serialized chunk. Never panics; the CRC is checked here too.
    pub fn from_bytes(buf: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHUNK_MAGIC {
            return Err(CodecError::BadMagic);
        }
        let version = r.u8()?;
        if version != CHUNK_VERSION {
            return Err(CodecError::UnsupportedVersion(version));
        }
        let quant_bits = r.u8()?;
        let group_size = r.u32()?;
        let anchor_stride = r.u32()?;
        let lossless_id = LosslessId::try_from(r.u8()?)?;
        let profile = CodecProfile {
            quant_bits,
            group_size,
            anchor_stride,
            lossless_id,
        };
        profile.validate()?;
        let mode_byte = r.u8()?;
        let mode = KeyMode::from_u8(mode_byte).ok_or(CodecError::UnknownKeyMode(mode_byte))?;
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let geometry = Geometry {
            n_layers: r.u16()? as usize,
            n_heads: r.u16()? as usize,
            d_head: r.u16()? as usize,
        };
        let n_tokens = r.u32()? as usize;
        let start_pos = r.u64()?;
        let uncompressed = r.u64()?;
        let payload_len = r.u64()?;
        if geometry.n_layers == 0 || geometry.n_heads == 0 || geometry.d_head == 0 {
            return Err(CodecError::GeometryMismatch(format!(
                "zero dimension in {geometry:?}"
            )));
        }
        if uncompressed_len(geometry, n_tokens) != Some(uncompressed) {
            return Err(CodecError::GeometryMismatch(format!(
                "uncompressed_len {uncompressed} does not match {geometry:?} x {n_tokens} tokens"
            )));
        }
        let payload_len = usize::try_from(payload_len).map_err(|_| CodecError::Truncated {
            offset: buf.len(),
            needed: usize::MAX,
        })?;
        let payload = r.take(payload_len)?.to_vec();
        let crc = r.u32()?;
        if r.pos != buf.len() {
            return Err(CodecError::TrailingBytes { offset: r.pos });
        }
        let chunk = CompressedChunk {
            key: ChunkKey { digest, mode },
            profile,
            geometry,
            n_tokens,
            start_pos,
            uncompressed_len: uncompressed,
            payload,
            crc32c: crc,
        };
        chunk.verify_crc()?;
        Ok(chunk)
    }
}

fn push_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(buf: &[u8]) -> Vec<f32> {
    buf.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Quantizes, delta-codes and packs `cache` into a chunk addressed by `key`.
pub fn compress_cache(
    cache: &KvCache,
    profile: &CodecProfile,
    key: ChunkKey,
) -> Result<CompressedChunk, CodecError> {
    profile.validate()?;
    let geometry = cache.geometry();
    if geometry.n_layers > u16::MAX as usize
        || geometry.n_heads > u16::MAX as usize
        || geometry.d_head > u16::MAX as usize
        || cache.n_tokens() > u32::MAX as usize
    {
        return Err(CodecError::GeometryMismatch(format!(
            "{geometry:?} x {} tokens does not fit the chunk header",
            cache.n_tokens()
        )));
    }
    let q = quantize(cache, profile.quant_bits, profile.group_size as usize)?;
    let stream = delta_encode(&q, profile.anchor_stride as usize);

    let mut body = Vec::new();
    for t in [&q.k, &q.v] {
        push_f32s(&mut body, &t.scales);
        push_f32s(&mut body, &t.zeros);
    }
    let payload = match profile.lossless_id {
        LosslessId::Raw | LosslessId::Varint => {
            body.extend(lossless_encode(&stream, profile.lossless_id, profile.quant_bits));
            body
        }
        LosslessId::Deflate => {
            body.extend(varint_encode(&stream));
            deflate(&body)
        }
    };
    Ok(CompressedChunk {
        key,
        profile: *profile,
        geometry,
        n_tokens: cache.n_tokens(),
        start_pos: cache.start_pos(),
        uncompressed_len: uncompressed_len(geometry, cache.n_tokens()).expect("fits in u64"),
        crc32c: crc32c::crc32c(&payload),
        payload,
    })
}

/// Recovers the quantized form of a chunk, verifying the CRC first.
pub fn decompress_quantized(chunk: &CompressedChunk) -> Result<QuantizedCache, CodecError> {
    chunk.verify_crc()?;
    let profile = chunk.profile;
    profile.validate()?;
    let g = chunk.geometry;
    let n = chunk.n_tokens;
    if uncompressed_len(g, n) != Some(chunk.uncompressed_len) {
        return Err(CodecError::GeometryMismatch(
            "uncompressed_len does not match geometry".into(),
        ));
    }
    let overflow = || CodecError::GeometryMismatch("geometry too large".into());
    let lanes = g.elements_per_token();
    let n_params = lanes
        .checked_mul(n_groups(n, profile.group_size as usize))
        .ok_or_else(overflow)?;
    let params_bytes = n_params.checked_mul(16).ok_or_else(overflow)?;
    let count = lanes
        .checked_mul(n)
        .and_then(|c| c.checked_mul(2))
        .ok_or_else(overflow)?;

    let (params, stream) = match profile.lossless_id {
        LosslessId::Raw | LosslessId::Varint => {
            if chunk.payload.len() < params_bytes {
                return Err(CodecError::Truncated {
                    offset: chunk.payload.len(),
                    needed: params_bytes - chunk.payload.len(),
                });
            }
            let (params, ints) = chunk.payload.split_at(params_bytes);
            if profile.lossless_id == LosslessId::Varint && count > ints.len() {
                return Err(CodecError::CountMismatch {
                    expected: count,
                    actual: ints.len(),
                });
            }
            (
                params.to_vec(),
                lossless_decode(ints, profile.lossless_id, profile.quant_bits, count)
                    .map_err(|e| offset_by(e, params_bytes))?,
            )
        }
        LosslessId::Deflate => {
            let limit = params_bytes
                .checked_add(count.checked_mul(5).ok_or_else(overflow)?)
                .ok_or_else(overflow)?;
            let body = inflate(&chunk.payload, limit)?;
            if body.len() < params_bytes {
                return Err(CodecError::Truncated {
                    offset: body.len(),
                    needed: params_bytes - body.len(),
                });
            }
            let (params, ints) = body.split_at(params_bytes);
            let ints = varint_decode(ints).map_err(|e| offset_by(e, params_bytes))?;
            if ints.len() != count {
                return Err(CodecError::CountMismatch {
                    expected: count,
                    actual: ints.len(),
                });
            }
            (params.to_vec(), ints)
        }
    };

    let bits = profile.quant_bits;
    let stride = profile.anchor_stride as usize;
    let (k_codes, v_codes) = delta_decode(&stream, g, n, bits, stride);
    let pb = n_params * 4;
    let tensor = |off: usize, codes: Vec<u16>| QuantTensor {
        scales: read_f32s(&params[off..off + pb]),
        zeros: read_f32s(&params[off + pb..off + 2 * pb]),
        codes,
    };
    Ok(QuantizedCache {
        geometry: g,
        n_tokens: n,
        start_pos: chunk.start_pos,
        bits,
        group_size: profile.group_size as usize,
        k: tensor(0, k_codes),
        v: tensor(2 * pb, v_codes),
    })
}

fn offset_by(e: CodecError, base: usize) -> CodecError {
    match e {
        CodecError::MalformedVarint { offset } => CodecError::MalformedVarint {
            offset: offset + base,
        },
        CodecError::TrailingBytes { offset } => CodecError::TrailingBytes {
            offset: offset + base,
        },
        CodecError::Truncated { offset, needed } => CodecError::Truncated {
            offset: offset + base,
            needed,
        },
        other => other,
    }
}

/// Inverse of [`compress_cache`] up to quantization error.
pub fn decompress_cache(chunk: &CompressedChunk) -> Result<KvCache, CodecError> {
    Ok(dequantize(&decompress_quantized(chunk)?))
}

/// Pre-compression token filter. Implementations choose which tokens to keep
/// (e.g. importance-based dropping); the codec only applies the mask.
pub trait TokenFilter {
    fn keep_mask(&self, cache: &KvCache) -> Vec<bool>;
}

/// Keeps every token.
pub struct KeepAll;

impl TokenFilter for KeepAll {
    fn keep_mask(&self, cache: &KvCache) -> Vec<bool> {
        vec![true; cache.n_tokens()]
    }
}

/// Drops the tokens whose mask entry is false. Kept rows are compacted and the
/// cache keeps its start position.
pub fn retain_tokens(cache: &KvCache, keep: &[bool]) -> Result<KvCache, CodecError> {
    if keep.len() != cache.n_tokens() {
        return Err(CodecError::GeometryMismatch(format!(
            "mask has {} entries for {} tokens",
            keep.len(),
            cache.n_tokens()
        )));
    }
    let parts: Vec<KvCache> = keep
        .iter()
        .enumerate()
        .filter(|(_, k)| **k)
        .map(|(t, _)| cache.slice_tokens(t..t + 1))
        .collect();
    if parts.is_empty() {
        return Ok(KvCache::empty(cache.geometry(), cache.start_pos()));
    }
    Ok(KvCache::concat(&parts)
        .expect("slices share geometry")
        .rebase(cache.start_pos()))
}

/// Applies `filter` and compresses what remains.
pub fn compress_filtered(
    cache: &KvCache,
    profile: &CodecProfile,
    key: ChunkKey,
    filter: &dyn TokenFilter,
) -> Result<CompressedChunk, CodecError> {
    let kept = retain_tokens(cache, &filter.keep_mask(cache))?;
    compress_cache(&kept, profile, key)
}

/// Synthetic cache whose lanes are slow sinusoids over the token axis:
/// `sin(0.02·t + 0.3·c + 0.7·lane + phase)` with `lane = layer·H + head`,
/// phase 0 for K and 1 for V. Neighbouring tokens differ little, which is the
/// regime delta coding targets; used for compression benchmarks.
pub fn smooth_cache(geometry: Geometry, n_tokens: usize) -> KvCache {
    let mut cache = KvCache::zeros(geometry, n_tokens, 0);
    for l in 0..geometry.n_layers {
        for h in 0..geometry.n_heads {
            let lane = (l * geometry.n_heads + h) as f64;
            let value = |t: usize, c: usize, phase: f64| {
                (0.02 * t as f64 + 0.3 * c as f64 + 0.7 * lane + phase).sin() as f32
            };
            for t in 0..n_tokens {
                for (c, x) in cache.k_row_mut(l, h, t).iter_mut().enumerate() {
                    *x = value(t, c, 0.0);
                }
                for (c, x) in cache.v_row_mut(l, h, t).iter_mut().enumerate() {
                    *x = value(t, c, 1.0);
                }
            }
        }
    }
    cache
}
