//! Request/response payloads carried inside frames.
//!
//! - `REQ_TOKENS`: `model_id u64 | mode u8 | n u32 | tokens u32*`
//! - `REQ_KEYS`: `n u32 | (mode u8 | digest 32)*`
//! - `CHUNK`: a serialized `CompressedChunk`
//! - `END` after `REQ_TOKENS`: `n u32 | miss_suffix tokens u32*`
//! - `END` after `REQ_KEYS`: `n u32 | (mode u8 | digest 32)*` of the keys not found
//! - `ERR`: `code u16 | utf-8 message`
//!
//! All integers are little-endian.

use thiserror::Error;

use crate::model::TokenId;
use crate::store::{ChunkKey, KeyMode};

use super::frame::{Frame, FrameType};

/// Requests larger than this many tokens or keys are rejected outright.
pub const MAX_REQUEST_ITEMS: usize = 1 << 22;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PayloadError {
    #[error("payload truncated: {needed} more bytes needed at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("unknown key mode {0}")]
    UnknownMode(u8),
    #[error("request of {0} items exceeds the limit")]
    TooLarge(usize),
    #[error("error message is not utf-8")]
    BadUtf8,
}

/// Error codes carried in ERR frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrCode {
    BadFrame = 1,
    MalformedRequest = 2,
    UnexpectedFrame = 3,
    Internal = 4,
}

impl ErrCode {
    pub fn from_u16(c: u16) -> Option<Self> {
        Some(match c {
            1 => ErrCode::BadFrame,
            2 => ErrCode::MalformedRequest,
            3 => ErrCode::UnexpectedFrame,
            4 => ErrCode::Internal,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Tokens {
        model_id: u64,
        mode: KeyMode,
        tokens: Vec<TokenId>,
    },
    Keys(Vec<ChunkKey>),
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(PayloadError::Truncated {
                offset: self.pos,
                needed: n - left,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PayloadError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PayloadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self) -> Result<usize, PayloadError> {
        let n = self.u32()? as usize;
        if n > MAX_REQUEST_ITEMS {
            return Err(PayloadError::TooLarge(n));
        }
        Ok(n)
    }

    fn finish(self) -> Result<(), PayloadError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(PayloadError::Trailing(n)),
        }
    }
}

fn put_tokens(out: &mut Vec<u8>, tokens: &[TokenId]) {
    out.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    for t in tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
}

fn get_tokens(c: &mut Cursor<'_>) -> Result<Vec<TokenId>, PayloadError> {
    let n = c.count()?;
    let raw = c.take(n * 4)?;
    Ok(raw
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

fn put_keys(out: &mut Vec<u8>, keys: &[ChunkKey]) {
    out.extend_from_slice(&(keys.len() as u32).to_le_bytes());
    for k in keys {
        out.push(k.mode.as_u8());
        out.extend_from_slice(&k.digest);
    }
}

fn get_keys(c: &mut Cursor<'_>) -> Result<Vec<ChunkKey>, PayloadError> {
    let n = c.count()?;
    let mut keys = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let m = c.u8()?;
        let mode = KeyMode::from_u8(m).ok_or(PayloadError::UnknownMode(m))?;
        let digest: [u8; 32] = c.take(32)?.try_into().unwrap();
        keys.push(ChunkKey { digest, mode });
    }
    Ok(keys)
}

impl Request {
    pub fn to_frame(&self) -> Frame {
        let mut p = Vec::new();
        match self {
            Request::Tokens {
                model_id,
                mode,
                tokens,
            } => {
                p.extend_from_slice(&model_id.to_le_bytes());
                p.push(mode.as_u8());
                put_tokens(&mut p, tokens);
                Frame::new(FrameType::ReqTokens, p)
            }
            Request::Keys(keys) => {
                put_keys(&mut p, keys);
                Frame::new(FrameType::ReqKeys, p)
            }
        }
    }

    /// Parses a request frame. `None` if the frame is not a request type.
    pub fn from_frame(frame: &Frame) -> Option<Result<Self, PayloadError>> {
        let mut c = Cursor::new(&frame.payload);
        let parsed = match frame.frame_type {
            FrameType::ReqTokens => (|| {
                let model_id = c.u64()?;
                let m = c.u8()?;
                let mode = KeyMode::from_u8(m).ok_or(PayloadError::UnknownMode(m))?;
                let tokens = get_tokens(&mut c)?;
                Ok(Request::Tokens {
                    model_id,
                    mode,
                    tokens,
                })
            })(),
            FrameType::ReqKeys => get_keys(&mut c).map(Request::Keys),
            _ => return None,
        };
        Some(parsed.and_then(|r| c.finish().map(|_| r)))
    }
}

pub fn end_tokens_frame(miss_suffix: &[TokenId]) -> Frame {
    let mut p = Vec::with_capacity(4 + 4 * miss_suffix.len());
    put_tokens(&mut p, miss_suffix);
    Frame::new(FrameType::End, p)
}

pub fn parse_end_tokens(payload: &[u8]) -> Result<Vec<TokenId>, PayloadError> {
    let mut c = Cursor::new(payload);
    let t = get_tokens(&mut c)?;
    c.finish()?;
    Ok(t)
}

pub fn end_keys_frame(missing: &[ChunkKey]) -> Frame {
    let mut p = Vec::with_capacity(4 + 33 * missing.len());
    put_keys(&mut p, missing);
    Frame::new(FrameType::End, p)
}

pub fn parse_end_keys(payload: &[u8]) -> Result<Vec<ChunkKey>, PayloadError> {
    let mut c = Cursor::new(payload);
    let k = get_keys(&mut c)?;
    c.finish()?;
    Ok(k)
}

pub fn err_frame(code: ErrCode, message: &str) -> Frame {
    let mut p = (code as u16).to_le_bytes().to_vec();
    p.extend_from_slice(message.as_bytes());
    Frame::new(FrameType::Err, p)
}

pub fn parse_err(payload: &[u8]) -> Result<(u16, String), PayloadError> {
    let mut c = Cursor::new(payload);
    let code = c.u16()?;
    let msg = std::str::from_utf8(&payload[2..]).map_err(|_| PayloadError::BadUtf8)?;
    Ok((code, msg.to_owned()))
}
