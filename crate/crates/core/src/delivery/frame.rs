//! Wire framing: `"KDN1" | type u8 | payload_len u32 LE | payload | crc32c(type ‖ payload) u32 LE`.

use thiserror::Error;

pub const FRAME_MAGIC: &[u8; 4] = b"KDN1";
pub const FRAME_HEADER_LEN: usize = 9;
pub const FRAME_TRAILER_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameType {
    ReqKeys = 1,
    ReqTokens = 2,
    Chunk = 3,
    End = 4,
    Err = 5,
}

impl FrameType {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => FrameType::ReqKeys,
            2 => FrameType::ReqTokens,
            3 => FrameType::Chunk,
            4 => FrameType::End,
            5 => FrameType::Err,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, payload: Vec<u8>) -> Self {
        Self { frame_type, payload }
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len() + FRAME_TRAILER_LEN
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad frame magic")]
    BadMagic,
    #[error("frame crc mismatch: header {expected:#010x}, computed {actual:#010x}")]
    BadCrc { expected: u32, actual: u32 },
    #[error("frame payload of {len} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    Oversize { len: usize },
    #[error("unknown frame type {0}")]
    UnknownType(u8),
}

/// Outcome of decoding from the front of a buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    /// A frame and the number of bytes it occupied.
    Frame(Frame, usize),
    /// The buffer holds a valid prefix of a frame; nothing was consumed.
    Incomplete,
}

fn frame_crc(frame_type: u8, payload: &[u8]) -> u32 {
    crc32c::crc32c_append(crc32c::crc32c(&[frame_type]), payload)
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    assert!(frame.payload.len() <= MAX_PAYLOAD, "frame payload over limit");
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(FRAME_MAGIC);
    out.push(frame.frame_type as u8);
    out.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    out.extend_from_slice(&frame_crc(frame.frame_type as u8, &frame.payload).to_le_bytes());
    out
}

/// Decodes one frame from the front of `buf`.
pub fn decode_frame(buf: &[u8]) -> Result<Decoded, FrameError> {
    let magic_len = buf.len().min(4);
    if buf[..magic_len] != FRAME_MAGIC[..magic_len] {
        return Err(FrameError::BadMagic);
    }
    if buf.len() < FRAME_HEADER_LEN {
        return Ok(Decoded::Incomplete);
    }
    let type_byte = buf[4];
    let len = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::Oversize { len });
    }
    let total = FRAME_HEADER_LEN + len + FRAME_TRAILER_LEN;
    if buf.len() < total {
        return Ok(Decoded::Incomplete);
    }
    let payload = &buf[FRAME_HEADER_LEN..FRAME_HEADER_LEN + len];
    let expected = u32::from_le_bytes(buf[total - 4..total].try_into().unwrap());
    let actual = frame_crc(type_byte, payload);
    if expected != actual {
        return Err(FrameError::BadCrc { expected, actual });
    }
    let frame_type = FrameType::from_u8(type_byte).ok_or(FrameError::UnknownType(type_byte))?;
    Ok(Decoded::Frame(
        Frame {
            frame_type,
            payload: payload.to_vec(),
        },
        total,
    ))
}

/// Streaming decoder that resynchronises after errors.
///
/// After a bad magic the buffer is advanced to the next occurrence of the
/// magic. After a bad CRC or unknown type the whole frame is dropped; after an
/// oversize header the magic is dropped and scanning resumes.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next frame or error, or `None` when more bytes are needed.
    pub fn next_frame(&mut self) -> Option<Result<Frame, FrameError>> {
        if self.buf.is_empty() {
            return None;
        }
        match decode_frame(&self.buf) {
            Ok(Decoded::Frame(frame, used)) => {
                self.buf.drain(..used);
                Some(Ok(frame))
            }
            Ok(Decoded::Incomplete) => None,
            Err(e) => {
                let skip = match &e {
                    FrameError::BadMagic => self.resync_offset(1),
                    FrameError::Oversize { .. } => self.resync_offset(4),
                    FrameError::BadCrc { .. } | FrameError::UnknownType(_) => {
                        let len = u32::from_le_bytes(self.buf[5..9].try_into().unwrap()) as usize;
                        FRAME_HEADER_LEN + len + FRAME_TRAILER_LEN
                    }
                };
                self.buf.drain(..skip);
                Some(Err(e))
            }
        }
    }

    /// Offset of the next position at or after `from` that could start a frame.
    fn resync_offset(&self, from: usize) -> usize {
        (from..self.buf.len())
            .find(|&i| {
                let tail = &self.buf[i..];
                let n = tail.len().min(4);
                tail[..n] == FRAME_MAGIC[..n]
            })
            .unwrap_or(self.buf.len())
    }
}
