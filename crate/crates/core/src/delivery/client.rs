//! Client side: sends a request, receives CHUNK frames and decompresses them
//! on a worker thread while later frames are still arriving.

use std::io::{self, Read, Write};
use std::sync::mpsc;
use std::thread;

use crate::codec::{decompress_cache, CodecError, CompressedChunk};
use crate::model::{KvCache, TokenId};
use crate::store::{ChunkKey, KeyMode};

use super::frame::{encode_frame, Frame, FrameDecoder, FrameError, FrameType};
use super::protocol::{parse_end_keys, parse_end_tokens, parse_err, PayloadError, Request};

#[derive(Debug, thiserror::Error)]
pub enum DeliveryError {
    #[error("connection i/o: {0}")]
    Io(#[from] io::Error),
    #[error("connection closed before the response ended")]
    Closed,
    #[error("frame error: {0}")]
    Frame(#[from] FrameError),
    #[error("bad response payload: {0}")]
    Payload(#[from] PayloadError),
    #[error("chunk decode failed: {0}")]
    Codec(#[from] CodecError),
    #[error("server error {code}: {message}")]
    Server { code: u16, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("checksum failures persisted after a retry")]
    ChecksumRetryExhausted,
}

/// One received chunk, decompressed.
#[derive(Debug, Clone)]
pub struct FetchedChunk {
    pub key: ChunkKey,
    /// Serialized size of the chunk as it crossed the wire (frame body).
    pub compressed_len: usize,
    pub cache: KvCache,
}

#[derive(Debug, Clone)]
pub struct Fetched {
    pub chunks: Vec<FetchedChunk>,
    pub miss_suffix: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct FetchedKeys {
    pub chunks: Vec<FetchedChunk>,
    pub missing: Vec<ChunkKey>,
}

impl Fetched {
    /// Sum of chunk body sizes received.
    pub fn compressed_bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.compressed_len as u64).sum()
    }
}

/// Outcome of one request attempt.
enum Attempt {
    Done(Vec<FetchedChunk>, Vec<u8>),
    Corrupt,
}

pub struct Client<S> {
    stream: S,
    decoder: FrameDecoder,
    buf: Vec<u8>,
}

impl<S: Read + Write> Client<S> {
    pub fn new(stream: S) -> Self {
        Self {
            stream,
            decoder: FrameDecoder::new(),
            buf: vec![0u8; 64 * 1024],
        }
    }

    pub fn get_ref(&self) -> &S {
        &self.stream
    }

    pub fn into_inner(self) -> S {
        self.stream
    }

    /// Retrieves the cached chunks for `tokens`. Chain chunks come back
    /// rebased to consecutive positions starting at 0.
    pub fn fetch_tokens(
        &mut self,
        model_id: u64,
        tokens: &[TokenId],
        mode: KeyMode,
    ) -> Result<Fetched, DeliveryError> {
        let request = Request::Tokens {
            model_id,
            mode,
            tokens: tokens.to_vec(),
        };
        let (mut chunks, end) = self.request_with_retry(&request.to_frame())?;
        let miss_suffix = parse_end_tokens(&end)?;
        if mode == KeyMode::Chain {
            let hit_tokens: usize = chunks.iter().map(|c| c.cache.n_tokens()).sum();
            if hit_tokens + miss_suffix.len() != tokens.len() {
                return Err(DeliveryError::Protocol(format!(
                    "{hit_tokens} cached + {} missing tokens do not cover the {}-token request",
                    miss_suffix.len(),
                    tokens.len()
                )));
            }
            let mut pos = 0u64;
            for c in &mut chunks {
                let n = c.cache.n_tokens() as u64;
                let empty = KvCache::empty(c.cache.geometry(), 0);
                let cache = std::mem::replace(&mut c.cache, empty);
                c.cache = cache.rebase(pos);
                pos += n;
            }
        }
        Ok(Fetched { chunks, miss_suffix })
    }

    /// Retrieves chunks by key, in request order; absent keys are listed in
    /// `missing`.
    pub fn fetch_keys(&mut self, keys: &[ChunkKey]) -> Result<FetchedKeys, DeliveryError> {
        let (chunks, end) = self.request_with_retry(&Request::Keys(keys.to_vec()).to_frame())?;
        Ok(FetchedKeys {
            chunks,
            missing: parse_end_keys(&end)?,
        })
    }

    fn request_with_retry(&mut self, request: &Frame) -> Result<(Vec<FetchedChunk>, Vec<u8>), DeliveryError> {
        for attempt in 0..2 {
            match self.attempt(request)? {
                Attempt::Done(chunks, end) => return Ok((chunks, end)),
                Attempt::Corrupt => log::warn!("checksum failure on attempt {}", attempt + 1),
            }
        }
        Err(DeliveryError::ChecksumRetryExhausted)
    }

    fn next_frame(&mut self) -> Result<Result<Frame, FrameError>, DeliveryError> {
        loop {
            if let Some(f) = self.decoder.next_frame() {
                return Ok(f);
            }
            let n = self.stream.read(&mut self.buf)?;
            if n == 0 {
                return Err(DeliveryError::Closed);
            }
            self.decoder.push(&self.buf[..n]);
        }
    }

    fn attempt(&mut self, request: &Frame) -> Result<Attempt, DeliveryError> {
        self.stream.write_all(&encode_frame(request))?;
        self.stream.flush()?;

        thread::scope(|scope| {
            let (tx, rx) = mpsc::channel::<(CompressedChunk, usize)>();
            let worker = scope.spawn(move || {
                rx.into_iter()
                    .map(|(chunk, len)| {
                        decompress_cache(&chunk).map(|cache| FetchedChunk {
                            key: chunk.key,
                            compressed_len: len,
                            cache,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
            });

            let mut corrupt = false;
            let mut failure = None;
            let mut end = None;
            while end.is_none() && failure.is_none() {
                match self.next_frame() {
                    Err(e) => failure = Some(e),
                    Ok(Err(FrameError::BadCrc { .. })) => corrupt = true,
                    Ok(Err(e)) => failure = Some(e.into()),
                    Ok(Ok(frame)) => match frame.frame_type {
                        FrameType::Chunk => match CompressedChunk::from_bytes(&frame.payload) {
                            Ok(chunk) => {
                                // The worker only stops early on a decode error,
                                // which surfaces from join below.
                                let _ = tx.send((chunk, frame.payload.len()));
                            }
                            Err(CodecError::CrcMismatch { .. }) => corrupt = true,
                            Err(e) => failure = Some(e.into()),
                        },
                        FrameType::End => end = Some(frame.payload),
                        FrameType::Err => {
                            failure = Some(match parse_err(&frame.payload) {
                                Ok((code, message)) => DeliveryError::Server { code, message },
                                Err(e) => e.into(),
                            })
                        }
                        other => {
                            failure = Some(DeliveryError::Protocol(format!(
                                "unexpected {other:?} frame in a response"
                            )))
                        }
                    },
                }
            }
            drop(tx);
            let decoded = worker.join().expect("decompression worker panicked");
            if let Some(e) = failure {
                return Err(e);
            }
            if corrupt {
                return Ok(Attempt::Corrupt);
            }
            Ok(Attempt::Done(
                decoded?,
                end.expect("loop exits with end or failure"),
            ))
        })
    }
}
