//! Delivery of compressed KV caches from a store to a consumer over a framed
//! binary protocol, plus a virtual-clock link model for timing experiments.

mod client;
mod frame;
mod link;
mod protocol;
mod server;

pub use client::{Client, DeliveryError, Fetched, FetchedChunk, FetchedKeys};
pub use frame::{
    decode_frame, encode_frame, Decoded, Frame, FrameDecoder, FrameError, FrameType, FRAME_HEADER_LEN,
    FRAME_MAGIC, FRAME_TRAILER_LEN, MAX_PAYLOAD,
};
pub use link::{simulate_transfer, InvalidLink, LinkModel, SimulatedConnection, VirtualClock};
pub use protocol::{
    end_keys_frame, end_tokens_frame, err_frame, parse_end_keys, parse_end_tokens, parse_err, ErrCode,
    PayloadError, Request, MAX_REQUEST_ITEMS,
};
pub use server::{serve, ServeOptions, Session};
