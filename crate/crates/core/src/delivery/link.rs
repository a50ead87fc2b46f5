//! Bandwidth/latency link model and an in-memory connection that charges a
//! virtual clock instead of sleeping.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::Store;

use super::frame::{decode_frame, encode_frame, Decoded};
use super::server::Session;

#[derive(Debug, Error, PartialEq)]
#[error("link bandwidth must be positive and finite and latency non-negative (got B={bandwidth}, latency={latency})")]
pub struct InvalidLink {
    pub bandwidth: f64,
    pub latency: f64,
}

/// A link of `bandwidth` bytes/second with a fixed per-frame `latency` in
/// seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub bandwidth: f64,
    pub latency: f64,
}

impl LinkModel {
    pub fn new(bandwidth: f64, latency: f64) -> Result<Self, InvalidLink> {
        if !(bandwidth > 0.0 && bandwidth.is_finite() && latency >= 0.0 && latency.is_finite()) {
            return Err(InvalidLink { bandwidth, latency });
        }
        Ok(Self { bandwidth, latency })
    }

    /// Seconds to move `bytes` over the link as one frame.
    pub fn transfer_time(&self, bytes: u64) -> f64 {
        self.latency + bytes as f64 / self.bandwidth
    }
}

/// `latency + bytes / B`.
pub fn simulate_transfer(link: &LinkModel, bytes: u64) -> f64 {
    link.transfer_time(bytes)
}

/// Deterministic simulated time, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VirtualClock {
    now: f64,
    frames: u64,
    bytes: u64,
}

impl VirtualClock {
    pub fn now(&self) -> f64 {
        self.now
    }

    /// Frames charged so far, both directions.
    pub fn frames(&self) -> u64 {
        self.frames
    }

    /// Bytes charged so far, both directions, including frame overhead.
    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    fn charge_frame(&mut self, link: &LinkModel, len: usize) {
        self.now += link.transfer_time(len as u64);
        self.frames += 1;
        self.bytes += len as u64;
    }

    fn charge_bytes(&mut self, link: &LinkModel, len: usize) {
        self.now += len as f64 / link.bandwidth;
        self.bytes += len as u64;
    }
}

/// A client-side byte stream wired straight to a server [`Session`].
///
/// Every complete frame crossing the link, in either direction, advances the
/// clock by `latency + frame_len / B`. Bytes that never form a frame are
/// charged bandwidth only.
pub struct SimulatedConnection {
    session: Session,
    link: LinkModel,
    clock: VirtualClock,
    upstream: Vec<u8>,
    downstream: VecDeque<u8>,
}

impl SimulatedConnection {
    pub fn new(store: Arc<Store>, link: LinkModel) -> Self {
        Self {
            session: Session::new(store),
            link,
            clock: VirtualClock::default(),
            upstream: Vec::new(),
            downstream: VecDeque::new(),
        }
    }

    pub fn clock(&self) -> VirtualClock {
        self.clock
    }

    pub fn link(&self) -> LinkModel {
        self.link
    }

    fn account_upstream(&mut self) {
        loop {
            if self.upstream.is_empty() {
                return;
            }
            match decode_frame(&self.upstream) {
                Ok(Decoded::Frame(_, used)) => {
                    self.clock.charge_frame(&self.link, used);
                    self.upstream.drain(..used);
                }
                Ok(Decoded::Incomplete) => return,
                Err(_) => {
                    let n = self.upstream.len();
                    self.clock.charge_bytes(&self.link, n);
                    self.upstream.clear();
                }
            }
        }
    }
}

impl Write for SimulatedConnection {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.upstream.extend_from_slice(buf);
        self.account_upstream();
        for frame in self.session.feed(buf) {
            let bytes = encode_frame(&frame);
            self.clock.charge_frame(&self.link, bytes.len());
            self.downstream.extend(bytes);
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Read for SimulatedConnection {
    /// Returns 0 (end of stream) once all responses have been read.
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = buf.len().min(self.downstream.len());
        for (dst, src) in buf.iter_mut().zip(self.downstream.drain(..n)) {
            *dst = src;
        }
        Ok(n)
    }
}
