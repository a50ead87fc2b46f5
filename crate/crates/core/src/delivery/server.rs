//! Server side: a per-connection [`Session`] state machine and a threaded TCP
//! loop around it.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crate::store::Store;

use super::frame::{encode_frame, Frame, FrameDecoder, FrameType};
use super::link::LinkModel;
use super::protocol::{end_keys_frame, end_tokens_frame, err_frame, ErrCode, Request};

/// Protocol state for one connection. Bytes go in, response frames come out;
/// malformed input yields ERR frames and the session keeps going.
pub struct Session {
    store: Arc<Store>,
    decoder: FrameDecoder,
}

impl Session {
    pub fn new(store: Arc<Store>) -> Self {
        Self {
            store,
            decoder: FrameDecoder::new(),
        }
    }

    /// Feeds received bytes and returns every response they complete.
    pub fn feed(&mut self, bytes: &[u8]) -> Vec<Frame> {
        self.decoder.push(bytes);
        let mut out = Vec::new();
        while let Some(next) = self.decoder.next_frame() {
            match next {
                Ok(frame) => self.handle(&frame, &mut out),
                Err(e) => {
                    log::debug!("bad frame from client: {e}");
                    out.push(err_frame(ErrCode::BadFrame, &e.to_string()));
                }
            }
        }
        out
    }

    fn handle(&self, frame: &Frame, out: &mut Vec<Frame>) {
        let request = match Request::from_frame(frame) {
            None => {
                out.push(err_frame(
                    ErrCode::UnexpectedFrame,
                    &format!("{:?} is not a request", frame.frame_type),
                ));
                return;
            }
            Some(Err(e)) => {
                out.push(err_frame(ErrCode::MalformedRequest, &e.to_string()));
                return;
            }
            Some(Ok(r)) => r,
        };
        match request {
            Request::Tokens {
                model_id,
                mode,
                tokens,
            } => {
                let r = self.store.retrieve_text(model_id, &tokens, mode);
                for (_, chunk) in &r.hits {
                    out.push(Frame::new(FrameType::Chunk, chunk.to_bytes()));
                }
                out.push(end_tokens_frame(&r.miss_suffix));
            }
            Request::Keys(keys) => {
                let mut missing = Vec::new();
                for key in keys {
                    match self.store.get(&key) {
                        Ok(Some(chunk)) => out.push(Frame::new(FrameType::Chunk, chunk.to_bytes())),
                        Ok(None) => missing.push(key),
                        Err(e) => {
                            log::warn!("reading {key} failed: {e}");
                            missing.push(key);
                        }
                    }
                }
                out.push(end_keys_frame(&missing));
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// When set, each response frame is paced to `latency + len / bandwidth`.
    pub throttle: Option<LinkModel>,
}

const POLL: Duration = Duration::from_millis(50);

/// Accepts connections until `stop` is set, one thread per connection.
pub fn serve(
    store: Arc<Store>,
    listener: TcpListener,
    options: ServeOptions,
    stop: Arc<AtomicBool>,
) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    let mut workers = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("connection from {peer}");
                let store = store.clone();
                let stop = stop.clone();
                let options = options.clone();
                workers.push(thread::spawn(move || {
                    if let Err(e) = handle_connection(store, stream, &options, &stop) {
                        log::warn!("connection {peer} ended with error: {e}");
                    }
                }));
                workers.retain(|w| !w.is_finished());
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => return Err(e),
        }
    }
    for w in workers {
        let _ = w.join();
    }
    Ok(())
}

fn handle_connection(
    store: Arc<Store>,
    mut stream: TcpStream,
    options: &ServeOptions,
    stop: &AtomicBool,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(POLL))?;
    stream.set_nodelay(true)?;
    let mut session = Session::new(store);
    let mut buf = vec![0u8; 64 * 1024];
    while !stop.load(Ordering::SeqCst) {
        let n = match stream.read(&mut buf) {
            Ok(0) => return Ok(()),
            Ok(n) => n,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e),
        };
        for frame in session.feed(&buf[..n]) {
            let bytes = encode_frame(&frame);
            if let Some(link) = &options.throttle {
                thread::sleep(Duration::from_secs_f64(link.transfer_time(bytes.len() as u64)));
            }
            stream.write_all(&bytes)?;
        }
        stream.flush()?;
    }
    Ok(())
}
