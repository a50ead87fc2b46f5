use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use kdn_core::codec::{decompress_cache, CodecProfile};
use kdn_core::delivery::{serve as serve_store, Client, LinkModel, ServeOptions};
use kdn_core::model::{KvCache, TokenId};
use kdn_core::store::{ChunkKey, KeyMode, Store, StoreConfig};
use serde::Serialize;

use super::{load_model, read_tokens};
use crate::output::{Format, Report, Table};
use crate::{usage, StoreArgs, TextArgs};

fn open_store(root: &PathBuf, chunk_size: usize, capacity: Option<u64>, create: bool) -> Result<Store> {
    if !create && !root.is_dir() {
        bail!("store root {} is not a directory", root.display());
    }
    let mut cfg = StoreConfig::new(root).with_chunk_size(chunk_size);
    if let Some(c) = capacity {
        cfg = cfg.with_capacity(c);
    }
    let (store, report) =
        Store::open_with_report(cfg).with_context(|| format!("opening store at {}", root.display()))?;
    if !report.corrupt_lines.is_empty()
        || !report.dangling_dropped.is_empty()
        || !report.orphans_removed.is_empty()
    {
        log::warn!(
            "recovered store: {} corrupt manifest lines, {} dangling entries dropped, {} orphan blobs removed",
            report.corrupt_lines.len(),
            report.dangling_dropped.len(),
            report.orphans_removed.len()
        );
    }
    Ok(store)
}

pub fn serve(args: &StoreArgs, host: &str, port: u16, bw: Option<f64>, latency: f64) -> Result<()> {
    let store = Arc::new(open_store(&args.root, args.chunk_size, args.capacity, false)?);
    let throttle = bw
        .map(|b| LinkModel::new(b, latency))
        .transpose()
        .map_err(|e| usage(e.to_string()))?;
    let listener = TcpListener::bind((host, port)).with_context(|| format!("binding {host}:{port}"))?;
    let addr = listener.local_addr()?;
    println!(
        "listening on {addr} ({} chunks, {} bytes)",
        store.len(),
        store.total_size()
    );
    log::info!("serving {}", args.root.display());
    // Runs until the process is interrupted.
    let stop = Arc::new(AtomicBool::new(false));
    serve_store(store, listener, ServeOptions { throttle }, stop)?;
    Ok(())
}

#[derive(Serialize)]
struct PutChunk {
    index: usize,
    key: String,
    n_tokens: usize,
    status: &'static str,
}

#[derive(Serialize)]
struct PutOutput {
    model_id: String,
    mode: KeyMode,
    profile: String,
    n_tokens: usize,
    chunks: Vec<PutChunk>,
    evicted: Vec<String>,
}

pub fn put(args: &StoreArgs, text: &TextArgs, profile: &str, format: Format) -> Result<()> {
    let profile: CodecProfile = profile.parse().map_err(|e| usage(format!("{e}")))?;
    let model = load_model(&text.model)?;
    let tokens = read_tokens(&text.tokens)?;
    if tokens.is_empty() {
        bail!("{} holds no tokens", text.tokens.display());
    }
    let store = open_store(&args.root, args.chunk_size, args.capacity, true)?;
    let rep = store.store_text(&model, &tokens, text.mode, &profile)?;
    store.flush()?;

    let chunks: Vec<PutChunk> = rep
        .keys
        .iter()
        .zip(&rep.written)
        .enumerate()
        .map(|(i, (k, &w))| PutChunk {
            index: i,
            key: k.hex(),
            n_tokens: (tokens.len() - i * args.chunk_size).min(args.chunk_size),
            status: if w { "stored" } else { "already stored" },
        })
        .collect();
    let mut table = Table::new(vec!["chunk", "key", "tokens", "status"]);
    for c in &chunks {
        table.push(vec![
            c.index.into(),
            c.key.clone().into(),
            c.n_tokens.into(),
            c.status.into(),
        ]);
    }
    let written = rep.written.iter().filter(|w| **w).count();
    let mut notes = vec![format!(
        "{written} of {} chunks written, {} already stored",
        chunks.len(),
        chunks.len() - written
    )];
    if !rep.evicted.is_empty() {
        notes.push(format!(
            "evicted {} chunks to stay within capacity",
            rep.evicted.len()
        ));
    }
    Report {
        json: PutOutput {
            model_id: format!("{:016x}", model.model_id()),
            mode: text.mode,
            profile: profile.to_string(),
            n_tokens: tokens.len(),
            chunks,
            evicted: rep.evicted.iter().map(ChunkKey::hex).collect(),
        },
        tables: vec![table],
        notes,
    }
    .emit(format)
}

#[derive(Serialize)]
struct GetChunk {
    index: usize,
    key: String,
    start_pos: u64,
    n_tokens: usize,
    compressed_bytes: usize,
}

#[derive(Serialize)]
struct GetOutput {
    source: String,
    n_tokens: usize,
    hit_tokens: usize,
    chunks: Vec<GetChunk>,
    miss_suffix: Vec<TokenId>,
}

pub fn get(
    root: Option<PathBuf>,
    chunk_size: usize,
    server: Option<&str>,
    text: &TextArgs,
    format: Format,
) -> Result<()> {
    let model = load_model(&text.model)?;
    let tokens = read_tokens(&text.tokens)?;
    let (source, hits, miss_suffix): (String, Vec<(ChunkKey, usize, KvCache)>, Vec<TokenId>) =
        match (server, root) {
            (Some(addr), _) => {
                let stream = TcpStream::connect(addr).with_context(|| format!("connecting to {addr}"))?;
                stream.set_read_timeout(Some(Duration::from_secs(60)))?;
                let fetched = Client::new(stream).fetch_tokens(model.model_id(), &tokens, text.mode)?;
                let hits = fetched
                    .chunks
                    .into_iter()
                    .map(|c| (c.key, c.compressed_len, c.cache))
                    .collect();
                (addr.to_owned(), hits, fetched.miss_suffix)
            }
            (None, Some(root)) => {
                let store = open_store(&root, chunk_size, None, false)?;
                let r = store.retrieve_text(model.model_id(), &tokens, text.mode);
                let mut hits = Vec::with_capacity(r.hits.len());
                for (key, chunk) in r.hits {
                    let cache = decompress_cache(&chunk).with_context(|| format!("decoding chunk {key}"))?;
                    hits.push((key, chunk.encoded_len(), cache));
                }
                (root.display().to_string(), hits, r.miss_suffix)
            }
            (None, None) => return Err(usage("get needs --root (or KDN_ROOT) or --server")),
        };

    let chunks: Vec<GetChunk> = hits
        .iter()
        .enumerate()
        .map(|(i, (key, len, cache))| GetChunk {
            index: i,
            key: key.hex(),
            start_pos: cache.start_pos(),
            n_tokens: cache.n_tokens(),
            compressed_bytes: *len,
        })
        .collect();
    let hit_tokens = chunks.iter().map(|c| c.n_tokens).sum();
    let mut table = Table::new(vec!["chunk", "key", "start", "tokens", "bytes"]);
    for c in &chunks {
        table.push(vec![
            c.index.into(),
            c.key.clone().into(),
            c.start_pos.into(),
            c.n_tokens.into(),
            c.compressed_bytes.into(),
        ]);
    }
    let notes = vec![format!(
        "{} chunks hit covering {hit_tokens} of {} tokens; miss suffix: {} tokens",
        chunks.len(),
        tokens.len(),
        miss_suffix.len()
    )];
    Report {
        json: GetOutput {
            source,
            n_tokens: tokens.len(),
            hit_tokens,
            chunks,
            miss_suffix,
        },
        tables: vec![table],
        notes,
    }
    .emit(format)
}
