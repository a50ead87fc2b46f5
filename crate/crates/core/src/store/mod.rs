//! Content-addressed KV-cache store.
//!
//! On disk:
//!
//! ```text
//! root/manifest.jsonl     append-only JSON Lines, last record per key wins
//! root/blobs/<hex64>      CompressedChunk bytes (edits add a `.v<N>` suffix)
//! ```
//!
//! A blob is always fully written (temp file + rename) before its manifest
//! record is appended. A crash in between leaves an unreferenced blob, which
//! the next [`Store::open`] deletes. Evictions rewrite the manifest atomically
//! and only then delete blobs.

mod edit;
mod key;
mod manifest;

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::codec::{compress_cache, decompress_cache, CodecError, CodecProfile, CompressedChunk};
use crate::model::{KvCache, Model, ModelError, TokenId};

pub use edit::{KvTransform, ScaleValueRows, TransformRegistry, SCALE_VALUE_ROWS};
pub use key::{chunk_keys, key_preimage, make_key, ChunkKey, KeyMode};
pub use manifest::ManifestRecord;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BLOB_DIR: &str = "blobs";
pub const DEFAULT_CHUNK_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid store config: {0}")]
    InvalidConfig(String),
    #[error("cannot store empty text")]
    EmptyText,
    #[error("capacity {capacity} bytes unreachable: {pinned_bytes} bytes are pinned, {needed} more bytes requested")]
    CapacityExceeded {
        capacity: u64,
        pinned_bytes: u64,
        needed: u64,
    },
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("unknown transform id {0}")]
    UnknownTransform(u32),
    #[error("invalid edit parameters: {0}")]
    InvalidEditParams(String),
    #[error("injected crash")]
    InjectedCrash,
    #[error("store handle is unusable after an injected crash; reopen it")]
    Crashed,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub root: PathBuf,
    pub capacity: u64,
    pub chunk_size: usize,
}

impl StoreConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            capacity: u64::MAX,
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }

    pub fn with_capacity(mut self, capacity: u64) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size;
        self
    }

    fn validate(&self) -> Result<(), StoreError> {
        if self.capacity == 0 {
            return Err(StoreError::InvalidConfig("capacity must be > 0".into()));
        }
        if self.chunk_size == 0 {
            return Err(StoreError::InvalidConfig("chunk_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Where an injected crash fires during the next chunk write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// After the blob is durable, before the manifest append starts.
    AfterBlobWrite,
    /// Halfway through writing the manifest line.
    MidManifestAppend,
}

#[derive(Debug)]
pub struct StoreEntry {
    pub key: ChunkKey,
    pub tokens: Vec<TokenId>,
    pub parent: Option<ChunkKey>,
    pub file: String,
    pub size: u64,
    pub pinned: bool,
    pub last_access: AtomicU64,
    pub created: u64,
    pub profile: CodecProfile,
    pub version: u32,
}

/// Point-in-time copy of a [`StoreEntry`].
#[derive(Debug, Clone, PartialEq)]
pub struct EntryInfo {
    pub key: ChunkKey,
    pub tokens: Vec<TokenId>,
    pub parent: Option<ChunkKey>,
    pub file: String,
    pub size: u64,
    pub pinned: bool,
    pub last_access: u64,
    pub created: u64,
    pub profile: CodecProfile,
    pub version: u32,
}

impl StoreEntry {
    fn info(&self) -> EntryInfo {
        EntryInfo {
            key: self.key,
            tokens: self.tokens.clone(),
            parent: self.parent,
            file: self.file.clone(),
            size: self.size,
            pinned: self.pinned,
            last_access: self.last_access.load(Ordering::Relaxed),
            created: self.created,
            profile: self.profile,
            version: self.version,
        }
    }

    fn record(&self) -> ManifestRecord {
        ManifestRecord {
            key: self.key.hex(),
            mode: self.key.mode,
            file: self.file.clone(),
            tokens: self.tokens.clone(),
            parent: self.parent.map(|p| p.hex()),
            codec: self.profile,
            size: self.size,
            pinned: self.pinned,
            created: self.created,
            version: self.version,
        }
    }

    fn from_record(r: ManifestRecord) -> Option<Self> {
        let key = ChunkKey::from_hex(&r.key, r.mode).ok()?;
        let parent = match &r.parent {
            Some(p) => Some(ChunkKey::from_hex(p, KeyMode::Chain).ok()?),
            None => None,
        };
        Some(Self {
            key,
            tokens: r.tokens,
            parent,
            file: r.file,
            size: r.size,
            pinned: r.pinned,
            last_access: AtomicU64::new(0),
            created: r.created,
            profile: r.codec,
            version: r.version,
        })
    }
}

/// What [`Store::open`] / [`Store::recover`] had to repair.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct RecoveryReport {
    pub entries: usize,
    pub corrupt_lines: Vec<usize>,
    pub dangling_dropped: Vec<String>,
    pub orphans_removed: Vec<String>,
}

/// Result of [`Store::store_text`].
#[derive(Debug, Clone, PartialEq)]
pub struct StoreReport {
    pub keys: Vec<ChunkKey>,
    /// Per key: whether this call wrote it (false = already stored).
    pub written: Vec<bool>,
    pub evicted: Vec<ChunkKey>,
}

/// Result of [`Store::retrieve_text`].
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub hits: Vec<(ChunkKey, CompressedChunk)>,
    /// Tokens from the first missing chunk to the end.
    pub miss_suffix: Vec<TokenId>,
    /// Indices of chunks that were not found.
    pub missing_chunks: Vec<usize>,
}

struct Inner {
    entries: HashMap<ChunkKey, StoreEntry>,
    total: u64,
    manifest: File,
}

pub struct Store {
    config: StoreConfig,
    inner: RwLock<Inner>,
    clock: AtomicU64,
    transforms: RwLock<TransformRegistry>,
    crash_point: Mutex<Option<(usize, CrashPoint)>>,
    writes: AtomicUsize,
    crashed: AtomicBool,
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Store {
    /// Opens (or creates) a store, replaying the manifest and collecting
    /// orphan blobs.
    pub fn open(config: StoreConfig) -> Result<Self, StoreError> {
        Self::open_with_report(config).map(|(s, _)| s)
    }

    pub fn open_with_report(config: StoreConfig) -> Result<(Self, RecoveryReport), StoreError> {
        config.validate()?;
        let blobs = config.root.join(BLOB_DIR);
        fs::create_dir_all(&blobs).map_err(io_err(&blobs))?;
        let manifest_path = config.root.join(MANIFEST_FILE);
        let manifest = manifest::open_append(&manifest_path).map_err(io_err(&manifest_path))?;
        let store = Self {
            inner: RwLock::new(Inner {
                entries: HashMap::new(),
                total: 0,
                manifest,
            }),
            config,
            clock: AtomicU64::new(0),
            transforms: RwLock::new(TransformRegistry::default()),
            crash_point: Mutex::new(None),
            writes: AtomicUsize::new(0),
            crashed: AtomicBool::new(false),
        };
        let report = store.recover()?;
        Ok((store, report))
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    fn manifest_path(&self) -> PathBuf {
        self.config.root.join(MANIFEST_FILE)
    }

    fn blob_path(&self, file: &str) -> PathBuf {
        self.config.root.join(BLOB_DIR).join(file)
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    fn check_alive(&self) -> Result<(), StoreError> {
        if self.crashed.load(Ordering::SeqCst) {
            return Err(StoreError::Crashed);
        }
        Ok(())
    }

    /// Rebuilds the in-memory index from disk: replays the manifest, drops
    /// records whose blob is missing or of the wrong size, and deletes blobs no
    /// record refers to.
    pub fn recover(&self) -> Result<RecoveryReport, StoreError> {
        let mut inner = self.inner.write().unwrap();
        let mpath = self.manifest_path();
        let replay = manifest::replay(&mpath).map_err(io_err(&mpath))?;
        let mut report = RecoveryReport {
            corrupt_lines: replay.corrupt_lines,
            ..Default::default()
        };

        let mut entries: HashMap<ChunkKey, StoreEntry> = HashMap::new();
        let mut order: Vec<ChunkKey> = Vec::new();
        for record in replay.records {
            let Some(entry) = StoreEntry::from_record(record) else {
                report.corrupt_lines.push(0);
                continue;
            };
            if !entries.contains_key(&entry.key) {
                order.push(entry.key);
            }
            entries.insert(entry.key, entry);
        }

        let mut dangling = false;
        entries.retain(|_, e| {
            let ok = fs::metadata(self.blob_path(&e.file))
                .map(|m| m.is_file() && m.len() == e.size)
                .unwrap_or(false);
            if !ok {
                log::warn!("dropping manifest entry {} with missing or short blob", e.key);
                report.dangling_dropped.push(e.key.hex());
                dangling = true;
            }
            ok
        });

        // Replay order stands in for access recency.
        for key in &order {
            if let Some(e) = entries.get(key) {
                e.last_access.store(self.tick(), Ordering::Relaxed);
            }
        }

        let live: std::collections::HashSet<&str> = entries.values().map(|e| e.file.as_str()).collect();
        let blob_dir = self.config.root.join(BLOB_DIR);
        for dent in fs::read_dir(&blob_dir).map_err(io_err(&blob_dir))? {
            let dent = dent.map_err(io_err(&blob_dir))?;
            let name = dent.file_name().to_string_lossy().into_owned();
            if !live.contains(name.as_str()) {
                fs::remove_file(dent.path()).map_err(io_err(&dent.path()))?;
                log::warn!("removed orphan blob {name}");
                report.orphans_removed.push(name);
            }
        }

        if dangling || !report.corrupt_lines.is_empty() {
            let records: Vec<ManifestRecord> = order
                .iter()
                .filter_map(|k| entries.get(k))
                .map(|e| e.record())
                .collect();
            manifest::rewrite(&mpath, &records).map_err(io_err(&mpath))?;
            inner.manifest = manifest::open_append(&mpath).map_err(io_err(&mpath))?;
        }

        inner.total = entries.values().map(|e| e.size).sum();
        inner.entries = entries;
        report.entries = inner.entries.len();
        Ok(report)
    }

    /// Syncs the manifest to disk.
    pub fn flush(&self) -> Result<(), StoreError> {
        let inner = self.inner.read().unwrap();
        inner.manifest.sync_all().map_err(io_err(&self.manifest_path()))
    }

    /// Arms a one-shot crash on the `nth` (0-based) chunk write from now.
    pub fn inject_crash(&self, nth: usize, point: CrashPoint) {
        let base = self.writes.load(Ordering::SeqCst);
        *self.crash_point.lock().unwrap() = Some((base + nth, point));
    }

    fn crash_here(&self, write_no: usize, point: CrashPoint) -> bool {
        let armed = *self.crash_point.lock().unwrap();
        if armed == Some((write_no, point)) {
            self.crashed.store(true, Ordering::SeqCst);
            true
        } else {
            false
        }
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sum of blob sizes of all live entries.
    pub fn total_size(&self) -> u64 {
        self.inner.read().unwrap().total
    }

    pub fn contains(&self, key: &ChunkKey) -> bool {
        self.inner.read().unwrap().entries.contains_key(key)
    }

    pub fn entry(&self, key: &ChunkKey) -> Option<EntryInfo> {
        self.inner.read().unwrap().entries.get(key).map(|e| e.info())
    }

    /// All entries, sorted by key.
    pub fn list(&self) -> Vec<EntryInfo> {
        let inner = self.inner.read().unwrap();
        let mut v: Vec<EntryInfo> = inner.entries.values().map(|e| e.info()).collect();
        v.sort_by_key(|a| a.key);
        v
    }

    fn read_blob(&self, entry: &StoreEntry) -> Result<CompressedChunk, StoreError> {
        let path = self.blob_path(&entry.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        Ok(CompressedChunk::from_bytes(&bytes)?)
    }

    /// Reads and CRC-checks one chunk, refreshing its access time.
    pub fn get(&self, key: &ChunkKey) -> Result<Option<CompressedChunk>, StoreError> {
        let inner = self.inner.read().unwrap();
        let Some(entry) = inner.entries.get(key) else {
            return Ok(None);
        };
        entry.last_access.store(self.tick(), Ordering::Relaxed);
        self.read_blob(entry).map(Some)
    }

    /// Raw blob bytes for one chunk (what the delivery server streams).
    pub fn get_bytes(&self, key: &ChunkKey) -> Result<Option<Vec<u8>>, StoreError> {
        let inner = self.inner.read().unwrap();
        let Some(entry) = inner.entries.get(key) else {
            return Ok(None);
        };
        entry.last_access.store(self.tick(), Ordering::Relaxed);
        let path = self.blob_path(&entry.file);
        fs::read(&path).map(Some).map_err(io_err(&path))
    }

    fn append_record(
        &self,
        inner: &mut Inner,
        record: &ManifestRecord,
        write_no: usize,
    ) -> Result<(), StoreError> {
        let line = manifest::encode_line(record);
        let mpath = self.manifest_path();
        if self.crash_here(write_no, CrashPoint::MidManifestAppend) {
            inner
                .manifest
                .write_all(&line[..line.len() / 2])
                .map_err(io_err(&mpath))?;
            return Err(StoreError::InjectedCrash);
        }
        inner.manifest.write_all(&line).map_err(io_err(&mpath))?;
        inner.manifest.flush().map_err(io_err(&mpath))
    }

    fn write_blob(&self, file: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let path = self.blob_path(file);
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(bytes).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    /// Stores one compressed chunk under its key. Returns `false` if the key
    /// was already present.
    pub fn put_chunk(
        &self,
        chunk: &CompressedChunk,
        tokens: &[TokenId],
        parent: Option<ChunkKey>,
    ) -> Result<(bool, Vec<ChunkKey>), StoreError> {
        self.check_alive()?;
        let mut inner = self.inner.write().unwrap();
        if let Some(e) = inner.entries.get(&chunk.key) {
            e.last_access.store(self.tick(), Ordering::Relaxed);
            return Ok((false, Vec::new()));
        }
        let bytes = chunk.to_bytes();
        let size = bytes.len() as u64;
        if size > self.config.capacity {
            return Err(StoreError::CapacityExceeded {
                capacity: self.config.capacity,
                pinned_bytes: 0,
                needed: size,
            });
        }
        let evicted = self.evict_locked(&mut inner, self.config.capacity - size, size)?;

        let write_no = self.writes.fetch_add(1, Ordering::SeqCst);
        let file = chunk.key.hex();
        self.write_blob(&file, &bytes)?;
        if self.crash_here(write_no, CrashPoint::AfterBlobWrite) {
            return Err(StoreError::InjectedCrash);
        }
        let entry = StoreEntry {
            key: chunk.key,
            tokens: tokens.to_vec(),
            parent,
            file,
            size,
            pinned: false,
            last_access: AtomicU64::new(self.tick()),
            created: now_secs(),
            profile: chunk.profile,
            version: 0,
        };
        self.append_record(&mut inner, &entry.record(), write_no)?;
        inner.total += size;
        inner.entries.insert(chunk.key, entry);
        Ok((true, evicted))
    }

    /// Prefills `tokens`, splits the cache into `chunk_size` pieces, compresses
    /// and persists each. Chain mode prefills once and slices; standalone mode
    /// prefills each chunk on its own at position 0. Existing keys are skipped.
    pub fn store_text(
        &self,
        model: &Model,
        tokens: &[TokenId],
        mode: KeyMode,
        profile: &CodecProfile,
    ) -> Result<StoreReport, StoreError> {
        self.check_alive()?;
        if tokens.is_empty() {
            return Err(StoreError::EmptyText);
        }
        model.check_tokens(tokens)?;
        profile.validate()?;
        let cs = self.config.chunk_size;
        let keys = chunk_keys(model.model_id(), mode, tokens, cs);
        let mut written = vec![false; keys.len()];
        let mut evicted = Vec::new();

        let missing: Vec<usize> = (0..keys.len()).filter(|&i| !self.contains(&keys[i])).collect();
        let full = match (mode, missing.is_empty()) {
            (KeyMode::Chain, false) => Some(model.prefill(tokens)?.0),
            _ => None,
        };

        for i in 0..keys.len() {
            let range = i * cs..((i + 1) * cs).min(tokens.len());
            let chunk_tokens = &tokens[range.clone()];
            if !missing.contains(&i) {
                self.touch(&keys[i]);
                continue;
            }
            let cache: KvCache = match &full {
                Some(c) => c.slice_tokens(range),
                None => model.prefill_at(chunk_tokens, 0)?.0,
            };
            let chunk = compress_cache(&cache, profile, keys[i])?;
            let parent = match mode {
                KeyMode::Chain if i > 0 => Some(keys[i - 1]),
                _ => None,
            };
            let (new, ev) = self.put_chunk(&chunk, chunk_tokens, parent)?;
            written[i] = new;
            evicted.extend(ev);
        }
        Ok(StoreReport {
            keys,
            written,
            evicted,
        })
    }

    fn touch(&self, key: &ChunkKey) {
        if let Some(e) = self.inner.read().unwrap().entries.get(key) {
            e.last_access.store(self.tick(), Ordering::Relaxed);
        }
    }

    /// Looks up the chunks of `tokens`. Chain mode stops at the first miss;
    /// standalone mode checks every chunk independently.
    pub fn retrieve_text(&self, model_id: u64, tokens: &[TokenId], mode: KeyMode) -> Retrieval {
        let cs = self.config.chunk_size;
        let keys = chunk_keys(model_id, mode, tokens, cs);
        let mut hits = Vec::new();
        let mut missing_chunks = Vec::new();
        for (i, key) in keys.iter().enumerate() {
            let range = i * cs..((i + 1) * cs).min(tokens.len());
            match self.lookup(key, &tokens[range]) {
                Some(chunk) => hits.push((*key, chunk)),
                None => {
                    missing_chunks.push(i);
                    if mode == KeyMode::Chain {
                        missing_chunks.extend(i + 1..keys.len());
                        break;
                    }
                }
            }
        }
        let miss_suffix = match missing_chunks.first() {
            Some(&i) => tokens[i * cs..].to_vec(),
            None => Vec::new(),
        };
        Retrieval {
            hits,
            miss_suffix,
            missing_chunks,
        }
    }

    fn lookup(&self, key: &ChunkKey, tokens: &[TokenId]) -> Option<CompressedChunk> {
        let inner = self.inner.read().unwrap();
        let entry = inner.entries.get(key)?;
        if entry.tokens != tokens {
            log::warn!("key {key} maps to different tokens; treating as miss");
            return None;
        }
        entry.last_access.store(self.tick(), Ordering::Relaxed);
        match self.read_blob(entry) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("unreadable blob for {key}: {e}");
                None
            }
        }
    }

    pub fn set_pinned(&self, key: &ChunkKey, pinned: bool) -> Result<(), StoreError> {
        self.check_alive()?;
        let mut inner = self.inner.write().unwrap();
        let record = {
            let e = inner
                .entries
                .get_mut(key)
                .ok_or_else(|| StoreError::UnknownKey(key.hex()))?;
            e.pinned = pinned;
            e.record()
        };
        let write_no = self.writes.fetch_add(1, Ordering::SeqCst);
        self.append_record(&mut inner, &record, write_no)
    }

    /// Evicts unpinned entries, least recently accessed first, until the total
    /// size is at most `capacity`.
    pub fn evict_to(&self, capacity: u64) -> Result<Vec<ChunkKey>, StoreError> {
        self.check_alive()?;
        let mut inner = self.inner.write().unwrap();
        self.evict_locked(&mut inner, capacity, 0)
    }

    fn evict_locked(
        &self,
        inner: &mut Inner,
        capacity: u64,
        needed: u64,
    ) -> Result<Vec<ChunkKey>, StoreError> {
        if inner.total <= capacity {
            return Ok(Vec::new());
        }
        let pinned_bytes: u64 = inner.entries.values().filter(|e| e.pinned).map(|e| e.size).sum();
        if pinned_bytes > capacity {
            return Err(StoreError::CapacityExceeded {
                capacity: capacity.saturating_add(needed),
                pinned_bytes,
                needed,
            });
        }
        let mut candidates: Vec<(u64, ChunkKey, u64)> = inner
            .entries
            .values()
            .filter(|e| !e.pinned)
            .map(|e| (e.last_access.load(Ordering::Relaxed), e.key, e.size))
            .collect();
        candidates.sort();

        let mut total = inner.total;
        let mut victims = Vec::new();
        for (_, key, size) in candidates {
            if total <= capacity {
                break;
            }
            total -= size;
            victims.push(key);
        }

        let files: Vec<String> = victims
            .iter()
            .filter_map(|k| inner.entries.remove(k).map(|e| e.file))
            .collect();
        inner.total = total;
        let mut records: Vec<ManifestRecord> = inner.entries.values().map(|e| e.record()).collect();
        records.sort_by_key(|r| r.created);
        let mpath = self.manifest_path();
        manifest::rewrite(&mpath, &records).map_err(io_err(&mpath))?;
        inner.manifest = manifest::open_append(&mpath).map_err(io_err(&mpath))?;
        for f in files {
            let p = self.blob_path(&f);
            if let Err(e) = fs::remove_file(&p) {
                log::warn!("could not delete evicted blob {}: {e}", p.display());
            }
        }
        Ok(victims)
    }

    /// Adds or replaces an edit transform.
    pub fn register_transform(&self, id: u32, t: Box<dyn KvTransform>) {
        self.transforms.write().unwrap().register(id, t);
    }

    /// Decompresses the chunk, applies transform `transform_id`, recompresses
    /// with the same profile and key, and swaps the blob. Returns the new
    /// version number. The key's token association never changes.
    pub fn apply_edit(
        &self,
        key: &ChunkKey,
        transform_id: u32,
        params: &serde_json::Value,
    ) -> Result<u32, StoreError> {
        self.check_alive()?;
        let mut inner = self.inner.write().unwrap();
        let (old_file, old_size, chunk, profile, version) = {
            let e = inner
                .entries
                .get(key)
                .ok_or_else(|| StoreError::UnknownKey(key.hex()))?;
            (
                e.file.clone(),
                e.size,
                self.read_blob(e)?,
                e.profile,
                e.version + 1,
            )
        };
        let mut cache = decompress_cache(&chunk)?;
        {
            let registry = self.transforms.read().unwrap();
            let t = registry
                .get(transform_id)
                .ok_or(StoreError::UnknownTransform(transform_id))?;
            t.apply(&mut cache, params)?;
        }
        let edited = compress_cache(&cache, &profile, *key)?;
        let bytes = edited.to_bytes();
        let file = format!("{}.v{version}", key.hex());

        let write_no = self.writes.fetch_add(1, Ordering::SeqCst);
        self.write_blob(&file, &bytes)?;
        if self.crash_here(write_no, CrashPoint::AfterBlobWrite) {
            return Err(StoreError::InjectedCrash);
        }
        let record = {
            let e = inner.entries.get_mut(key).expect("checked above");
            e.file = file;
            e.size = bytes.len() as u64;
            e.version = version;
            e.last_access.store(self.tick(), Ordering::Relaxed);
            e.record()
        };
        self.append_record(&mut inner, &record, write_no)?;
        inner.total = inner.total - old_size + bytes.len() as u64;
        let p = self.blob_path(&old_file);
        if let Err(e) = fs::remove_file(&p) {
            log::warn!("could not delete superseded blob {}: {e}", p.display());
        }
        Ok(version)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{dequantize, quantize, LosslessId};
    use crate::model::ModelConfig;
    use serde_json::json;
    use tempfile::TempDir;

    fn model() -> Model {
        Model::new(ModelConfig::new(2, 2, 4, 64)).unwrap()
    }

    fn open(dir: &TempDir, chunk: usize) -> Store {
        Store::open(StoreConfig::new(dir.path()).with_chunk_size(chunk)).unwrap()
    }

    fn text(n: usize) -> Vec<TokenId> {
        (0..n as u32).map(|i| (i * 7 + 3) % 64).collect()
    }

    #[test]
    fn open_empty_dir() {
        let dir = TempDir::new().unwrap();
        let s = open(&dir, 64);
        assert!(s.is_empty());
        assert_eq!(s.total_size(), 0);
        assert!(dir.path().join(BLOB_DIR).is_dir());
    }

    #[test]
    fn chunking_and_idempotence() {
        let dir = TempDir::new().unwrap();
        let s = open(&dir, 64);
        let m = model();
        let r = s
            .store_text(&m, &text(130), KeyMode::Chain, &CodecProfile::default())
            .unwrap();
        assert_eq!(r.keys.len(), 3);
        assert_eq!(r.written, vec![true; 3]);
        let sizes: Vec<usize> = s.list().iter().map(|e| e.tokens.len()).collect();
        let mut sorted = sizes.clone();
        sorted.sort();
        assert_eq!(sorted, vec![2, 64, 64]);

        let blobs = fs::read_dir(dir.path().join(BLOB_DIR)).unwrap().count();
        let again = s
            .store_text(&m, &text(130), KeyMode::Chain, &CodecProfile::default())
            .unwrap();
        assert_eq!(again.keys, r.keys);
        assert_eq!(again.written, vec![false; 3]);
        assert_eq!(fs::read_dir(dir.path().join(BLOB_DIR)).unwrap().count(), blobs);
        assert!(s
            .store_text(&m, &[], KeyMode::Chain, &CodecProfile::default())
            .is_err());
    }

    #[test]
    fn chain_chunks_reassemble_full_prefill() {
        let dir = TempDir::new().unwrap();
        let s = open(&dir, 16);
        let m = model();
        let toks = text(40);
        let p = CodecProfile::new(8, LosslessId::Varint);
        s.store_text(&m, &toks, KeyMode::Chain, &p).unwrap();
        let r = s.retrieve_text(m.model_id(), &toks, KeyMode::Chain);
        assert!(r.miss_suffix.is_empty());
        let parts: Vec<KvCache> = r.hits.iter().map(|(_, c)| decompress_cache(c).unwrap()).collect();
        assert_eq!(parts[1].start_pos(), 16);
        let joined = KvCache::concat(&parts).unwrap();
        let full = m.prefill(&toks).unwrap().0;
        let expect: Vec<KvCache> = (0..3)
            .map(|i| {
                let slice = full.slice_tokens(i * 16..((i + 1) * 16).min(40));
                dequantize(&quantize(&slice, 8, 16).unwrap())
            })
            .collect();
        assert_eq!(joined, KvCache::concat(&expect).unwrap());
    }

    #[test]
    fn retrieval_partial_and_standalone() {
        let dir = TempDir::new().unwrap();
        let s = open(&dir, 4);
        let m = model();
        let id = m.model_id();
        let r = s.retrieve_text(id, &text(6), KeyMode::Chain);
        assert!(r.hits.is_empty());
        assert_eq!(r.miss_suffix, text(6));

        let stored = text(8);
        s.store_text(&m, &stored, KeyMode::Chain, &CodecProfile::default())
            .unwrap();
        let mut query = stored.clone();
        query.extend([1, 2, 3]);
        let r = s.retrieve_text(id, &query, KeyMode::Chain);
        assert_eq!(r.hits.len(), 2);
        assert_eq!(r.miss_suffix, vec![1, 2, 3]);

        // changing the first chunk breaks the whole chain
        let mut altered = stored.clone();
        altered[0] = 63;
        assert_eq!(s.retrieve_text(id, &altered, KeyMode::Chain).hits.len(), 0);

        s.store_text(
            &m,
            &[9, 9, 9, 9, 5, 5, 5, 5],
            KeyMode::Standalone,
            &CodecProfile::default(),
        )
        .unwrap();
        let r = s.retrieve_text(id, &[1, 1, 1, 1, 5, 5, 5, 5], KeyMode::Standalone);
        assert_eq!(r.hits.len(), 1);
        assert_eq!(r.missing_chunks, vec![0]);
        assert_eq!(decompress_cache(&r.hits[0].1).unwrap().start_pos(), 0);
    }

    #[test]
    fn reopen_preserves_listing() {
        let dir = TempDir::new().unwrap();
        let m = model();
        let before = {
            let s = open(&dir, 8);
            s.store_text(&m, &text(20), KeyMode::Chain, &CodecProfile::default())
                .unwrap();
            s.flush().unwrap();
            s.list()
        };
        let s = open(&dir, 8);
        let after = s.list();
        assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(
                (a.key, &a.tokens, a.parent, a.size),
                (b.key, &b.tokens, b.parent, b.size)
            );
        }
    }

    #[test]
    fn orphan_blob_collected_manifest_untouched() {
        let dir = TempDir::new().unwrap();
        {
            let s = open(&dir, 8);
            s.store_text(&model(), &text(10), KeyMode::Chain, &CodecProfile::default())
                .unwrap();
        }
        let mpath = dir.path().join(MANIFEST_FILE);
        let manifest_before = fs::read(&mpath).unwrap();
        fs::write(dir.path().join(BLOB_DIR).join("ab".repeat(32)), b"junk").unwrap();
        let (s, report) = Store::open_with_report(StoreConfig::new(dir.path()).with_chunk_size(8)).unwrap();
        assert_eq!(report.orphans_removed, vec!["ab".repeat(32)]);
        assert_eq!(s.len(), 2);
        assert_eq!(fs::read(&mpath).unwrap(), manifest_before);
    }

    #[test]
    fn corrupt_manifest_line_is_skipped() {
        let dir = TempDir::new().unwrap();
        {
            let s = open(&dir, 8);
            s.store_text(&model(), &text(10), KeyMode::Chain, &CodecProfile::default())
                .unwrap();
        }
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut content = fs::read_to_string(&mpath).unwrap();
        content.insert_str(0, "{not json\n");
        fs::write(&mpath, content).unwrap();
        let (s, report) = Store::open_with_report(StoreConfig::new(dir.path()).with_chunk_size(8)).unwrap();
        assert_eq!(report.corrupt_lines, vec![1]);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn lru_eviction_and_pins() {
        let dir = TempDir::new().unwrap();
        let s = open(&dir, 4);
        let m = model();
        let p = CodecProfile::default();
        let keys: Vec<ChunkKey> = [[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12]]
            .iter()
            .map(|t| s.store_text(&m, t, KeyMode::Standalone, &p).unwrap().keys[0])
            .collect();
        let total = s.total_size();
        assert!(s.evict_to(total).unwrap().is_empty());

        // touch the first so the second is least recent
        s.get(&keys[0]).unwrap().unwrap();
        let max_two = total
            - s.entry(&keys[2])
                .unwrap()
                .size
                .min(s.entry(&keys[1]).unwrap().size);
        let evicted = s.evict_to(max_two).unwrap();
        assert_eq!(evicted, vec![keys[1]]);
        assert!(s.total_size() <= max_two);
        assert!(!dir.path().join(BLOB_DIR).join(keys[1].hex()).exists());

        // pin the LRU entry: the next one goes instead
        s.set_pinned(&keys[2], true).unwrap();
        let evicted = s.evict_to(s.total_size() - 1).unwrap();
        assert_eq!(evicted, vec![keys[0]]);
        match s.evict_to(1) {
            Err(StoreError::CapacityExceeded { pinned_bytes, .. }) => {
                assert_eq!(pinned_bytes, s.entry(&keys[2]).unwrap().size)
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(s.total_size(), s.list().iter().map(|e| e.size).sum::<u64>());

        drop(s);
        let s = open(&dir, 4);
        assert_eq!(s.len(), 1);
        assert!(s.entry(&keys[2]).unwrap().pinned);
    }

    #[test]
    fn capacity_enforced_on_write() {
        let dir = TempDir::new().unwrap();
        let m = model();
        let p = CodecProfile::default();
        let probe = {
            let d = TempDir::new().unwrap();
            let s = open(&d, 4);
            s.store_text(&m, &[1, 2, 3, 4], KeyMode::Standalone, &p).unwrap();
            s.total_size()
        };
        let s = Store::open(
            StoreConfig::new(dir.path())
                .with_chunk_size(4)
                .with_capacity(probe * 2 + probe / 2),
        )
        .unwrap();
        for t in 0..6u32 {
            s.store_text(&m, &[t, t, t, t], KeyMode::Standalone, &p).unwrap();
            assert!(s.total_size() <= s.config().capacity);
        }
        assert!(s.len() < 6);
    }

    #[test]
    fn edits_keep_key_and_bump_version() {
        let dir = TempDir::new().unwrap();
        let s = open(&dir, 8);
        let m = model();
        let p = CodecProfile::new(8, LosslessId::Raw);
        let key = s.store_text(&m, &text(8), KeyMode::Standalone, &p).unwrap().keys[0];
        let original = decompress_cache(&s.get(&key).unwrap().unwrap()).unwrap();

        let v = s
            .apply_edit(&key, SCALE_VALUE_ROWS, &json!({"tokens": [0], "factor": 2.0}))
            .unwrap();
        assert_eq!(v, 1);
        let info = s.entry(&key).unwrap();
        assert_eq!(info.tokens, text(8));
        assert_eq!(info.file, format!("{}.v1", key.hex()));
        let edited = decompress_cache(&s.get(&key).unwrap().unwrap()).unwrap();

        let mut doubled = original.clone();
        ScaleValueRows
            .apply(&mut doubled, &json!({"tokens": [0], "factor": 2.0}))
            .unwrap();
        assert_eq!(edited, dequantize(&quantize(&doubled, 8, 16).unwrap()));
        assert_eq!(s.total_size(), s.list().iter().map(|e| e.size).sum::<u64>());

        s.apply_edit(
            &key,
            SCALE_VALUE_ROWS,
            &json!({"tokens": (0..8).collect::<Vec<_>>(), "factor": 0.0}),
        )
        .unwrap();
        let zeroed = decompress_cache(&s.get(&key).unwrap().unwrap()).unwrap();
        assert!(zeroed.v().iter().all(|&x| x == 0.0));
        assert!(matches!(
            s.apply_edit(&key, 42, &json!({})),
            Err(StoreError::UnknownTransform(42))
        ));
        assert!(matches!(
            s.apply_edit(&key, 1, &json!({"tokens": [8], "factor": 1.0})),
            Err(StoreError::InvalidEditParams(_))
        ));

        drop(s);
        let s = open(&dir, 8);
        assert_eq!(s.entry(&key).unwrap().version, 2);
        assert_eq!(fs::read_dir(dir.path().join(BLOB_DIR)).unwrap().count(), 1);
    }

    #[test]
    fn crash_after_blob_write_recovers() {
        let dir = TempDir::new().unwrap();
        let m = model();
        let p = CodecProfile::default();
        {
            let s = open(&dir, 4);
            s.store_text(&m, &[1, 2, 3, 4], KeyMode::Standalone, &p).unwrap();
            s.inject_crash(0, CrashPoint::AfterBlobWrite);
            assert!(matches!(
                s.store_text(&m, &[5, 6, 7, 8], KeyMode::Standalone, &p),
                Err(StoreError::InjectedCrash)
            ));
            assert!(matches!(s.evict_to(0), Err(StoreError::Crashed)));
            assert_eq!(fs::read_dir(dir.path().join(BLOB_DIR)).unwrap().count(), 2);
        }
        let (s, report) = Store::open_with_report(StoreConfig::new(dir.path()).with_chunk_size(4)).unwrap();
        assert_eq!(report.orphans_removed.len(), 1);
        assert_eq!(s.len(), 1);
        assert_eq!(fs::read_dir(dir.path().join(BLOB_DIR)).unwrap().count(), 1);
    }

    #[test]
    fn torn_manifest_append_recovers() {
        let dir = TempDir::new().unwrap();
        let m = model();
        let p = CodecProfile::default();
        {
            let s = open(&dir, 4);
            s.inject_crash(1, CrashPoint::MidManifestAppend);
            assert!(s.store_text(&m, &text(12), KeyMode::Chain, &p).is_err());
        }
        let (s, report) = Store::open_with_report(StoreConfig::new(dir.path()).with_chunk_size(4)).unwrap();
        assert_eq!(report.corrupt_lines.len(), 1);
        assert_eq!(report.orphans_removed.len(), 1);
        assert_eq!(s.len(), 1);
        // the store is writable again and completes the chain
        let r = s.store_text(&m, &text(12), KeyMode::Chain, &p).unwrap();
        assert_eq!(r.written, vec![false, true, true]);
    }
}
