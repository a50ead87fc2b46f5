use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecProfile;
use crate::model::TokenId;

use super::key::KeyMode;

/// One line of `manifest.jsonl`. Later records for the same key replace
/// earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub key: String,
    pub mode: KeyMode,
    pub file: String,
    pub tokens: Vec<TokenId>,
    pub parent: Option<String>,
    pub codec: CodecProfile,
    pub size: u64,
    pub pinned: bool,
    pub created: u64,
    #[serde(default)]
    pub version: u32,
}

pub struct Replay {
    pub records: Vec<ManifestRecord>,
    pub corrupt_lines: Vec<usize>,
}

/// Reads every parseable record in file order. Unparseable lines (including a
/// torn final line) are reported by 1-based line number and skipped.
pub fn replay(path: &Path) -> std::io::Result<Replay> {
    let mut records = Vec::new();
    let mut corrupt_lines = Vec::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok(Replay {
                records,
                corrupt_lines,
            })
        }
        Err(e) => return Err(e),
    };
    let mut reader = BufReader::new(file);
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let line = String::from_utf8_lossy(&buf);
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str::<ManifestRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("manifest line {line_no} skipped: {e}");
                corrupt_lines.push(line_no);
            }
        }
    }
    Ok(Replay {
        records,
        corrupt_lines,
    })
}

pub fn encode_line(record: &ManifestRecord) -> Vec<u8> {
    let mut line = serde_json::to_vec(record).expect("manifest records always serialize");
    line.push(b'\n');
    line
}

pub fn open_append(path: &Path) -> std::io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

/// Replaces the manifest with exactly `records`, via write-to-temp and rename.
pub fn rewrite(path: &Path, records: &[ManifestRecord]) -> std::io::Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = File::create(&tmp)?;
        for r in records {
            f.write_all(&encode_line(r))?;
        }
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
