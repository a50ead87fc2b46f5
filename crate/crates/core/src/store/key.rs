use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::TokenId;

/// How a chunk key relates to the text around it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyMode {
    /// Commits to the whole prefix through the parent digest; exact reuse only.
    Chain = 0,
    /// Depends only on the model and the chunk's own tokens; blendable.
    Standalone = 1,
}

impl KeyMode {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            0 => Some(KeyMode::Chain),
            1 => Some(KeyMode::Standalone),
            _ => None,
        }
    }
}

impl fmt::Display for KeyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyMode::Chain => "chain",
            KeyMode::Standalone => "standalone",
        })
    }
}

impl FromStr for KeyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chain" => Ok(KeyMode::Chain),
            "standalone" => Ok(KeyMode::Standalone),
            other => Err(format!("unknown key mode {other:?} (expected chain|standalone)")),
        }
    }
}

/// 256-bit content address of one stored chunk.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkKey {
    pub digest: [u8; 32],
    pub mode: KeyMode,
}

impl ChunkKey {
    pub fn hex(&self) -> String {
        hex::encode(self.digest)
    }

    pub fn from_hex(s: &str, mode: KeyMode) -> Result<Self, hex::FromHexError> {
        let mut digest = [0u8; 32];
        hex::decode_to_slice(s, &mut digest)?;
        Ok(Self { digest, mode })
    }
}

impl fmt::Debug for ChunkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChunkKey({}, {})", self.mode, &self.hex()[..16])
    }
}

impl fmt::Display for ChunkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

/// Canonical bytes hashed into a key:
/// `"KDNKEY1" | mode u8 | parent digest (32, zeros if none) | model_id u64 LE | n u32 LE | tokens u32 LE`.
///
/// Standalone keys always hash a zero parent, whatever `parent` says.
pub fn key_preimage(model_id: u64, mode: KeyMode, parent: Option<&ChunkKey>, tokens: &[TokenId]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(7 + 1 + 32 + 8 + 4 + 4 * tokens.len());
    buf.extend_from_slice(b"KDNKEY1");
    buf.push(mode.as_u8());
    match (mode, parent) {
        (KeyMode::Chain, Some(p)) => buf.extend_from_slice(&p.digest),
        _ => buf.extend_from_slice(&[0u8; 32]),
    }
    buf.extend_from_slice(&model_id.to_le_bytes());
    buf.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    for t in tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf
}

pub fn make_key(model_id: u64, mode: KeyMode, parent: Option<&ChunkKey>, tokens: &[TokenId]) -> ChunkKey {
    let digest: [u8; 32] = Sha256::digest(key_preimage(model_id, mode, parent, tokens)).into();
    ChunkKey { digest, mode }
}

/// Keys for consecutive chunks of `tokens`, chained or standalone.
pub fn chunk_keys(model_id: u64, mode: KeyMode, tokens: &[TokenId], chunk_size: usize) -> Vec<ChunkKey> {
    let mut keys: Vec<ChunkKey> = Vec::new();
    for chunk in tokens.chunks(chunk_size) {
        let key = make_key(model_id, mode, keys.last(), chunk);
        keys.push(key);
    }
    keys
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_mode_sensitive() {
        let a = make_key(7, KeyMode::Chain, None, &[1, 2, 3]);
        assert_eq!(a, make_key(7, KeyMode::Chain, None, &[1, 2, 3]));
        assert_ne!(
            a.digest,
            make_key(7, KeyMode::Standalone, None, &[1, 2, 3]).digest
        );
        assert_ne!(a.digest, make_key(8, KeyMode::Chain, None, &[1, 2, 3]).digest);
        let child = make_key(7, KeyMode::Chain, Some(&a), &[4]);
        assert_ne!(child, make_key(7, KeyMode::Chain, None, &[4]));
    }

    #[test]
    fn standalone_ignores_parent() {
        let p = make_key(1, KeyMode::Chain, None, &[9]);
        assert_eq!(
            make_key(1, KeyMode::Standalone, Some(&p), &[1, 2]),
            make_key(1, KeyMode::Standalone, None, &[1, 2])
        );
    }

    #[test]
    fn preimage_layout_for_three_tokens() {
        let pre = key_preimage(1, KeyMode::Standalone, None, &[1, 2, 3]);
        assert_eq!(pre.len(), 64);
        assert_eq!(&pre[..7], b"KDNKEY1");
        assert_eq!(pre[7], 1);
    }

    #[test]
    fn golden_standalone_digest() {
        // SHA-256 of the 64-byte preimage, computed with Python's hashlib.
        let k = make_key(1, KeyMode::Standalone, None, &[1, 2, 3]);
        assert_eq!(
            k.hex(),
            "15df8113632c26f986df04d455eee862d76d1af1f348accb3ffcb3ebbd2cf24a"
        );
    }

    #[test]
    fn hex_roundtrip() {
        let k = make_key(3, KeyMode::Chain, None, &[5]);
        assert_eq!(ChunkKey::from_hex(&k.hex(), KeyMode::Chain).unwrap(), k);
    }
}
