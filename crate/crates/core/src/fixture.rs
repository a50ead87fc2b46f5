//! Binary cache fixture ("KDNF") used for golden files and CLI output:
//!
//! `"KDNF" | n_layers, n_heads, d_head, vocab_size, rope_base, n_tokens (u16 LE)
//!  | K (pre-rotation) | V | hidden states` — all f32 LE, K/V in
//! (layer, head, token, dim) order, states in (token, dim) order.

use thiserror::Error;

use crate::model::{HiddenStates, KvCache, ModelConfig};

pub const FIXTURE_MAGIC: &[u8; 4] = b"KDNF";

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("not a KDNF fixture")]
    BadMagic,
    #[error("fixture is {actual} bytes, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("{field} = {value} does not fit the fixture's u16 header")]
    TooLarge { field: &'static str, value: f64 },
    #[error("fixture payload does not match its header: {0}")]
    Inconsistent(String),
}

/// Decoded fixture contents.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub config: ModelConfig,
    pub cache: KvCache,
    pub states: HiddenStates,
}

fn to_u16(field: &'static str, value: f64) -> Result<u16, FixtureError> {
    if value >= 0.0 && value <= u16::MAX as f64 && value.fract() == 0.0 {
        Ok(value as u16)
    } else {
        Err(FixtureError::TooLarge { field, value })
    }
}

/// Serializes a cache and its hidden states. Values are narrowed to f32.
pub fn write_fixture(
    config: &ModelConfig,
    cache: &KvCache,
    states: &HiddenStates,
) -> Result<Vec<u8>, FixtureError> {
    if cache.geometry() != config.geometry()
        || states.n_tokens() != cache.n_tokens()
        || states.d_model() != config.d_model()
    {
        return Err(FixtureError::Inconsistent(
            "cache, states and config disagree".into(),
        ));
    }
    let header = [
        to_u16("n_layers", config.n_layers as f64)?,
        to_u16("n_heads", config.n_heads as f64)?,
        to_u16("d_head", config.d_head as f64)?,
        to_u16("vocab_size", config.vocab_size as f64)?,
        to_u16("rope_base", config.rope_base)?,
        to_u16("n_tokens", cache.n_tokens() as f64)?,
    ];
    let mut out = Vec::with_capacity(16 + 4 * (cache.k().len() * 2 + states.as_slice().len()));
    out.extend_from_slice(FIXTURE_MAGIC);
    for h in header {
        out.extend_from_slice(&h.to_le_bytes());
    }
    for x in cache.k().iter().chain(cache.v()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for &x in states.as_slice() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn read_fixture(bytes: &[u8]) -> Result<Fixture, FixtureError> {
    if bytes.len() < 16 {
        return Err(FixtureError::Length {
            expected: 16,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != FIXTURE_MAGIC {
        return Err(FixtureError::BadMagic);
    }
    let field = |i: usize| u16::from_le_bytes([bytes[4 + 2 * i], bytes[5 + 2 * i]]) as usize;
    let mut config = ModelConfig::new(field(0), field(1), field(2), field(3));
    config.rope_base = field(4) as f64;
    let n = field(5);
    let kv_len = config.n_layers * config.n_heads * n * config.d_head;
    let st_len = n * config.d_model();
    let expected = 16 + 4 * (2 * kv_len + st_len);
    if bytes.len() != expected {
        return Err(FixtureError::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let floats: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let k = floats[..kv_len].to_vec();
    let v = floats[kv_len..2 * kv_len].to_vec();
    let states = floats[2 * kv_len..].iter().map(|&x| x as f64).collect();
    let cache = KvCache::from_parts(config.geometry(), n, 0, k, v)
        .map_err(|e| FixtureError::Inconsistent(e.to_string()))?;
    let states = HiddenStates::from_rows(config.d_model(), states);
    Ok(Fixture {
        config,
        cache,
        states,
    })
}
