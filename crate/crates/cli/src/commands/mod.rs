pub mod bench;
pub mod blend;
pub mod cost;
pub mod store;

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use kdn_core::model::TokenId;
use kdn_core::{Model, ModelConfig};
use serde::de::DeserializeOwned;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let cfg: ModelConfig = read_json(path)?;
    Model::new(cfg).with_context(|| format!("model config {}", path.display()))
}

/// Token files hold whitespace-separated integer ids.
pub fn read_tokens(path: &Path) -> Result<Vec<TokenId>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .enumerate()
        .map(|(i, t)| {
            t.parse::<TokenId>().with_context(|| {
                format!(
                    "{}: token {} ({t:?}) is not a non-negative integer",
                    path.display(),
                    i + 1
                )
            })
        })
        .collect()
}
