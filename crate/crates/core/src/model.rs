//! Deterministic attention-only reference transformer.
//!
//! Weights are closed-form functions of their indices, so two builds of the
//! same [`ModelConfig`] are bit-identical on any platform with a correctly
//! rounded `sin`. Each layer is `X <- X + MultiHeadAttn(X)` with rotary
//! position encoding applied to Q and K at attention time. Keys are stored
//! *before* rotation, which makes moving a cache to a new start position exact.
//!
//! Caches are stored as `f32`; attention accumulates in `f64` and always reads
//! the stored `f32` rows, so a cache extended incrementally is bit-identical to
//! one produced by a single prefill.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: usize },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
}

fn default_rope_base() -> f64 {
    10000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

impl ModelConfig {
    pub fn new(n_layers: usize, n_heads: usize, d_head: usize, vocab_size: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_head,
            vocab_size,
            rope_base: default_rope_base(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_head: self.d_head,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 || self.vocab_size == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "all dimensions must be nonzero: {self:?}"
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(ModelError::InvalidConfig(format!(
                "d_head must be even for rotary pairs, got {}",
                self.d_head
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "rope_base must be finite and > 1, got {}",
                self.rope_base
            )));
        }
        Ok(())
    }

    /// 64-bit identifier: the first eight bytes (little-endian) of
    /// SHA-256("KDNMODEL" | n_layers | n_heads | d_head | vocab_size as u32 LE | rope_base f64 LE).
    pub fn model_id(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"KDNMODEL");
        for v in [self.n_layers, self.n_heads, self.d_head, self.vocab_size] {
            h.update((v as u32).to_le_bytes());
        }
        h.update(self.rope_base.to_le_bytes());
        let digest = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }
}

/// Per-layer/per-head shape shared by a model and every cache it produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
}

impl Geometry {
    pub fn elements_per_token(&self) -> usize {
        self.n_layers * self.n_heads * self.d_head
    }
}

/// Projection role inside a head; its discriminant enters the weight tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Q = 0,
    K = 1,
    V = 2,
    O = 3,
}

/// `W_tag[i][j] = 0.5 * sin(0.37 * (977*tag + 131*i + 7*j + 1)) / sqrt(fan_in)`
pub fn weight_value(tag: usize, i: usize, j: usize, fan_in: usize) -> f64 {
    let arg = 977.0 * tag as f64 + 131.0 * i as f64 + 7.0 * j as f64 + 1.0;
    0.5 * (0.37 * arg).sin() / (fan_in as f64).sqrt()
}

pub fn weight_tag(layer: usize, head: usize, role: Role) -> usize {
    layer * 64 + head * 4 + role as usize
}

/// `E[v][j] = sin(0.61 * (31*v + j + 1))`
pub fn embedding_value(token: usize, j: usize) -> f64 {
    (0.61 * (31.0 * token as f64 + j as f64 + 1.0)).sin()
}

/// KV cache laid out as `(layer, head, token, dim)`, keys stored pre-rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    geometry: Geometry,
    n_tokens: usize,
    start_pos: u64,
    k: Vec<f32>,
    v: Vec<f32>,
}

impl KvCache {
    pub fn empty(geometry: Geometry, start_pos: u64) -> Self {
        Self {
            geometry,
            n_tokens: 0,
            start_pos,
            k: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn zeros(geometry: Geometry, n_tokens: usize, start_pos: u64) -> Self {
        let len = geometry.elements_per_token() * n_tokens;
        Self {
            geometry,
            n_tokens,
            start_pos,
            k: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Builds a cache from flat `(layer, head, token, dim)` arrays.
    pub fn from_parts(
        geometry: Geometry,
        n_tokens: usize,
        start_pos: u64,
        k: Vec<f32>,
        v: Vec<f32>,
    ) -> Result<Self, ModelError> {
        let want = geometry.elements_per_token() * n_tokens;
        if k.len() != want || v.len() != want {
            return Err(ModelError::GeometryMismatch(format!(
                "expected {want} elements per tensor, got k={} v={}",
                k.len(),
                v.len()
            )));
        }
        Ok(Self {
            geometry,
            n_tokens,
            start_pos,
            k,
            v,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn start_pos(&self) -> u64 {
        self.start_pos
    }

    pub fn k(&self) -> &[f32] {
        &self.k
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn k_mut(&mut self) -> &mut [f32] {
        &mut self.k
    }

    pub fn v_mut(&mut self) -> &mut [f32] {
        &mut self.v
    }

    pub fn into_parts(self) -> (Vec<f32>, Vec<f32>) {
        (self.k, self.v)
    }

    #[inline]
    pub fn row_offset(&self, layer: usize, head: usize, token: usize) -> usize {
        ((layer * self.geometry.n_heads + head) * self.n_tokens + token) * self.geometry.d_head
    }

    pub fn k_row(&self, layer: usize, head: usize, token: usize) -> &[f32] {
        let o = self.row_offset(layer, head, token);
        &self.k[o..o + self.geometry.d_head]
    }

    pub fn v_row(&self, layer: usize, head: usize, token: usize) -> &[f32] {
        let o = self.row_offset(layer, head, token);
        &self.v[o..o + self.geometry.d_head]
    }

    pub fn k_row_mut(&mut self, layer: usize, head: usize, token: usize) -> &mut [f32] {
        let o = self.row_offset(layer, head, token);
        let d = self.geometry.d_head;
        &mut self.k[o..o + d]
    }

    pub fn v_row_mut(&mut self, layer: usize, head: usize, token: usize) -> &mut [f32] {
        let o = self.row_offset(layer, head, token);
        let d = self.geometry.d_head;
        &mut self.v[o..o + d]
    }

    /// Absolute position of row `token`.
    pub fn position(&self, token: usize) -> u64 {
        self.start_pos + token as u64
    }

    /// Moves the cache to a new start position. Stored keys are position-free,
    /// so nothing but the offset changes.
    pub fn rebase(mut self, new_start: u64) -> Self {
        self.start_pos = new_start;
        self
    }

    /// Copy of the token range; the slice starts at `start_pos + range.start`.
    pub fn slice_tokens(&self, range: Range<usize>) -> KvCache {
        assert!(range.start <= range.end && range.end <= self.n_tokens);
        let n = range.end - range.start;
        let mut out = KvCache::zeros(self.geometry, n, self.position(range.start));
        let d = self.geometry.d_head;
        for l in 0..self.geometry.n_layers {
            for h in 0..self.geometry.n_heads {
                let src = self.row_offset(l, h, range.start);
                let dst = out.row_offset(l, h, 0);
                out.k[dst..dst + n * d].copy_from_slice(&self.k[src..src + n * d]);
                out.v[dst..dst + n * d].copy_from_slice(&self.v[src..src + n * d]);
            }
        }
        out
    }

    /// Concatenates along the token axis. The result starts at the first
    /// part's start position; later parts' own offsets are ignored.
    pub fn concat(parts: &[KvCache]) -> Result<KvCache, ModelError> {
        let first = parts
            .first()
            .ok_or_else(|| ModelError::GeometryMismatch("nothing to concatenate".into()))?;
        let geometry = first.geometry;
        if let Some(bad) = parts.iter().find(|p| p.geometry != geometry) {
            return Err(ModelError::GeometryMismatch(format!(
                "{:?} vs {:?}",
                bad.geometry, geometry
            )));
        }
        let n: usize = parts.iter().map(|p| p.n_tokens).sum();
        let mut out = KvCache::zeros(geometry, n, first.start_pos);
        let d = geometry.d_head;
        for l in 0..geometry.n_layers {
            for h in 0..geometry.n_heads {
                let mut dst = out.row_offset(l, h, 0);
                for p in parts {
                    let src = p.row_offset(l, h, 0);
                    let len = p.n_tokens * d;
                    out.k[dst..dst + len].copy_from_slice(&p.k[src..src + len]);
                    out.v[dst..dst + len].copy_from_slice(&p.v[src..src + len]);
                    dst += len;
                }
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.k.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Largest absolute element-wise difference over K and V.
    pub fn max_abs_diff(&self, other: &KvCache) -> f64 {
        assert_eq!(self.geometry, other.geometry);
        assert_eq!(self.n_tokens, other.n_tokens);
        self.k
            .iter()
            .zip(&other.k)
            .chain(self.v.iter().zip(&other.v))
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.k
            .iter()
            .chain(&self.v)
            .map(|x| (*x as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// Residual stream after the final layer, one `d_model` row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    d_model: usize,
    data: Vec<f64>,
}

impl HiddenStates {
    pub fn empty(d_model: usize) -> Self {
        Self {
            d_model,
            data: Vec::new(),
        }
    }

    pub fn from_rows(d_model: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len() % d_model.max(1), 0);
        Self { d_model, data }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn n_tokens(&self) -> usize {
        self.data.len() / self.d_model
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.d_model..(t + 1) * self.d_model]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.d_model..(t + 1) * self.d_model]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn append(&mut self, other: &HiddenStates) {
        assert_eq!(self.d_model, other.d_model);
        self.data.extend_from_slice(&other.data);
    }

    pub fn slice_tokens(&self, range: Range<usize>) -> HiddenStates {
        Self {
            d_model: self.d_model,
            data: self.data[range.start * self.d_model..range.end * self.d_model].to_vec(),
        }
    }
}

/// The reference model. Immutable after [`Model::new`].
pub struct Model {
    config: ModelConfig,
    model_id: u64,
    /// `vocab x d_model`
    embed: Vec<f64>,
    /// Indexed by `layer * n_heads + head`; `d_model x d_head`.
    wq: Vec<Vec<f64>>,
    wk: Vec<Vec<f64>>,
    wv: Vec<Vec<f64>>,
    /// Indexed by `layer * n_heads + head`; `d_head x d_model`.
    wo: Vec<Vec<f64>>,
    inv_freq: Vec<f64>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("model_id", &format_args!("{:#018x}", self.model_id))
            .finish()
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d_model = config.d_model();
        let d_head = config.d_head;

        let mut embed = Vec::with_capacity(config.vocab_size * d_model);
        for v in 0..config.vocab_size {
            for j in 0..d_model {
                embed.push(embedding_value(v, j));
            }
        }

        let matrix = |tag: usize, rows: usize, cols: usize| -> Vec<f64> {
            let mut m = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    m.push(weight_value(tag, i, j, rows));
                }
            }
            m
        };

        let n = config.n_layers * config.n_heads;
        let (mut wq, mut wk, mut wv, mut wo) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for l in 0..config.n_layers {
            for h in 0..config.n_heads {
                wq.push(matrix(weight_tag(l, h, Role::Q), d_model, d_head));
                wk.push(matrix(weight_tag(l, h, Role::K), d_model, d_head));
                wv.push(matrix(weight_tag(l, h, Role::V), d_model, d_head));
                wo.push(matrix(weight_tag(l, h, Role::O), d_head, d_model));
            }
        }

        let inv_freq = (0..d_head / 2)
            .map(|i| config.rope_base.powf(-2.0 * i as f64 / d_head as f64))
            .collect();

        Ok(Self {
            model_id: config.model_id(),
            config,
            embed,
            wq,
            wk,
            wv,
            wo,
            inv_freq,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn model_id(&self) -> u64 {
        self.model_id
    }

    pub fn geometry(&self) -> Geometry {
        self.config.geometry()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model()
    }

    /// Weight matrix for `(layer, head, role)`, row-major `[in][out]`.
    pub fn weights(&self, layer: usize, head: usize, role: Role) -> &[f64] {
        let idx = layer * self.config.n_heads + head;
        match role {
            Role::Q => &self.wq[idx],
            Role::K => &self.wk[idx],
            Role::V => &self.wv[idx],
            Role::O => &self.wo[idx],
        }
    }

    pub fn embedding(&self, token: TokenId) -> &[f64] {
        let d = self.d_model();
        let t = token as usize;
        &self.embed[t * d..(t + 1) * d]
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&token) => Err(ModelError::TokenOutOfRange {
                token,
                vocab_size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    pub fn check_cache(&self, cache: &KvCache) -> Result<(), ModelError> {
        if cache.geometry() != self.geometry() {
            return Err(ModelError::GeometryMismatch(format!(
                "cache {:?} vs model {:?}",
                cache.geometry(),
                self.geometry()
            )));
        }
        Ok(())
    }

    /// Embedding rows for `tokens`, `n x d_model`.
    pub fn embed_tokens(&self, tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        self.check_tokens(tokens)?;
        let mut x = Vec::with_capacity(tokens.len() * self.d_model());
        for &t in tokens {
            x.extend_from_slice(self.embedding(t));
        }
        Ok(x)
    }

    fn project(&self, x: &[f64], w: &[f64], out_dim: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; out_dim];
        for (i, &xi) in x.iter().enumerate() {
            let row = &w[i * out_dim..(i + 1) * out_dim];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        out
    }

    /// Pre-rotation K and V rows of one head for the layer input `x`,
    /// rounded to storage precision.
    pub fn project_kv(&self, layer: usize, head: usize, x: &[f64]) -> (Vec<f32>, Vec<f32>) {
        let d = self.config.d_head;
        let k = self.project(x, self.weights(layer, head, Role::K), d);
        let v = self.project(x, self.weights(layer, head, Role::V), d);
        (
            k.into_iter().map(|a| a as f32).collect(),
            v.into_iter().map(|a| a as f32).collect(),
        )
    }

    /// Rotates adjacent pairs `(2i, 2i+1)` by `pos * base^(-2i/d_head)`.
    pub fn rotate(&self, vec: &mut [f64], pos: u64) {
        for (i, &freq) in self.inv_freq.iter().enumerate() {
            let angle = pos as f64 * freq;
            let (s, c) = angle.sin_cos();
            let (a, b) = (vec[2 * i], vec[2 * i + 1]);
            vec[2 * i] = a * c - b * s;
            vec[2 * i + 1] = a * s + b * c;
        }
    }

    /// Writes this layer's K/V rows for the given `(row, input)` pairs into `cache`.
    pub fn write_kv_rows<'a>(
        &self,
        layer: usize,
        cache: &mut KvCache,
        rows: impl IntoIterator<Item = (usize, &'a [f64])>,
    ) {
        for (t, x) in rows {
            for h in 0..self.config.n_heads {
                let (k, v) = self.project_kv(layer, h, x);
                cache.k_row_mut(layer, h, t).copy_from_slice(&k);
                cache.v_row_mut(layer, h, t).copy_from_slice(&v);
            }
        }
    }

    /// Multi-head attention output (after the output projection) for each
    /// query `(row, input)`. Each query attends causally over cache rows
    /// `0..=row` of `layer`, using the row positions recorded in the cache.
    pub fn attention(&self, layer: usize, cache: &KvCache, queries: &[(usize, &[f64])]) -> Vec<Vec<f64>> {
        let d = self.config.d_head;
        let d_model = self.d_model();
        let scale = 1.0 / (d as f64).sqrt();
        let max_row = queries.iter().map(|(t, _)| *t + 1).max().unwrap_or(0);
        let mut outputs = vec![vec![0.0f64; d_model]; queries.len()];

        for h in 0..self.config.n_heads {
            let mut keys = Vec::with_capacity(max_row * d);
            for s in 0..max_row {
                let mut k: Vec<f64> = cache.k_row(layer, h, s).iter().map(|&a| a as f64).collect();
                self.rotate(&mut k, cache.position(s));
                keys.extend_from_slice(&k);
            }
            let wq = self.weights(layer, h, Role::Q);
            let wo = self.weights(layer, h, Role::O);

            for (qi, (t, x)) in queries.iter().enumerate() {
                let mut q = self.project(x, wq, d);
                self.rotate(&mut q, cache.position(*t));

                let mut scores: Vec<f64> = (0..=*t)
                    .map(|s| {
                        let k = &keys[s * d..(s + 1) * d];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }

                let mut head_out = vec![0.0f64; d];
                for (s, p) in scores.iter().enumerate() {
                    let w = p / denom;
                    for (o, &vv) in head_out.iter_mut().zip(cache.v_row(layer, h, s)) {
                        *o += w * vv as f64;
                    }
                }
                let projected = self.project(&head_out, wo, d_model);
                for (o, p) in outputs[qi].iter_mut().zip(projected) {
                    *o += p;
                }
            }
        }
        outputs
    }

    /// Full prefill starting at absolute position 0.
    pub fn prefill(&self, tokens: &[TokenId]) -> Result<(KvCache, HiddenStates), ModelError> {
        self.prefill_at(tokens, 0)
    }

    /// Prefill with the first token at absolute position `start_pos`.
    pub fn prefill_at(
        &self,
        tokens: &[TokenId],
        start_pos: u64,
    ) -> Result<(KvCache, HiddenStates), ModelError> {
        let cache = KvCache::empty(self.geometry(), start_pos);
        self.extend(&cache, &HiddenStates::empty(self.d_model()), tokens)
    }

    /// Appends `new_tokens` to an existing prefix cache, computing only the
    /// new rows. The result equals a prefill of `prefix ++ new_tokens`.
    pub fn extend(
        &self,
        cache: &KvCache,
        prior_states: &HiddenStates,
        new_tokens: &[TokenId],
    ) -> Result<(KvCache, HiddenStates), ModelError> {
        self.check_cache(cache)?;
        if prior_states.d_model() != self.d_model() || prior_states.n_tokens() != cache.n_tokens() {
            return Err(ModelError::GeometryMismatch(format!(
                "prior states {}x{} do not match cache of {} tokens",
                prior_states.n_tokens(),
                prior_states.d_model(),
                cache.n_tokens()
            )));
        }
        let mut x = self.embed_tokens(new_tokens)?;
        let n0 = cache.n_tokens();
        let m = new_tokens.len();
        let d_model = self.d_model();

        let tail = KvCache::zeros(self.geometry(), m, cache.position(n0));
        let mut out = KvCache::concat(&[cache.clone(), tail])?;

        for l in 0..self.config.n_layers {
            self.write_kv_rows(
                l,
                &mut out,
                (0..m).map(|t| (n0 + t, &x[t * d_model..(t + 1) * d_model])),
            );
            let queries: Vec<(usize, &[f64])> = (0..m)
                .map(|t| (n0 + t, &x[t * d_model..(t + 1) * d_model]))
                .collect();
            let deltas = self.attention(l, &out, &queries);
            for (t, delta) in deltas.into_iter().enumerate() {
                for (xi, di) in x[t * d_model..(t + 1) * d_model].iter_mut().zip(delta) {
                    *xi += di;
                }
            }
        }

        let mut states = prior_states.clone();
        states.append(&HiddenStates::from_rows(d_model, x));
        Ok((out, states))
    }
}
