//! Composition of independently cached segments.
//!
//! Each segment is cached standalone at position 0. Concatenating those caches
//! after re-basing gives a cache whose later segments never attended to the
//! earlier ones. [`selective_blend`] repairs this by recomputing K/V for a
//! chosen fraction of tokens:
//!
//! 1. embed the whole concatenated sequence;
//! 2. run the first layer for every token (projections from embeddings plus
//!    causal attention) and score each token by the L2 deviation between the
//!    V rows its fresh first-layer output would produce in the next layer and
//!    the stale V rows stored there;
//! 3. pick the top `max(1, round(r * n))` tokens by score (ties to the lower
//!    index), always including the first and the last token;
//! 4. in every later layer, only selected tokens carry fresh hidden states;
//!    they overwrite their K/V rows and attend causally over the merged
//!    cache. All other rows stay exactly as re-based from their stale cache.
//!
//! With `r = 1` every row is recomputed and the result is a full prefill.

use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::codec::{decompress_cache, CodecError, CompressedChunk};
use crate::model::{HiddenStates, KvCache, Model, ModelError, TokenId};

#[derive(Debug, Error, PartialEq)]
pub enum BlendError {
    #[error("recompute ratio must be within [0, 1], got {0}")]
    RatioOutOfRange(f64),
    #[error("no segments to blend")]
    NoSegments,
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("broken chain: {0}")]
    BrokenChain(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// A piece of text with its standalone (position 0) cache.
#[derive(Debug, Clone)]
pub struct Segment {
    pub tokens: Vec<TokenId>,
    pub stale_cache: KvCache,
    /// Final hidden states of the standalone prefill, used as pass-through
    /// states for tokens that are not recomputed.
    pub stale_states: Option<HiddenStates>,
}

impl Segment {
    /// Prefills `tokens` on their own at position 0.
    pub fn prefill(model: &Model, tokens: &[TokenId]) -> Result<Self, BlendError> {
        let (cache, states) = model.prefill_at(tokens, 0)?;
        Ok(Self {
            tokens: tokens.to_vec(),
            stale_cache: cache,
            stale_states: Some(states),
        })
    }

    /// A segment whose cache came from the store, without a states sidecar.
    pub fn from_cache(tokens: Vec<TokenId>, cache: KvCache) -> Self {
        Self {
            tokens,
            stale_cache: cache,
            stale_states: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlendReport {
    pub recompute_ratio: f64,
    pub n_tokens: usize,
    pub selected: Vec<usize>,
    /// Per-token deviation score used for selection.
    pub scores: Vec<f64>,
    /// L2 distance between blended and oracle final hidden state of the last token.
    pub final_state_error: f64,
    /// Largest element deviation of the blended cache from the oracle cache.
    pub kv_error: f64,
    /// Largest absolute element of the oracle cache, for relative comparisons.
    pub oracle_max_abs: f64,
}

/// Output of [`blend`], before any comparison with the oracle.
#[derive(Debug, Clone)]
pub struct Blended {
    pub cache: KvCache,
    pub states: HiddenStates,
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
}

fn check_segments(model: &Model, segments: &[Segment]) -> Result<(), BlendError> {
    if segments.is_empty() {
        return Err(BlendError::NoSegments);
    }
    for (i, s) in segments.iter().enumerate() {
        model.check_tokens(&s.tokens)?;
        if s.stale_cache.geometry() != model.geometry() {
            return Err(BlendError::GeometryMismatch(format!(
                "segment {i}: cache {:?} vs model {:?}",
                s.stale_cache.geometry(),
                model.geometry()
            )));
        }
        if s.stale_cache.n_tokens() != s.tokens.len() {
            return Err(BlendError::GeometryMismatch(format!(
                "segment {i}: {} cache rows for {} tokens",
                s.stale_cache.n_tokens(),
                s.tokens.len()
            )));
        }
        if let Some(st) = &s.stale_states {
            if st.n_tokens() != s.tokens.len() || st.d_model() != model.d_model() {
                return Err(BlendError::GeometryMismatch(format!(
                    "segment {i}: states are {}x{}",
                    st.n_tokens(),
                    st.d_model()
                )));
            }
        }
    }
    Ok(())
}

/// Concatenates the segments' caches with no recomputation; segment `i` is
/// re-based to start where segment `i - 1` ends. Returns the token range of
/// each segment.
pub fn concat_stale(model: &Model, segments: &[Segment]) -> Result<(KvCache, Vec<Range<usize>>), BlendError> {
    check_segments(model, segments)?;
    let mut offset = 0usize;
    let mut bounds = Vec::with_capacity(segments.len());
    let mut parts = Vec::with_capacity(segments.len());
    for s in segments {
        let n = s.tokens.len();
        parts.push(s.stale_cache.clone().rebase(offset as u64));
        bounds.push(offset..offset + n);
        offset += n;
    }
    Ok((KvCache::concat(&parts)?.rebase(0), bounds))
}

/// Number of tokens recomputed for ratio `r` over `n` tokens.
pub fn selection_budget(r: f64, n: usize) -> usize {
    if r <= 0.0 || n == 0 {
        return 0;
    }
    let forced = if n >= 2 { 2 } else { 1 };
    ((r * n as f64).round() as usize).max(1).max(forced).min(n)
}

/// Top-`k` indices by score, always containing 0 and `n - 1`; ties go to the
/// lower index. Returned in ascending order.
pub fn select_tokens(scores: &[f64], k: usize) -> Vec<usize> {
    let n = scores.len();
    if k == 0 || n == 0 {
        return Vec::new();
    }
    let mut chosen = vec![false; n];
    chosen[0] = true;
    chosen[n - 1] = true;
    let mut count = chosen.iter().filter(|c| **c).count();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for i in order {
        if count >= k {
            break;
        }
        if !chosen[i] {
            chosen[i] = true;
            count += 1;
        }
    }
    (0..n).filter(|&i| chosen[i]).collect()
}

/// Blends `segments` recomputing a fraction `ratio` of tokens.
pub fn blend(model: &Model, segments: &[Segment], ratio: f64) -> Result<Blended, BlendError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(BlendError::RatioOutOfRange(ratio));
    }
    let (mut merged, _) = concat_stale(model, segments)?;
    let tokens: Vec<TokenId> = segments.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let n = tokens.len();
    let d_model = model.d_model();
    let n_layers = model.config().n_layers;
    let n_heads = model.config().n_heads;

    // First layer, every token.
    let mut x = model.embed_tokens(&tokens)?;
    let row = |x: &Vec<f64>, t: usize| x[t * d_model..(t + 1) * d_model].to_vec();
    model.write_kv_rows(
        0,
        &mut merged,
        (0..n).map(|t| (t, &x[t * d_model..(t + 1) * d_model])),
    );
    let queries: Vec<(usize, &[f64])> = (0..n).map(|t| (t, &x[t * d_model..(t + 1) * d_model])).collect();
    let deltas = model.attention(0, &merged, &queries);
    for (t, delta) in deltas.into_iter().enumerate() {
        for (xi, di) in x[t * d_model..(t + 1) * d_model].iter_mut().zip(delta) {
            *xi += di;
        }
    }

    let scores: Vec<f64> = if n_layers >= 2 {
        (0..n)
            .map(|t| {
                let xt = &x[t * d_model..(t + 1) * d_model];
                let mut sq = 0.0f64;
                for h in 0..n_heads {
                    let (_, v) = model.project_kv(1, h, xt);
                    for (a, b) in v.iter().zip(merged.v_row(1, h, t)) {
                        let d = *a as f64 - *b as f64;
                        sq += d * d;
                    }
                }
                sq.sqrt()
            })
            .collect()
    } else {
        vec![0.0; n]
    };

    let selected = select_tokens(&scores, selection_budget(ratio, n));
    let mut fresh: Vec<Vec<f64>> = selected.iter().map(|&t| row(&x, t)).collect();

    for l in 1..n_layers {
        model.write_kv_rows(
            l,
            &mut merged,
            selected.iter().zip(&fresh).map(|(&t, xs)| (t, xs.as_slice())),
        );
        let queries: Vec<(usize, &[f64])> = selected
            .iter()
            .zip(&fresh)
            .map(|(&t, xs)| (t, xs.as_slice()))
            .collect();
        let deltas = model.attention(l, &merged, &queries);
        for (xs, delta) in fresh.iter_mut().zip(deltas) {
            for (xi, di) in xs.iter_mut().zip(delta) {
                *xi += di;
            }
        }
    }

    // Pass-through states for tokens that were not recomputed: the standalone
    // final states when available, otherwise the fresh first-layer output.
    let mut states = Vec::with_capacity(n * d_model);
    let mut t = 0;
    for s in segments {
        for i in 0..s.tokens.len() {
            match &s.stale_states {
                Some(st) => states.extend_from_slice(st.row(i)),
                None => states.extend_from_slice(&x[t * d_model..(t + 1) * d_model]),
            }
            t += 1;
        }
    }
    let mut states = HiddenStates::from_rows(d_model, states);
    for (&t, xs) in selected.iter().zip(&fresh) {
        states.row_mut(t).copy_from_slice(xs);
    }

    Ok(Blended {
        cache: merged,
        states,
        selected,
        scores,
    })
}

/// Runs [`blend`] and measures it against a full prefill of the concatenation.
pub fn selective_blend(
    model: &Model,
    segments: &[Segment],
    ratio: f64,
) -> Result<(KvCache, HiddenStates, BlendReport), BlendError> {
    let blended = blend(model, segments, ratio)?;
    let tokens: Vec<TokenId> = segments.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let (oracle, oracle_states) = model.prefill(&tokens)?;
    let report = measure(&blended, &oracle, &oracle_states, ratio);
    Ok((blended.cache, blended.states, report))
}

fn measure(blended: &Blended, oracle: &KvCache, oracle_states: &HiddenStates, ratio: f64) -> BlendReport {
    let n = oracle.n_tokens();
    let final_state_error = if n == 0 {
        0.0
    } else {
        blended
            .states
            .row(n - 1)
            .iter()
            .zip(oracle_states.row(n - 1))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    BlendReport {
        recompute_ratio: ratio,
        n_tokens: n,
        selected: blended.selected.clone(),
        scores: blended.scores.clone(),
        final_state_error,
        kv_error: blended.cache.max_abs_diff(oracle),
        oracle_max_abs: oracle.max_abs(),
    }
}

/// Exact-prefix reuse: decompress consecutive chain chunks, then extend over
/// the uncached suffix. Returns the cache for the whole text and the hidden
/// states of the suffix tokens (prefix states are not stored).
pub fn prefix_extend_path(
    model: &Model,
    hits: &[CompressedChunk],
    miss_suffix: &[TokenId],
) -> Result<(KvCache, HiddenStates), BlendError> {
    let mut parts = Vec::with_capacity(hits.len());
    let mut next = 0u64;
    for (i, chunk) in hits.iter().enumerate() {
        let c = decompress_cache(chunk)?;
        model.check_cache(&c)?;
        if c.start_pos() != next {
            return Err(BlendError::BrokenChain(format!(
                "chunk {i} starts at {} but the previous chunk ends at {next}",
                c.start_pos()
            )));
        }
        next += c.n_tokens() as u64;
        parts.push(c);
    }
    let prefix = if parts.is_empty() {
        KvCache::empty(model.geometry(), 0)
    } else {
        KvCache::concat(&parts)?
    };
    let n0 = prefix.n_tokens();
    // Prefix states only pad the output; suffix rows never read them.
    let placeholder = HiddenStates::from_rows(model.d_model(), vec![0.0; n0 * model.d_model()]);
    let (cache, states) = model.extend(&prefix, &placeholder, miss_suffix)?;
    Ok((cache, states.slice_tokens(n0..n0 + miss_suffix.len())))
}
