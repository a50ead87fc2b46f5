//! Per-group affine quantization.
//!
//! Each `(layer, head, channel)` lane is cut into groups of `group_size`
//! consecutive tokens. A group stores `zero = min` and
//! `scale = (max - min) / (2^bits - 1)` as `f32` (scale 1 when the group is
//! constant); codes are `round_half_even((x - zero) / scale)`.

use crate::model::{Geometry, KvCache};

use super::CodecError;

/// Quantized form of one tensor (K or V) of a cache.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    /// Indexed `((layer * n_heads + head) * d_head + channel) * n_groups + group`.
    pub scales: Vec<f32>,
    pub zeros: Vec<f32>,
    /// Codes in cache layout `(layer, head, token, dim)`.
    pub codes: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCache {
    pub geometry: Geometry,
    pub n_tokens: usize,
    pub start_pos: u64,
    pub bits: u8,
    pub group_size: usize,
    pub k: QuantTensor,
    pub v: QuantTensor,
}

impl QuantizedCache {
    pub fn n_groups(&self) -> usize {
        n_groups(self.n_tokens, self.group_size)
    }

    /// Index into `scales`/`zeros` for the group holding `token`.
    pub fn param_index(&self, layer: usize, head: usize, channel: usize, token: usize) -> usize {
        let g = self.geometry;
        ((layer * g.n_heads + head) * g.d_head + channel) * self.n_groups() + token / self.group_size
    }

    /// Dequantized value in full precision, before rounding to `f32`.
    pub fn reconstruct(&self, tensor: &QuantTensor, param: usize, code: u16) -> f64 {
        tensor.zeros[param] as f64 + code as f64 * tensor.scales[param] as f64
    }
}

pub fn n_groups(n_tokens: usize, group_size: usize) -> usize {
    n_tokens.div_ceil(group_size)
}

pub fn levels(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

fn quantize_tensor(
    data: &[f32],
    geometry: Geometry,
    n_tokens: usize,
    bits: u8,
    group_size: usize,
) -> QuantTensor {
    let d = geometry.d_head;
    let ng = n_groups(n_tokens, group_size);
    let lanes = geometry.n_layers * geometry.n_heads;
    let max_code = levels(bits) as f64;
    let mut scales = vec![0f32; lanes * d * ng];
    let mut zeros = vec![0f32; lanes * d * ng];
    let mut codes = vec![0u16; data.len()];

    for lane in 0..lanes {
        let base = lane * n_tokens * d;
        for c in 0..d {
            for g in 0..ng {
                let tokens = g * group_size..((g + 1) * group_size).min(n_tokens);
                let at = |t: usize| base + t * d + c;
                let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
                for t in tokens.clone() {
                    lo = lo.min(data[at(t)]);
                    hi = hi.max(data[at(t)]);
                }
                let mut scale = ((hi as f64 - lo as f64) / max_code) as f32;
                if hi == lo || scale <= 0.0 || !scale.is_finite() {
                    scale = 1.0;
                }
                let p = (lane * d + c) * ng + g;
                scales[p] = scale;
                zeros[p] = lo;
                for t in tokens {
                    let q = ((data[at(t)] as f64 - lo as f64) / scale as f64).round_ties_even();
                    codes[at(t)] = q.clamp(0.0, max_code) as u16;
                }
            }
        }
    }
    QuantTensor { scales, zeros, codes }
}

fn dequantize_tensor(q: &QuantizedCache, t: &QuantTensor) -> Vec<f32> {
    let d = q.geometry.d_head;
    let n = q.n_tokens;
    let ng = q.n_groups();
    let mut out = Vec::with_capacity(t.codes.len());
    for (i, &code) in t.codes.iter().enumerate() {
        let lane = i / (n * d);
        let tok = (i / d) % n;
        let c = i % d;
        let p = (lane * d + c) * ng + tok / q.group_size;
        out.push(q.reconstruct(t, p, code) as f32);
    }
    out
}

pub fn quantize(cache: &KvCache, bits: u8, group_size: usize) -> Result<QuantizedCache, CodecError> {
    if bits != 4 && bits != 8 {
        return Err(CodecError::InvalidProfile(format!(
            "quant_bits must be 4 or 8, got {bits}"
        )));
    }
    if group_size == 0 {
        return Err(CodecError::InvalidProfile("group_size must be >= 1".into()));
    }
    let bad = |data: &[f32]| data.iter().position(|x| !x.is_finite());
    if let Some(index) = bad(cache.k()).or_else(|| bad(cache.v())) {
        return Err(CodecError::NonFinite { index });
    }
    let geometry = cache.geometry();
    let n = cache.n_tokens();
    Ok(QuantizedCache {
        geometry,
        n_tokens: n,
        start_pos: cache.start_pos(),
        bits,
        group_size,
        k: quantize_tensor(cache.k(), geometry, n, bits, group_size),
        v: quantize_tensor(cache.v(), geometry, n, bits, group_size),
    })
}

pub fn dequantize(q: &QuantizedCache) -> KvCache {
    KvCache::from_parts(
        q.geometry,
        q.n_tokens,
        q.start_pos,
        dequantize_tensor(q, &q.k),
        dequantize_tensor(q, &q.v),
    )
    .expect("quantized tensors carry cache geometry")
}
