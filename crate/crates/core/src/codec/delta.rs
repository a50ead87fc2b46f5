//! Anchor/delta coding of quantization codes.
//!
//! The stream walks `(layer, head, channel, token)`. The first token of every
//! anchor window is emitted raw; every other token is emitted as the
//! difference from the previous token's code, wrapped into the signed range
//! `[-2^(bits-1), 2^(bits-1))`. Decoding adds modulo `2^bits`, so every value
//! in the stream fits in `bits` bits.

use crate::model::Geometry;

use super::quant::QuantizedCache;

fn wrap_signed(diff: i32, bits: u8) -> i32 {
    let m = 1i32 << bits;
    let d = diff.rem_euclid(m);
    if d >= m / 2 {
        d - m
    } else {
        d
    }
}

/// Encodes one tensor's codes (cache layout) into the channel-major stream.
pub fn delta_encode_codes(
    codes: &[u16],
    geometry: Geometry,
    n_tokens: usize,
    bits: u8,
    anchor_stride: usize,
    out: &mut Vec<i32>,
) {
    let d = geometry.d_head;
    for lane in 0..geometry.n_layers * geometry.n_heads {
        let base = lane * n_tokens * d;
        for c in 0..d {
            for t in 0..n_tokens {
                let code = codes[base + t * d + c] as i32;
                if t % anchor_stride == 0 {
                    out.push(code);
                } else {
                    let prev = codes[base + (t - 1) * d + c] as i32;
                    out.push(wrap_signed(code - prev, bits));
                }
            }
        }
    }
}

/// Inverse of [`delta_encode_codes`]; consumes exactly one tensor from `stream`.
pub fn delta_decode_codes(
    stream: &[i32],
    geometry: Geometry,
    n_tokens: usize,
    bits: u8,
    anchor_stride: usize,
) -> Vec<u16> {
    let d = geometry.d_head;
    let m = 1i32 << bits;
    let mut codes = vec![0u16; stream.len()];
    let mut it = stream.iter();
    for lane in 0..geometry.n_layers * geometry.n_heads {
        let base = lane * n_tokens * d;
        for c in 0..d {
            let mut prev = 0i32;
            for t in 0..n_tokens {
                let s = *it.next().expect("stream length matches geometry");
                let code = if t % anchor_stride == 0 {
                    s.rem_euclid(m)
                } else {
                    (prev + s).rem_euclid(m)
                };
                codes[base + t * d + c] = code as u16;
                prev = code;
            }
        }
    }
    codes
}

/// K stream followed by V stream.
pub fn delta_encode(q: &QuantizedCache, anchor_stride: usize) -> Vec<i32> {
    let mut out = Vec::with_capacity(q.k.codes.len() * 2);
    for t in [&q.k, &q.v] {
        delta_encode_codes(&t.codes, q.geometry, q.n_tokens, q.bits, anchor_stride, &mut out);
    }
    out
}

/// Recovers `(k_codes, v_codes)` from a [`delta_encode`] stream.
pub fn delta_decode(
    stream: &[i32],
    geometry: Geometry,
    n_tokens: usize,
    bits: u8,
    anchor_stride: usize,
) -> (Vec<u16>, Vec<u16>) {
    let half = stream.len() / 2;
    (
        delta_decode_codes(&stream[..half], geometry, n_tokens, bits, anchor_stride),
        delta_decode_codes(&stream[half..], geometry, n_tokens, bits, anchor_stride),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: Geometry = Geometry {
        n_layers: 1,
        n_heads: 1,
        d_head: 1,
    };

    fn enc(codes: &[u16], bits: u8, stride: usize) -> Vec<i32> {
        let mut out = Vec::new();
        delta_encode_codes(codes, ONE, codes.len(), bits, stride, &mut out);
        out
    }

    #[test]
    fn constant_lane() {
        assert_eq!(enc(&[7, 7, 7, 7], 8, 16), vec![7, 0, 0, 0]);
    }

    #[test]
    fn stride_one_is_identity() {
        let codes = [3u16, 200, 17, 255, 0];
        assert_eq!(enc(&codes, 8, 1), vec![3, 200, 17, 255, 0]);
    }

    #[test]
    fn anchors_restart_windows() {
        assert_eq!(enc(&[1, 2, 4, 4, 9], 8, 2), vec![1, 1, 4, 0, 9]);
    }

    #[test]
    fn deltas_wrap_into_signed_range() {
        // 0 -> 255 is +255, wrapped to -1; 15 -> 0 in 4 bits is -15, wrapped to +1.
        assert_eq!(enc(&[0, 255], 8, 16), vec![0, -1]);
        assert_eq!(enc(&[15, 0], 4, 16), vec![15, 1]);
        let s = enc(&[15, 0, 8, 7], 4, 16);
        assert!(s[1..].iter().all(|d| (-8..8).contains(d)));
        assert_eq!(delta_decode_codes(&s, ONE, 4, 4, 16), vec![15, 0, 8, 7]);
    }

    #[test]
    fn channel_major_order() {
        let g = Geometry {
            n_layers: 1,
            n_heads: 1,
            d_head: 2,
        };
        // tokens (t0: [1, 10], t1: [2, 12])
        let mut out = Vec::new();
        delta_encode_codes(&[1, 10, 2, 12], g, 2, 8, 16, &mut out);
        assert_eq!(out, vec![1, 1, 10, 2]);
        assert_eq!(delta_decode_codes(&out, g, 2, 8, 16), vec![1, 10, 2, 12]);
    }
}
