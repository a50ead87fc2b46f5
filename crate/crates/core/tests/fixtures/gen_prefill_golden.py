"""Straight-line recomputation of the reference model's prefill, written
independently of the Rust code. Writes a KDNF fixture:

    "KDNF" | n_layers, n_heads, d_head, vocab_size, rope_base, n_tokens (u16 LE)
           | K (pre-rotation) | V | final hidden states   (f32 LE)

K and V are laid out (layer, head, token, dim); states are (token, dim).
"""
import math
import struct
import sys

import numpy as np

L, H, D, VOCAB, BASE = 2, 2, 4, 32, 10000
TOKENS = [1, 2, 3]
DM = H * D


def w(tag, i, j, fan_in):
    return 0.5 * math.sin(0.37 * (977 * tag + 131 * i + 7 * j + 1)) / math.sqrt(fan_in)


def mat(tag, rows, cols):
    return np.array([[w(tag, i, j, rows) for j in range(cols)] for i in range(rows)])


def rope(v, pos):
    out = v.copy()
    for i in range(D // 2):
        a = pos * BASE ** (-2.0 * i / D)
        c, s = math.cos(a), math.sin(a)
        out[2 * i] = v[2 * i] * c - v[2 * i + 1] * s
        out[2 * i + 1] = v[2 * i] * s + v[2 * i + 1] * c
    return out


def main(path):
    n = len(TOKENS)
    x = np.array([[math.sin(0.61 * (31 * v + j + 1)) for j in range(DM)] for v in TOKENS])
    K = np.zeros((L, H, n, D), dtype=np.float32)
    V = np.zeros((L, H, n, D), dtype=np.float32)
    for l in range(L):
        delta = np.zeros_like(x)
        for h in range(H):
            tag = l * 64 + h * 4
            wq, wk, wv, wo = mat(tag, DM, D), mat(tag + 1, DM, D), mat(tag + 2, DM, D), mat(tag + 3, D, DM)
            K[l, h] = (x @ wk).astype(np.float32)
            V[l, h] = (x @ wv).astype(np.float32)
            keys = [rope(K[l, h, s].astype(np.float64), s) for s in range(n)]
            for t in range(n):
                q = rope(x[t] @ wq, t)
                sc = np.array([q @ keys[s] / math.sqrt(D) for s in range(t + 1)])
                p = np.exp(sc - sc.max())
                p /= p.sum()
                head = sum(p[s] * V[l, h, s].astype(np.float64) for s in range(t + 1))
                delta[t] += head @ wo
        x = x + delta
    with open(path, "wb") as f:
        f.write(b"KDNF")
        f.write(struct.pack("<6H", L, H, D, VOCAB, BASE, n))
        f.write(K.astype("<f4").tobytes())
        f.write(V.astype("<f4").tobytes())
        f.write(x.astype("<f4").tobytes())


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "prefill_l2h2d4_tokens123.kdnf")
