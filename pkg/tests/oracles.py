"""Independent reference implementations used as test oracles.

Nothing here calls into the package's math: everything is either scalar
float32 loops, float64 numpy, or exact rational arithmetic.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def naive_matmul_f32(a, b):
    """Triple loop, float32 scalars, accumulation in index order."""
    a = np.asarray(a, np.float32)
    b = np.asarray(b, np.float32)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for p in range(k):
                acc = np.float32(acc + np.float32(a[i, p] * b[p, j]))
            out[i, j] = acc
    return out


def two_pass_layernorm(x, gain, bias, eps):
    x = [float(v) for v in x]
    n = len(x)
    mean = sum(x) / n
    var = sum((v - mean) ** 2 for v in x) / n
    return np.array(
        [(v - mean) / math.sqrt(var + eps) * float(g) + float(b) for v, g, b in zip(x, gain, bias)]
    )


def column_sum_mean(x):
    x = np.asarray(x, np.float64)
    return np.array([math.fsum(x[:, j]) / x.shape[0] for j in range(x.shape[1])])


def exact_l1(x):
    return float(sum(abs(Fraction(float(v))) for v in np.asarray(x).ravel()))


# ---------------------------------------------------------------- transformer

def _ln64(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu64(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _softmax64(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _heads(x, n_heads):
    n, d = x.shape
    dh = d // n_heads
    return [x[:, h * dh:(h + 1) * dh] for h in range(n_heads)]


def dense_attention64(h, lw, n_heads):
    """Causal MHA without a cache, float64. Returns (output, per-head weight matrices)."""
    h = np.asarray(h, np.float64)
    q, k, v = (h @ np.asarray(w, np.float64) for w in (lw.wq, lw.wk, lw.wv))
    n = h.shape[0]
    dh = h.shape[1] // n_heads
    mask = np.tril(np.ones((n, n), bool))
    outs, weights = [], []
    for qh, kh, vh in zip(_heads(q, n_heads), _heads(k, n_heads), _heads(v, n_heads)):
        s = np.where(mask, qh @ kh.T / math.sqrt(dh), -np.inf)
        w = _softmax64(s)
        weights.append(w)
        outs.append(w @ vh)
    return np.concatenate(outs, axis=1) @ np.asarray(lw.wo, np.float64), weights


def cross_attention64(h0, rows, lw, n_heads):
    h0 = np.asarray(h0, np.float64)[None, :]
    rows = np.asarray(rows, np.float64)
    q = h0 @ np.asarray(lw.wq, np.float64)
    k = rows @ np.asarray(lw.wk, np.float64)
    v = rows @ np.asarray(lw.wv, np.float64)
    dh = q.shape[1] // n_heads
    outs = []
    for qh, kh, vh in zip(_heads(q, n_heads), _heads(k, n_heads), _heads(v, n_heads)):
        outs.append(_softmax64(qh @ kh.T / math.sqrt(dh)) @ vh)
    return (np.concatenate(outs, axis=1) @ np.asarray(lw.wo, np.float64))[0]


def two_track_attention64(h, rows, lw, n_heads):
    """Track 2 for every row, then row 0 swapped for BOS cross-attention."""
    out, _ = dense_attention64(h, lw, n_heads)
    out = out.copy()
    out[0] = cross_attention64(h[0], rows, lw, n_heads)
    return out


def block_tail64(h, attn, lw, eps):
    h = np.asarray(h, np.float64)
    f = lambda a: np.asarray(a, np.float64)
    m = _ln64(h + attn, f(lw.ln1_gain), f(lw.ln1_bias), eps)
    ff = _gelu64(m @ f(lw.w1) + f(lw.b1)) @ f(lw.w2) + f(lw.b2)
    return _ln64(m + ff, f(lw.ln2_gain), f(lw.ln2_bias), eps)


def reference_forward64(tokens, weights, sinktrack_layers=(), info_rows=None):
    """Whole-sequence forward, no cache. Returns (hidden per layer output, logits of every row)."""
    cfg = weights.config
    h = np.asarray(weights.embedding, np.float64)[np.asarray(tokens)]
    outs = []
    for layer, lw in enumerate(weights.layers):
        if layer in sinktrack_layers:
            attn = two_track_attention64(h, info_rows, lw, cfg.n_heads)
        else:
            attn, _ = dense_attention64(h, lw, cfg.n_heads)
        h = block_tail64(h, attn, lw, cfg.ln_eps)
        outs.append(h)
    logits = h @ np.asarray(weights.unembedding, np.float64)
    return outs, logits


# ---------------------------------------------------------------- statistics

def spearman_no_ties(x, y):
    """1 - 6 sum d^2 / (n (n^2 - 1)) in exact arithmetic, rounded once."""
    n = len(x)
    rank = lambda v: {i: r + 1 for r, i in enumerate(sorted(range(n), key=lambda i: v[i]))}
    rx, ry = rank(x), rank(y)
    d2 = sum((rx[i] - ry[i]) ** 2 for i in range(n))
    return float(1 - Fraction(6 * d2, n * (n * n - 1)))


# ---------------------------------------------------------------- prng

MASK64 = (1 << 64) - 1


def xoshiro256ss_py(seed, n):
    """Pure-int xoshiro256** seeded with SplitMix64 (reference algorithm)."""
    x = seed & MASK64
    s = []
    for _ in range(4):
        x = (x + 0x9E3779B97F4A7C15) & MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        s.append(z ^ (z >> 31))
    rotl = lambda v, k: ((v << k) | (v >> (64 - k))) & MASK64
    out = []
    for _ in range(n):
        out.append((rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64)
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out
