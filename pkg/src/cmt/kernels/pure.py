"""Pure-numpy kernels: the fallback backend for the hot inner-loop primitives.

All kernels take 2-D contiguous arrays (rows x features), accept float32 or
float64 storage, and accumulate internally in float64 before rounding back to
the storage dtype.  Keeping every reduction in float64 makes the rounded
result stable under permutations of summed terms, which the set-aggregation
invariants rely on.
"""

import numpy as np

BACKEND = "pure"


def softmax_fwd(x):
    x64 = x.astype(np.float64, copy=False)
    m = np.max(x64, axis=1, keepdims=True)
    e = np.exp(x64 - m)
    y = e / np.sum(e, axis=1, keepdims=True)
    return y.astype(x.dtype, copy=False)


def softmax_bwd(y, gy):
    y64 = y.astype(np.float64, copy=False)
    gy64 = gy.astype(np.float64, copy=False)
    dot = np.sum(y64 * gy64, axis=1, keepdims=True)
    gx = y64 * (gy64 - dot)
    return gx.astype(y.dtype, copy=False)


def rmsnorm_fwd(x, eps):
    x64 = x.astype(np.float64, copy=False)
    inv = 1.0 / np.sqrt(np.mean(x64 * x64, axis=1) + eps)
    y = x64 * inv[:, None]
    return y.astype(x.dtype, copy=False), inv


def rmsnorm_bwd(y, inv, gy):
    y64 = y.astype(np.float64, copy=False)
    gy64 = gy.astype(np.float64, copy=False)
    mean_gy_y = np.mean(gy64 * y64, axis=1, keepdims=True)
    gx = inv[:, None] * (gy64 - y64 * mean_gy_y)
    return gx.astype(y.dtype, copy=False)


def rope_fwd(x, pos, base):
    """Rotate feature pairs (i, i + half) of each row by pos[row] * base^(-2i/dim)."""
    n, dim = x.shape
    half = dim // 2
    x64 = x.astype(np.float64, copy=False)
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / dim)
    ang = pos[:, None] * freqs[None, :]
    c, s = np.cos(ang), np.sin(ang)
    a, b = x64[:, :half], x64[:, half:]
    out = np.empty_like(x64)
    out[:, :half] = a * c - b * s
    out[:, half:] = a * s + b * c
    return out.astype(x.dtype, copy=False)


def silu_fwd(x):
    x64 = x.astype(np.float64, copy=False)
    y = x64 / (1.0 + np.exp(-x64))
    return y.astype(x.dtype, copy=False)


def silu_bwd(x, gy):
    x64 = x.astype(np.float64, copy=False)
    gy64 = gy.astype(np.float64, copy=False)
    s = 1.0 / (1.0 + np.exp(-x64))
    gx = gy64 * s * (1.0 + x64 * (1.0 - s))
    return gx.astype(x.dtype, copy=False)


def xent_fwd(logits, targets):
    """Per-row softmax cross-entropy.  Returns (loss rows, probs) for backward."""
    x64 = logits.astype(np.float64, copy=False)
    m = np.max(x64, axis=1, keepdims=True)
    e = np.exp(x64 - m)
    z = np.sum(e, axis=1, keepdims=True)
    probs = e / z
    rows = np.arange(logits.shape[0])
    loss = (m[:, 0] + np.log(z[:, 0])) - x64[rows, targets]
    return loss.astype(logits.dtype, copy=False), probs.astype(logits.dtype, copy=False)


def xent_bwd(probs, targets, gloss):
    p64 = probs.astype(np.float64, copy=False)
    g = p64 * gloss.astype(np.float64, copy=False)[:, None]
    rows = np.arange(probs.shape[0])
    g[rows, targets] -= gloss.astype(np.float64, copy=False)
    return g.astype(probs.dtype, copy=False)
