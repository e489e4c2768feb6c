"""Alignment network: memory matrix M* to per-layer cached key-value prefixes.

One shared self-attention block mixes the k memory rows, the rows are tiled
cyclically up to the prefix length p, and a separate biased two-layer MLP per
(layer, role) expands each row to H*d_h.  The biases matter: an all-zero M*
must still produce a deterministic nonzero prefix pattern.
"""

import math

import numpy as np

from . import autodiff as ad
from .lm import KVPrefix, _normal, _rms, _split_heads


def init_align_params(rng, cfg):
    d = cfg.d_model
    hidden = 2 * d
    out = cfg.n_heads * cfg.head_dim
    params = {
        "attn.ln": ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
        "attn.wq": _normal(rng, (d, d), 1.0 / math.sqrt(d)),
        "attn.wk": _normal(rng, (d, d), 1.0 / math.sqrt(d)),
        "attn.wv": _normal(rng, (d, d), 1.0 / math.sqrt(d)),
        "attn.wo": _normal(rng, (d, d), 1.0 / math.sqrt(2 * d)),
        "ff.ln": ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
        "ff.w1": _normal(rng, (d, hidden), 1.0 / math.sqrt(d)),
        "ff.w2": _normal(rng, (hidden, d), 1.0 / math.sqrt(2 * hidden)),
    }
    for l in range(cfg.n_layers):
        for role in ("key", "val"):
            params[f"head.l{l}.{role}.w1"] = _normal(rng, (d, hidden), 1.0 / math.sqrt(d))
            params[f"head.l{l}.{role}.b1"] = ad.Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True)
            params[f"head.l{l}.{role}.w2"] = _normal(rng, (hidden, out), 1.0 / math.sqrt(hidden))
            params[f"head.l{l}.{role}.b2"] = ad.Tensor(np.zeros(out, dtype=np.float32), requires_grad=True)
    return params


def align_states(params, cfg, mstar):
    """Graph-carrying alignment: (B, k, d) -> per layer (key, value) of (B, p, H, d_h)."""
    bsz, k, d = mstar.shape
    h, dh, p = cfg.n_heads, cfg.head_dim, cfg.prefix_len
    if (k, d) != (cfg.k, cfg.d_model):
        raise ValueError(f"memory shape ({k}, {d}) != config ({cfg.k}, {cfg.d_model})")

    x = mstar
    hx = _rms(x, params["attn.ln"], cfg.norm_eps)
    q = _split_heads(ad.matmul(hx, params["attn.wq"]), bsz, k, h, dh)
    key = _split_heads(ad.matmul(hx, params["attn.wk"]), bsz, k, h, dh)
    val = _split_heads(ad.matmul(hx, params["attn.wv"]), bsz, k, h, dh)
    scores = ad.scale(ad.matmul(q, ad.transpose(key, 2, 3)), 1.0 / math.sqrt(dh))
    out = ad.reshape(ad.transpose(ad.matmul(ad.softmax(scores), val), 1, 2), (bsz, k, d))
    x = ad.add(x, ad.matmul(out, params["attn.wo"]))
    hx = _rms(x, params["ff.ln"], cfg.norm_eps)
    x = ad.add(x, ad.matmul(ad.silu(ad.matmul(hx, params["ff.w1"])), params["ff.w2"]))

    rows = ad.take(x, np.arange(p) % k, axis=1)  # (B, p, d), cyclic tiling when p > k
    layers = []
    for l in range(cfg.n_layers):
        pair = []
        for role in ("key", "val"):
            y = ad.add(ad.matmul(rows, params[f"head.l{l}.{role}.w1"]), params[f"head.l{l}.{role}.b1"])
            y = ad.silu(y)
            y = ad.add(ad.matmul(y, params[f"head.l{l}.{role}.w2"]), params[f"head.l{l}.{role}.b2"])
            pair.append(ad.reshape(y, (bsz, p, h, dh)))
        layers.append(tuple(pair))
    return layers


def align(params, cfg, mstar):
    """Map one memory matrix (k, d) to a KVPrefix (no gradients)."""
    mstar = np.asarray(mstar, dtype=np.float32)
    with ad.no_grad():
        layers = align_states(params, cfg, ad.Tensor(mstar[None]))
    return KVPrefix(tuple((k.data[0], v.data[0]) for k, v in layers))
