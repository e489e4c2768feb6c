"""Decoder-only transformer with rotary positions and key-value prefix injection.

The same pre-norm block stack serves the frozen base model and the document
compressor (separate parameter dicts, same code).  A KVPrefix supplies p extra
key/value slots per layer: prefix keys sit at rotary positions 0..p-1, real
tokens at p..p+T-1, so relative offsets between real tokens are independent of
prefix length.  Queries never originate from prefix slots and every query
position may attend to all of them.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .corpus import EOS

NEG_INF = float("-inf")


@dataclass
class KVPrefix:
    """Per-layer key/value blocks, each of shape (p, H, head_dim)."""

    layers: tuple

    def __post_init__(self):
        if not self.layers:
            raise ValueError("KVPrefix needs at least one layer")
        shapes = {kv.shape for pair in self.layers for kv in pair}
        if len(shapes) != 1:
            raise ValueError(f"prefix blocks must share one shape, got {shapes}")

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def p(self):
        return self.layers[0][0].shape[0]


def rope_rotate(vectors, positions, base=10000.0):
    """Rotate d_h-dim row vectors by their integer positions (numpy in/out)."""
    vectors = np.ascontiguousarray(vectors)
    positions = np.ascontiguousarray(np.asarray(positions, dtype=np.float64))
    if positions.shape != vectors.shape[:-1]:
        raise ValueError(f"positions shape {positions.shape} != {vectors.shape[:-1]}")
    rows = vectors.reshape(-1, vectors.shape[-1])
    return kernels.rope_fwd(rows, positions.reshape(-1), float(base)).reshape(vectors.shape)


def _normal(rng, shape, scale):
    return ad.Tensor(rng.normal(0.0, scale, size=shape).astype(np.float32), requires_grad=True)


def init_decoder_params(rng, cfg, n_layers, with_head):
    """Embedding + n_layers pre-norm blocks (+ untied output head for the LM)."""
    d, v = cfg.d_model, cfg.vocab_size
    hidden = 4 * d
    resid = 1.0 / math.sqrt(2 * n_layers)
    params = {"emb": _normal(rng, (v, d), 0.02)}
    for l in range(n_layers):
        params[f"l{l}.ln1"] = ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        params[f"l{l}.wq"] = _normal(rng, (d, d), 1.0 / math.sqrt(d))
        params[f"l{l}.wk"] = _normal(rng, (d, d), 1.0 / math.sqrt(d))
        params[f"l{l}.wv"] = _normal(rng, (d, d), 1.0 / math.sqrt(d))
        params[f"l{l}.wo"] = _normal(rng, (d, d), resid / math.sqrt(d))
        params[f"l{l}.ln2"] = ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        params[f"l{l}.w1"] = _normal(rng, (d, hidden), 1.0 / math.sqrt(d))
        params[f"l{l}.w2"] = _normal(rng, (hidden, d), resid / math.sqrt(hidden))
    params["lnf"] = ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    if with_head:
        params["head"] = _normal(rng, (d, v), 1.0 / math.sqrt(d))
    return params


def init_lm_params(rng, cfg):
    return init_decoder_params(rng, cfg, cfg.n_layers, with_head=True)


def _rms(x, gain, eps):
    return ad.mul(ad.rms_norm(x, eps), gain)


def _causal_mask(t, p, dtype):
    m = np.zeros((t, p + t), dtype=dtype)
    m[:, p:][np.triu_indices(t, 1)] = NEG_INF
    return ad.Tensor(m)


def _split_heads(x, b, t, h, dh):
    return ad.transpose(ad.reshape(x, (b, t, h, dh)), 1, 2)  # (B, H, T, dh)


def _block(params, l, cfg, x, prefix_kv):
    b, t, d = x.shape
    h, dh = cfg.n_heads, cfg.head_dim
    p = 0 if prefix_kv is None else prefix_kv[0].shape[1]

    hx = _rms(x, params[f"l{l}.ln1"], cfg.norm_eps)
    q = _split_heads(ad.matmul(hx, params[f"l{l}.wq"]), b, t, h, dh)
    k = _split_heads(ad.matmul(hx, params[f"l{l}.wk"]), b, t, h, dh)
    v = _split_heads(ad.matmul(hx, params[f"l{l}.wv"]), b, t, h, dh)

    pos = np.broadcast_to(np.arange(p, p + t), (b, h, t))
    q = ad.rope(q, pos, cfg.rope_base)
    k = ad.rope(k, pos, cfg.rope_base)
    if p:
        pk, pv = prefix_kv  # (B, p, H, dh)
        pk = ad.transpose(pk, 1, 2)
        pv = ad.transpose(pv, 1, 2)
        pk = ad.rope(pk, np.broadcast_to(np.arange(p), (b, h, p)), cfg.rope_base)
        k = ad.concat([pk, k], axis=2)
        v = ad.concat([pv, v], axis=2)

    scores = ad.scale(ad.matmul(q, ad.transpose(k, 2, 3)), 1.0 / math.sqrt(dh))
    scores = ad.add(scores, _causal_mask(t, p, x.dtype))
    out = ad.matmul(ad.softmax(scores), v)  # (B, H, T, dh)
    out = ad.reshape(ad.transpose(out, 1, 2), (b, t, d))
    x = ad.add(x, ad.matmul(out, params[f"l{l}.wo"]))

    hx = _rms(x, params[f"l{l}.ln2"], cfg.norm_eps)
    up = ad.silu(ad.matmul(hx, params[f"l{l}.w1"]))
    return ad.add(x, ad.matmul(up, params[f"l{l}.w2"]))


def decoder_hidden(params, cfg, n_layers, x, kv_prefix=None):
    """Run embedded input (B, T, d) through the block stack; returns normed (B, T, d)."""
    if kv_prefix is not None:
        if len(kv_prefix) != n_layers:
            raise ValueError(f"prefix has {len(kv_prefix)} layers, model has {n_layers}")
        for pk, pv in kv_prefix:
            if pk.shape != pv.shape or pk.shape[-2:] != (cfg.n_heads, cfg.head_dim):
                raise ValueError(f"prefix block shape {pk.shape} incompatible with config")
        if kv_prefix[0][0].shape[1] == 0:
            kv_prefix = None  # p=0 must be bit-identical to prefix-free
    for l in range(n_layers):
        x = _block(params, l, cfg, x, None if kv_prefix is None else kv_prefix[l])
    return _rms(x, params["lnf"], cfg.norm_eps)


def _prefix_tensors(kv_prefix, batch):
    if kv_prefix is None:
        return None
    if isinstance(kv_prefix, KVPrefix):
        if batch != 1:
            raise ValueError("a KVPrefix value applies to a single sequence")
        return [(ad.Tensor(k[None]), ad.Tensor(v[None])) for k, v in kv_prefix.layers]
    return kv_prefix


def lm_forward(params, cfg, tokens, kv_prefix=None):
    """Causal logits for token ids; (T,) -> (T, V), (B, T) -> (B, T, V)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    prefix = _prefix_tensors(kv_prefix, tokens.shape[0])
    x = ad.embedding(params["emb"], tokens)
    hid = decoder_hidden(params, cfg, cfg.n_layers, x, prefix)
    logits = ad.matmul(hid, params["head"])
    return logits[0] if single else logits


def generate_greedy(params, cfg, prompt_tokens, kv_prefix=None, max_new=16, stop_token=EOS):
    """Deterministic argmax continuation; argmax ties resolve to the lowest id."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    seq = [int(t) for t in prompt_tokens]
    out = []
    with ad.no_grad():
        for _ in range(max_new):
            logits = lm_forward(params, cfg, np.asarray(seq, dtype=np.int64), kv_prefix)
            nxt = int(np.argmax(logits.data[-1]))
            seq.append(nxt)
            out.append(nxt)
            if nxt == stop_token:
                break
    return out
