"""Set aggregation: cross-attention of a compressed query over memory units.

Stacked pre-norm blocks attend from the k query-memory rows to the
concatenated rows of the selected units.  Rotary positions restart at
n+1..n+k inside every unit (n = a nominal context offset), which makes the
output invariant to unit order while keeping row order inside a unit
meaningful.  A config flag switches to globally running key positions, which
trades away that set symmetry.  Only queries and keys are rotated, never
values.
"""

import math

import numpy as np

from . import autodiff as ad
from .lm import _normal, _rms, _split_heads, rope_rotate


def init_aggregator_params(rng, cfg):
    d = cfg.d_model
    hidden = 2 * d
    resid = 1.0 / math.sqrt(2 * cfg.aggregator_blocks)
    params = {}
    for b in range(cfg.aggregator_blocks):
        params[f"b{b}.lnq"] = ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        params[f"b{b}.lnu"] = ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        params[f"b{b}.wq"] = _normal(rng, (d, d), 1.0 / math.sqrt(d))
        params[f"b{b}.wk"] = _normal(rng, (d, d), 1.0 / math.sqrt(d))
        params[f"b{b}.wv"] = _normal(rng, (d, d), 1.0 / math.sqrt(d))
        params[f"b{b}.wo"] = _normal(rng, (d, d), resid / math.sqrt(d))
        params[f"b{b}.lnf"] = ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        params[f"b{b}.w1"] = _normal(rng, (d, hidden), 1.0 / math.sqrt(d))
        params[f"b{b}.w2"] = _normal(rng, (hidden, d), resid / math.sqrt(hidden))
    params["lnf"] = ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    return params


def unit_positions(k, n_units, base_offset, global_positions=False):
    """Rotary positions for the k query rows and the n_units*k key rows."""
    q_pos = np.arange(base_offset + 1, base_offset + k + 1)
    if global_positions:
        k_pos = np.arange(n_units * k) + base_offset + 1
    else:
        k_pos = np.tile(q_pos, n_units)
    return q_pos, k_pos


def apply_rope_to_qk(queries, keys, base_offset, base=10000.0, global_positions=False):
    """Rotate query rows (..., k, d_h) and per-unit key rows (..., S*k, d_h)."""
    k = queries.shape[-2]
    total = keys.shape[-2]
    if total % k != 0:
        raise ValueError(f"key rows {total} not a multiple of query rows {k}")
    q_pos, k_pos = unit_positions(k, total // k, base_offset, global_positions)
    q_rot = rope_rotate(queries, np.broadcast_to(q_pos, queries.shape[:-1]), base)
    k_rot = rope_rotate(keys, np.broadcast_to(k_pos, keys.shape[:-1]), base)
    return q_rot, k_rot


def aggregate_states(params, cfg, query_mem, units, use_rope=True):
    """Graph-carrying aggregation: queries (B, k, d) over shared units (S, k, d)."""
    bsz, k, d = query_mem.shape
    s = units.shape[0]
    h, dh = cfg.n_heads, cfg.head_dim
    if units.shape[1:] != (k, d):
        raise ValueError(f"unit shape {units.shape[1:]} != ({k}, {d})")
    flat = ad.reshape(units, (s * k, d))
    q_pos, k_pos = unit_positions(k, s, cfg.agg_base_offset, cfg.agg_global_positions)

    x = query_mem
    for b in range(cfg.aggregator_blocks):
        xq = _rms(x, params[f"b{b}.lnq"], cfg.norm_eps)
        un = _rms(flat, params[f"b{b}.lnu"], cfg.norm_eps)
        q = _split_heads(ad.matmul(xq, params[f"b{b}.wq"]), bsz, k, h, dh)
        key = ad.transpose(ad.reshape(ad.matmul(un, params[f"b{b}.wk"]), (s * k, h, dh)), 0, 1)
        val = ad.transpose(ad.reshape(ad.matmul(un, params[f"b{b}.wv"]), (s * k, h, dh)), 0, 1)
        if use_rope:
            q = ad.rope(q, np.broadcast_to(q_pos, (bsz, h, k)), cfg.rope_base)
            key = ad.rope(key, np.broadcast_to(k_pos, (h, s * k)), cfg.rope_base)
        scores = ad.scale(ad.matmul(q, ad.transpose(key, 1, 2)), 1.0 / math.sqrt(dh))
        out = ad.matmul(ad.softmax(scores), val)  # (B, H, k, dh)
        out = ad.reshape(ad.transpose(out, 1, 2), (bsz, k, d))
        x = ad.add(x, ad.matmul(out, params[f"b{b}.wo"]))
        xf = _rms(x, params[f"b{b}.lnf"], cfg.norm_eps)
        x = ad.add(x, ad.matmul(ad.silu(ad.matmul(xf, params[f"b{b}.w1"])), params[f"b{b}.w2"]))
    return _rms(x, params["lnf"], cfg.norm_eps)


def aggregate(params, cfg, query_memory, selected_units, use_rope=True):
    """Aggregate one query memory (k, d) over a unit list; returns M* (k, d)."""
    if len(selected_units) == 0:
        raise ValueError("empty selection: at least one memory unit required")
    query_memory = np.asarray(query_memory, dtype=np.float32)
    for u in selected_units:
        if np.asarray(u).shape != query_memory.shape:
            raise ValueError(f"unit shape {np.asarray(u).shape} != query {query_memory.shape}")
    with ad.no_grad():
        out = aggregate_states(
            params,
            cfg,
            ad.Tensor(query_memory[None]),
            ad.Tensor(np.stack(selected_units).astype(np.float32)),
            use_rope=use_rope,
        )
    return out.data[0]
