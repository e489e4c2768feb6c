"""Document compressor: a small causal decoder that condenses token sequences.

k learnable condensed tokens are appended after the content (positions
n..n+k-1 for content length n) and the final normalized hidden states at
those k positions form the document's memory matrix M (k x d).  Queries are
compressed by exactly the same function with the same parameters.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import PAD
from .lm import _normal, decoder_hidden, init_decoder_params


@dataclass
class CondensedMemory:
    doc_id: int
    M: np.ndarray        # (k, d) float32
    pooled: np.ndarray   # (d,) float32, column-mean of M
    truncated: bool = False


def init_compressor_params(rng, cfg):
    params = init_decoder_params(rng, cfg, cfg.compressor_layers, with_head=False)
    params["soft"] = _normal(rng, (cfg.k, cfg.d_model), 0.02)
    return params


def pool_rows(m):
    """Column-mean of memory rows; identical arithmetic to the in-graph mean."""
    k = m.shape[0]
    return (m.astype(np.float64).sum(axis=0).astype(np.float32)) * np.float32(1.0 / k)


def compress_states(params, cfg, ids_batch):
    """Graph-carrying compression of a uniform-length id batch: (B, T) -> (B, k, d)."""
    ids_batch = np.asarray(ids_batch, dtype=np.int64)
    b, t = ids_batch.shape
    if t + cfg.k > cfg.context:
        raise ValueError(f"content length {t} exceeds budget {cfg.context - cfg.k}")
    soft = ad.reshape(
        ad.take(params["soft"], np.tile(np.arange(cfg.k), b), axis=0), (b, cfg.k, cfg.d_model)
    )
    if t:
        x = ad.concat([ad.embedding(params["emb"], ids_batch), soft], axis=1)
    else:
        x = soft
    hid = decoder_hidden(params, cfg, cfg.compressor_layers, x)
    return hid[:, t:, :]


def compress_states_ragged(params, cfg, ids_list):
    """Compression for per-sequence lengths; returns (B, k, d) in input order."""
    lengths = [len(ids) for ids in ids_list]
    if len(set(lengths)) <= 1:
        return compress_states(params, cfg, np.asarray(ids_list, dtype=np.int64))
    groups = {}
    for i, n in enumerate(lengths):
        groups.setdefault(n, []).append(i)
    parts, order = [], []
    for n in sorted(groups):
        idxs = groups[n]
        parts.append(compress_states(params, cfg, np.asarray([ids_list[i] for i in idxs], dtype=np.int64)))
        order.extend(idxs)
    stacked = ad.concat(parts, axis=0)
    inverse = np.argsort(np.asarray(order))
    return ad.take(stacked, inverse, axis=0)


def _prepare_ids(cfg, token_ids):
    ids = [int(t) for t in token_ids]
    while ids and ids[-1] == PAD:
        ids.pop()
    budget = cfg.context - cfg.k
    truncated = len(ids) > budget
    if truncated:
        ids = ids[:budget]
    return ids, truncated


def compress(params, cfg, token_ids, doc_id):
    """Condense one document's token ids into a CondensedMemory (no gradients)."""
    ids, truncated = _prepare_ids(cfg, token_ids)
    with ad.no_grad():
        m = compress_states(params, cfg, np.asarray([ids], dtype=np.int64)).data[0]
    if not np.all(np.isfinite(m)):
        raise ValueError(f"non-finite memory for doc {doc_id}")
    return CondensedMemory(doc_id=int(doc_id), M=m, pooled=pool_rows(m), truncated=truncated)


def compress_query(params, cfg, query_token_ids):
    """Same function, same parameters; queries get the sentinel doc_id -1."""
    return compress(params, cfg, query_token_ids, doc_id=-1)
