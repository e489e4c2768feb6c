"""Loss functions and the memory-aware logit adjustment.

The task loss is mean negative log-likelihood over answer positions only.
The memory-aware adjustment sharpens the contrast between the with-memory and
plain distributions, (1+a)*mem - a*plain, with the plain branch detached so
only the memory pathway receives gradient.  Self-matching pulls a query's
pooled memory toward its own document's; the uniformity term penalizes
pairwise collapse of stored memories.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class LossBreakdown:
    nll: float
    self_match: float
    uniformity: float
    total: float
    lambda_sm: float
    lambda_u: float

    def finite(self):
        return np.isfinite([self.nll, self.self_match, self.uniformity, self.total]).all()


def nll_loss(logits, target_ids, answer_mask):
    """Mean NLL over masked positions; logits (T, V) or (B, T, V)."""
    mask = np.asarray(answer_mask, dtype=bool)
    if mask.shape != logits.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} != logit positions {logits.shape[:-1]}")
    idx = np.flatnonzero(mask.reshape(-1))
    if idx.size == 0:
        raise ValueError("answer mask selects no positions")
    targets = np.asarray(target_ids, dtype=np.int64).reshape(-1)[idx]
    rows = ad.take(ad.reshape(logits, (-1, logits.shape[-1])), idx, axis=0)
    return ad.reduce_mean(ad.cross_entropy_rows(rows, targets))


def memory_aware_adjust(logits_mem, logits_plain, alpha):
    """(1+a)*logits_mem - a*logits_plain; the plain branch carries no gradient."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if not isinstance(logits_plain, ad.Tensor):
        logits_plain = ad.Tensor(np.asarray(logits_plain, dtype=logits_mem.dtype))
    if logits_plain.shape != logits_mem.shape:
        raise ad.ShapeError(
            "memory_aware_adjust",
            f"logit shapes differ: {logits_mem.shape} vs {logits_plain.shape}",
        )
    return ad.add(ad.scale(logits_mem, 1.0 + alpha), ad.scale(logits_plain.detach(), -alpha))


def _cos_pair(a, b):
    return ad.cosine_rows(ad.reshape(a, (1, -1)), ad.reshape(b, (1, -1)))


def self_matching_loss(query_pooled, bank_pooled_list, target_index):
    """1 - cos(query, bank[target]); gradient reaches both vectors."""
    if not 0 <= target_index < len(bank_pooled_list):
        raise ValueError(f"target index {target_index} out of range ({len(bank_pooled_list)} entries)")
    cos = _cos_pair(query_pooled, bank_pooled_list[target_index])
    one = ad.Tensor(np.ones(1, dtype=cos.dtype))
    return ad.reduce_sum(ad.add(one, ad.neg(cos)))


def self_matching_batch(query_pooled, own_pooled):
    """Row-wise 1 - cos over (B, d) pairs, averaged; the training fast path."""
    cos = ad.cosine_rows(query_pooled, own_pooled)
    ones = ad.Tensor(np.ones(cos.shape, dtype=cos.dtype))
    return ad.reduce_mean(ad.add(ones, ad.neg(cos)))


def uniformity_from_matrix(pooled):
    """log mean over ordered pairs i != j of exp(2 cos(m_i, m_j)); (n, d) input."""
    n = pooled.shape[0]
    if n < 2:
        return ad.Tensor(np.zeros((), dtype=np.float32))
    # Rows normalized to RMS 1 have squared norm d, so the Gram matrix over
    # normalized rows divided by d is exactly the pairwise cosine matrix.
    normed = ad.rms_norm(pooled)
    gram = ad.scale(ad.matmul(normed, ad.transpose(normed, 0, 1)), 1.0 / pooled.shape[1])
    e = ad.exp(ad.scale(gram, 2.0))
    eye = ad.Tensor(np.eye(n, dtype=e.dtype))
    off_sum = ad.reduce_sum(ad.add(e, ad.neg(ad.mul(e, eye))))
    return ad.log(ad.scale(off_sum, 1.0 / (n * (n - 1))))


def uniformity_loss(bank_pooled_list):
    """Uniformity over a list of pooled d-vectors; fewer than 2 vectors -> 0."""
    if len(bank_pooled_list) < 2:
        return ad.Tensor(np.zeros((), dtype=np.float32))
    rows = [ad.reshape(v, (1, -1)) for v in bank_pooled_list]
    return uniformity_from_matrix(ad.concat(rows, axis=0))


def combine_losses(nll, self_match, uniformity, lambda_sm, lambda_u):
    """Weighted total plus a float breakdown for logging."""
    total = ad.add(nll, ad.add(ad.scale(self_match, lambda_sm), ad.scale(uniformity, lambda_u)))
    breakdown = LossBreakdown(
        nll=float(nll.data),
        self_match=float(self_match.data),
        uniformity=float(uniformity.data),
        total=float(total.data),
        lambda_sm=lambda_sm,
        lambda_u=lambda_u,
    )
    return total, breakdown
