"""EM/F1 scoring and the three experiment protocols.

Normalization lowercases, strips punctuation and collapses whitespace; exact
match compares normalized strings, F1 is the harmonic mean of token precision
and recall.  Two empty normalized strings score (1, 1), exactly one empty
scores (0, 0).  The protocols: downstream QA over a bank, knowledge retention
as the stream grows, and a distractor-injection robustness sweep.  Each emits
one CSV.
"""

import csv
import math
import string
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import gen_irrelevant
from .pipeline import answer, answer_baseline, online_adapt

_PUNCT = str.maketrans("", "", string.punctuation)


class EvalError(ValueError):
    pass


def normalize_text(s):
    return " ".join(s.lower().translate(_PUNCT).split())


def em_f1(prediction, gold):
    pred = normalize_text(prediction)
    gold_n = normalize_text(gold)
    if not pred and not gold_n:
        return 1.0, 1.0
    if not pred or not gold_n:
        return 0.0, 0.0
    em = 1.0 if pred == gold_n else 0.0
    pt, gt = pred.split(), gold_n.split()
    overlap = sum((Counter(pt) & Counter(gt)).values())
    if overlap == 0:
        return em, 0.0
    precision = overlap / len(pt)
    recall = overlap / len(gt)
    return em, 2 * precision * recall / (precision + recall)


@dataclass
class MetricReport:
    em: float
    f1: float
    n: int
    rows: list  # dicts: query_id, prediction, gold, em, f1


def _score_records(records, predict):
    rows = []
    em_sum = f1_sum = 0.0
    for r in records:
        pred = predict(r)
        em, f1 = em_f1(pred, r.answer)
        em_sum += em
        f1_sum += f1
        rows.append({"query_id": r.doc_id, "prediction": pred, "gold": r.answer, "em": em, "f1": f1})
    n = len(records)
    return MetricReport(em=em_sum / n, f1=f1_sum / n, n=n, rows=rows)


def eval_qa(model, bank, qa_records, window=None, memory_aware=False, alpha=0.5,
            demote_ids=frozenset()):
    """Answer every question against the bank and aggregate EM/F1."""
    qa_records = [r for r in qa_records if r.relevant]
    if not qa_records:
        raise EvalError("empty QA set: metrics undefined")
    return _score_records(
        qa_records,
        lambda r: answer(model, bank, r.question, window=window, memory_aware=memory_aware,
                         alpha=alpha, demote_ids=demote_ids),
    )


def eval_qa_baseline(model, qa_records):
    """No-memory control: the frozen base model answers from the prompt alone."""
    qa_records = [r for r in qa_records if r.relevant]
    if not qa_records:
        raise EvalError("empty QA set: metrics undefined")
    return _score_records(qa_records, lambda r: answer_baseline(model, r.question))


def eval_qa_gold(model, qa_records, window=None):
    """Upper bound: each query answers against a bank holding only its own document."""
    qa_records = [r for r in qa_records if r.relevant]
    if not qa_records:
        raise EvalError("empty QA set: metrics undefined")

    def predict(r):
        bank = online_adapt(model, [(r.doc_id, r.document)])
        return answer(model, bank, r.question, window=window)

    return _score_records(qa_records, predict)


def retention_curve(model, full_stream, probe_prefix_size, checkpoints_at, window=None):
    """F1 on the first ``probe_prefix_size`` docs after growing stream prefixes.

    Returns rows of (position, f1, retention_ratio), ratio relative to the
    first checkpoint.
    """
    checkpoints_at = list(checkpoints_at)
    if not checkpoints_at:
        raise EvalError("no stream positions given")
    if any(nxt <= prev for prev, nxt in zip(checkpoints_at, checkpoints_at[1:])):
        raise EvalError(f"stream positions must be strictly ascending: {checkpoints_at}")
    if probe_prefix_size > checkpoints_at[0]:
        raise EvalError(
            f"probe_prefix_size {probe_prefix_size} exceeds first checkpoint {checkpoints_at[0]}"
        )
    if checkpoints_at[-1] > len(full_stream):
        raise EvalError(f"stream has {len(full_stream)} docs, position {checkpoints_at[-1]} requested")
    probe = [r for r in full_stream[:probe_prefix_size] if r.relevant]
    if not probe:
        raise EvalError("probe prefix contains no QA records")

    bank = online_adapt(model, full_stream[: checkpoints_at[0]])
    rows = []
    base_f1 = None
    for pos_idx, pos in enumerate(checkpoints_at):
        if pos_idx > 0:
            extra = online_adapt(model, full_stream[checkpoints_at[pos_idx - 1] : pos])
            for e in extra:
                bank.insert(e)
        rep = eval_qa(model, bank, probe, window=window)
        if base_f1 is None:
            base_f1 = rep.f1
            ratio = 1.0
        else:
            ratio = rep.f1 / base_f1 if base_f1 > 0 else 0.0
        rows.append({"position": pos, "f1": rep.f1, "retention_ratio": ratio})
    return rows


def robustness_sweep(model, qa_records, distractor_ratios, window=None, seed=0):
    """Relative F1 as irrelevant documents are mixed into the stream.

    At ratio r, ceil(r/(1-r) * n) distractors join the n relevant docs, so the
    irrelevant fraction is approximately r.  Rows are sorted by ratio; the
    ratio-0 row is exactly 1 by definition.
    """
    qa_records = [r for r in qa_records if r.relevant]
    if not qa_records:
        raise EvalError("empty QA set: metrics undefined")
    ratios = sorted(set(float(r) for r in distractor_ratios))
    if any(r < 0 or r >= 1 for r in ratios):
        raise EvalError("distractor ratios must lie in [0, 1); 1 leaves no relevant documents")
    n = len(qa_records)
    rows = []
    base_f1 = None
    for ridx, rho in enumerate(ratios):
        if rho == 0:
            stream = list(qa_records)
        else:
            n_ir = math.ceil(rho / (1.0 - rho) * n)
            distract = gen_irrelevant(seed + ridx, n_ir)
            stream = list(qa_records) + list(distract)
            order = np.random.default_rng([seed, ridx]).permutation(len(stream))
            stream = [stream[i] for i in order]
        bank = online_adapt(model, stream)
        rep = eval_qa(model, bank, qa_records, window=window)
        if rho == 0:
            base_f1 = rep.f1
            rel = 1.0
        else:
            if base_f1 is None:
                raise EvalError("ratio list must include 0 to define relative F1")
            rel = rep.f1 / base_f1 if base_f1 > 0 else 0.0
        rows.append({"ratio": rho, "relative_f1": rel, "f1": rep.f1})
    return rows


def write_qa_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["query_id", "prediction", "gold", "em", "f1"])
        w.writeheader()
        for row in report.rows:
            w.writerow(row)


def write_rows_csv(rows, path, fieldnames):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in fieldnames})
