"""Two-phase orchestration: supervised learning, then query-free adaptation.

The learning phase trains the compressor, soft tokens, aggregator and
alignment network against a frozen base model, using each batch's documents
as an in-batch memory bank (a query's own document is always among the
candidates, so the self-matching target is well defined).  Online adaptation
then compresses a document stream into a persistent bank without gradients,
and ``answer`` runs compress-query -> top-k select -> aggregate -> align ->
greedy decode.
"""

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .aggregator import aggregate, aggregate_states, init_aggregator_params
from .alignment import align, align_states, init_align_params
from .bank import MemoryBank
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .compressor import (
    compress,
    compress_query,
    compress_states_ragged,
    init_compressor_params,
)
from .config import ModelConfig, TrainConfig
from .corpus import (
    DIGIT_BASE,
    EOS,
    QARecord,
    Tokenizer,
    doc_token_ids,
    prompt_token_ids,
    qa_token_ids,
)
from .lm import generate_greedy, init_lm_params, lm_forward
from .objectives import (
    LossBreakdown,
    combine_losses,
    memory_aware_adjust,
    self_matching_batch,
    uniformity_from_matrix,
)
from .optim import AdamW, warmup_constant_lr

_TOKENIZER = None


def get_tokenizer():
    global _TOKENIZER
    if _TOKENIZER is None:
        _TOKENIZER = Tokenizer()
    return _TOKENIZER


class TrainingDiverged(RuntimeError):
    def __init__(self, step, breakdown):
        super().__init__(
            f"non-finite loss at step {step}: nll={breakdown.nll} "
            f"self_match={breakdown.self_match} uniformity={breakdown.uniformity}"
        )
        self.step = step
        self.breakdown = breakdown


@dataclass
class CMTModel:
    cfg: ModelConfig
    lm: dict
    compressor: dict
    aggregator: dict
    alignment: dict

    def groups(self):
        return {
            "lm": self.lm,
            "compressor": self.compressor,
            "aggregator": self.aggregator,
            "alignment": self.alignment,
        }

    def trainable(self):
        out = {}
        for gname in ("compressor", "aggregator", "alignment"):
            for pname, p in getattr(self, gname).items():
                out[f"{gname}.{pname}"] = p
        return out

    def phi_sha256(self):
        h = hashlib.sha256()
        for name, p in self.lm.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def freeze_lm(self):
        for p in self.lm.values():
            p.requires_grad = False

    def lm_frozen(self):
        return all(not p.requires_grad for p in self.lm.values())


def build_model(cfg, seed):
    tok = get_tokenizer()
    if cfg.vocab_size != tok.vocab_size:
        raise ValueError(f"config vocab_size {cfg.vocab_size} != tokenizer {tok.vocab_size}")
    children = np.random.SeedSequence([int(seed)]).spawn(4)
    rngs = [np.random.default_rng(c) for c in children]
    return CMTModel(
        cfg=cfg,
        lm=init_lm_params(rngs[0], cfg),
        compressor=init_compressor_params(rngs[1], cfg),
        aggregator=init_aggregator_params(rngs[2], cfg),
        alignment=init_align_params(rngs[3], cfg),
    )


def save_model(path, model, tcfg, meta=None):
    meta = dict(meta or {})
    meta["phi_sha256"] = model.phi_sha256()
    save_checkpoint(path, asdict(model.cfg), asdict(tcfg), model.groups(), meta)


def load_model(path):
    mdict, tdict, groups, meta = load_checkpoint(path)
    cfg = ModelConfig(**mdict)
    tcfg = TrainConfig(**tdict)
    expected = {"lm", "compressor", "aggregator", "alignment"}
    if set(groups) != expected:
        raise CheckpointError(f"checkpoint groups {sorted(groups)} != {sorted(expected)}")
    model = CMTModel(
        cfg=cfg,
        lm={n: ad.Tensor(a, requires_grad=False) for n, a in groups["lm"].items()},
        compressor={n: ad.Tensor(a, requires_grad=True) for n, a in groups["compressor"].items()},
        aggregator={n: ad.Tensor(a, requires_grad=True) for n, a in groups["aggregator"].items()},
        alignment={n: ad.Tensor(a, requires_grad=True) for n, a in groups["alignment"].items()},
    )
    recorded = meta.get("phi_sha256")
    if recorded is not None and recorded != model.phi_sha256():
        raise CheckpointError("base model bytes do not match the recorded digest")
    return model, tcfg, meta


def _no_test_records(records, what):
    for r in records:
        if r.split == "test":
            raise ValueError(f"{what} must not contain test-split records (doc {r.doc_id})")


def pretrain_base(model, records, tcfg, log_every=100):
    """Train the base model on corpus text (documents and QA renderings), then freeze it.

    Returns a list of (step, mean NLL) log rows.
    """
    if model.lm_frozen():
        raise ValueError("base model is already frozen; rebuild before pretraining")
    _no_test_records(records, "pretraining corpus")
    tok = get_tokenizer()
    seqs = []
    for r in records:
        seqs.append(doc_token_ids(tok, r.document))
        if r.relevant:
            seqs.append(qa_token_ids(tok, r.question, r.answer)[0])
    groups = {}
    for ids in seqs:
        groups.setdefault(len(ids), []).append(ids)
    lengths = sorted(groups)
    arrays = {n: np.asarray(groups[n], dtype=np.int64) for n in lengths}
    weights = np.array([len(groups[n]) for n in lengths], dtype=np.float64)
    weights /= weights.sum()

    rng = np.random.default_rng([tcfg.seed, 1])
    opt = AdamW(
        model.lm, lr=tcfg.pretrain_lr, beta1=tcfg.beta1, beta2=tcfg.beta2,
        eps=tcfg.adam_eps, weight_decay=0.0,
    )
    log = []
    for step in range(tcfg.pretrain_steps):
        arr = arrays[lengths[int(rng.choice(len(lengths), p=weights))]]
        batch = arr[rng.integers(0, len(arr), size=min(tcfg.pretrain_batch_size, len(arr)))]
        logits = lm_forward(model.lm, model.cfg, batch)
        flat = ad.reshape(logits[:, :-1, :], (-1, model.cfg.vocab_size))
        loss = ad.reduce_mean(ad.cross_entropy_rows(flat, batch[:, 1:].reshape(-1)))
        if not np.isfinite(loss.data):
            lv = float(loss.data)
            raise TrainingDiverged(step, LossBreakdown(lv, 0.0, 0.0, lv, 0.0, 0.0))
        opt.zero_grad()
        ad.backward(loss)
        opt.lr = warmup_constant_lr(step, tcfg.pretrain_steps, tcfg.pretrain_lr, tcfg.warmup_ratio)
        opt.step()
        if step % log_every == 0 or step == tcfg.pretrain_steps - 1:
            log.append((step, float(loss.data)))
    opt.zero_grad()
    model.freeze_lm()
    return log


def _augment_sites(doc_ids, qa_ids):
    """Locate the answer's digit run in both renderings, or None.

    The closed vocabulary puts digits only inside fact codes, so the QA
    sequence's digit positions are exactly the answer and the matching doc run
    is the asked fact.  Records without such a match (paraphrased answers in a
    custom corpus) are simply left unaugmented.
    """
    qpos = [j for j, t in enumerate(qa_ids) if DIGIT_BASE <= t < DIGIT_BASE + 10]
    if not qpos:
        return None
    ans = [qa_ids[j] for j in qpos]
    run = []
    for j, t in enumerate(doc_ids):
        if DIGIT_BASE <= t < DIGIT_BASE + 10:
            run.append(j)
            continue
        if len(run) == len(ans) and [doc_ids[x] for x in run] == ans:
            return (run[0], run[-1] + 1), qpos
        run = []
    if len(run) == len(ans) and [doc_ids[x] for x in run] == ans:
        return (run[0], run[-1] + 1), qpos
    return None


def _topk_in_batch(sims_row, window, own):
    order = np.argsort(-sims_row, kind="stable")
    sel = list(order[:window])
    if own not in sel:
        sel[-1] = own
    return sel


def _valid_metrics(model, valid_records, tcfg):
    from .evaluation import em_f1

    bank = online_adapt(model, [(r.doc_id, r.document) for r in valid_records])
    em_sum = f1_sum = 0.0
    for r in valid_records:
        pred = answer(model, bank, r.question, window=tcfg.window or None,
                      memory_aware=tcfg.memory_aware_inference, alpha=tcfg.alpha)
        em, f1 = em_f1(pred, r.answer)
        em_sum += em
        f1_sum += f1
    n = len(valid_records)
    return em_sum / n, f1_sum / n


def learning_phase(model, train_records, valid_records, tcfg):
    """Train {compressor, soft tokens, aggregator, alignment} with the base frozen.

    Returns a metric log dict; the model is left holding the parameters of the
    best validation F1.
    """
    if not model.lm_frozen():
        raise ValueError("base model must be frozen before the learning phase")
    train_records = [r for r in train_records]
    valid_records = [r for r in valid_records]
    if not train_records or not valid_records:
        raise ValueError("learning phase needs non-empty train and valid corpora")
    _no_test_records(train_records, "training corpus")
    _no_test_records(valid_records, "validation corpus")
    for r in train_records:
        if not r.relevant or not r.answer:
            raise ValueError(f"training record {r.doc_id} lacks a QA pair")

    cfg = model.cfg
    tok = get_tokenizer()
    phi_before = model.phi_sha256()

    doc_ids_all = [doc_token_ids(tok, r.document) for r in train_records]
    query_ids_all = [doc_token_ids(tok, r.question) for r in train_records]
    qa_all = [qa_token_ids(tok, r.question, r.answer) for r in train_records]
    aug_sites = [_augment_sites(doc_ids_all[i], qa_all[i][0]) for i in range(len(train_records))]
    aug_rng = np.random.default_rng([tcfg.seed, 3])

    n = len(train_records)
    bs = min(tcfg.batch_size, n)
    n_batches = n // bs
    total_micro = tcfg.epochs * n_batches
    total_opt = max(1, total_micro // tcfg.grad_accum)

    params = model.trainable()
    opt = AdamW(params, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2,
                eps=tcfg.adam_eps, weight_decay=tcfg.weight_decay)
    rng = np.random.default_rng([tcfg.seed, 2])
    plain_cache = {}  # record index -> plain logit rows at answer positions

    log = {"train": [], "valid": [], "best_step": None, "best_f1": -1.0, "best_em": -1.0}
    best_state = None
    micro = 0
    opt_step = 0
    accum_bd = []

    def run_validation():
        nonlocal best_state
        em, f1 = _valid_metrics(model, valid_records, tcfg)
        log["valid"].append({"step": opt_step, "em": em, "f1": f1})
        if f1 > log["best_f1"]:
            log["best_f1"] = f1
            log["best_em"] = em
            log["best_step"] = opt_step
            best_state = {name: p.data.copy() for name, p in params.items()}

    # Narrowing aggregation to the query's nearest units is deferred: from
    # scratch the nearest units share the query's words and the copy pathway
    # never forms; once it exists, selective aggregation trains retrieval.
    narrow_from = int(round(tcfg.topk_start * tcfg.epochs))

    for epoch in range(tcfg.epochs):
        if tcfg.augment_codes:
            for i, site in enumerate(aug_sites):
                if site is None:
                    continue
                (s, e), qpos = site
                fresh = [int(DIGIT_BASE + d) for d in aug_rng.integers(0, 10, size=len(qpos))]
                doc_ids_all[i][s:e] = fresh
                for j, t in zip(qpos, fresh):
                    qa_all[i][0][j] = t
        perm = rng.permutation(n)
        for b in range(n_batches):
            idxs = perm[b * bs : (b + 1) * bs]
            d_states = compress_states_ragged(model.compressor, cfg, [doc_ids_all[i] for i in idxs])
            q_states = compress_states_ragged(model.compressor, cfg, [query_ids_all[i] for i in idxs])
            d_pooled = ad.reduce_mean(d_states, axis=1)  # (B, d)
            q_pooled = ad.reduce_mean(q_states, axis=1)

            w_eff = min(tcfg.window, bs) if tcfg.window else bs
            if w_eff >= bs or epoch < narrow_from:
                mstar = aggregate_states(model.aggregator, cfg, q_states, d_states)
            else:
                sims = _pairwise_cos(q_pooled.data, d_pooled.data)
                parts = []
                for bi in range(bs):
                    sel = _topk_in_batch(sims[bi], w_eff, bi)
                    assert len(sel) == w_eff  # aggregation cost is bounded by the window
                    parts.append(
                        aggregate_states(
                            model.aggregator, cfg, q_states[bi : bi + 1],
                            ad.take(d_states, np.asarray(sel), axis=0),
                        )
                    )
                mstar = ad.concat(parts, axis=0)
            prefix = align_states(model.alignment, cfg, mstar)

            length_groups = {}
            for pos, i in enumerate(idxs):
                length_groups.setdefault(len(qa_all[i][0]), []).append(pos)
            mem_parts, tgt_parts, plain_parts = [], [], []
            for length in sorted(length_groups):
                poss = length_groups[length]
                ids_arr = np.asarray([qa_all[idxs[p]][0] for p in poss], dtype=np.int64)
                mask_arr = np.asarray([qa_all[idxs[p]][1] for p in poss])
                if len(poss) == bs:
                    pfx = prefix
                else:
                    sel = np.asarray(poss)
                    pfx = [(ad.take(pk, sel, axis=0), ad.take(pv, sel, axis=0)) for pk, pv in prefix]
                logits = lm_forward(model.lm, cfg, ids_arr, pfx)
                flat = ad.reshape(logits[:, :-1, :], (-1, cfg.vocab_size))
                sel_rows = np.flatnonzero(mask_arr[:, 1:].reshape(-1))
                mem_parts.append(ad.take(flat, sel_rows, axis=0))
                tgt_parts.append(ids_arr[:, 1:].reshape(-1)[sel_rows])
                if tcfg.memory_aware:
                    if tcfg.augment_codes:  # sequences change every epoch; cache cannot hit
                        with ad.no_grad():
                            pl = lm_forward(model.lm, cfg, ids_arr)
                        plain_parts.append(
                            pl.data[:, :-1, :].reshape(-1, cfg.vocab_size)[sel_rows]
                        )
                    else:
                        missing = [p for p in poss if int(idxs[p]) not in plain_cache]
                        if missing:
                            with ad.no_grad():
                                pl = lm_forward(
                                    model.lm, cfg,
                                    np.asarray([qa_all[idxs[p]][0] for p in missing], dtype=np.int64),
                                )
                                pl_flat = pl.data[:, :-1, :].reshape(-1, cfg.vocab_size)
                            pmask = np.asarray([qa_all[idxs[p]][1] for p in missing])[:, 1:].reshape(-1)
                            rows = pl_flat[np.flatnonzero(pmask)].reshape(len(missing), -1, cfg.vocab_size)
                            for j, p in enumerate(missing):
                                plain_cache[int(idxs[p])] = rows[j]
                        plain_parts.append(
                            np.concatenate([plain_cache[int(idxs[p])] for p in poss], axis=0)
                        )
            mem_rows = mem_parts[0] if len(mem_parts) == 1 else ad.concat(mem_parts, axis=0)
            targets = np.concatenate(tgt_parts)
            if tcfg.memory_aware:
                plain_rows = np.concatenate(plain_parts, axis=0)
                mem_rows = memory_aware_adjust(mem_rows, plain_rows, tcfg.alpha)
            nll = ad.reduce_mean(ad.cross_entropy_rows(mem_rows, targets))
            sm = self_matching_batch(q_pooled, d_pooled)
            uni = uniformity_from_matrix(d_pooled)
            total, bd = combine_losses(nll, sm, uni, tcfg.lambda_sm, tcfg.lambda_u)
            if not bd.finite():
                raise TrainingDiverged(opt_step, bd)
            accum_bd.append(bd)
            ad.backward(ad.scale(total, 1.0 / tcfg.grad_accum))

            micro += 1
            if micro % tcfg.grad_accum == 0:
                opt.lr = warmup_constant_lr(opt_step, total_opt, tcfg.lr, tcfg.warmup_ratio)
                opt.step()
                opt.zero_grad()
                opt_step += 1
                log["train"].append({
                    "step": opt_step,
                    "nll": float(np.mean([x.nll for x in accum_bd])),
                    "self_match": float(np.mean([x.self_match for x in accum_bd])),
                    "uniformity": float(np.mean([x.uniformity for x in accum_bd])),
                    "total": float(np.mean([x.total for x in accum_bd])),
                    "lr": opt.lr,
                })
                accum_bd = []
                if opt_step % tcfg.valid_interval == 0:
                    run_validation()
    if not log["valid"] or log["valid"][-1]["step"] != opt_step:
        run_validation()
    if best_state is not None:
        for name, p in params.items():
            p.data[...] = best_state[name]
    if model.phi_sha256() != phi_before:
        raise RuntimeError("base model parameters changed during the learning phase")
    return log


def _pairwise_cos(q, d):
    q64 = q.astype(np.float64)
    d64 = d.astype(np.float64)
    qn = np.maximum(np.linalg.norm(q64, axis=1, keepdims=True), 1e-12)
    dn = np.maximum(np.linalg.norm(d64, axis=1, keepdims=True), 1e-12)
    return (q64 / qn) @ (d64 / dn).T


def online_adapt(model, doc_stream):
    """Compress a document stream into a fresh MemoryBank, in stream order.

    The stream is projected to (doc_id, text) pairs up front: question and
    answer fields are never read here, matching the query-free protocol.
    No gradients are computed.
    """
    pairs = []
    for item in doc_stream:
        if isinstance(item, QARecord):
            pairs.append((item.doc_id, item.document))
        else:
            doc_id, text = item
            pairs.append((int(doc_id), str(text)))
    tok = get_tokenizer()
    cfg = model.cfg
    bank = MemoryBank(cfg.k, cfg.d_model)
    with ad.no_grad():
        for doc_id, text in pairs:
            bank.insert(compress(model.compressor, cfg, doc_token_ids(tok, text), doc_id))
    return bank


def _adjusted_greedy(model, prompt, prefix, plain_prefix, alpha, max_new):
    seq = list(prompt)
    out = []
    with ad.no_grad():
        for _ in range(max_new):
            mem = lm_forward(model.lm, model.cfg, np.asarray(seq, dtype=np.int64), prefix).data[-1]
            plain = lm_forward(
                model.lm, model.cfg, np.asarray(seq, dtype=np.int64), plain_prefix
            ).data[-1]
            nxt = int(np.argmax((1.0 + alpha) * mem - alpha * plain))
            seq.append(nxt)
            out.append(nxt)
            if nxt == EOS:
                break
    return out


def answer(model, bank, query_text, window=None, memory_aware=False, alpha=0.5,
           demote_ids=frozenset(), max_new=8):
    """Answer a query from the bank: compress, select, aggregate, align, decode."""
    if len(bank) == 0:
        raise ValueError("empty bank: nothing to answer from")
    tok = get_tokenizer()
    cfg = model.cfg
    qmem = compress_query(model.compressor, cfg, doc_token_ids(tok, query_text))
    if window:
        sel = bank.topk_select(qmem.pooled, window)
    else:
        sel = list(range(len(bank)))
    mstar = aggregate(model.aggregator, cfg, qmem.M, [bank[i].M for i in sel])
    prefix = align(model.alignment, cfg, mstar)
    prompt = prompt_token_ids(tok, query_text)
    if memory_aware:
        plain_prefix = None
        if demote_ids:
            demoted = [e.M for e in bank if e.doc_id in demote_ids]
            if demoted:
                m_neg = aggregate(model.aggregator, cfg, qmem.M, demoted)
                plain_prefix = align(model.alignment, cfg, m_neg)
        out = _adjusted_greedy(model, prompt, prefix, plain_prefix, alpha, max_new)
    else:
        out = generate_greedy(model.lm, cfg, prompt, prefix, max_new=max_new, stop_token=EOS)
    return tok.detokenize(out)


def answer_baseline(model, query_text, max_new=8):
    """No-memory control: the frozen base model decoding from the bare prompt."""
    tok = get_tokenizer()
    prompt = prompt_token_ids(tok, query_text)
    out = generate_greedy(model.lm, model.cfg, prompt, max_new=max_new, stop_token=EOS)
    return tok.detokenize(out)
