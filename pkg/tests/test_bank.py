"""Memory bank: insertion rules, top-k selection oracle, binary round-trips."""

import numpy as np
import pytest

from cmt.bank import BankError, MemoryBank
from cmt.compressor import CondensedMemory, pool_rows

K, D = 8, 32


def _mem(rng, doc_id, k=K, d=D):
    m = rng.standard_normal((k, d)).astype(np.float32)
    return CondensedMemory(doc_id=doc_id, M=m, pooled=pool_rows(m),
                           truncated=bool(doc_id % 7 == 3))


def _filled(rng, n, k=K, d=D):
    bank = MemoryBank(k, d)
    for i in range(n):
        bank.insert(_mem(rng, i, k, d))
    return bank


def test_insert_and_iteration_order():
    rng = np.random.default_rng(0)
    bank = _filled(rng, 5)
    assert len(bank) == 5 and bank.doc_ids() == [0, 1, 2, 3, 4]
    assert [e.doc_id for e in bank] == [0, 1, 2, 3, 4]


def test_insert_validation():
    rng = np.random.default_rng(1)
    bank = MemoryBank(K, D)
    bank.insert(_mem(rng, 0))
    with pytest.raises(BankError, match="duplicate"):
        bank.insert(_mem(rng, 0))
    with pytest.raises(BankError, match="shape"):
        bank.insert(_mem(rng, 1, k=K + 1))
    bad = _mem(rng, 2)
    bad.M[0, 0] = np.nan
    with pytest.raises(BankError, match="non-finite"):
        bank.insert(bad)


def test_insert_stores_copies():
    rng = np.random.default_rng(2)
    m = _mem(rng, 0)
    bank = MemoryBank(K, D)
    bank.insert(m)
    m.M[...] = 0
    assert np.abs(bank[0].M).max() > 0


def test_topk_matches_full_sort_oracle():
    # 100 random banks, every window size, including tie-break order
    rng = np.random.default_rng(3)
    for trial in range(100):
        n = int(rng.integers(1, 65))
        d = int(rng.integers(2, 9)) * 2
        bank = MemoryBank(2, d)
        quantize = trial % 3 == 0  # coarse values force exact similarity ties
        for i in range(n):
            m = rng.standard_normal((2, d)).astype(np.float32)
            if quantize:
                m = np.round(m)
                m[m.sum() == 0] += 1.0
            if not np.abs(m).sum():
                m[0, 0] = 1.0
            bank.insert(CondensedMemory(i, m, pool_rows(m)))
        q = rng.standard_normal(d).astype(np.float32)
        sims = np.empty(n)
        for i, e in enumerate(bank):
            a = q.astype(np.float64)
            b = e.pooled.astype(np.float64)
            na = max(np.linalg.norm(a), 1e-12)
            nb = max(np.linalg.norm(b), 1e-12)
            sims[i] = float(a @ b) / (na * nb)
        # brute force: best first, earlier insertion wins exact ties
        order = sorted(range(n), key=lambda i: (-sims[i], i))
        for window in range(1, n + 1):
            got = bank.topk_select(q, window)
            assert got == order[:window], (trial, window)


def test_topk_window_larger_than_bank_returns_all():
    rng = np.random.default_rng(4)
    bank = _filled(rng, 3)
    sel = bank.topk_select(rng.standard_normal(D).astype(np.float32), 10)
    assert sorted(sel) == [0, 1, 2]


def test_topk_errors():
    rng = np.random.default_rng(5)
    with pytest.raises(BankError, match="empty"):
        MemoryBank(K, D).topk_select(np.ones(D, dtype=np.float32), 1)
    with pytest.raises(BankError, match="window"):
        _filled(rng, 2).topk_select(np.ones(D, dtype=np.float32), 0)


def test_save_load_roundtrip_byte_identical(tmp_path):
    rng = np.random.default_rng(6)
    bank = _filled(rng, 12)
    bank.insert(CondensedMemory(-5, rng.standard_normal((K, D)).astype(np.float32),
                                rng.standard_normal(D).astype(np.float32)))
    p1, p2 = tmp_path / "a.cmtb", tmp_path / "b.cmtb"
    bank.save(str(p1))
    back = MemoryBank.load(str(p1))
    assert back.doc_ids() == bank.doc_ids()
    for e1, e2 in zip(bank, back):
        assert np.array_equal(e1.M, e2.M) and np.array_equal(e1.pooled, e2.pooled)
    back.save(str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_load_failures_are_loud(tmp_path):
    rng = np.random.default_rng(7)
    bank = _filled(rng, 4)
    p = tmp_path / "bank.cmtb"
    bank.save(str(p))
    blob = p.read_bytes()

    trunc = tmp_path / "trunc.cmtb"
    for cut in (3, 10, len(blob) - 5):
        trunc.write_bytes(blob[:cut])
        with pytest.raises(BankError, match="truncated|header"):
            MemoryBank.load(str(trunc))

    extra = tmp_path / "extra.cmtb"
    extra.write_bytes(blob + b"\x00\x00")
    with pytest.raises(BankError):
        MemoryBank.load(str(extra))

    magic = tmp_path / "magic.cmtb"
    magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(BankError, match="magic"):
        MemoryBank.load(str(magic))

    ver = tmp_path / "ver.cmtb"
    ver.write_bytes(blob[:4] + b"\x63\x00" + blob[6:])
    with pytest.raises(BankError, match="version"):
        MemoryBank.load(str(ver))
