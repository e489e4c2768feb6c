"""Ordered store of condensed memories with cosine top-k selection.

The bank preserves stream order, never mutates stored matrices, and
round-trips through a little-endian binary format: magic "CMTB", u16 version,
u32 k, u32 d, u64 count, then per entry a u64 doc_id, k*d f32 memory rows and
d f32 pooled vector.  The pooled vector is stored verbatim so a load/save
cycle is byte-identical.
"""

import struct

import numpy as np

from .compressor import CondensedMemory

MAGIC = b"CMTB"
VERSION = 1


class BankError(ValueError):
    pass


class MemoryBank:
    def __init__(self, k, d):
        self.k = int(k)
        self.d = int(d)
        self.entries = []
        self._ids = set()

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def doc_ids(self):
        return [e.doc_id for e in self.entries]

    def insert(self, memory):
        if memory.M.shape != (self.k, self.d):
            raise BankError(f"memory shape {memory.M.shape} != bank ({self.k}, {self.d})")
        if memory.pooled.shape != (self.d,):
            raise BankError(f"pooled shape {memory.pooled.shape} != ({self.d},)")
        if memory.doc_id in self._ids:
            raise BankError(f"duplicate doc_id {memory.doc_id}")
        if not (np.all(np.isfinite(memory.M)) and np.all(np.isfinite(memory.pooled))):
            raise BankError(f"non-finite memory for doc {memory.doc_id}")
        self.entries.append(
            CondensedMemory(
                doc_id=int(memory.doc_id),
                M=np.array(memory.M, dtype=np.float32, copy=True),
                pooled=np.array(memory.pooled, dtype=np.float32, copy=True),
                truncated=bool(memory.truncated),
            )
        )
        self._ids.add(int(memory.doc_id))

    def topk_select(self, query_pooled, window):
        """Indices of the ``window`` most query-similar entries, best first.

        Exact similarity ties keep insertion order.  A window covering the
        whole bank returns every index, similarity-sorted.
        """
        if len(self.entries) == 0:
            raise BankError("empty bank: no memory to aggregate")
        if window < 1:
            raise BankError("window must be >= 1")
        q = np.asarray(query_pooled, dtype=np.float64)
        if q.shape != (self.d,):
            raise BankError(f"query shape {q.shape} != ({self.d},)")
        pooled = np.stack([e.pooled for e in self.entries]).astype(np.float64)
        qn = max(float(np.sqrt(q @ q)), 1e-12)
        norms = np.maximum(np.sqrt((pooled * pooled).sum(axis=1)), 1e-12)
        sims = (pooled @ q) / (norms * qn)
        order = np.argsort(-sims, kind="stable")  # stable: equal sims keep lower index first
        return [int(i) for i in order[: min(window, len(self.entries))]]

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HIIQ", VERSION, self.k, self.d, len(self.entries)))
            for e in self.entries:
                fh.write(struct.pack("<Q", e.doc_id & 0xFFFFFFFFFFFFFFFF))
                fh.write(np.ascontiguousarray(e.M, dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(e.pooled, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        head = struct.calcsize("<HIIQ")
        if len(blob) < 4 + head:
            raise BankError("truncated bank file: header incomplete")
        if blob[:4] != MAGIC:
            raise BankError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
        version, k, d, count = struct.unpack_from("<HIIQ", blob, 4)
        if version != VERSION:
            raise BankError(f"unsupported bank version {version}")
        bank = cls(k, d)
        off = 4 + head
        entry_bytes = 8 + 4 * k * d + 4 * d
        if len(blob) - off != count * entry_bytes:
            raise BankError(
                f"truncated bank file: expected {count * entry_bytes} entry bytes, "
                f"found {len(blob) - off}"
            )
        for _ in range(count):
            (raw_id,) = struct.unpack_from("<Q", blob, off)
            off += 8
            doc_id = raw_id - (1 << 64) if raw_id >= (1 << 63) else raw_id
            if doc_id in bank._ids:
                raise BankError(f"duplicate doc_id {doc_id} in bank file")
            m = np.frombuffer(blob, dtype="<f4", count=k * d, offset=off).reshape(k, d)
            off += 4 * k * d
            pooled = np.frombuffer(blob, dtype="<f4", count=d, offset=off)
            off += 4 * d
            bank.entries.append(
                CondensedMemory(doc_id=int(doc_id), M=m.copy(), pooled=pooled.copy())
            )
            bank._ids.add(int(doc_id))
        return bank
