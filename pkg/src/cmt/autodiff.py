"""Dense-tensor computation with reverse-mode automatic differentiation.

Graphs are built define-by-run: every op returns a new Tensor holding
references to its parents and a closure that maps the output gradient to
parent gradients.  ``backward`` on a scalar loss walks the recorded graph in
reverse topological order and accumulates gradients additively, so a tensor
used in several places receives the sum of its contributions.  Parameters not
reachable from the loss simply keep ``grad is None`` (read as zero).

Storage is float32 for training and float64 for the gradient-check oracle
path; ops derive their output dtype from their inputs.  Every reduction
(matmul contractions, sums, softmax/norm denominators) accumulates in float64
regardless of storage dtype, then rounds once.  Besides accuracy this makes
reductions stable under permutation of summed terms, which the aggregation
invariants depend on.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised by an op whose inputs have inconsistent shapes."""

    def __init__(self, op, message):
        super().__init__(f"{op}: {message}")
        self.op = op


_grad_enabled = True


def is_grad_enabled():
    return _grad_enabled


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def tracked(self):
        return self.requires_grad or bool(self._parents)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)


def tensor(data, requires_grad=False, dtype=np.float32, name=None):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, name=name)


def _out(data, op, parents, backward_fn):
    t = Tensor(data)
    if _grad_enabled and any(p.tracked() for p in parents):
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _accum(t, g):
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g.astype(t.data.dtype, copy=False)


def _check_same_dtype(op, *ts):
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise ShapeError(op, f"mixed dtypes {d0} and {t.data.dtype}")
    return d0


def backward(loss):
    """Populate ``grad`` on every tracked tensor reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.tracked():
        raise ValueError("backward on a tensor with no recorded graph (no_grad or detached)")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_or_zero(t):
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    _check_same_dtype("add", a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", f"cannot broadcast {a.shape} and {b.shape}") from None

    def bwd(g):
        if a.tracked():
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.tracked():
            _accum(b, _unbroadcast(g, b.data.shape))

    return _out(data, "add", (a, b), bwd)


def neg(a):
    def bwd(g):
        if a.tracked():
            _accum(a, -g)

    return _out(-a.data, "neg", (a,), bwd)


def mul(a, b):
    _check_same_dtype("mul", a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", f"cannot broadcast {a.shape} and {b.shape}") from None

    def bwd(g):
        if a.tracked():
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.tracked():
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _out(data, "mul", (a, b), bwd)


def scale(a, s):
    s = float(s)

    def bwd(g):
        if a.tracked():
            _accum(a, g * np.asarray(s, dtype=a.data.dtype))

    return _out(a.data * np.asarray(s, dtype=a.data.dtype), "scale", (a,), bwd)


def transpose(a, ax1, ax2):
    def bwd(g):
        if a.tracked():
            _accum(a, np.swapaxes(g, ax1, ax2))

    return _out(np.swapaxes(a.data, ax1, ax2), "transpose", (a,), bwd)


def reshape(a, shape):
    if int(np.prod(a.data.shape)) != int(np.prod(shape)) and -1 not in shape:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {tuple(shape)}")

    def bwd(g):
        if a.tracked():
            _accum(a, g.reshape(a.data.shape))

    return _out(a.data.reshape(shape), "reshape", (a,), bwd)


def getitem(a, key):
    data = a.data[key]

    def bwd(g):
        if a.tracked():
            full = np.zeros_like(a.data)
            full[key] += g
            _accum(a, full)

    return _out(data, "getitem", (a,), bwd)


def concat(parts, axis=0):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat", "no tensors given")
    _check_same_dtype("concat", *parts)
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError("concat", str(e)) from None
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.tracked():
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                _accum(p, g[tuple(idx)])
            offset += n

    return _out(data, "concat", tuple(parts), bwd)


def take(a, idx, axis=0):
    """Gather along axis 0 or 1 with an integer index array."""
    if axis not in (0, 1):
        raise ShapeError("take", f"axis must be 0 or 1, got {axis}")
    idx = np.asarray(idx, dtype=np.int64)
    data = np.take(a.data, idx, axis=axis)

    def bwd(g):
        if a.tracked():
            full = np.zeros_like(a.data)
            if axis == 0:
                np.add.at(full, idx, g)
            else:
                np.add.at(full, (slice(None), idx), g)
            _accum(a, full)

    return _out(data, "take", (a,), bwd)


def embedding(table, ids):
    """Row lookup: table (V, d), ids any integer shape -> (*ids.shape, d)."""
    if table.data.ndim != 2:
        raise ShapeError("embedding", f"table must be 2-D, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError("embedding", f"ids out of range for table with {table.data.shape[0]} rows")
    data = table.data[ids]

    def bwd(g):
        if table.tracked():
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            _accum(table, full)

    return _out(data, "embedding", (table,), bwd)


# ---------------------------------------------------------------------------
# contractions and reductions


def _mm64(x, y, out_dtype):
    return np.matmul(x.astype(np.float64, copy=False), y.astype(np.float64, copy=False)).astype(
        out_dtype, copy=False
    )


def matmul(a, b):
    """Matrix product with numpy-style broadcasting of leading axes."""
    dtype = _check_same_dtype("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul", f"operands must be >= 2-D, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", f"leading dims do not broadcast: {a.shape} x {b.shape}") from None
    data = _mm64(ad, bd, dtype)

    def bwd(g):
        if a.tracked():
            _accum(a, _unbroadcast(_mm64(g, np.swapaxes(bd, -1, -2), dtype), ad.shape))
        if b.tracked():
            if bd.ndim == 2:
                gb = _mm64(ad.reshape(-1, ad.shape[-1]).T, g.reshape(-1, g.shape[-1]), dtype)
            else:
                gb = _unbroadcast(_mm64(np.swapaxes(ad, -1, -2), g, dtype), bd.shape)
            _accum(b, gb)

    return _out(data, "matmul", (a, b), bwd)


def reduce_sum(a, axis=None, keepdims=False):
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def bwd(g):
        if not a.tracked():
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _out(data, "reduce_sum", (a,), bwd)


def reduce_mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# kernel-backed nonlinearities


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(a):
    data = kernels.softmax_fwd(_rows(a.data)).reshape(a.data.shape)

    def bwd(g):
        if a.tracked():
            gx = kernels.softmax_bwd(_rows(data), _rows(g)).reshape(a.data.shape)
            _accum(a, gx)

    return _out(data, "softmax", (a,), bwd)


def rms_norm(a, eps=1e-6):
    """Normalize the last axis to unit root-mean-square (gain applied by caller)."""
    y2d, inv = kernels.rmsnorm_fwd(_rows(a.data), float(eps))
    data = y2d.reshape(a.data.shape)

    def bwd(g):
        if a.tracked():
            gx = kernels.rmsnorm_bwd(y2d, inv, _rows(g)).reshape(a.data.shape)
            _accum(a, gx)

    return _out(data, "rms_norm", (a,), bwd)


def silu(a):
    x2d = _rows(a.data)
    data = kernels.silu_fwd(x2d).reshape(a.data.shape)

    def bwd(g):
        if a.tracked():
            _accum(a, kernels.silu_bwd(x2d, _rows(g)).reshape(a.data.shape))

    return _out(data, "silu", (a,), bwd)


def exp(a):
    data = np.exp(a.data)

    def bwd(g):
        if a.tracked():
            _accum(a, g * data)

    return _out(data, "exp", (a,), bwd)


def log(a):
    data = np.log(a.data)

    def bwd(g):
        if a.tracked():
            _accum(a, g / a.data)

    return _out(data, "log", (a,), bwd)


def rope(a, positions, base=10000.0):
    """Rotary rotation of the last axis; positions has shape a.shape[:-1].

    The feature axis must be even.  Rotation is norm-preserving per 2-D plane
    and position 0 is the identity.
    """
    dh = a.data.shape[-1]
    if dh % 2 != 0:
        raise ShapeError("rope", f"feature dim must be even, got {dh}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != a.data.shape[:-1]:
        raise ShapeError(
            "rope", f"positions shape {positions.shape} != leading shape {a.data.shape[:-1]}"
        )
    pos_flat = np.ascontiguousarray(positions.reshape(-1))
    data = kernels.rope_fwd(_rows(a.data), pos_flat, float(base)).reshape(a.data.shape)

    def bwd(g):
        if a.tracked():
            gx = kernels.rope_fwd(_rows(g), -pos_flat, float(base)).reshape(a.data.shape)
            _accum(a, gx)

    return _out(data, "rope", (a,), bwd)


def cross_entropy_rows(logits, targets):
    """Softmax cross-entropy per row: logits (N, V), targets (N,) -> (N,)."""
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy", f"logits must be 2-D, got {logits.shape}")
    targets = np.ascontiguousarray(np.asarray(targets, dtype=np.int64))
    if targets.shape != (logits.data.shape[0],):
        raise ShapeError(
            "cross_entropy",
            f"targets shape {targets.shape} != ({logits.data.shape[0]},)",
        )
    if targets.size and (targets.min() < 0 or targets.max() >= logits.data.shape[1]):
        raise ShapeError("cross_entropy", f"target id out of range for {logits.data.shape[1]} classes")
    loss, probs = kernels.xent_fwd(np.ascontiguousarray(logits.data), targets)

    def bwd(g):
        if logits.tracked():
            _accum(logits, kernels.xent_bwd(probs, targets, np.ascontiguousarray(g)))

    return _out(loss, "cross_entropy", (logits,), bwd)


def cosine_rows(a, b, norm_floor=1e-8):
    """Cosine similarity per row: a, b (N, d) -> (N,).  Near-zero norms are an error."""
    _check_same_dtype("cosine", a, b)
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeError("cosine", f"need matching 2-D shapes, got {a.shape} and {b.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    na = np.sqrt(np.sum(a64 * a64, axis=1))
    nb = np.sqrt(np.sum(b64 * b64, axis=1))
    if np.any(na < norm_floor) or np.any(nb < norm_floor):
        raise ValueError(f"cosine: vector norm below floor {norm_floor}")
    cos64 = np.sum(a64 * b64, axis=1) / (na * nb)
    data = cos64.astype(a.data.dtype)

    def bwd(g):
        g64 = g.astype(np.float64)
        if a.tracked():
            ga = b64 / (na * nb)[:, None] - (cos64 / (na * na))[:, None] * a64
            _accum(a, (ga * g64[:, None]).astype(a.data.dtype))
        if b.tracked():
            gb = a64 / (na * nb)[:, None] - (cos64 / (nb * nb))[:, None] * b64
            _accum(b, (gb * g64[:, None]).astype(b.data.dtype))

    return _out(data, "cosine", (a, b), bwd)
