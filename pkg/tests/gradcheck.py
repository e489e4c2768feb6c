"""Central finite-difference oracle shared by the gradient tests.

``check`` compares analytic gradients against numeric ones computed by
re-running the forward with perturbed parameter data; graphs are rebuilt per
call, so in-place edits of ``Tensor.data`` between calls are safe.  For f32
parameters the numeric side must be evaluated through a float64 rebuild of
the same computation (see ``f32_vs_f64``), otherwise cancellation noise
drowns the signal.
"""

import numpy as np

from cmt import autodiff as ad


def numeric_grad(f, x, eps=1e-5, coords=None):
    """d f / d x by central differences; ``coords`` limits probed entries."""
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    g = np.zeros(flat.size, dtype=np.float64)
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2.0 * eps)
    return g.reshape(x.shape)


def max_rel_err(analytic, numeric):
    # mixed test: coordinates far below the gradient's peak are compared
    # against 0.1% of that peak instead of their own vanishing magnitude
    scale = np.abs(analytic) + np.abs(numeric)
    denom = np.maximum(scale, 1e-3 * scale.max() + 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check(build_loss, tensors, eps=1e-5, tol=1e-6):
    """Full-coordinate f64 gradcheck; returns the worst relative error."""
    loss = build_loss()
    ad.backward(loss)
    grads = [ad.grad_or_zero(t).copy() for t in tensors]

    def f():
        with ad.no_grad():
            return float(build_loss().data)

    worst = 0.0
    for t, g in zip(tensors, grads):
        num = numeric_grad(f, t.data, eps=eps)
        worst = max(worst, max_rel_err(g.astype(np.float64), num))
        t.grad = None
    assert worst < tol, f"gradcheck failed: max rel err {worst:.3e} >= {tol}"
    return worst


def f32_vs_f64(build_loss, arrays, rng, coords_per_tensor=8, eps=1e-5, tol=1e-3):
    """Analytic f32 gradients vs an f64 numeric oracle on probed coordinates.

    ``build_loss(tensors_dict)`` maps name -> Tensor built from the given
    arrays; ``arrays`` maps name -> f32 ndarray (the checked parameters).
    """
    t32 = {k: ad.Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    ad.backward(build_loss(t32))

    a64 = {k: v.astype(np.float64) for k, v in arrays.items()}
    t64 = {k: ad.Tensor(a64[k], requires_grad=False) for k in arrays}

    def f():
        with ad.no_grad():
            return float(build_loss(t64).data)

    worst = 0.0
    for k in arrays:
        g32 = ad.grad_or_zero(t32[k]).astype(np.float64)
        size = a64[k].size
        coords = rng.choice(size, size=min(coords_per_tensor, size), replace=False)
        num = numeric_grad(f, a64[k], eps=eps, coords=[int(c) for c in coords])
        sel = np.asarray([int(c) for c in coords])
        err = max_rel_err(g32.reshape(-1)[sel], num.reshape(-1)[sel])
        worst = max(worst, err)
    assert worst < tol, f"f32 gradient vs f64 oracle: max rel err {worst:.3e} >= {tol}"
    return worst
