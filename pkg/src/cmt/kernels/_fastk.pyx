# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: fused single-pass variants of the pure-numpy backend.

Semantics mirror kernels.pure: float32/float64 storage, float64 accumulation
in every reduction.  Results agree with the pure backend to rounding error.
"""

import numpy as np

cimport cython
from libc.math cimport cos, exp, log, pow, sin, sqrt

BACKEND = "compiled"

ctypedef fused real:
    float
    double


cdef inline object _empty(Py_ssize_t n, Py_ssize_t c, bint single):
    if single:
        return np.empty((n, c), dtype=np.float32)
    return np.empty((n, c), dtype=np.float64)


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    cdef double m, z, v
    out = _empty(n, c, real is float)
    cdef real[:, ::1] o = out
    cdef double[::1] row = np.empty(c, dtype=np.float64)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        z = 0.0
        for j in range(c):
            v = exp(x[i, j] - m)
            row[j] = v
            z += v
        for j in range(c):
            o[i, j] = <real> (row[j] / z)
    return out


def softmax_bwd(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], c = y.shape[1], i, j
    cdef double dot
    out = _empty(n, c, real is float)
    cdef real[:, ::1] o = out
    for i in range(n):
        dot = 0.0
        for j in range(c):
            dot += (<double> y[i, j]) * (<double> gy[i, j])
        for j in range(c):
            o[i, j] = <real> ((<double> y[i, j]) * ((<double> gy[i, j]) - dot))
    return out


def rmsnorm_fwd(real[:, ::1] x, double eps):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    cdef double ms, inv_i
    out = _empty(n, c, real is float)
    inv = np.empty(n, dtype=np.float64)
    cdef real[:, ::1] o = out
    cdef double[::1] iv = inv
    for i in range(n):
        ms = 0.0
        for j in range(c):
            ms += (<double> x[i, j]) * (<double> x[i, j])
        inv_i = 1.0 / sqrt(ms / c + eps)
        iv[i] = inv_i
        for j in range(c):
            o[i, j] = <real> ((<double> x[i, j]) * inv_i)
    return out, inv


def rmsnorm_bwd(real[:, ::1] y, double[::1] inv, real[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], c = y.shape[1], i, j
    cdef double mean_gy_y
    out = _empty(n, c, real is float)
    cdef real[:, ::1] o = out
    for i in range(n):
        mean_gy_y = 0.0
        for j in range(c):
            mean_gy_y += (<double> gy[i, j]) * (<double> y[i, j])
        mean_gy_y /= c
        for j in range(c):
            o[i, j] = <real> (inv[i] * ((<double> gy[i, j]) - (<double> y[i, j]) * mean_gy_y))
    return out


def rope_fwd(real[:, ::1] x, double[::1] pos, double base):
    cdef Py_ssize_t n = x.shape[0], dim = x.shape[1], half = dim // 2, i, j
    cdef double ang, c_, s_, a, b
    out = _empty(n, dim, real is float)
    cdef real[:, ::1] o = out
    cdef double[::1] freqs = np.empty(half, dtype=np.float64)
    for j in range(half):
        freqs[j] = pow(base, -2.0 * j / dim)
    for i in range(n):
        for j in range(half):
            ang = pos[i] * freqs[j]
            c_ = cos(ang)
            s_ = sin(ang)
            a = <double> x[i, j]
            b = <double> x[i, j + half]
            o[i, j] = <real> (a * c_ - b * s_)
            o[i, j + half] = <real> (a * s_ + b * c_)
    return out


def silu_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    cdef double v, s
    out = _empty(n, c, real is float)
    cdef real[:, ::1] o = out
    for i in range(n):
        for j in range(c):
            v = <double> x[i, j]
            s = 1.0 / (1.0 + exp(-v))
            o[i, j] = <real> (v * s)
    return out


def silu_bwd(real[:, ::1] x, real[:, ::1] gy):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    cdef double v, s
    out = _empty(n, c, real is float)
    cdef real[:, ::1] o = out
    for i in range(n):
        for j in range(c):
            v = <double> x[i, j]
            s = 1.0 / (1.0 + exp(-v))
            o[i, j] = <real> ((<double> gy[i, j]) * s * (1.0 + v * (1.0 - s)))
    return out


def xent_fwd(real[:, ::1] logits, long long[::1] targets):
    cdef Py_ssize_t n = logits.shape[0], c = logits.shape[1], i, j
    cdef double m, z, v
    probs = _empty(n, c, real is float)
    if real is float:
        loss = np.empty(n, dtype=np.float32)
    else:
        loss = np.empty(n, dtype=np.float64)
    cdef real[:, ::1] p = probs
    cdef real[::1] lo = loss
    cdef double[::1] row = np.empty(c, dtype=np.float64)
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        z = 0.0
        for j in range(c):
            v = exp(logits[i, j] - m)
            row[j] = v
            z += v
        for j in range(c):
            p[i, j] = <real> (row[j] / z)
        lo[i] = <real> ((m + log(z)) - (<double> logits[i, targets[i]]))
    return loss, probs


def xent_bwd(real[:, ::1] probs, long long[::1] targets, real[::1] gloss):
    cdef Py_ssize_t n = probs.shape[0], c = probs.shape[1], i, j
    cdef double g
    out = _empty(n, c, real is float)
    cdef real[:, ::1] o = out
    for i in range(n):
        g = <double> gloss[i]
        for j in range(c):
            o[i, j] = <real> ((<double> probs[i, j]) * g)
        o[i, targets[i]] = <real> ((<double> o[i, targets[i]]) - g)
    return out
