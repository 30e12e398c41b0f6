# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels with the same semantics as kernels_py.

Single-threaded, float64, fresh outputs. Reductions run serially per row,
so results can differ from the numpy backend by normal round-off only.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh

cnp.import_array()

NAME = "cython"

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715
cdef double NEG_INF = -float("inf")


cdef void _gelu_fwd(double[::1] x, double[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double u, xi
    for i in range(n):
        xi = x[i]
        u = GELU_C * (xi + GELU_A * xi * xi * xi)
        out[i] = 0.5 * xi * (1.0 + tanh(u))


def gelu_fwd(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    _gelu_fwd(arr.reshape(-1), out.reshape(-1))
    return out


cdef void _gelu_bwd(double[::1] x, double[::1] g, double[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double u, t, du, xi
    for i in range(n):
        xi = x[i]
        u = GELU_C * (xi + GELU_A * xi * xi * xi)
        t = tanh(u)
        du = GELU_C * (1.0 + 3.0 * GELU_A * xi * xi)
        out[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)


def gelu_bwd(x, gout):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(gout, dtype=np.float64)
    out = np.empty_like(arr)
    _gelu_bwd(arr.reshape(-1), g.reshape(-1), out.reshape(-1))
    return out


cdef void _softmax_rows(double[:, ::1] x, double[:, ::1] out):
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    cdef double m, s, v
    for r in range(rows):
        m = NEG_INF
        for c in range(cols):
            if x[r, c] > m:
                m = x[r, c]
        if m == NEG_INF:
            for c in range(cols):
                out[r, c] = 0.0
            continue
        s = 0.0
        for c in range(cols):
            v = exp(x[r, c] - m)
            out[r, c] = v
            s += v
        for c in range(cols):
            out[r, c] /= s


def softmax_lastdim_fwd(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    shape = arr.shape
    last = shape[len(shape) - 1]
    rows = arr.reshape(-1, last)
    out = np.empty_like(rows)
    _softmax_rows(rows, out)
    return out.reshape(shape)


cdef void _softmax_rows_bwd(double[:, ::1] y, double[:, ::1] g, double[:, ::1] out):
    cdef Py_ssize_t r, c, rows = y.shape[0], cols = y.shape[1]
    cdef double dot
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += y[r, c] * g[r, c]
        for c in range(cols):
            out[r, c] = y[r, c] * (g[r, c] - dot)


def softmax_lastdim_bwd(y, gout):
    ya = np.ascontiguousarray(y, dtype=np.float64)
    ga = np.ascontiguousarray(gout, dtype=np.float64)
    shape = ya.shape
    last = shape[len(shape) - 1]
    rows = ya.reshape(-1, last)
    out = np.empty_like(rows)
    _softmax_rows_bwd(rows, ga.reshape(-1, last), out)
    return out.reshape(shape)


cdef void _layernorm_rows(double[:, ::1] x, double eps, double[:, ::1] out,
                          double[::1] invstd):
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    cdef double m, v, d, s
    for r in range(rows):
        m = 0.0
        for c in range(cols):
            m += x[r, c]
        m /= cols
        v = 0.0
        for c in range(cols):
            d = x[r, c] - m
            v += d * d
        v /= cols
        s = 1.0 / sqrt(v + eps)
        invstd[r] = s
        for c in range(cols):
            out[r, c] = (x[r, c] - m) * s


def layernorm_fwd(x, eps):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    shape = arr.shape
    last = shape[len(shape) - 1]
    rows = arr.reshape(-1, last)
    out = np.empty_like(rows)
    invstd = np.empty(rows.shape[0], dtype=np.float64)
    _layernorm_rows(rows, eps, out, invstd)
    return out.reshape(shape), invstd.reshape(shape[: len(shape) - 1] + (1,))


cdef void _layernorm_rows_bwd(double[:, ::1] y, double[::1] invstd,
                              double[:, ::1] g, double[:, ::1] out):
    cdef Py_ssize_t r, c, rows = y.shape[0], cols = y.shape[1]
    cdef double gmean, gydot
    for r in range(rows):
        gmean = 0.0
        gydot = 0.0
        for c in range(cols):
            gmean += g[r, c]
            gydot += g[r, c] * y[r, c]
        gmean /= cols
        gydot /= cols
        for c in range(cols):
            out[r, c] = invstd[r] * (g[r, c] - gmean - y[r, c] * gydot)


def layernorm_bwd(y, invstd, gout):
    ya = np.ascontiguousarray(y, dtype=np.float64)
    ga = np.ascontiguousarray(gout, dtype=np.float64)
    shape = ya.shape
    last = shape[len(shape) - 1]
    rows = ya.reshape(-1, last)
    inv = np.ascontiguousarray(invstd, dtype=np.float64).reshape(-1)
    out = np.empty_like(rows)
    _layernorm_rows_bwd(rows, inv, ga.reshape(-1, last), out)
    return out.reshape(shape)


def bpe_apply(ids, pair_rank):
    """Same merge loop as kernels_py.bpe_apply with packed integer keys."""
    cdef list seq = [int(t) for t in ids]
    if len(seq) < 2 or not pair_rank:
        return seq
    cdef dict packed = {}
    cdef long long key
    for (a, b), entry in pair_rank.items():
        key = (<long long> a) * 1048576 + <long long> b
        packed[key] = entry
    cdef long long best_rank, best_a, best_b, new_id
    cdef Py_ssize_t i, n
    cdef list merged
    while True:
        best_rank = -1
        best_a = -1
        best_b = -1
        n = len(seq)
        for i in range(n - 1):
            key = (<long long> seq[i]) * 1048576 + <long long> seq[i + 1]
            entry = packed.get(key)
            if entry is not None and (best_rank < 0 or <long long> entry[0] < best_rank):
                best_rank = entry[0]
                best_a = seq[i]
                best_b = seq[i + 1]
        if best_rank < 0:
            return seq
        new_id = packed[best_a * 1048576 + best_b][1]
        merged = []
        i = 0
        while i < n:
            if i + 1 < n and seq[i] == best_a and seq[i + 1] == best_b:
                merged.append(new_id)
                i += 2
            else:
                merged.append(seq[i])
                i += 1
        seq = merged
        if len(seq) < 2:
            return seq
