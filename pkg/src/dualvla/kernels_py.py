"""Numpy implementations of the hot training-step kernels.

This is the fallback backend and the reference semantics for the compiled
extension in `_kernels.pyx`. Both backends expose the same functions; the
compiled one exists purely for speed (see benchmarks/bench_kernels.py).

Conventions shared by both backends:
  * float64 in, float64 out, fresh output arrays (inputs never mutated)
  * softmax rows whose maximum is -inf produce an all-zero row instead of
    NaN, so fully masked attention rows stay well defined
"""

import numpy as np

NAME = "python"

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu_fwd(x):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(x, gout):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return gout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax_lastdim_fwd(x):
    m = np.max(x, axis=-1, keepdims=True)
    dead = ~np.isfinite(m)  # all -inf row: exp would produce NaN
    shifted = np.where(dead, 0.0, x - np.where(dead, 0.0, m))
    e = np.exp(shifted)
    e = np.where(dead, 0.0, e)
    denom = np.sum(e, axis=-1, keepdims=True)
    denom = np.where(denom == 0.0, 1.0, denom)
    return e / denom


def softmax_lastdim_bwd(y, gout):
    dot = np.sum(y * gout, axis=-1, keepdims=True)
    return y * (gout - dot)


def layernorm_fwd(x, eps):
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    return centered * invstd, invstd


def layernorm_bwd(y, invstd, gout):
    gmean = np.mean(gout, axis=-1, keepdims=True)
    gydot = np.mean(gout * y, axis=-1, keepdims=True)
    return invstd * (gout - gmean - y * gydot)


def bpe_apply(ids, pair_rank):
    """Apply ranked merges to a token-id sequence until none applies.

    `pair_rank` maps (left_id, right_id) -> (rank, merged_id); the lowest
    rank present in the sequence is merged first, matching training order.
    """
    seq = list(ids)
    if len(seq) < 2 or not pair_rank:
        return seq
    while True:
        best_rank = None
        best_pair = None
        for a, b in zip(seq, seq[1:]):
            entry = pair_rank.get((a, b))
            if entry is not None and (best_rank is None or entry[0] < best_rank):
                best_rank = entry[0]
                best_pair = (a, b)
        if best_pair is None:
            return seq
        new_id = pair_rank[best_pair][1]
        merged = []
        i = 0
        n = len(seq)
        while i < n:
            if i + 1 < n and seq[i] == best_pair[0] and seq[i + 1] == best_pair[1]:
                merged.append(new_id)
                i += 2
            else:
                merged.append(seq[i])
                i += 1
        seq = merged
        if len(seq) < 2:
            return seq
