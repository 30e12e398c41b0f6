"""Shared transformer building blocks on top of the autodiff tape.

Models keep their weights in a ParamStore (plain name -> ndarray). Each
training step opens a fresh Graph, materializes the store as requires_grad
leaves, composes the forward pass, and applies gradients back onto the
store arrays. All sequence activations are (batch, n, d).
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import autodiff as ad


class ParamStore(OrderedDict):
    """Ordered name -> float64 ndarray map with leaf materialization."""

    def add(self, name, array):
        if name in self:
            raise ValueError(f"duplicate parameter {name!r}")
        self[name] = np.ascontiguousarray(array, dtype=np.float64)
        return self[name]

    def leaves(self, graph):
        return {name: graph.leaf(arr, requires_grad=True) for name, arr in self.items()}

    def copy_arrays(self):
        return OrderedDict((k, v.copy()) for k, v in self.items())


def init_linear(store, rng, name, din, dout, bias=True, scale=None):
    std = (1.0 / math.sqrt(din)) if scale is None else scale
    store.add(f"{name}.w", rng.normal(0.0, std, size=(din, dout)))
    if bias:
        store.add(f"{name}.b", np.zeros(dout))


def linear(leaves, name, x):
    # fold leading dims into one GEMM; much faster than stacked matmuls
    shape = x.array.shape
    if len(shape) > 2:
        flat = ad.reshape(x, (-1, shape[-1]))
        y = ad.matmul(flat, leaves[f"{name}.w"])
        y = ad.reshape(y, shape[:-1] + (y.array.shape[-1],))
    else:
        y = ad.matmul(x, leaves[f"{name}.w"])
    b = leaves.get(f"{name}.b")
    return ad.add(y, b) if b is not None else y


def init_layer_norm(store, name, d):
    store.add(f"{name}.g", np.ones(d))
    store.add(f"{name}.b", np.zeros(d))


def affine_layer_norm(leaves, name, x):
    normed = ad.layer_norm(x)
    return ad.add(ad.mul(normed, leaves[f"{name}.g"]), leaves[f"{name}.b"])


def init_attention(store, rng, name, d):
    for part in ("wq", "wk", "wv", "wo"):
        init_linear(store, rng, f"{name}.{part}", d, d)


def split_heads(x, n_heads):
    b, n, d = x.array.shape
    dh = d // n_heads
    return ad.transpose(ad.reshape(x, (b, n, n_heads, dh)), (0, 2, 1, 3))


def merge_heads(x):
    b, h, n, dh = x.array.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def multi_head_attention(leaves, name, x, n_heads, mask, kv_prefix=None):
    """Self-attention of x, optionally prepending external (k, v) context.

    kv_prefix is a (k_node, v_node) pair shaped (b, L, d) whose positions
    become attendable keys before x's own. Returns (out, k, v) where k, v
    are x's own projections shaped (b, n, d), the units a KV cache stores.

    The boolean mask covers the full key axis (prefix keys first) and must
    broadcast against (b, heads, n_q, n_k).
    """
    q = linear(leaves, f"{name}.wq", x)
    k = linear(leaves, f"{name}.wk", x)
    v = linear(leaves, f"{name}.wv", x)
    if kv_prefix is not None:
        pk, pv = kv_prefix
        full_k = ad.concat([pk, k], axis=1)
        full_v = ad.concat([pv, v], axis=1)
    else:
        full_k, full_v = k, v
    ctx = ad.attention(
        split_heads(q, n_heads),
        split_heads(full_k, n_heads),
        split_heads(full_v, n_heads),
        mask,
    )
    out = linear(leaves, f"{name}.wo", merge_heads(ctx))
    return out, k, v


def init_cross_attention(store, rng, name, d):
    for part in ("wq", "wk", "wv", "wo"):
        init_linear(store, rng, f"{name}.{part}", d, d)


def cross_attention(leaves, name, queries, memory, n_heads, mask=None):
    """Attention of query tokens over a separate memory sequence."""
    q = linear(leaves, f"{name}.wq", queries)
    k = linear(leaves, f"{name}.wk", memory)
    v = linear(leaves, f"{name}.wv", memory)
    if mask is None:
        mask = full_mask(queries.array.shape[-2], memory.array.shape[-2])
    ctx = ad.attention(split_heads(q, n_heads), split_heads(k, n_heads), split_heads(v, n_heads), mask)
    return linear(leaves, f"{name}.wo", merge_heads(ctx))


def init_mlp(store, rng, name, d, hidden=None):
    hidden = hidden or 2 * d
    init_linear(store, rng, f"{name}.up", d, hidden)
    init_linear(store, rng, f"{name}.down", hidden, d)


def mlp(leaves, name, x):
    # relu keeps the training step cheap; gelu remains available as a primitive
    return linear(leaves, f"{name}.down", ad.relu(linear(leaves, f"{name}.up", x)))


def init_block(store, rng, name, d, hidden=None):
    init_layer_norm(store, f"{name}.ln1", d)
    init_attention(store, rng, f"{name}.attn", d)
    init_layer_norm(store, f"{name}.ln2", d)
    init_mlp(store, rng, f"{name}.mlp", d, hidden)


def block(leaves, name, x, n_heads, mask, kv_prefix=None):
    """Pre-norm transformer block; returns (x, k, v) with k/v from self-attn."""
    attn_out, k, v = multi_head_attention(
        leaves, f"{name}.attn", affine_layer_norm(leaves, f"{name}.ln1", x), n_heads, mask, kv_prefix
    )
    x = ad.add(x, attn_out)
    x = ad.add(x, mlp(leaves, f"{name}.mlp", affine_layer_norm(leaves, f"{name}.ln2", x)))
    return x, k, v


def causal_mask(n):
    return np.tril(np.ones((n, n), dtype=bool))


def full_mask(n_q, n_k):
    return np.ones((n_q, n_k), dtype=bool)


def sinusoidal_features(t, dim=32, max_freq=100.0):
    """Fixed sin/cos features of scalars in [0, 1]; t may be scalar or 1-D."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(max_freq), half))
    angles = t[:, None] * freqs[None, :] * 2.0 * math.pi
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def stack_rows(nodes):
    """Stack (n, d) nodes into (len(nodes), n, d); lengths must match."""
    return ad.concat([ad.reshape(t, (1,) + t.array.shape) for t in nodes], axis=0)


def pad_axis0(node, target_len):
    """Right-pad a (n, d) node with zero rows up to target_len."""
    n, d = node.array.shape
    if n == target_len:
        return node
    zeros = node.graph.constant(np.zeros((target_len - n, d)))
    return ad.concat([node, zeros], axis=0)


def cosine_lr(base_lr, step, total_steps, min_frac=0.05):
    """Cosine decay from base_lr to min_frac * base_lr over total_steps."""
    if total_steps <= 1:
        return base_lr
    progress = min(max(step / (total_steps - 1), 0.0), 1.0)
    lo = base_lr * min_frac
    return lo + 0.5 * (base_lr - lo) * (1.0 + math.cos(math.pi * progress))


def sgd_step(store, leaf_map, grads, lr):
    """Plain gradient descent on every parameter that received a gradient."""
    for name, leaf in leaf_map.items():
        g = grads.get(leaf)
        if g is not None:
            store[name] = store[name] - lr * g


class Adam:
    """Adam with per-parameter step counts.

    Parameters that receive no gradient in a step are left bit-identical
    (no moment decay, no update), so structurally-unused parameters stay
    untouched.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, store, leaf_map, grads, lr):
        for name, leaf in leaf_map.items():
            g = grads.get(leaf)
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(store[name])
                self.v[name] = np.zeros_like(store[name])
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mhat = self.m[name] / (1.0 - self.beta1**t)
            vhat = self.v[name] / (1.0 - self.beta2**t)
            store[name] = store[name] - lr * mhat / (np.sqrt(vhat) + self.eps)
