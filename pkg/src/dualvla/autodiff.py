"""Reverse-mode tape autodiff over float64 numpy arrays.

A `Graph` is a single-owner, single-threaded tape. Every operation appends
one node, so the tape is topologically ordered by construction and
`backward` is a single reverse sweep with gradient accumulation across
fan-out. Tensors are immutable once created: no op writes into its inputs.

The primitive set is intentionally small; everything model-shaped
(attention, transformer blocks, losses over spans) is composed from it.
Parallelism is only sound across independent graphs.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .backend import kernels as K

LN_EPS = 1e-12
_TINY = 1e-30


class ContractViolation(Exception):
    """An operation was called outside its contract (shapes, domains, modes)."""


class GraphError(Exception):
    """Non-finite values or structural problems detected in a graph."""


class Tensor:
    """One graph node: an immutable float64 value plus tape bookkeeping.

    `data` is the row-major flat view of the value; `array` the shaped
    ndarray. Leaves have op == "leaf" and no inputs.
    """

    __slots__ = ("graph", "op", "inputs", "array", "requires_grad", "ctx", "idx")

    def __init__(self, graph, op, inputs, array, requires_grad, ctx=None):
        self.graph = graph
        self.op = op
        self.inputs = inputs
        self.array = array
        self.requires_grad = requires_grad
        self.ctx = ctx
        self.idx = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.array.shape

    @property
    def data(self):
        return self.array.reshape(-1)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.array.shape}, idx={self.idx})"


class Graph:
    """Append-only tape of Tensors, topologically ordered by construction."""

    __slots__ = ("nodes", "neg_inf_ok")

    def __init__(self):
        self.nodes: list[Tensor] = []
        # node indices allowed to carry -inf (additive attention masks)
        self.neg_inf_ok: set[int] = set()

    def leaf(self, array, requires_grad=False) -> Tensor:
        arr = np.asarray(array, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        return Tensor(self, "leaf", (), arr, requires_grad)

    def constant(self, array) -> Tensor:
        return self.leaf(array, requires_grad=False)


def _same_graph(*tensors):
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise ContractViolation("operands belong to different graphs")
    return g


def _node(op, inputs, array, ctx=None):
    g = _same_graph(*inputs)
    rg = any(t.requires_grad for t in inputs)
    return Tensor(g, op, tuple(inputs), np.asarray(array, dtype=np.float64), rg, ctx)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to `shape`."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives: forward builders + registered backward rules
# ---------------------------------------------------------------------------

_BACKWARD: dict[str, Callable] = {}


def _register(name):
    def deco(fn):
        _BACKWARD[name] = fn
        return fn

    return deco


def primitive_set():
    """Names of all registered differentiable primitives."""
    return sorted(_BACKWARD)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.array.ndim < 2 or b.array.ndim < 2:
        raise ContractViolation("matmul requires >=2-D operands")
    if a.array.shape[-1] != b.array.shape[-2]:
        raise ContractViolation(
            f"matmul inner dims differ: {a.array.shape} @ {b.array.shape}"
        )
    return _node("matmul", (a, b), np.matmul(a.array, b.array))


@_register("matmul")
def _matmul_bwd(node, gout):
    a, b = node.inputs
    ga = np.matmul(gout, np.swapaxes(b.array, -1, -2))
    gb = np.matmul(np.swapaxes(a.array, -1, -2), gout)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _node("add", (a, b), a.array + b.array)


@_register("add")
def _add_bwd(node, gout):
    a, b = node.inputs
    return _unbroadcast(gout, a.shape), _unbroadcast(gout, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node("mul", (a, b), a.array * b.array)


@_register("mul")
def _mul_bwd(node, gout):
    a, b = node.inputs
    return (
        _unbroadcast(gout * b.array, a.shape),
        _unbroadcast(gout * a.array, b.shape),
    )


def scale(a: Tensor, s: float) -> Tensor:
    return _node("scale", (a,), a.array * float(s), ctx=float(s))


@_register("scale")
def _scale_bwd(node, gout):
    return (gout * node.ctx,)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.array.sum(axis=axis, keepdims=keepdims)
    return _node("sum", (a,), out, ctx=(axis, keepdims))


@_register("sum")
def _sum_bwd(node, gout):
    (a,) = node.inputs
    axis, keepdims = node.ctx
    g = np.asarray(gout)
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % a.array.ndim for ax in axes)
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, a.shape).copy(),)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.array.mean(axis=axis, keepdims=keepdims)
    count = a.array.size if axis is None else a.array.size // out.size
    return _node("mean", (a,), out, ctx=(axis, keepdims, count))


@_register("mean")
def _mean_bwd(node, gout):
    (a,) = node.inputs
    axis, keepdims, count = node.ctx
    g = np.asarray(gout) / count
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % a.array.ndim for ax in axes)
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, a.shape).copy(),)


def transpose(a: Tensor, axes=None) -> Tensor:
    return _node("transpose", (a,), np.transpose(a.array, axes), ctx=axes)


@_register("transpose")
def _transpose_bwd(node, gout):
    axes = node.ctx
    if axes is None:
        return (np.transpose(gout),)
    inv = np.argsort(axes)
    return (np.transpose(gout, inv),)


def reshape(a: Tensor, shape) -> Tensor:
    return _node("reshape", (a,), a.array.reshape(shape))


@_register("reshape")
def _reshape_bwd(node, gout):
    (a,) = node.inputs
    return (gout.reshape(a.shape),)


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    out = np.concatenate([t.array for t in tensors], axis=axis)
    return _node("concat", tuple(tensors), out, ctx=axis)


@_register("concat")
def _concat_bwd(node, gout):
    axis = node.ctx
    sizes = [t.array.shape[axis] for t in node.inputs]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.ascontiguousarray(g) for g in np.split(gout, splits, axis=axis))


def slice_(a: Tensor, key) -> Tensor:
    out = a.array[key]
    return _node("slice", (a,), np.ascontiguousarray(out), ctx=key)


@_register("slice")
def _slice_bwd(node, gout):
    (a,) = node.inputs
    g = np.zeros_like(a.array)
    g[node.ctx] += gout
    return (g,)


def relu(a: Tensor) -> Tensor:
    return _node("relu", (a,), np.maximum(a.array, 0.0))


@_register("relu")
def _relu_bwd(node, gout):
    (a,) = node.inputs
    return (gout * (a.array > 0.0),)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; the backward rule is its exact analytic derivative
    return _node("gelu", (a,), K.gelu_fwd(a.array))


@_register("gelu")
def _gelu_bwd(node, gout):
    (a,) = node.inputs
    return (K.gelu_bwd(a.array, gout),)


def softmax_lastdim(a: Tensor) -> Tensor:
    y = K.softmax_lastdim_fwd(a.array)
    return _node("softmax_lastdim", (a,), y)


@_register("softmax_lastdim")
def _softmax_bwd(node, gout):
    return (K.softmax_lastdim_bwd(node.array, gout),)


def layer_norm(a: Tensor) -> Tensor:
    """Normalize the last dim to zero mean / unit variance (no affine)."""
    y, invstd = K.layernorm_fwd(a.array, LN_EPS)
    return _node("layer_norm", (a,), y, ctx=invstd)


@_register("layer_norm")
def _layer_norm_bwd(node, gout):
    return (K.layernorm_bwd(node.array, node.ctx, gout),)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    if table.array.ndim != 2:
        raise ContractViolation("embedding table must be 2-D")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractViolation("embedding indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.array.shape[0]):
        raise ContractViolation("embedding index out of range")
    return _node("embedding_lookup", (table,), table.array[idx], ctx=idx)


@_register("embedding_lookup")
def _embedding_bwd(node, gout):
    (table,) = node.inputs
    g = np.zeros_like(table.array)
    np.add.at(g, node.ctx, gout)
    return (g,)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean cross entropy of integer targets under row-wise softmax(logits)."""
    if logits.array.ndim != 2:
        raise ContractViolation("cross_entropy_logits expects (n, vocab) logits")
    t = np.asarray(targets, dtype=np.int64)
    n, v = logits.array.shape
    if t.shape != (n,):
        raise ContractViolation("targets must be one id per logits row")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise ContractViolation("target id outside the logits vocabulary")
    z = logits.array
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    denom = e.sum(axis=1, keepdims=True)
    probs = e / denom
    lse = np.log(denom).reshape(-1) + m.reshape(-1)
    loss = float(np.mean(lse - z[np.arange(n), t]))
    return _node("cross_entropy_logits", (logits,), np.float64(loss), ctx=(probs, t))


@_register("cross_entropy_logits")
def _ce_bwd(node, gout):
    probs, t = node.ctx
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), t] -= 1.0
    return (g * (float(gout) / n),)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of elementwise squared differences."""
    if a.array.shape != b.array.shape:
        raise ContractViolation("mse operands must share a shape")
    d = a.array - b.array
    return _node("mse", (a, b), np.float64(np.mean(d * d)), ctx=d)


@_register("mse")
def _mse_bwd(node, gout):
    d = node.ctx
    g = d * (2.0 * float(gout) / d.size)
    return g, -g


def sqrt_(a: Tensor) -> Tensor:
    if a.array.size and a.array.min() < 0.0:
        raise ContractViolation("sqrt of a negative entry")
    return _node("sqrt", (a,), np.sqrt(a.array))


@_register("sqrt")
def _sqrt_bwd(node, gout):
    return (gout / (2.0 * np.maximum(node.array, _TINY)),)


def l2_norm(a: Tensor) -> Tensor:
    return _node("l2_norm", (a,), np.float64(np.sqrt(np.sum(a.array * a.array))))


@_register("l2_norm")
def _l2_norm_bwd(node, gout):
    (a,) = node.inputs
    norm = float(node.array)
    return (a.array * (float(gout) / max(norm, _TINY)),)


# ---------------------------------------------------------------------------
# composites and helpers (not primitives)
# ---------------------------------------------------------------------------


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def detach(a: Tensor) -> Tensor:
    """Re-enter a value as a constant leaf; no gradient crosses this point."""
    return a.graph.leaf(a.array.copy(), requires_grad=False)


def mask_to_additive(mask) -> np.ndarray:
    """Boolean attend-mask to additive 0 / -inf terms (log of the mask)."""
    m = np.asarray(mask, dtype=bool)
    return np.where(m, 0.0, -np.inf)


def attention(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    """softmax(q k^T / sqrt(d) + log(mask)) v over the last two axes.

    `mask` is boolean, True = attend, broadcastable against the score
    shape. Rows with no attendable key produce a zero output row.
    """
    if q.array.shape[-1] != k.array.shape[-1]:
        raise ContractViolation("q and k feature dims differ")
    if k.array.shape[-2] != v.array.shape[-2]:
        raise ContractViolation("k and v sequence lengths differ")
    d = q.array.shape[-1]
    scores = scale(matmul(q, transpose(k, _swap_last(k.array.ndim))), 1.0 / math.sqrt(d))
    additive = mask_to_additive(mask)
    if additive.shape[-1] != k.array.shape[-2] or (
        additive.ndim >= 2 and additive.shape[-2] not in (1, q.array.shape[-2])
    ):
        raise ContractViolation("mask not broadcastable to the score shape")
    masked = add(scores, q.graph.constant(additive))
    q.graph.neg_inf_ok.add(masked.idx)
    return matmul(softmax_lastdim(masked), v)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------


def backward(graph: Graph, loss: Tensor, check_finite=False):
    """Gradients of a scalar loss for every requires_grad node in its graph.

    Returns {Tensor: ndarray}. Leaves flagged requires_grad that the loss
    never touched get explicit zeros, so stop-gradient contracts are
    observable.
    """
    if loss.graph is not graph:
        raise ContractViolation("loss does not belong to this graph")
    if loss.array.size != 1:
        raise ContractViolation("backward requires a scalar loss")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.array)}
    for node in reversed(graph.nodes[: loss.idx + 1]):
        g = grads.get(node)
        if g is None or node.op == "leaf":
            continue
        if not node.requires_grad:
            continue
        input_grads = _BACKWARD[node.op](node, g)
        for inp, ig in zip(node.inputs, input_grads):
            if not inp.requires_grad:
                continue
            if check_finite and not np.all(np.isfinite(ig)):
                raise GraphError(f"non-finite gradient flowing into {inp.op!r} node {inp.idx}")
            acc = grads.get(inp)
            grads[inp] = ig if acc is None else acc + ig
    out = {n: g for n, g in grads.items() if n.requires_grad}
    for node in graph.nodes:
        if node.op == "leaf" and node.requires_grad and node not in out:
            out[node] = np.zeros_like(node.array)
    return out


def check_forward_finite(graph: Graph):
    """Raise GraphError naming the first node holding a non-finite value.

    Constant leaves and nodes registered in graph.neg_inf_ok (masked
    attention scores) may hold -inf on purpose; NaN is never allowed.
    """
    for node in graph.nodes:
        if node.op == "leaf":
            continue
        arr = node.array
        if node.idx in graph.neg_inf_ok:
            bad = np.any(np.isnan(arr)) or np.any(arr == np.inf)
        else:
            bad = not np.all(np.isfinite(arr))
        if bad:
            raise GraphError(f"non-finite value at {node.op!r} node {node.idx}")


def grad_check(build, leaves, eps=1e-5):
    """Max relative error between tape gradients and central differences.

    `build(graph, *leaf_tensors) -> scalar loss` must be deterministic.
    The error metric is |analytic - fd| / max(1, |fd|), maximized over all
    entries of all leaves.
    """
    if eps <= 0:
        raise ContractViolation("grad_check needs eps > 0")
    leaves = [np.ascontiguousarray(a, dtype=np.float64) for a in leaves]
    g = Graph()
    ts = [g.leaf(a, requires_grad=True) for a in leaves]
    loss = build(g, *ts)
    check_forward_finite(g)
    analytic = backward(g, loss, check_finite=True)

    def value_at(arrays):
        g2 = Graph()
        ts2 = [g2.leaf(a) for a in arrays]
        return float(build(g2, *ts2).array)

    worst = 0.0
    for i, base in enumerate(leaves):
        an = analytic[ts[i]].reshape(-1)
        flat = base.reshape(-1)
        for j in range(flat.size):
            bumped = [a.copy() for a in leaves]
            bumped[i].reshape(-1)[j] = flat[j] + eps
            up = value_at(bumped)
            bumped[i].reshape(-1)[j] = flat[j] - eps
            down = value_at(bumped)
            fd = (up - down) / (2.0 * eps)
            if not math.isfinite(fd):
                raise GraphError(f"non-finite finite-difference at leaf {i} entry {j}")
            worst = max(worst, abs(an[j] - fd) / max(1.0, abs(fd)))
    return worst
