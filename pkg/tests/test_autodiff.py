import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualvla import autodiff as ad

EXPECTED_PRIMITIVES = {
    "matmul", "add", "mul", "scale", "sum", "mean", "transpose", "reshape",
    "concat", "slice", "relu", "gelu", "softmax_lastdim", "layer_norm",
    "embedding_lookup", "cross_entropy_logits", "mse", "sqrt", "l2_norm",
}


def test_primitive_set_is_exact():
    assert set(ad.primitive_set()) == EXPECTED_PRIMITIVES
    assert "matmul" in ad.primitive_set()
    assert "conv2d" not in ad.primitive_set()
    assert "l2_norm" in ad.primitive_set()


def test_backward_of_sum_is_ones():
    g = ad.Graph()
    x = g.leaf([1.0, -2.0, 3.0], requires_grad=True)
    grads = ad.backward(g, ad.sum_(x))
    np.testing.assert_array_equal(grads[x], [1.0, 1.0, 1.0])


def test_backward_mse_quadratic():
    # mse is mean-of-squares, so d/dx mse(x, 0) = 2x / n
    g = ad.Graph()
    x = g.leaf([1.0, 2.0], requires_grad=True)
    zero = g.constant(np.zeros(2))
    grads = ad.backward(g, ad.mse(x, zero))
    np.testing.assert_allclose(grads[x], [1.0, 2.0], atol=1e-15)


def test_backward_requires_scalar_loss():
    g = ad.Graph()
    x = g.leaf([1.0, 2.0], requires_grad=True)
    y = ad.mul(x, x)
    with pytest.raises(ad.ContractViolation):
        ad.backward(g, y)


def test_two_layer_mlp_matches_finite_differences(rng):
    w1 = rng.normal(size=(4, 5))
    w2 = rng.normal(size=(5, 3))
    x = rng.normal(size=(2, 4))
    probe = rng.normal(size=(2, 3))

    def build(g, w1_t, w2_t):
        h = ad.relu(ad.matmul(g.constant(x), w1_t))
        out = ad.matmul(h, w2_t)
        return ad.sum_(ad.mul(out, g.constant(probe)))

    assert ad.grad_check(build, [w1, w2], eps=1e-5) <= 1e-5


def test_grad_check_quadratic_is_tight():
    err = ad.grad_check(lambda g, t: ad.sum_(ad.mul(t, t)), [np.array([1.0, 2.0, 3.0])])
    assert err <= 1e-7


def test_grad_check_layer_norm_chain(rng):
    x = rng.normal(size=(3, 6))
    w = rng.normal(size=(3, 6))
    err = ad.grad_check(
        lambda g, t: ad.sum_(ad.mul(ad.layer_norm(t), g.constant(w))), [x], eps=1e-5
    )
    assert err <= 1e-5


def test_grad_check_softmax_cross_entropy(rng):
    x = rng.normal(size=(4, 5))
    err = ad.grad_check(
        lambda g, t: ad.cross_entropy_logits(t, [0, 2, 4, 1]), [x], eps=1e-5
    )
    assert err <= 1e-5


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ad.ContractViolation):
        ad.grad_check(lambda g, t: ad.sum_(t), [np.ones(2)], eps=0.0)


# --- per-primitive gradient fidelity -----------------------------------------


def _random_shape(rng):
    ndim = int(rng.integers(1, 4))
    return tuple(int(rng.integers(1, 5)) for _ in range(ndim))


def _primitive_builds(rng):
    """One scalarized graph builder per primitive, inputs kept away from
    non-differentiable points (relu kink, sqrt at zero)."""
    shape = _random_shape(rng)
    mat_n, mat_m, mat_p = (int(rng.integers(1, 5)) for _ in range(3))
    x = rng.normal(size=shape)
    safe = np.where(np.abs(x) < 0.2, np.sign(x) * 0.5 + x, x)
    probe = rng.normal(size=shape)
    a2 = rng.normal(size=(mat_n, mat_m))
    b2 = rng.normal(size=(mat_m, mat_p))
    probe_mm = rng.normal(size=(mat_n, mat_p))
    rows = int(rng.integers(2, 5))
    cols = int(rng.integers(2, 6))
    logits = rng.normal(size=(rows, cols))
    targets = rng.integers(0, cols, size=rows)
    table = rng.normal(size=(5, 3))
    lookups = rng.integers(0, 5, size=4)
    probe_tbl = rng.normal(size=(4, 3))
    axis = int(rng.integers(0, len(shape)))
    perm = tuple(rng.permutation(len(shape)).tolist())
    sl = tuple(slice(0, max(1, s - 1)) for s in shape)
    probe_sl = rng.normal(size=tuple(max(1, s - 1) for s in shape))
    half = rng.normal(size=shape)
    probe_sum = rng.normal(size=x.sum(axis=axis, keepdims=True).shape)
    probe_mean = rng.normal(size=x.mean(axis=axis, keepdims=True).shape)

    def weighted(op, data, pr):
        return lambda g, t: ad.sum_(ad.mul(op(t), g.constant(pr)))

    return {
        "matmul": (
            lambda g, a, b: ad.sum_(ad.mul(ad.matmul(a, b), g.constant(probe_mm))),
            [a2, b2],
        ),
        "add": (lambda g, a, b: ad.sum_(ad.mul(ad.add(a, b), g.constant(probe))), [x, half]),
        "mul": (lambda g, a, b: ad.sum_(ad.mul(ad.mul(a, b), g.constant(probe))), [x, half]),
        "scale": (weighted(lambda t: ad.scale(t, -1.7), x, probe), [x]),
        "sum": (
            lambda g, t: ad.sum_(ad.mul(ad.sum_(t, axis=axis, keepdims=True), g.constant(probe_sum))),
            [x],
        ),
        "mean": (
            lambda g, t: ad.sum_(ad.mul(ad.mean(t, axis=axis, keepdims=True), g.constant(probe_mean))),
            [x],
        ),
        "transpose": (weighted(lambda t: ad.transpose(t, perm), x, np.transpose(probe, perm)), [x]),
        "reshape": (weighted(lambda t: ad.reshape(t, (-1,)), x, probe.reshape(-1)), [x]),
        "concat": (
            lambda g, a, b: ad.sum_(
                ad.mul(ad.concat([a, b], axis=0), g.constant(np.concatenate([probe, probe], axis=0)))
            ),
            [x, half],
        ),
        "slice": (weighted(lambda t: ad.slice_(t, sl), x, probe_sl), [x]),
        "relu": (weighted(ad.relu, safe, probe), [safe]),
        "gelu": (weighted(ad.gelu, x, probe), [x]),
        "softmax_lastdim": (weighted(ad.softmax_lastdim, x, probe), [x]),
        "layer_norm": (
            weighted(ad.layer_norm, rng.normal(size=(3, 6)), rng.normal(size=(3, 6))),
            [rng.normal(size=(3, 6))],
        ),
        "embedding_lookup": (
            lambda g, t: ad.sum_(ad.mul(ad.embedding_lookup(t, lookups), g.constant(probe_tbl))),
            [table],
        ),
        "cross_entropy_logits": (
            lambda g, t: ad.cross_entropy_logits(t, targets),
            [logits],
        ),
        "mse": (lambda g, a, b: ad.mse(a, b), [x, half]),
        "sqrt": (
            weighted(ad.sqrt_, np.abs(x) + 0.5, probe),
            [np.abs(x) + 0.5],
        ),
        "l2_norm": (lambda g, t: ad.l2_norm(t), [safe]),
    }


def test_every_primitive_passes_grad_check_on_20_shapes():
    for trial in range(20):
        rng = np.random.default_rng(1000 + trial)
        builds = _primitive_builds(rng)
        assert set(builds) == EXPECTED_PRIMITIVES
        for name, (build, leaves) in builds.items():
            err = ad.grad_check(build, leaves, eps=1e-5)
            assert err <= 1e-4, f"{name} failed grad check at trial {trial}: {err}"


# --- forward semantics ----------------------------------------------------


def test_forward_determinism_bit_identical(rng):
    x = rng.normal(size=(6, 8))
    w = rng.normal(size=(8, 8))

    def run():
        g = ad.Graph()
        t = g.leaf(x)
        out = ad.softmax_lastdim(ad.layer_norm(ad.gelu(ad.matmul(t, g.constant(w)))))
        return out.array.tobytes()

    assert run() == run()


def test_softmax_rows_sum_to_one(rng):
    x = rng.normal(size=(50, 9)) * 5
    g = ad.Graph()
    y = ad.softmax_lastdim(g.leaf(x))
    np.testing.assert_allclose(y.array.sum(axis=-1), 1.0, atol=1e-12)


def test_layer_norm_moments(rng):
    x = rng.normal(size=(40, 16)) * 3 + 1
    g = ad.Graph()
    y = ad.layer_norm(g.leaf(x)).array
    assert np.abs(y.mean(axis=-1)).max() <= 1e-10
    assert np.abs(y.var(axis=-1) - 1.0).max() <= 1e-8


@settings(max_examples=25, deadline=None)
@given(
    rows=st.integers(1, 6),
    cols=st.integers(1, 6),
    scale=st.floats(0.1, 50.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_softmax_rows_sum_property(rows, cols, scale, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) * scale
    g = ad.Graph()
    y = ad.softmax_lastdim(g.leaf(x)).array
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-12)


# --- attention --------------------------------------------------------------


def test_attention_single_token_returns_v(rng):
    g = ad.Graph()
    q = g.leaf(rng.normal(size=(1, 4)))
    k = g.leaf(rng.normal(size=(1, 4)))
    v = g.leaf(rng.normal(size=(1, 4)))
    out = ad.attention(q, k, v, np.ones((1, 1), dtype=bool))
    np.testing.assert_allclose(out.array, v.array, atol=1e-14)


def test_attention_orthogonal_q_gives_mean_of_v(rng):
    g = ad.Graph()
    q = g.leaf(np.zeros((2, 4)))  # zero scores against any k
    k = g.leaf(rng.normal(size=(5, 4)))
    v = g.leaf(rng.normal(size=(5, 4)))
    out = ad.attention(q, k, v, np.ones((2, 5), dtype=bool))
    np.testing.assert_allclose(out.array, np.tile(v.array.mean(axis=0), (2, 1)), atol=1e-12)


def test_attention_causal_first_row_sees_only_first_key(rng):
    g = ad.Graph()
    q = g.leaf(rng.normal(size=(3, 4)))
    v = rng.normal(size=(3, 4))
    mask = np.tril(np.ones((3, 3), dtype=bool))
    out = ad.attention(g.leaf(rng.normal(size=(3, 4))), g.leaf(rng.normal(size=(3, 4))), g.leaf(v), mask)
    np.testing.assert_allclose(out.array[0], v[0], atol=1e-14)


def test_attention_fully_masked_row_is_zero(rng):
    g = ad.Graph()
    q = g.leaf(rng.normal(size=(2, 4)))
    k = g.leaf(rng.normal(size=(3, 4)))
    v = g.leaf(rng.normal(size=(3, 4)))
    mask = np.array([[True, True, True], [False, False, False]])
    out = ad.attention(q, k, v, mask)
    np.testing.assert_array_equal(out.array[1], np.zeros(4))


def test_attention_shape_mismatch_raises(rng):
    g = ad.Graph()
    with pytest.raises(ad.ContractViolation):
        ad.attention(
            g.leaf(rng.normal(size=(2, 4))),
            g.leaf(rng.normal(size=(3, 5))),
            g.leaf(rng.normal(size=(3, 4))),
            np.ones((2, 3), dtype=bool),
        )


# --- structural contracts ----------------------------------------------------


def test_ops_do_not_mutate_inputs(rng):
    x = rng.normal(size=(3, 4))
    g = ad.Graph()
    t = g.leaf(x)
    before = t.array.copy()
    ad.gelu(t)
    ad.layer_norm(t)
    ad.softmax_lastdim(t)
    ad.relu(t)
    np.testing.assert_array_equal(t.array, before)


def test_gradient_accumulates_across_fanout():
    g = ad.Graph()
    x = g.leaf([3.0], requires_grad=True)
    y = ad.add(x, x)
    grads = ad.backward(g, ad.sum_(y))
    np.testing.assert_array_equal(grads[x], [2.0])


def test_detach_blocks_gradient_and_reports_zeros(rng):
    g = ad.Graph()
    x = g.leaf(rng.normal(size=(3,)), requires_grad=True)
    frozen = ad.detach(x)
    loss = ad.sum_(ad.mul(frozen, frozen))
    grads = ad.backward(g, loss)
    np.testing.assert_array_equal(grads[x], np.zeros(3))


def test_graph_topological_by_construction(rng):
    g = ad.Graph()
    x = g.leaf(rng.normal(size=(2, 2)))
    y = ad.matmul(ad.gelu(x), ad.relu(x))
    for node in g.nodes:
        for inp in node.inputs:
            assert inp.idx < node.idx
    assert y.graph is g


def test_non_finite_forward_detected_and_named():
    g = ad.Graph()
    inf = g.constant([np.inf])
    zero = g.leaf([0.0], requires_grad=True)
    ad.mul(inf, zero)  # inf * 0 -> NaN
    with pytest.raises(ad.GraphError, match="mul"):
        ad.check_forward_finite(g)


def test_sqrt_rejects_negative_input():
    g = ad.Graph()
    with pytest.raises(ad.ContractViolation):
        ad.sqrt_(g.leaf([-1.0]))


def test_cross_graph_operands_rejected(rng):
    g1, g2 = ad.Graph(), ad.Graph()
    a = g1.leaf(rng.normal(size=(2,)))
    b = g2.leaf(rng.normal(size=(2,)))
    with pytest.raises(ad.ContractViolation):
        ad.add(a, b)
