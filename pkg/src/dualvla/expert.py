"""Flow-matching action expert conditioned on routed backbone KV caches.

The expert denoises a whole action chunk at once. Its tokens are one fresh
state token plus k action-frame tokens (each a dense embedding of the
noised action row plus a timestep embedding), attending bidirectionally
among themselves and over the per-layer context keys/values handed over
from the backbone. The training target is the constant velocity of the
linear noise-to-data path.

Sign convention: with the path A^tau = tau*A + (1-tau)*eps, the path
derivative is A - eps, and forward Euler from tau=0 at eps then lands on
A. The `paper_literal_sign` switch flips the regression target to
eps - A for side-by-side demonstration; integrating that field walks away
from the data, so it exists only as a demonstration flag.

The gradient boundary decides whether context tensors enter the expert as
constants ("truncate", backbone untouched by the flow loss) or as live
graph nodes ("flow_through").
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn

TAU_MIN = 0.001
TAU_MAX = 0.999

_VALID_BOUNDARIES = ("truncate", "flow_through")
_gradient_boundary = "truncate"


def set_gradient_boundary(mode):
    global _gradient_boundary
    if mode not in _VALID_BOUNDARIES:
        raise ad.ContractViolation(f"gradient boundary must be one of {_VALID_BOUNDARIES}")
    _gradient_boundary = mode


def get_gradient_boundary():
    return _gradient_boundary


def apply_boundary(ctx_layers, mode=None):
    """Detach context nodes under "truncate"; pass them through otherwise."""
    mode = mode or _gradient_boundary
    if mode not in _VALID_BOUNDARIES:
        raise ad.ContractViolation(f"gradient boundary must be one of {_VALID_BOUNDARIES}")
    if ctx_layers is None or mode == "flow_through":
        return ctx_layers
    out = []
    for k, v in ctx_layers:
        out.append((ad.detach(k) if isinstance(k, ad.Tensor) else k,
                    ad.detach(v) if isinstance(v, ad.Tensor) else v))
    return tuple(out)


def sample_tau(rng):
    """Flow time biased toward the noisy end: tau = 1 - u, u ~ Beta(1.5, 1)."""
    u = rng.beta(1.5, 1.0)
    return float(np.clip(1.0 - u, TAU_MIN, TAU_MAX))


@dataclass(frozen=True)
class FlowSample:
    tau: float
    epsilon: np.ndarray
    noised: np.ndarray
    target_field: np.ndarray


def make_flow_sample(chunk, rng, paper_literal_sign=False):
    """Corrupt a normalized chunk along the linear path tau*A + (1-tau)*eps."""
    chunk = np.asarray(chunk, dtype=np.float64)
    tau = sample_tau(rng)
    eps = rng.normal(size=chunk.shape)
    noised = tau * chunk + (1.0 - tau) * eps
    target = (eps - chunk) if paper_literal_sign else (chunk - eps)
    return FlowSample(tau=tau, epsilon=eps, noised=noised, target_field=target)


@dataclass(frozen=True)
class ExpertConfig:
    k: int = 7
    action_dim: int = 20
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    time_features: int = 32
    mlp_hidden: int = 128
    sigma: float = 0.2
    m_samples: int = 4


@dataclass(frozen=True)
class ActionNormalizer:
    """Per-dimension z-score fitted on the training corpus."""

    mean: np.ndarray
    std: np.ndarray

    def normalize(self, rows):
        return (np.asarray(rows, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, rows):
        return np.asarray(rows, dtype=np.float64) * self.std + self.mean


class ActionExpert:
    def __init__(self, config: ExpertConfig = ExpertConfig(), seed=0):
        self.config = config
        self.params = nn.ParamStore()
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        c = self.config
        p, d = self.params, c.d_model
        nn.init_linear(p, rng, "state", c.action_dim, d)
        nn.init_linear(p, rng, "act_in", c.action_dim, d)
        nn.init_linear(p, rng, "time", c.time_features, d)
        p.add("pos", rng.normal(0.0, 0.02, size=(c.k + 1, d)))
        for i in range(c.n_layers):
            nn.init_block(p, rng, f"block{i}", d, c.mlp_hidden)
        nn.init_layer_norm(p, "final_ln", d)
        nn.init_linear(p, rng, "head", d, c.action_dim)

    def forward(self, leaves, noised, tau, state, ctx_layers=None, ctx_valid=None):
        """Predict the velocity field for a batch of noised chunks.

        noised: (b, k, action_dim) node or array; tau: (b,) floats;
        state: (b, action_dim) array or node. ctx_layers: per expert layer
        a (keys, values) pair shaped (b, L, d); ctx_valid: optional bool
        (b, L) marking attendable context positions (padding support).
        Expert tokens always attend each other bidirectionally.
        """
        c = self.config
        if ctx_layers is not None and len(ctx_layers) != c.n_layers:
            raise ad.ContractViolation(
                f"context has {len(ctx_layers)} layers, expert needs {c.n_layers}"
            )
        g = leaves["pos"].graph
        if not isinstance(noised, ad.Tensor):
            noised = g.constant(np.asarray(noised, dtype=np.float64))
        b = noised.array.shape[0]
        if noised.array.shape[1:] != (c.k, c.action_dim):
            raise ad.ContractViolation(f"noised chunk must be (b, {c.k}, {c.action_dim})")
        if not isinstance(state, ad.Tensor):
            state = g.constant(np.asarray(state, dtype=np.float64))

        time_feats = g.constant(
            nn.sinusoidal_features(np.asarray(tau, dtype=np.float64), c.time_features)
        )  # (b, F)
        time_tok = ad.reshape(nn.linear(leaves, "time", time_feats), (b, 1, c.d_model))
        act = ad.add(nn.linear(leaves, "act_in", noised), time_tok)
        state_tok = ad.reshape(nn.linear(leaves, "state", state), (b, 1, c.d_model))
        x = ad.add(ad.concat([state_tok, act], axis=1), leaves["pos"])

        n = c.k + 1
        if ctx_layers is None or ctx_layers[0][0] is None:
            mask = nn.full_mask(n, n)
            ctx_layers = [None] * c.n_layers
        else:
            length = ctx_layers[0][0].array.shape[1]
            if ctx_valid is None:
                mask = nn.full_mask(n, length + n)
            else:
                valid = np.asarray(ctx_valid, dtype=bool)
                mask = np.ones((b, 1, n, length + n), dtype=bool)
                mask[:, 0, :, :length] = valid[:, None, :]
        for i in range(c.n_layers):
            x, _, _ = nn.block(leaves, f"block{i}", x, c.n_heads, mask, kv_prefix=ctx_layers[i])
        x = nn.affine_layer_norm(leaves, "final_ln", x)
        act_out = ad.slice_(x, (slice(None), slice(1, n)))
        return nn.linear(leaves, "head", act_out)

    def flow_loss(self, leaves, chunks, states, ctx_layers, rng, m=1,
                  boundary=None, ctx_valid=None, paper_literal_sign=False):
        """Mean squared velocity error over m noise draws per chunk.

        chunks: (B, k, action_dim) normalized actions; the m corruptions of
        a chunk share its context (context is repeated, not recomputed).
        Returns (loss node, FlowSample draw count).
        """
        if m < 1:
            raise ad.ContractViolation("m must be >= 1")
        chunks = np.asarray(chunks, dtype=np.float64)
        states = np.asarray(states, dtype=np.float64)
        bsz = chunks.shape[0]
        ctx_layers = apply_boundary(ctx_layers, boundary)
        draws = []
        for _ in range(m):
            for i in range(bsz):
                draws.append(make_flow_sample(chunks[i], rng, paper_literal_sign))
        noised = np.stack([d.noised for d in draws])
        target = np.stack([d.target_field for d in draws])
        taus = np.array([d.tau for d in draws])
        rep_states = np.concatenate([states] * m, axis=0)
        rep_ctx = None
        rep_valid = None
        if ctx_layers is not None and ctx_layers[0][0] is not None:
            rep_ctx = tuple(
                (ad.concat([k] * m, axis=0) if m > 1 else k,
                 ad.concat([v] * m, axis=0) if m > 1 else v)
                for k, v in ctx_layers
            )
            if ctx_valid is not None:
                rep_valid = np.concatenate([ctx_valid] * m, axis=0)
        g = leaves["pos"].graph
        vhat = self.forward(leaves, noised, taus, rep_states, rep_ctx, rep_valid)
        return ad.mse(vhat, g.constant(target)), len(draws)


def euler_integrate(initial, field, sigma):
    """Forward Euler from tau=0 to 1: A <- A + sigma * field(A, tau).

    `field` is whatever closure evaluates the learned velocity; it is never
    given anything but (A, tau), so conditioning context is computed once
    by the caller, not per step.
    """
    steps_f = 1.0 / sigma
    steps = int(round(steps_f))
    if steps < 1 or abs(steps * sigma - 1.0) > 1e-9:
        raise ad.ContractViolation(f"1/sigma must be a positive integer, got {steps_f}")
    a = np.asarray(initial, dtype=np.float64).copy()
    for j in range(steps):
        a = a + sigma * np.asarray(field(a, j * sigma), dtype=np.float64)
    return a


def fit_action_normalizer(episodes):
    rows = np.concatenate([ep.actions.astype(np.float64) for ep in episodes], axis=0)
    std = rows.std(axis=0)
    return ActionNormalizer(mean=rows.mean(axis=0), std=np.where(std < 1e-8, 1.0, std))
