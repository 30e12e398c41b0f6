"""Latent action model: frame-pair encoder, noise-substitution VQ, decoder.

The encoder embeds two frames one second apart (a spatial attention layer
per frame, then a temporal layer across both), and 8 learned query slots
read out 8 continuous vectors. Each slot is matched to its nearest
codebook entry; during training the quantized vector is replaced by the
encoder output plus error-norm-scaled unit Gaussian noise, which keeps the
whole graph differentiable (both the encoder and the selected codebook
entry receive gradients through the error norm). The decoder reconstructs
the future frame from the current frame (gradient stopped at the pixels)
and the 8 code tokens; supervision is plain MSE on pixels.

Labeling is deterministic: hard nearest-code indices, no noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn


@dataclass(frozen=True)
class LamConfig:
    image_size: int = 32
    patch: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_slots: int = 8
    codebook_size: int = 32
    frame_gap_seconds: float = 1.0
    refresh_interval: int = 500
    pool_size: int = 512

    @property
    def grid(self):
        if self.image_size % self.patch != 0:
            raise ValueError("patch size must divide image size")
        return self.image_size // self.patch

    @property
    def n_patches(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.patch * self.patch * 3


def nearest_code(x, codebook):
    """Index of the codebook row minimizing squared distance; ties break low."""
    x = np.asarray(x, dtype=np.float64)
    codebook = np.asarray(codebook, dtype=np.float64)
    d2 = np.sum((codebook - x[None, :]) ** 2, axis=-1)
    return int(np.argmin(d2))


def nearest_code_batch(xs, codebook):
    xs = np.asarray(xs, dtype=np.float64)
    codebook = np.asarray(codebook, dtype=np.float64)
    d2 = np.sum((xs[:, None, :] - codebook[None, :, :]) ** 2, axis=-1)
    return np.argmin(d2, axis=1)


def nsvq_substitute(x, c, rng, w=None):
    """Replace the quantization residual by error-norm-scaled unit noise.

    Returns x + (|x - c| / |w|) * w with w ~ N(0, I) held constant in the
    graph; the scalar error norm stays differentiable w.r.t. both x and c,
    and |out - x| equals |c - x| exactly. Norms are taken per trailing
    vector, so (..., d) batches substitute slot-wise. Passing w freezes the
    noise (gradient testing only).
    """
    err = ad.sub(x, c)
    norm = ad.sqrt_(ad.sum_(ad.mul(err, err), axis=-1, keepdims=True))
    shape = x.array.shape
    if w is None:
        w = rng.normal(size=shape)
        flat = w.reshape(-1, shape[-1])
        for i in range(flat.shape[0]):  # resample the measure-zero zero draw
            while not np.any(flat[i]):
                flat[i] = rng.normal(size=shape[-1])
    else:
        w = np.asarray(w, dtype=np.float64)
    unit = w / np.linalg.norm(w, axis=-1, keepdims=True)
    return ad.add(x, ad.mul(norm, x.graph.constant(unit)))


class LatentActionModel:
    def __init__(self, config: LamConfig = LamConfig(), seed=0):
        self.config = config
        self.params = nn.ParamStore()
        self.usage_counts = np.zeros(config.codebook_size, dtype=np.int64)
        self._pool = []
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        c = self.config
        p, d = self.params, c.d_model
        nn.init_linear(p, rng, "enc.patch", c.patch_dim, d)
        p.add("enc.pos", rng.normal(0.0, 0.02, size=(c.n_patches, d)))
        p.add("enc.frame", rng.normal(0.0, 0.02, size=(2, d)))
        nn.init_block(p, rng, "enc.spatial", d)
        nn.init_block(p, rng, "enc.temporal", d)
        p.add("enc.queries", rng.normal(0.0, 0.5, size=(c.n_slots, d)))
        nn.init_layer_norm(p, "enc.read_ln", d)
        nn.init_cross_attention(p, rng, "enc.read", d)
        nn.init_mlp(p, rng, "enc.read_mlp", d)
        nn.init_layer_norm(p, "enc.read_mlp_ln", d)

        nn.init_linear(p, rng, "dec.patch", c.patch_dim, d)
        p.add("dec.pos", rng.normal(0.0, 0.02, size=(c.n_patches, d)))
        p.add("dec.code_pos", rng.normal(0.0, 0.02, size=(c.n_slots, d)))
        nn.init_block(p, rng, "dec.block0", d)
        nn.init_block(p, rng, "dec.block1", d)
        nn.init_layer_norm(p, "dec.out_ln", d)
        nn.init_linear(p, rng, "dec.head", d, c.patch_dim)

        p.add("codebook", rng.normal(0.0, 0.5, size=(c.codebook_size, d)))

    # -- forward pieces ----------------------------------------------------

    def patchify(self, images):
        """(b, H, W, 3) -> (b, P, patch*patch*3) by block rearrangement."""
        c = self.config
        b = images.array.shape[0]
        g, pt = c.grid, c.patch
        x = ad.reshape(images, (b, g, pt, g, pt, 3))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (b, c.n_patches, c.patch_dim))

    def unpatchify(self, tokens):
        c = self.config
        b = tokens.array.shape[0]
        g, pt = c.grid, c.patch
        x = ad.reshape(tokens, (b, g, g, pt, pt, 3))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (b, c.image_size, c.image_size, 3))

    def encode(self, leaves, current, future, use_pos=True):
        """Slot readout (b, n_slots, d) from a batch of frame pairs."""
        c = self.config
        if current.array.shape != future.array.shape or current.array.shape[1:] != (
            c.image_size,
            c.image_size,
            3,
        ):
            raise ad.ContractViolation(
                f"frame batch must be (b, {c.image_size}, {c.image_size}, 3)"
            )
        b = current.array.shape[0]
        d = c.d_model
        tokens = []
        for img, frame_idx in ((current, 0), (future, 1)):
            t = nn.linear(leaves, "enc.patch", self.patchify(img))
            if use_pos:
                t = ad.add(t, leaves["enc.pos"])
            t = ad.add(t, ad.slice_(leaves["enc.frame"], (frame_idx,)))
            tokens.append(t)
        # spatial attention within each frame: fold frames into the batch
        x = ad.concat(tokens, axis=0)  # (2b, P, d)
        x, _, _ = nn.block(leaves, "enc.spatial", x, c.n_heads, nn.full_mask(c.n_patches, c.n_patches))
        # temporal attention across both frames
        x = ad.concat(
            [ad.slice_(x, (slice(0, b),)), ad.slice_(x, (slice(b, 2 * b),))], axis=1
        )  # (b, 2P, d)
        n = 2 * c.n_patches
        x, _, _ = nn.block(leaves, "enc.temporal", x, c.n_heads, nn.full_mask(n, n))
        mem = nn.affine_layer_norm(leaves, "enc.read_ln", x)
        queries = ad.reshape(leaves["enc.queries"], (1, c.n_slots, d))
        queries = ad.concat([queries] * b, axis=0) if b > 1 else queries
        read = nn.cross_attention(leaves, "enc.read", queries, mem, c.n_heads)
        x = ad.add(queries, read)
        x = ad.add(x, nn.mlp(leaves, "enc.read_mlp", nn.affine_layer_norm(leaves, "enc.read_mlp_ln", x)))
        return x

    def decode(self, leaves, current, codes):
        """Predict the future frame from current pixels (gradient stopped)
        and code tokens."""
        c = self.config
        frozen = ad.detach(current)
        t = nn.linear(leaves, "dec.patch", self.patchify(frozen))
        t = ad.add(t, leaves["dec.pos"])
        codes = ad.add(codes, leaves["dec.code_pos"])
        x = ad.concat([t, codes], axis=1)
        n = c.n_patches + c.n_slots
        mask = nn.full_mask(n, n)
        x, _, _ = nn.block(leaves, "dec.block0", x, c.n_heads, mask)
        x, _, _ = nn.block(leaves, "dec.block1", x, c.n_heads, mask)
        patches = ad.slice_(x, (slice(None), slice(0, c.n_patches)))
        patches = nn.linear(leaves, "dec.head", nn.affine_layer_norm(leaves, "dec.out_ln", patches))
        return self.unpatchify(patches)

    # -- training and labeling ----------------------------------------------

    def train_step(self, current, future, rng, lr=0.05, frozen_w=None, optimizer=None):
        """One optimization step on a batch of frame pairs; returns the loss.

        Plain gradient descent unless an optimizer (nn.Adam) is passed.
        """
        cfg = self.config
        g = ad.Graph()
        leaves = self.params.leaves(g)
        cur = g.leaf(np.asarray(current, dtype=np.float64))
        fut = g.leaf(np.asarray(future, dtype=np.float64))
        x_enc = self.encode(leaves, cur, fut)
        b = x_enc.array.shape[0]
        flat = x_enc.array.reshape(-1, cfg.d_model)
        indices = nearest_code_batch(flat, self.params["codebook"])
        np.add.at(self.usage_counts, indices, 1)
        self._remember(flat)
        c_sel = ad.reshape(
            ad.embedding_lookup(leaves["codebook"], indices),
            (b, cfg.n_slots, cfg.d_model),
        )
        c_sub = nsvq_substitute(x_enc, c_sel, rng, w=frozen_w)
        pred = self.decode(leaves, cur, c_sub)
        loss = ad.mse(pred, fut)
        if not np.isfinite(loss.array):
            raise ad.GraphError("non-finite reconstruction loss")
        grads = ad.backward(g, loss)
        if optimizer is None:
            nn.sgd_step(self.params, leaves, grads, lr)
        else:
            optimizer.step(self.params, leaves, grads, lr)
        return float(loss.array)

    def _remember(self, flat):
        self._pool.extend(np.asarray(flat, dtype=np.float64))
        overflow = len(self._pool) - self.config.pool_size
        if overflow > 0:
            del self._pool[:overflow]

    def codebook_refresh(self, rng, threshold=0, noise=1e-3):
        """Replace codes unused since the last refresh window; reset counts."""
        if not self._pool:
            return []
        dead = [i for i in range(self.config.codebook_size) if self.usage_counts[i] <= threshold]
        pool = np.asarray(self._pool)
        for i in dead:
            pick = pool[int(rng.integers(len(pool)))]
            self.params["codebook"][i] = pick + rng.normal(0.0, noise, size=pick.shape)
        self.usage_counts[:] = 0
        return dead

    def encode_values(self, current, future):
        """Deterministic encoder output as plain arrays (no training noise)."""
        g = ad.Graph()
        leaves = self.params.leaves(g)
        x = self.encode(leaves, g.leaf(np.asarray(current, dtype=np.float64)), g.leaf(np.asarray(future, dtype=np.float64)))
        return x.array

    def hard_codes(self, current, future):
        """(b, n_slots) nearest-code indices for a batch of frame pairs."""
        x = self.encode_values(current, future)
        flat = x.reshape(-1, self.config.d_model)
        idx = nearest_code_batch(flat, self.params["codebook"])
        return idx.reshape(x.shape[0], self.config.n_slots)

    def label_episode(self, episode):
        """(T, n_slots) hard code indices; steps with no future frame one
        second ahead reuse the last computed label."""
        gap = int(round(self.config.frame_gap_seconds * episode.fps))
        frames = np.asarray(episode.frames, dtype=np.float64)
        t_total = frames.shape[0]
        if t_total < gap + 1:
            raise ValueError(
                f"episode of {t_total} frames is shorter than the {gap + 1} needed"
            )
        valid = t_total - gap
        codes = self.hard_codes(frames[:valid], frames[gap : gap + valid])
        tail = np.repeat(codes[-1:], t_total - valid, axis=0)
        return np.concatenate([codes, tail], axis=0)
