"""Decoder-only multimodal backbone with role-tagged KV caches.

A sample becomes one token sequence: image patches, instruction text, a
state placeholder (replaced by a dense projection of the actual state
vector), then teacher-forced latent-action and discrete-action token
embeddings. QA samples carry a marker token and answer text instead of
state/action spans. Attention is causal; the forward pass emits per-layer
keys/values tagged with each position's role so downstream consumers can
route on roles.

Latent and discrete action tokens live in reserved id ranges appended to
the text vocabulary, and their cross-entropy losses are computed over
their own range only (a 32-way softmax for latent tokens, vocab-sized for
discrete ones), so text targets can never leak into action ranges or vice
versa.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import autodiff as ad
from . import env as E
from . import nn


class Role(IntEnum):
    IMG = 0
    TXT = 1
    STATE = 2
    QA_MARK = 3
    ANSWER = 4
    LAT = 5
    FAST = 6


ROLE_ORDER = (Role.IMG, Role.TXT, Role.STATE, Role.QA_MARK, Role.ANSWER, Role.LAT, Role.FAST)


@dataclass(frozen=True)
class Span:
    role: Role
    start: int
    length: int

    @property
    def stop(self):
        return self.start + self.length


@dataclass(frozen=True)
class TokenLayout:
    spans: tuple

    def __post_init__(self):
        pos = 0
        order = -1
        for span in self.spans:
            if span.start != pos:
                raise ad.ContractViolation("layout spans must be contiguous")
            if span.length < 1:
                raise ad.ContractViolation("layout spans must be non-empty")
            rank = ROLE_ORDER.index(span.role)
            if rank <= order:
                raise ad.ContractViolation("layout roles out of order")
            order = rank
            if span.role == Role.STATE and span.length != 1:
                raise ad.ContractViolation("STATE span must have length 1")
            pos = span.stop

    @property
    def total(self):
        return self.spans[-1].stop if self.spans else 0

    def span(self, role):
        for s in self.spans:
            if s.role == role:
                return s
        return None

    def roles(self):
        out = np.empty(self.total, dtype=np.int64)
        for s in self.spans:
            out[s.start : s.stop] = int(s.role)
        return out


@dataclass(frozen=True)
class VocabMap:
    """Disjoint id ranges: text, reserved latent, reserved discrete, QA marker."""

    words: tuple
    v_txt: int = 512
    n_latent: int = 32
    n_fast: int = 256
    word_ids: dict = field(repr=False, default=None)

    def __post_init__(self):
        if len(self.words) > self.v_txt:
            raise ValueError("closed text vocabulary exceeds v_txt")
        object.__setattr__(self, "word_ids", {w: i for i, w in enumerate(self.words)})

    @property
    def latent_offset(self):
        return self.v_txt

    @property
    def fast_offset(self):
        return self.v_txt + self.n_latent

    @property
    def qa_mark_id(self):
        return self.v_txt + self.n_latent + self.n_fast

    @property
    def total(self):
        return self.v_txt + self.n_latent + self.n_fast + 1

    def encode_text(self, text):
        ids = []
        for word in text.split():
            if word not in self.word_ids:
                raise ValueError(f"word {word!r} not in the closed vocabulary")
            ids.append(self.word_ids[word])
        return np.asarray(ids, dtype=np.int64)

    def decode_text(self, ids):
        return " ".join(self.words[int(i)] for i in ids)

    def to_meta(self):
        return {
            "words": list(self.words),
            "v_txt": self.v_txt,
            "n_latent": self.n_latent,
            "n_fast": self.n_fast,
        }

    @staticmethod
    def from_meta(meta):
        return VocabMap(
            words=tuple(meta["words"]),
            v_txt=meta["v_txt"],
            n_latent=meta["n_latent"],
            n_fast=meta["n_fast"],
        )


def build_vocab(n_fast=256, extra_words=()):
    words = (
        ["put", "the", "into", "which", "object", "is", "left", "of", "nothing"]
        + list(E.COLORS)
        + list(E.SHAPES)
        + list(E.CONTAINER_NAMES)
        + list(extra_words)
    )
    return VocabMap(words=tuple(words), n_fast=n_fast)


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------


@dataclass
class ActionSample:
    """One robot training step: observation, instruction, state, targets.

    lat_targets are codebook indices in [0, n_latent); fast_targets are
    tokenizer ids in [0, n_fast). Either may be None when the matching
    span is disabled; at inference both are None.
    """

    image: np.ndarray
    instruction: str
    state: np.ndarray
    lat_targets: np.ndarray | None = None
    fast_targets: tuple | None = None
    chunk: np.ndarray | None = None  # normalized action chunk (training only)


@dataclass
class QASample:
    image: np.ndarray
    question: str
    answer: str


@dataclass
class KVCacheSet:
    """Per-layer (keys, values) plus one role tag per position.

    Entries are graph nodes during training and plain arrays at inference;
    both are (n, d) per layer for a single sequence.
    """

    layers: tuple
    roles: np.ndarray

    @property
    def length(self):
        return self.roles.shape[0]


@dataclass
class ExpertContext:
    layers: tuple
    roles: np.ndarray

    @property
    def length(self):
        return self.roles.shape[0]


# ---------------------------------------------------------------------------
# the backbone
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    image_size: int = 32
    patch: int = 8
    state_dim: int = 20
    max_len: int = 160
    mlp_hidden: int = 128

    @property
    def grid(self):
        return self.image_size // self.patch

    @property
    def n_patches(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.patch * self.patch * 3


class Backbone:
    def __init__(self, config: BackboneConfig, vocab: VocabMap, seed=0):
        self.config = config
        self.vocab = vocab
        self.params = nn.ParamStore()
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        c, v = self.config, self.vocab
        p, d = self.params, c.d_model
        p.add("tok_emb", rng.normal(0.0, 0.5, size=(v.total, d)))
        p.add("pos", rng.normal(0.0, 0.02, size=(c.max_len, d)))
        nn.init_linear(p, rng, "patch", c.patch_dim, d)
        nn.init_linear(p, rng, "state", c.state_dim, d)
        for i in range(c.n_layers):
            nn.init_block(p, rng, f"block{i}", d, c.mlp_hidden)
        nn.init_layer_norm(p, "final_ln", d)
        nn.init_linear(p, rng, "unembed", d, v.total)

    # -- token assembly -----------------------------------------------------

    def image_tokens(self, leaves, image):
        c = self.config
        img = np.asarray(image, dtype=np.float64)
        if img.shape != (c.image_size, c.image_size, 3):
            raise ad.ContractViolation(f"IMG expects a {c.image_size}x{c.image_size}x3 image")
        g = leaves["patch.w"].graph
        node = g.constant(img)
        t = ad.reshape(node, (c.grid, c.patch, c.grid, c.patch, 3))
        t = ad.transpose(t, (0, 2, 1, 3, 4))
        t = ad.reshape(t, (c.n_patches, c.patch_dim))
        return nn.linear(leaves, "patch", t)

    def assemble(self, leaves, sample, use_lat=True, use_fast=True):
        """Embed one sample; returns ((n, d) node, TokenLayout)."""
        v = self.vocab
        g = leaves["tok_emb"].graph
        parts = []
        spans = []
        pos = 0

        def push(role, node):
            nonlocal pos
            parts.append(node)
            spans.append(Span(role, pos, node.array.shape[0]))
            pos += node.array.shape[0]

        if sample.image is None:
            raise ad.ContractViolation("sample missing the IMG modality")
        push(Role.IMG, self.image_tokens(leaves, sample.image))

        if isinstance(sample, QASample):
            if not sample.question:
                raise ad.ContractViolation("QA sample missing the TXT modality")
            push(Role.TXT, ad.embedding_lookup(leaves["tok_emb"], v.encode_text(sample.question)))
            push(Role.QA_MARK, ad.embedding_lookup(leaves["tok_emb"], [v.qa_mark_id]))
            if not sample.answer:
                raise ad.ContractViolation("QA sample missing the ANSWER modality")
            push(Role.ANSWER, ad.embedding_lookup(leaves["tok_emb"], v.encode_text(sample.answer)))
        else:
            if not sample.instruction:
                raise ad.ContractViolation("action sample missing the TXT modality")
            push(Role.TXT, ad.embedding_lookup(leaves["tok_emb"], v.encode_text(sample.instruction)))
            if sample.state is None:
                raise ad.ContractViolation("action sample missing the STATE modality")
            state = ad.reshape(g.constant(np.asarray(sample.state, dtype=np.float64)), (1, self.config.state_dim))
            push(Role.STATE, nn.linear(leaves, "state", state))
            if use_lat and sample.lat_targets is not None:
                ids = v.latent_offset + np.asarray(sample.lat_targets, dtype=np.int64)
                push(Role.LAT, ad.embedding_lookup(leaves["tok_emb"], ids))
            if use_fast and sample.fast_targets is not None:
                ids = v.fast_offset + np.asarray(sample.fast_targets, dtype=np.int64)
                push(Role.FAST, ad.embedding_lookup(leaves["tok_emb"], ids))

        return ad.concat(parts, axis=0), TokenLayout(spans=tuple(spans))

    # -- forward ------------------------------------------------------------

    def forward_hidden(self, leaves, assembled):
        """Causal forward over padded samples, stopping before the unembed.

        assembled: list of ((n_i, d) node, layout). Returns (final hidden
        node (B, n_max, d), per-layer [(k, v)] nodes (B, n_max, d), n_max).
        Padding sits at the tail; with a causal mask it cannot influence
        real positions.
        """
        c = self.config
        n_max = max(node.array.shape[0] for node, _ in assembled)
        if n_max > c.max_len:
            raise ad.ContractViolation(f"sequence length {n_max} exceeds max_len")
        x = nn.stack_rows([nn.pad_axis0(node, n_max) for node, _ in assembled])
        x = ad.add(x, ad.slice_(leaves["pos"], (slice(0, n_max),)))
        mask = nn.causal_mask(n_max)
        caches = []
        for i in range(c.n_layers):
            x, k, v = nn.block(leaves, f"block{i}", x, c.n_heads, mask)
            caches.append((k, v))
        return nn.affine_layer_norm(leaves, "final_ln", x), caches, n_max

    def forward_batch(self, leaves, assembled):
        """Causal forward returning full-vocabulary logits per position."""
        hidden, caches, n_max = self.forward_hidden(leaves, assembled)
        logits = nn.linear(leaves, "unembed", hidden)
        return logits, caches, n_max

    def forward_single(self, sample, use_lat=True, use_fast=True):
        """Inference-style forward; returns plain arrays and a KVCacheSet."""
        g = ad.Graph()
        leaves = self.params.leaves(g)
        node, layout = self.assemble(leaves, sample, use_lat=use_lat, use_fast=use_fast)
        logits, caches, _ = self.forward_batch(leaves, [(node, layout)])
        cache = KVCacheSet(
            layers=tuple((k.array[0].copy(), v.array[0].copy()) for k, v in caches),
            roles=layout.roles(),
        )
        return logits.array[0].copy(), cache, layout

    def extend_cache(self, cache: KVCacheSet, token_id, role: Role):
        """Incremental decode: run one embedded token through every layer
        against the cached keys/values; returns (next logits row, new cache)."""
        c = self.config
        pos_index = cache.length
        if pos_index >= c.max_len:
            raise ad.ContractViolation("cache grew past max_len")
        g = ad.Graph()
        leaves = self.params.leaves(g)
        x = ad.embedding_lookup(leaves["tok_emb"], [int(token_id)])
        x = ad.add(x, ad.slice_(leaves["pos"], (slice(pos_index, pos_index + 1),)))
        x = ad.reshape(x, (1, 1, c.d_model))
        new_layers = []
        mask = nn.full_mask(1, pos_index + 1)
        for i, (ck, cv) in enumerate(cache.layers):
            prefix = (
                ad.reshape(g.constant(ck), (1,) + ck.shape),
                ad.reshape(g.constant(cv), (1,) + cv.shape),
            )
            x, k, v = nn.block(leaves, f"block{i}", x, c.n_heads, mask, kv_prefix=prefix)
            new_layers.append(
                (
                    np.concatenate([ck, k.array[0]], axis=0),
                    np.concatenate([cv, v.array[0]], axis=0),
                )
            )
        x = nn.affine_layer_norm(leaves, "final_ln", x)
        logits = nn.linear(leaves, "unembed", x)
        new_cache = KVCacheSet(
            layers=tuple(new_layers),
            roles=np.concatenate([cache.roles, [int(role)]]),
        )
        return logits.array[0, 0].copy(), new_cache

    # -- losses ---------------------------------------------------------------

    def _loss_spans(self, assembled, samples):
        """Supervised (sample, row range, targets) triples per loss kind.

        Rows are shifted one left: position i-1 predicts the token at i.
        """
        v = self.vocab
        spans = {"lat": [], "fast": [], "answer": []}
        for b, ((_, layout), sample) in enumerate(zip(assembled, samples)):
            lat = layout.span(Role.LAT)
            if lat is not None:
                t = np.asarray(sample.lat_targets, dtype=np.int64)
                if t.min() < 0 or t.max() >= v.n_latent:
                    raise ad.ContractViolation("latent target outside the reserved range")
                spans["lat"].append((b, lat, t))
            fast = layout.span(Role.FAST)
            if fast is not None:
                t = np.asarray(sample.fast_targets, dtype=np.int64)
                if t.min() < 0 or t.max() >= v.n_fast:
                    raise ad.ContractViolation("discrete-action target outside the reserved range")
                spans["fast"].append((b, fast, t))
            ans = layout.span(Role.ANSWER)
            if ans is not None:
                t = v.encode_text(sample.answer)
                if t.size and t.max() >= v.v_txt:
                    raise ad.ContractViolation("answer target outside the text range")
                spans["answer"].append((b, ans, t))
        return spans

    def _vocab_range(self, kind):
        v = self.vocab
        return {
            "lat": (v.latent_offset, v.n_latent),
            "fast": (v.fast_offset, v.n_fast),
            "answer": (0, v.v_txt),
        }[kind]

    def vlm_loss(self, logits, assembled, samples):
        """(loss_lat, loss_fast, loss_answer) nodes over teacher-forced spans.

        Each span is scored over its own reserved vocabulary range; absent
        spans contribute exact 0.
        """
        g = logits.graph
        spans = self._loss_spans(assembled, samples)

        def span_loss(kind):
            entries = spans[kind]
            if not entries:
                return g.constant(np.float64(0.0))
            off, width = self._vocab_range(kind)
            slices = [
                ad.slice_(logits, (b, slice(sp.start - 1, sp.stop - 1), slice(off, off + width)))
                for b, sp, _ in entries
            ]
            stacked = ad.concat(slices, axis=0) if len(slices) > 1 else slices[0]
            return ad.cross_entropy_logits(stacked, np.concatenate([t for _, _, t in entries]))

        return span_loss("lat"), span_loss("fast"), span_loss("answer")

    def hidden_span_losses(self, leaves, hidden, assembled, samples):
        """Same losses as vlm_loss but from final hidden states directly.

        Only supervised rows are projected, and only onto each span's own
        vocabulary slice, which skips the full-vocab logits matmul; the
        training path uses this.
        """
        g = hidden.graph
        spans = self._loss_spans(assembled, samples)

        def span_loss(kind):
            entries = spans[kind]
            if not entries:
                return g.constant(np.float64(0.0))
            off, width = self._vocab_range(kind)
            rows = [
                ad.slice_(hidden, (b, slice(sp.start - 1, sp.stop - 1)))
                for b, sp, _ in entries
            ]
            stacked = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
            w = ad.slice_(leaves["unembed.w"], (slice(None), slice(off, off + width)))
            bias = ad.slice_(leaves["unembed.b"], (slice(off, off + width),))
            logits = ad.add(ad.matmul(stacked, w), bias)
            return ad.cross_entropy_logits(logits, np.concatenate([t for _, _, t in entries]))

        return span_loss("lat"), span_loss("fast"), span_loss("answer")


# ---------------------------------------------------------------------------
# KV routing
# ---------------------------------------------------------------------------


def route_kv(cache, include_fast=False, lat_only=False):
    """Context for the action expert: every position except discrete-action
    tokens (and QA marker/answer positions). include_fast keeps the
    discrete-action positions (ablation only); lat_only keeps nothing but
    the latent-action positions (strict reading, ablation only)."""
    roles = cache.roles
    if lat_only:
        keep = roles == int(Role.LAT)
    else:
        drop = {int(Role.ANSWER), int(Role.QA_MARK)}
        if not include_fast:
            drop.add(int(Role.FAST))
        keep = ~np.isin(roles, list(drop))
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return ExpertContext(layers=tuple((None, None) for _ in cache.layers), roles=roles[:0])
    lo, hi = int(idx[0]), int(idx[-1]) + 1
    if idx.size != hi - lo:
        raise ad.ContractViolation("routable positions are not contiguous")
    layers = []
    for k, v in cache.layers:
        if isinstance(k, ad.Tensor):
            layers.append((ad.slice_(k, (slice(lo, hi),)), ad.slice_(v, (slice(lo, hi),))))
        else:
            layers.append((k[lo:hi], v[lo:hi]))
    return ExpertContext(layers=tuple(layers), roles=roles[lo:hi].copy())


def route_kv_batch(caches, layouts, include_fast=False, lat_only=False, batch_rows=None):
    """Batched routing when every sample keeps the same contiguous range.

    caches: per-layer (k, v) nodes shaped (B, n_max, d); `layouts` describe
    the batch rows being routed, selected by `batch_rows` (default: all).
    Returns per-layer (b, L, d) node pairs plus the shared kept roles.
    """
    if batch_rows is None:
        batch_rows = slice(None)
    ranges = []
    for layout in layouts:
        roles = layout.roles()
        if lat_only:
            keep = roles == int(Role.LAT)
        else:
            drop = {int(Role.ANSWER), int(Role.QA_MARK)}
            if not include_fast:
                drop.add(int(Role.FAST))
            keep = ~np.isin(roles, list(drop))
        idx = np.nonzero(keep)[0]
        if idx.size == 0 or idx.size != idx[-1] - idx[0] + 1:
            raise ad.ContractViolation("routable positions are not contiguous")
        ranges.append((int(idx[0]), int(idx[-1]) + 1, roles[idx[0] : idx[-1] + 1]))
    lo, hi, roles = ranges[0]
    for r in ranges[1:]:
        if r[0] != lo or r[1] != hi or not np.array_equal(r[2], roles):
            raise ad.ContractViolation("batched routing needs identical kept ranges")
    layers = tuple(
        (ad.slice_(k, (batch_rows, slice(lo, hi))), ad.slice_(v, (batch_rows, slice(lo, hi))))
        for k, v in caches
    )
    return layers, roles.copy()
