"""Discrete action-chunk tokenizer.

Pipeline: quantile normalization to [-1, 1], orthonormal DCT-II along the
time axis, scale-and-round quantization, frequency-major flattening, and
byte-pair encoding over the quantized integers. Everything except rounding
and clipping is exactly invertible, so a decoded chunk differs from the
(clipped) original by at most sqrt(k)/(2*gamma) per entry in normalized
units.

Fitted NormStats and FastVocab objects are immutable; all operations here
are pure functions of them and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backend import kernels as K

DEFAULT_GAMMA = 10.0
DEFAULT_VOCAB_SIZE = 256
_MAX_QUANT = 2.0**53  # beyond this integers are not exactly representable


@dataclass(frozen=True)
class NormStats:
    """Per-dimension 1st/99th percentile range; high == low marks a constant dim."""

    low: np.ndarray
    high: np.ndarray

    @property
    def constant(self):
        return self.high == self.low

    @property
    def slope(self):
        """Denormalization slope per dim: d(raw)/d(normalized)."""
        return (self.high - self.low) / 2.0

    def normalize(self, rows):
        rows = np.asarray(rows, dtype=np.float64)
        span = self.high - self.low
        safe = np.where(self.constant, 1.0, span)
        out = 2.0 * (rows - self.low) / safe - 1.0
        out = np.where(self.constant, 0.0, out)
        return np.clip(out, -1.0, 1.0)

    def denormalize(self, rows):
        return self.low + (np.asarray(rows, dtype=np.float64) + 1.0) * self.slope

    def clip_to_range(self, rows):
        return np.clip(np.asarray(rows, dtype=np.float64), self.low, self.high)


def fit_norm(corpus):
    """1st/99th percentiles per dimension over all rows of all chunks."""
    if not corpus:
        raise ValueError("cannot fit normalization stats on an empty corpus")
    stacked = np.concatenate([np.asarray(c, dtype=np.float64) for c in corpus], axis=0)
    low, high = np.percentile(stacked, [1.0, 99.0], axis=0)
    return NormStats(low=low, high=high)


# ---------------------------------------------------------------------------
# orthonormal DCT-II along the time axis
# ---------------------------------------------------------------------------


def dct_matrix(k):
    """Orthonormal DCT-II basis; rows are frequencies, C @ C.T == I."""
    n = np.arange(k)
    j = n[:, None]
    c = np.cos(np.pi * (2.0 * n[None, :] + 1.0) * j / (2.0 * k))
    scales = np.full((k, 1), math.sqrt(2.0 / k))
    scales[0, 0] = math.sqrt(1.0 / k)
    return scales * c


def dct2(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return dct_matrix(rows.shape[0]) @ rows


def idct2(coeffs):
    coeffs = np.asarray(coeffs, dtype=np.float64)
    return dct_matrix(coeffs.shape[0]).T @ coeffs


def quantize(coeffs, gamma):
    """round(coeff * gamma) with ties to even."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    scaled = np.asarray(coeffs, dtype=np.float64) * gamma
    if np.any(np.abs(scaled) > _MAX_QUANT):
        raise ValueError("quantized coefficient exceeds the exact integer range")
    return np.rint(scaled).astype(np.int64)


def dequantize(integers, gamma):
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return np.asarray(integers, dtype=np.float64) / gamma


def flatten(integers):
    """Frequency-major interleave: all dims at frequency 0, then frequency 1, ..."""
    arr = np.asarray(integers)
    if arr.ndim != 2:
        raise ValueError("expected a (k, dims) integer matrix")
    return [int(v) for v in arr.reshape(-1)]


def unflatten(sequence, k):
    seq = np.asarray(sequence)
    if k <= 0 or seq.size % k != 0:
        raise ValueError(f"sequence length {seq.size} is not a multiple of k={k}")
    return seq.reshape(k, seq.size // k)


# ---------------------------------------------------------------------------
# byte-pair encoding over quantized integers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FastVocab:
    """Base alphabet over quantized integers plus an ordered merge list.

    Integers outside the base alphabet encode to `oov_id`, which decodes to
    0: boundedly lossy instead of fatal. Merge ranks reproduce the
    training-time segmentation exactly.
    """

    base_alphabet: dict  # quantized integer -> base token id
    oov_id: int
    merges: tuple  # ((left_id, right_id, new_id), ...) in training order
    vocab_size: int
    pair_rank: dict = field(repr=False, default=None)
    expansions: dict = field(repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(
            self,
            "pair_rank",
            {(a, b): (rank, new) for rank, (a, b, new) in enumerate(self.merges)},
        )
        exp = {tid: (coeff,) for coeff, tid in self.base_alphabet.items()}
        exp[self.oov_id] = (0,)
        for a, b, new in self.merges:
            exp[new] = exp[a] + exp[b]
        object.__setattr__(self, "expansions", exp)

    @property
    def size(self):
        return len(self.base_alphabet) + 1 + len(self.merges)


def bpe_train(corpus, vocab_size, min_pair_count=2):
    """Greedy most-frequent-pair merges with a lexicographic tie-break.

    Merging stops when the vocabulary reaches `vocab_size` or no adjacent
    pair occurs at least `min_pair_count` times. Deterministic for a given
    corpus.
    """
    if not corpus:
        raise ValueError("cannot train BPE on an empty corpus")
    alphabet = sorted({int(v) for seq in corpus for v in seq})
    base = {coeff: tid for tid, coeff in enumerate(alphabet)}
    oov_id = len(base)
    next_id = oov_id + 1
    if vocab_size < next_id:
        raise ValueError(
            f"vocab_size={vocab_size} below base alphabet size {next_id} (incl. OOV)"
        )
    seqs = [[base[int(v)] for v in seq] for seq in corpus]
    merges = []
    while next_id < vocab_size:
        counts = {}
        for seq in seqs:
            for pair in zip(seq, seq[1:]):
                counts[pair] = counts.get(pair, 0) + 1
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < min_pair_count:
            break
        best_pair = min(p for p, c in counts.items() if c == best_count)
        merges.append((best_pair[0], best_pair[1], next_id))
        seqs = [_replace_pair(seq, best_pair, next_id) for seq in seqs]
        next_id += 1
    return FastVocab(
        base_alphabet=base, oov_id=oov_id, merges=tuple(merges), vocab_size=vocab_size
    )


def _replace_pair(seq, pair, new_id):
    out = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def bpe_encode(vocab, integers):
    ids = [vocab.base_alphabet.get(int(v), vocab.oov_id) for v in integers]
    return list(K.bpe_apply(ids, vocab.pair_rank))


def bpe_decode(vocab, ids):
    out = []
    for tid in ids:
        exp = vocab.expansions.get(int(tid))
        if exp is None:
            raise ValueError(f"token id {tid} not in vocabulary")
        out.extend(exp)
    return out


# ---------------------------------------------------------------------------
# full chunk pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FastTokenSequence:
    ids: tuple
    chunk_len: int
    dims: int


def encode_chunk(chunk, stats, gamma, vocab):
    chunk = np.asarray(chunk, dtype=np.float64)
    k, dims = chunk.shape
    ints = quantize(dct2(stats.normalize(chunk)), gamma)
    ids = bpe_encode(vocab, flatten(ints))
    return FastTokenSequence(ids=tuple(ids), chunk_len=k, dims=dims)


def decode_chunk(tokens, stats, gamma, vocab, k):
    flat = bpe_decode(vocab, tokens.ids if isinstance(tokens, FastTokenSequence) else tokens)
    ints = unflatten(flat, k)
    return stats.denormalize(idct2(dequantize(ints, gamma)))


def reconstruction_bound(stats, gamma, k):
    """Per-dimension worst-case |decode(encode(x)) - clip(x)| for in-range data.

    Each DCT coefficient moves by at most 1/(2*gamma) under rounding; the
    inverse transform is orthonormal, so a column's per-entry error is at
    most sqrt(k)/(2*gamma), then the denormalization slope rescales it.
    """
    return (math.sqrt(k) / (2.0 * gamma)) * np.abs(stats.slope)


# ---------------------------------------------------------------------------
# serialization: vocab manifest and corpus stats
# ---------------------------------------------------------------------------


def save_vocab(path, vocab, gamma):
    lines = ["version 1", f"gamma {gamma!r}"]
    for coeff in sorted(vocab.base_alphabet):
        lines.append(f"base {coeff} {vocab.base_alphabet[coeff]}")
    lines.append(f"oov {vocab.oov_id}")
    lines.append(f"vocab_size {vocab.vocab_size}")
    for a, b, new in vocab.merges:
        lines.append(f"merge {a} {b} {new}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vocab(path):
    base = {}
    merges = []
    oov_id = None
    vocab_size = None
    gamma = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "version":
                if parts[1] != "1":
                    raise ValueError(f"unsupported vocab version {parts[1]}")
            elif tag == "gamma":
                gamma = float(parts[1])
            elif tag == "base":
                base[int(parts[1])] = int(parts[2])
            elif tag == "oov":
                oov_id = int(parts[1])
            elif tag == "vocab_size":
                vocab_size = int(parts[1])
            elif tag == "merge":
                merges.append((int(parts[1]), int(parts[2]), int(parts[3])))
            else:
                raise ValueError(f"unknown vocab manifest line {line!r}")
    if oov_id is None or vocab_size is None or gamma is None:
        raise ValueError("incomplete vocab manifest")
    vocab = FastVocab(
        base_alphabet=base, oov_id=oov_id, merges=tuple(merges), vocab_size=vocab_size
    )
    return vocab, gamma


def save_action_stats(path, stats, mean, std):
    lines = ["version 1"]
    for d in range(stats.low.size):
        lines.append(
            f"dim {d} {float(stats.low[d])!r} {float(stats.high[d])!r} "
            f"{float(mean[d])!r} {float(std[d])!r}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_action_stats(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts and parts[0] == "dim":
                rows.append([float(v) for v in parts[2:6]])
    arr = np.asarray(rows, dtype=np.float64)
    stats = NormStats(low=arr[:, 0].copy(), high=arr[:, 1].copy())
    return stats, arr[:, 2].copy(), arr[:, 3].copy()
