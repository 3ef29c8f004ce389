"""Streamed block-causal attention split into block-external and block-internal
partial results, with exact log-space recombination.

For one query row the full softmax attention output is a convex combination
of value rows.  Splitting the key set into two disjoint groups and keeping,
per group, the normalized partial output together with the log of its softmax
normalizer is lossless: the two partials recombine into the exact full result
by weighting each side with exp(lognorm - max(lognorms)).  That identity is
what lets the expensive block-external part be computed once per diffusion
step, cached, and merged with a cheap block-internal recomputation.

The streaming path processes keys tile by tile with online-softmax running
statistics (row max ``m``, normalizer sum ``l``, weighted accumulator); when
the running max rises, previous accumulations are rescaled by
``exp(m_old - m_new)``.  Results are independent of the tile size up to
float rounding.

Softmax statistics (running max, normalizer, accumulator, log-normalizer)
are always held in float64 even when the tensors are float32; only score
matmuls and final outputs stay in the tensor dtype.  Wider statistics keep
the recombination weights stable under uniform score offsets, which would
otherwise leak offset-dependent rounding into the merged output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kv_cache import BoundsError
from .linalg import ShapeError

__all__ = [
    "DegenerateInputError",
    "ReusePreconditionError",
    "AttnPartial",
    "CacheEntry",
    "ExternalAttnCache",
    "attention_dense",
    "attention_partial",
    "attention_streamed",
    "combine_partials",
    "merge_partials",
    "attention_with_reuse",
]

DEFAULT_TILE = 64


class DegenerateInputError(ValueError):
    """Raised when an attention result is requested over zero keys."""


class ReusePreconditionError(RuntimeError):
    """Raised when a cached external partial cannot be reused."""


@dataclass
class AttnPartial:
    """Normalized partial attention output plus per-query log-normalizer.

    ``out[i]`` is the softmax-weighted value combination over this partial's
    key group for query i, and ``lognorm[i] = log sum_j exp(score_ij)`` over
    the same group.  A query row that saw no keys carries the sentinel
    ``lognorm = -inf`` and a zero output row; merging treats such rows as
    contributing nothing.

    ``out`` keeps the tensor dtype; ``lognorm`` is always float64 because it
    is a statistic, not a tensor, and merges need its full precision.
    """

    out: np.ndarray
    lognorm: np.ndarray

    @classmethod
    def empty(cls, num_queries: int, head_dim: int, dtype=np.float64) -> "AttnPartial":
        return cls(
            out=np.zeros((num_queries, head_dim), dtype=dtype),
            lognorm=np.full(num_queries, -np.inf, dtype=np.float64),
        )

    @property
    def num_queries(self) -> int:
        return self.out.shape[0]

    @property
    def head_dim(self) -> int:
        return self.out.shape[1]

    @property
    def nbytes(self) -> int:
        return self.out.nbytes + self.lognorm.nbytes

    def empty_rows(self) -> np.ndarray:
        """Boolean mask of query rows that saw no keys."""
        return np.isneginf(self.lognorm)

    def copy(self) -> "AttnPartial":
        return AttnPartial(self.out.copy(), self.lognorm.copy())


def _check_qkv(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> None:
    if q.ndim != 2 or keys.ndim != 2 or values.ndim != 2:
        raise ShapeError("q, keys and values must be 2-D")
    if keys.shape[1] != q.shape[1]:
        raise ShapeError(f"key dim {keys.shape[1]} != query dim {q.shape[1]}")
    if values.shape[0] != keys.shape[0]:
        raise ShapeError(f"{values.shape[0]} value rows for {keys.shape[0]} keys")


def attention_dense(
    q: np.ndarray, keys: np.ndarray, values: np.ndarray, scale: float | None = None
) -> np.ndarray:
    """Reference softmax attention, always computed in float64.

    This is the oracle every other path is compared against: one score
    matrix, per-row max subtraction, exponentiate, normalize.  Output dtype
    is float64 regardless of input dtype.
    """
    _check_qkv(q, keys, values)
    if keys.shape[0] == 0:
        raise DegenerateInputError("dense attention needs at least one key")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    q64 = q.astype(np.float64, copy=False)
    k64 = keys.astype(np.float64, copy=False)
    v64 = values.astype(np.float64, copy=False)
    scores = (q64 @ k64.T) * scale
    scores -= scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    return (p @ v64) / p.sum(axis=1, keepdims=True)


def attention_partial(
    q: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    scale: float | None = None,
    tile_size: int = DEFAULT_TILE,
) -> AttnPartial:
    """Streamed attention over one key group, returned as a partial result.

    Keys are consumed in tiles of ``tile_size`` rows with running (max,
    normalizer, accumulator) statistics, so memory stays proportional to the
    query count rather than the key count.  Zero keys yield the empty
    sentinel partial.
    """
    _check_qkv(q, keys, values)
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])

    nq = q.shape[0]
    dtype = q.dtype
    m = np.full(nq, -np.inf, dtype=np.float64)
    l = np.zeros(nq, dtype=np.float64)
    acc = np.zeros((nq, values.shape[1]), dtype=np.float64)

    for start in range(0, keys.shape[0], tile_size):
        kt = keys[start : start + tile_size]
        vt = values[start : start + tile_size]
        # Score matmul in the tensor dtype; everything after in float64.
        s = ((q @ kt.T) * scale).astype(np.float64, copy=False)
        m_new = np.maximum(m, s.max(axis=1))
        # exp(-inf - finite) underflows to 0, which is exactly the rescale a
        # previously empty accumulator needs.
        alpha = np.exp(m - m_new)
        p = np.exp(s - m_new[:, None])
        l = l * alpha + p.sum(axis=1)
        acc = acc * alpha[:, None] + p @ vt.astype(np.float64, copy=False)
        m = m_new

    if keys.shape[0] == 0:
        return AttnPartial(acc.astype(dtype, copy=False), m)

    # The global row max contributes exp(0) = 1, so l >= 1 here.
    out = (acc / l[:, None]).astype(dtype, copy=False)
    lognorm = m + np.log(l)
    return AttnPartial(out, lognorm)


def attention_streamed(
    q: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    boundary: int,
    scale: float | None = None,
    tile_size: int = DEFAULT_TILE,
) -> tuple[AttnPartial, AttnPartial]:
    """One pass over the key stream split at ``boundary``.

    Rows [0, boundary) form the block-external group, rows [boundary, end)
    the block-internal group.  Returns (external, internal) partials; either
    side may be the empty sentinel when its range is empty.
    """
    _check_qkv(q, keys, values)
    if not 0 <= boundary <= keys.shape[0]:
        raise BoundsError(f"boundary {boundary} outside [0, {keys.shape[0]}]")
    external = attention_partial(q, keys[:boundary], values[:boundary], scale, tile_size)
    internal = attention_partial(q, keys[boundary:], values[boundary:], scale, tile_size)
    return external, internal


def combine_partials(a: AttnPartial, b: AttnPartial) -> AttnPartial:
    """Recombine two partials over disjoint key groups into one partial.

    Per query row: with m = max(La, Lb), the merged output is
    (exp(La-m)*A + exp(Lb-m)*B) / (exp(La-m) + exp(Lb-m)) and the merged
    log-normalizer is m + log(exp(La-m) + exp(Lb-m)).  Subtracting m keeps
    every exponent <= 0.  Rows empty on one side pass the other side through
    unchanged; rows empty on both sides stay empty.
    """
    if a.out.shape != b.out.shape:
        raise ShapeError(f"partial shapes differ: {a.out.shape} vs {b.out.shape}")
    la = a.lognorm.astype(np.float64, copy=False)
    lb = b.lognorm.astype(np.float64, copy=False)
    m = np.maximum(la, lb)
    filled = np.isfinite(m)
    wa = np.zeros_like(m)
    wb = np.zeros_like(m)
    wa[filled] = np.exp(la[filled] - m[filled])
    wb[filled] = np.exp(lb[filled] - m[filled])
    z = wa + wb
    out = np.zeros_like(a.out)
    out[filled] = (
        wa[filled, None] * a.out[filled] + wb[filled, None] * b.out[filled]
    ) / z[filled, None]
    lognorm = np.full_like(m, -np.inf)
    lognorm[filled] = m[filled] + np.log(z[filled])
    return AttnPartial(out, lognorm)


def merge_partials(external: AttnPartial, internal: AttnPartial) -> np.ndarray:
    """Merge external and internal partials into the full attention output.

    Raises ``DegenerateInputError`` if any query row is empty on both sides,
    because there is no attention distribution over zero keys.
    """
    merged = combine_partials(external, internal)
    if bool(merged.empty_rows().any()):
        raise DegenerateInputError("some query rows have no keys on either side")
    return merged.out


@dataclass
class CacheEntry:
    """One cached external partial for a (layer, head) pair."""

    partial: AttnPartial
    step_created: int
    block_id: int = -1
    valid: bool = True


class ExternalAttnCache:
    """Per-(layer, head) store for the current block's external partials.

    Entries hold only the normalized partial output plus one log-normalizer
    per query row, so resident size is query_count * (head_dim + 1) scalars
    per entry no matter how long the external context is.  All entries are
    invalidated when the block commits, since the external key set changes.
    """

    def __init__(self) -> None:
        self._entries: dict[tuple[int, int], CacheEntry] = {}

    def put(
        self,
        layer: int,
        head: int,
        partial: AttnPartial,
        step: int,
        block_id: int = -1,
    ) -> None:
        self._entries[(layer, head)] = CacheEntry(partial, step, block_id)

    def get(self, layer: int, head: int) -> CacheEntry | None:
        return self._entries.get((layer, head))

    def is_valid(self, layer: int, head: int) -> bool:
        entry = self._entries.get((layer, head))
        return entry is not None and entry.valid

    def invalidate_all(self) -> None:
        """Drop every entry; called when a block commits."""
        self._entries.clear()

    def resident_bytes(self) -> int:
        return sum(e.partial.nbytes for e in self._entries.values() if e.valid)


def attention_with_reuse(
    q: np.ndarray,
    entry: CacheEntry | None,
    internal_keys: np.ndarray,
    internal_values: np.ndarray,
    scale: float | None = None,
    tile_size: int = DEFAULT_TILE,
) -> tuple[np.ndarray, AttnPartial]:
    """Full attention from a cached external partial plus fresh internal keys.

    Recomputes only the block-internal partial and merges it with the cached
    external one; the committed context is never touched.  Note the cached
    partial was produced with the queries of the step that created it, so
    when ``q`` has drifted since then the result is an approximation; the
    caller is responsible for measuring that gap, not this function.

    Returns (merged output, freshly computed internal partial).
    """
    if entry is None or not entry.valid:
        raise ReusePreconditionError("no valid cached external partial")
    if entry.partial.num_queries != q.shape[0]:
        raise ReusePreconditionError(
            f"cached partial has {entry.partial.num_queries} query rows, "
            f"got {q.shape[0]}"
        )
    internal = attention_partial(q, internal_keys, internal_values, scale, tile_size)
    return merge_partials(entry.partial, internal), internal
