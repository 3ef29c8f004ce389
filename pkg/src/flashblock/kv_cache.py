"""Append-only per-(layer, head) key/value store with instrumented access.

The cache is the system of record for *committed* blocks only.  Key/value
rows for a block that is still being denoised live in step-local buffers
owned by the caller and are committed here once the block finishes, so every
``read_range`` call corresponds to real traffic against frozen context.

All counted traffic flows through :class:`AccessCounters`; tests assert
reuse claims ("this step never touched the cache") directly on counter
deltas instead of trusting the code path taken.
"""

from __future__ import annotations

import threading
from bisect import bisect_left
from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError

__all__ = ["BoundsError", "AccessCounters", "KvCache"]


class BoundsError(IndexError):
    """Raised when a read range falls outside the committed rows."""


@dataclass
class AccessCounters:
    """Aggregate cache traffic for one run.

    Attributes:
        key_rows_read: total key rows returned by ``read_range``.
        value_rows_read: total value rows returned by ``read_range``.
        rows_appended: total rows committed via ``commit_block``.
        cache_bytes_resident: bytes held by committed K/V rows at snapshot
            time.  Append-only storage means this never decreases.
    """

    key_rows_read: int = 0
    value_rows_read: int = 0
    rows_appended: int = 0
    cache_bytes_resident: int = 0

    def copy(self) -> "AccessCounters":
        return AccessCounters(
            self.key_rows_read,
            self.value_rows_read,
            self.rows_appended,
            self.cache_bytes_resident,
        )


class _Store:
    """Growable row buffer for one (layer, head) pair."""

    __slots__ = ("keys", "values", "length")

    def __init__(self, head_dim: int, dtype, capacity: int = 64):
        self.keys = np.empty((capacity, head_dim), dtype=dtype)
        self.values = np.empty((capacity, head_dim), dtype=dtype)
        self.length = 0

    def append(self, keys: np.ndarray, values: np.ndarray) -> None:
        need = self.length + keys.shape[0]
        if need > self.keys.shape[0]:
            cap = max(need, 2 * self.keys.shape[0])
            grown_k = np.empty((cap, self.keys.shape[1]), dtype=self.keys.dtype)
            grown_v = np.empty_like(grown_k)
            grown_k[: self.length] = self.keys[: self.length]
            grown_v[: self.length] = self.values[: self.length]
            self.keys, self.values = grown_k, grown_v
        self.keys[self.length : need] = keys
        self.values[self.length : need] = values
        self.length = need


class KvCache:
    """Per-(layer, head) append-only K/V rows plus global access counters.

    Committed rows are immutable: ``read_range`` returns copies, so repeated
    reads of the same range are bit-identical no matter what callers do with
    the returned arrays.  Block boundaries are shared across all (layer,
    head) pairs; the first pair to commit a block defines the next boundary
    and every other pair must commit the same number of rows to catch up.
    """

    def __init__(self, num_layers: int, num_heads: int, head_dim: int, dtype=np.float64):
        if num_layers < 1 or num_heads < 1 or head_dim < 1:
            raise ValueError("num_layers, num_heads and head_dim must be >= 1")
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.dtype = np.dtype(dtype)
        self._stores = [
            [_Store(head_dim, self.dtype) for _ in range(num_heads)]
            for _ in range(num_layers)
        ]
        self._boundaries: list[int] = []
        self._counters = AccessCounters()
        self._lock = threading.Lock()

    # -- introspection ----------------------------------------------------

    @property
    def block_boundaries(self) -> tuple[int, ...]:
        return tuple(self._boundaries)

    @property
    def committed_tokens(self) -> int:
        """Token count of the longest committed prefix (last boundary)."""
        return self._boundaries[-1] if self._boundaries else 0

    def rows(self, layer: int, head: int) -> int:
        return self._store(layer, head).length

    # -- operations -------------------------------------------------------

    def commit_block(self, layer: int, head: int, keys: np.ndarray, values: np.ndarray) -> int:
        """Append one finished block's rows for (layer, head).

        Returns the new committed row offset for that pair.  Raises
        ``ShapeError`` on malformed rows and ``ValueError`` when the commit
        does not line up with the boundary sequence established by earlier
        commits.
        """
        if keys.ndim != 2 or values.ndim != 2:
            raise ShapeError("committed keys/values must be 2-D")
        if keys.shape != values.shape:
            raise ShapeError(f"key/value shapes differ: {keys.shape} vs {values.shape}")
        if keys.shape[1] != self.head_dim:
            raise ShapeError(f"expected head_dim={self.head_dim}, got {keys.shape[1]}")
        if keys.shape[0] < 1:
            raise ShapeError("a block commit needs at least one row")

        store = self._store(layer, head)
        new_len = store.length + keys.shape[0]
        self._check_boundary(store.length, new_len)
        store.append(keys.astype(self.dtype, copy=False), values.astype(self.dtype, copy=False))
        with self._lock:
            self._counters.rows_appended += keys.shape[0]
        return new_len

    def read_range(self, layer: int, head: int, start: int, stop: int):
        """Return copies of committed K/V rows [start, stop) and count them."""
        k, v = self._slice(layer, head, start, stop)
        with self._lock:
            self._counters.key_rows_read += stop - start
            self._counters.value_rows_read += stop - start
        return k, v

    def peek_range(self, layer: int, head: int, start: int, stop: int):
        """Uncounted variant of ``read_range`` for oracles and verification.

        Production paths must never use this; it exists so that a dense
        shadow computation can observe the cache without polluting the
        counters whose deltas the reuse claims are asserted on.
        """
        return self._slice(layer, head, start, stop)

    def snapshot_counters(self) -> AccessCounters:
        """Copy of current counters; never resets anything."""
        with self._lock:
            snap = self._counters.copy()
        snap.cache_bytes_resident = self._resident_bytes()
        return snap

    # -- internals --------------------------------------------------------

    def _store(self, layer: int, head: int) -> _Store:
        if not (0 <= layer < self.num_layers and 0 <= head < self.num_heads):
            raise BoundsError(f"no such (layer, head): ({layer}, {head})")
        return self._stores[layer][head]

    def _slice(self, layer: int, head: int, start: int, stop: int):
        store = self._store(layer, head)
        if not (0 <= start <= stop <= store.length):
            raise BoundsError(
                f"range [{start}, {stop}) outside committed rows [0, {store.length})"
            )
        return store.keys[start:stop].copy(), store.values[start:stop].copy()

    def _check_boundary(self, old_len: int, new_len: int) -> None:
        last = self._boundaries[-1] if self._boundaries else 0
        if new_len > last:
            # First pair to reach this offset defines the new block boundary.
            if old_len != last:
                raise ValueError(
                    f"misaligned block commit: rows {old_len}->{new_len} skip "
                    f"boundary {last}"
                )
            self._boundaries.append(new_len)
            return
        # Catching-up commit: must land exactly on an existing boundary and
        # start from the one before it.
        i = bisect_left(self._boundaries, new_len)
        if i == len(self._boundaries) or self._boundaries[i] != new_len:
            raise ValueError(
                f"misaligned block commit: {new_len} is not an existing boundary "
                f"{self._boundaries}"
            )
        prev = self._boundaries[i - 1] if i > 0 else 0
        if old_len != prev:
            raise ValueError(
                f"misaligned block commit: rows {old_len}->{new_len} do not match "
                f"boundary step {prev}->{new_len}"
            )

    def _resident_bytes(self) -> int:
        per_row = 2 * self.head_dim * self.dtype.itemsize  # one K row + one V row
        total = 0
        for row in self._stores:
            for store in row:
                total += store.length * per_row
        return total
