"""Buffered index maintenance during decoding.

New keys land in a small buffer that is always scanned densely. Once the
buffer holds ``B`` keys they are grouped and enclosed on their own and the
new groups are appended to the index; no existing group is touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from louver.build import BuildConfig, LouverIndex
from louver.geometry import SubspaceLayout, as_f32, scores
from louver.query import (
    AttentionResult,
    CandidateSet,
    NoAttendedTokens,
    search,
    sparse_attention,
)
from louver.store import KeyStore

DEFAULT_BUFFER = 128


@dataclass
class KeyBuffer:
    """Pending (not yet indexed) ids: the contiguous range ``[start, stop)``."""

    capacity: int = DEFAULT_BUFFER
    start: int = 0
    stop: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"buffer capacity must be >= 1, got {self.capacity}")

    @property
    def pending_ids(self) -> np.ndarray:
        return np.arange(self.start, self.stop, dtype=np.int64)

    def __len__(self) -> int:
        return self.stop - self.start

    @property
    def full(self) -> bool:
        return len(self) >= self.capacity


@dataclass(frozen=True)
class CacheAnswer:
    """Threshold answer over every key present: index part plus buffer scan."""

    ids: np.ndarray
    index_ids: np.ndarray
    buffer_ids: np.ndarray
    candidates: CandidateSet


def flush_buffer(store: KeyStore, index: LouverIndex, buffer: KeyBuffer) -> int:
    """Index the pending keys as fresh groups.

    Returns the number of groups added per subspace; 0 means the buffer was
    empty and nothing happened.
    """
    if len(buffer) == 0:
        return 0
    if buffer.start != index.indexed_count or buffer.stop != store.n:
        raise RuntimeError("buffer does not cover exactly the unindexed keys")
    added = index.append_batch(store.keys[buffer.start : buffer.stop], buffer.start)
    buffer.start = buffer.stop
    return added


def push_key(store: KeyStore, index: LouverIndex, buffer: KeyBuffer, k, v) -> int:
    """Append one key/value; flushes when the buffer reaches capacity.

    Returns the new key's id.
    """
    j = store.append(k, v)
    buffer.stop = store.n
    if buffer.full:
        flush_buffer(store, index, buffer)
    return j


class LouverCache:
    """Key/value store, index and buffer for one attention head.

    ``strict_buffer`` decides whether buffered keys below ``tau`` still take
    part in attention (default: they do, the buffer is attended densely).
    """

    def __init__(
        self,
        d: int,
        config: BuildConfig | None = None,
        buffer_capacity: int = DEFAULT_BUFFER,
        strict_buffer: bool = False,
    ):
        config = config or BuildConfig()
        self.store = KeyStore(d)
        self.index = LouverIndex(SubspaceLayout.split(d, config.S), config)
        self.buffer = KeyBuffer(buffer_capacity)
        self.strict_buffer = strict_buffer
        self.flushes = 0

    @property
    def d(self) -> int:
        return self.store.d

    @property
    def n(self) -> int:
        return self.store.n

    def push(self, k, v) -> int:
        before = self.index.batches
        j = push_key(self.store, self.index, self.buffer, k, v)
        self.flushes += self.index.batches - before
        return j

    def extend(self, keys, values) -> None:
        keys = as_f32(keys)
        values = as_f32(values)
        for k, v in zip(keys, values):
            self.push(k, v)

    def flush(self) -> int:
        added = flush_buffer(self.store, self.index, self.buffer)
        if added:
            self.flushes += 1
        return added

    def query(self, q, tau: float, algo: str = "ta") -> CacheAnswer:
        """Every present key whose score reaches ``tau``, ascending."""
        q = as_f32(q)
        index_ids, cand = search(self.index, self.store, q, tau, algo)
        pending = self.buffer.pending_ids
        if pending.shape[0]:
            s = scores(self.store.keys, q, pending).astype(np.float64)
            buf_hits = pending[s >= tau]
        else:
            buf_hits = pending
        return CacheAnswer(np.concatenate([index_ids, buf_hits]), index_ids, buf_hits, cand)

    def attend(self, q, tau: float, algo: str = "ta", scale: float | None = None) -> tuple[AttentionResult, CacheAnswer]:
        """Sparse attention over the threshold answer plus the buffer.

        Raises :class:`NoAttendedTokens` when nothing qualifies and the
        buffer contributes nothing either.
        """
        ans = self.query(q, tau, algo)
        dense = ans.buffer_ids if self.strict_buffer else self.buffer.pending_ids
        if ans.index_ids.shape[0] == 0 and dense.shape[0] == 0:
            raise NoAttendedTokens("no key reaches the threshold and the buffer is empty")
        return sparse_attention(self.store, dense, ans.index_ids, q, scale), ans
