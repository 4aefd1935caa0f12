"""Append-only key/value storage."""

from __future__ import annotations

import numpy as np

from louver.geometry import as_f32


class GrowableRows:
    """Row buffer with amortized O(1) append along axis 0."""

    def __init__(self, width, dtype, capacity: int = 256):
        self._shape_tail = (width,) if isinstance(width, int) else tuple(width)
        self._buf = np.zeros((max(capacity, 1), *self._shape_tail), dtype=dtype)
        self.size = 0

    def _reserve(self, need: int) -> None:
        if need <= self._buf.shape[0]:
            return
        cap = self._buf.shape[0]
        while cap < need:
            cap *= 2
        buf = np.zeros((cap, *self._shape_tail), dtype=self._buf.dtype)
        buf[: self.size] = self._buf[: self.size]
        self._buf = buf

    def extend(self, rows: np.ndarray) -> None:
        m = rows.shape[0]
        self._reserve(self.size + m)
        self._buf[self.size : self.size + m] = rows
        self.size += m

    @property
    def view(self) -> np.ndarray:
        return self._buf[: self.size]


class GrowableCols:
    """Column-major twin of :class:`GrowableRows`: a (height, size) matrix."""

    def __init__(self, height: int, dtype, capacity: int = 256):
        self._buf = np.zeros((height, max(capacity, 1)), dtype=dtype)
        self.size = 0

    def extend_rows(self, rows: np.ndarray) -> None:
        """Append ``rows`` (m, height) as m new columns."""
        m = rows.shape[0]
        need = self.size + m
        cap = self._buf.shape[1]
        if need > cap:
            while cap < need:
                cap *= 2
            buf = np.zeros((self._buf.shape[0], cap), dtype=self._buf.dtype)
            buf[:, : self.size] = self._buf[:, : self.size]
            self._buf = buf
        self._buf[:, self.size : need] = rows.T
        self.size = need

    @property
    def buffer(self) -> np.ndarray:
        """Full backing array; only the first ``size`` columns are live."""
        return self._buf

    @property
    def view(self) -> np.ndarray:
        return self._buf[:, : self.size]


class KeyStore:
    """Keys and values of a single attention head, addressed by row id.

    Rows are never modified once written. ``keys`` and ``values`` return
    views into the current buffers.
    """

    def __init__(self, d: int, capacity: int = 1024):
        if d < 1:
            raise ValueError(f"dimension must be >= 1, got {d}")
        self.d = d
        self._keys = GrowableRows(d, np.float32, capacity)
        self._values = GrowableRows(d, np.float32, capacity)

    @classmethod
    def from_arrays(cls, keys, values=None) -> KeyStore:
        keys = as_f32(keys)
        if keys.ndim != 2:
            raise ValueError("keys must be a 2-D array")
        store = cls(keys.shape[1], capacity=max(keys.shape[0], 1))
        store.extend(keys, np.zeros_like(keys) if values is None else values)
        return store

    @property
    def n(self) -> int:
        return self._keys.size

    def __len__(self) -> int:
        return self.n

    @property
    def keys(self) -> np.ndarray:
        return self._keys.view

    @property
    def values(self) -> np.ndarray:
        return self._values.view

    def append(self, k, v) -> int:
        k = as_f32(k).reshape(1, -1)
        v = as_f32(v).reshape(1, -1)
        if k.shape[1] != self.d or v.shape[1] != self.d:
            raise ValueError(f"expected vectors of length {self.d}")
        self._keys.extend(k)
        self._values.extend(v)
        return self.n - 1

    def extend(self, keys, values) -> range:
        keys = as_f32(keys)
        values = as_f32(values)
        if keys.ndim != 2 or keys.shape[1] != self.d:
            raise ValueError(f"keys must have shape (m, {self.d})")
        if values.shape != keys.shape:
            raise ValueError("keys and values must have identical shapes")
        start = self.n
        self._keys.extend(keys)
        self._values.extend(values)
        return range(start, self.n)
