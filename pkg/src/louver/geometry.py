"""Vector primitives, subspace layout and enclosure/halfspace tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from louver import _kernels

ENCLOSURE_KINDS = ("ball", "aabb", "span_ball")
GATE_COST = {"ball": 1, "span_ball": 1, "aabb": 2}

_U32 = 2.0**-24
_U64 = 2.0**-53


@dataclass(frozen=True)
class SubspaceLayout:
    """Contiguous split of ``d`` coordinates into ``S`` blocks.

    When ``S`` does not divide ``d`` the wider blocks come first.
    """

    d: int
    S: int
    offsets: tuple[int, ...] = field(repr=False)

    @classmethod
    def split(cls, d: int, S: int) -> SubspaceLayout:
        if d < 1:
            raise ValueError(f"dimension must be >= 1, got {d}")
        if not 1 <= S <= d:
            raise ValueError(f"subspace count must be in [1, {d}], got {S}")
        base, extra = divmod(d, S)
        offsets = [0]
        for s in range(S):
            offsets.append(offsets[-1] + base + (1 if s < extra else 0))
        return cls(d, S, tuple(offsets))

    def bounds(self, s: int) -> tuple[int, int]:
        if not 0 <= s < self.S:
            raise IndexError(f"subspace {s} out of range [0, {self.S})")
        return self.offsets[s], self.offsets[s + 1]

    def width(self, s: int) -> int:
        lo, hi = self.bounds(s)
        return hi - lo

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in zip(self.offsets, self.offsets[1:]))

    @property
    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(a, b) for a, b in zip(self.offsets, self.offsets[1:]))

    def offsets_array(self) -> np.ndarray:
        return np.asarray(self.offsets, dtype=np.int64)


def project(v: np.ndarray, layout: SubspaceLayout, s: int) -> np.ndarray:
    """Coordinates of ``v`` (or of each row of ``v``) belonging to subspace ``s``."""
    lo, hi = layout.bounds(s)
    v = np.asarray(v)
    if v.shape[-1] != layout.d:
        raise ValueError(f"expected trailing dimension {layout.d}, got {v.shape[-1]}")
    return v[..., lo:hi]


def as_f32(v) -> np.ndarray:
    a = np.ascontiguousarray(v, dtype=np.float32)
    if not np.all(np.isfinite(a)):
        raise ValueError("vectors must be finite")
    return a


def dot(a, b) -> np.float32:
    """Float32 dot product accumulated left to right.

    This is the reference scoring rule: the brute-force oracle and the
    exact check both reproduce it bit for bit.
    """
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return np.float32(_kernels.dot1(a, b))


def scores(keys: np.ndarray, q: np.ndarray, ids: np.ndarray | None = None) -> np.ndarray:
    """Row-wise :func:`dot` of ``keys`` (all rows or ``ids``) against ``q``."""
    q = as_f32(q)
    if keys.shape[1] != q.shape[0]:
        raise ValueError(f"length mismatch: keys have d={keys.shape[1]}, q has {q.shape[0]}")
    if ids is None:
        out = np.empty(keys.shape[0], dtype=np.float32)
        _kernels.dot_range(keys, q, 0, keys.shape[0], out)
    else:
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        out = np.empty(ids.shape[0], dtype=np.float32)
        _kernels.dot_ids(keys, ids, q, out)
    return out


def round_up_f32(x: np.ndarray) -> np.ndarray:
    """Smallest float32 >= x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    y = x.astype(np.float32)
    low = y.astype(np.float64) < x
    y[low] = np.nextafter(y[low], np.float32(np.inf))
    return y


def safe_radius(r64: np.ndarray) -> np.ndarray:
    """Radius stored as float32, rounded up plus one ulp; exact zero stays zero."""
    r32 = round_up_f32(r64)
    pos = np.asarray(r64) > 0
    r32[pos] = np.nextafter(r32[pos], np.float32(np.inf))
    return r32


@dataclass(frozen=True)
class Enclosure:
    """Convex shape around a group of projected keys.

    Balls (``ball`` and ``span_ball``) use ``center``/``radius``; boxes
    (``aabb``) use ``lo``/``hi``.
    """

    kind: str
    center: np.ndarray | None = None
    radius: float = 0.0
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ENCLOSURE_KINDS:
            raise ValueError(f"unknown enclosure kind {self.kind!r}")
        if self.kind == "aabb":
            if self.lo is None or self.hi is None or self.lo.shape != self.hi.shape:
                raise ValueError("aabb needs lo and hi of equal shape")
            if np.any(self.lo > self.hi):
                raise ValueError("aabb needs lo <= hi")
        else:
            if self.center is None:
                raise ValueError(f"{self.kind} needs a center")
            if not self.radius >= 0:
                raise ValueError("radius must be >= 0")

    @property
    def dim(self) -> int:
        return (self.lo if self.kind == "aabb" else self.center).shape[0]

    @property
    def gate_cost(self) -> int:
        return GATE_COST[self.kind]

    def contains(self, p: np.ndarray) -> bool:
        p = np.asarray(p, dtype=np.float64)
        if self.kind == "aabb":
            return bool(np.all(self.lo <= p) and np.all(p <= self.hi))
        return float(np.linalg.norm(p - np.asarray(self.center, dtype=np.float64))) <= self.radius


def enclosure_upper_bound(e: Enclosure, q_s) -> float:
    """Largest value of ``<q_s, p>`` over points ``p`` in ``e``."""
    q = np.asarray(q_s, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != e.dim:
        raise ValueError(f"dimension mismatch: enclosure {e.dim}, query {q.shape}")
    if e.kind == "aabb":
        lo = np.asarray(e.lo, dtype=np.float64)
        hi = np.asarray(e.hi, dtype=np.float64)
        return float(np.maximum(q * lo, q * hi).sum())
    c = np.asarray(e.center, dtype=np.float64)
    return float(q @ c + float(e.radius) * math.sqrt(float(q @ q)))


def intersects(e: Enclosure, q_s, tau_s: float) -> bool:
    """Whether ``e`` meets the halfspace ``<q_s, p> >= tau_s`` (boundary counts)."""
    return enclosure_upper_bound(e, q_s) >= tau_s


def _gamma(k: int, u: float) -> float:
    return k * u / (1 - k * u)


def rounding_slack(q: np.ndarray, key_bound: float, S: int, bound_terms: int) -> float:
    """Worst-case gap between float32 key scores and computed group bounds.

    ``key_bound`` bounds the norm of every indexed key, center and box
    corner (radii are at most twice that). A key's float32 score can exceed
    its exact dot product by ``gamma_d |q| |k|``; each float32 group bound,
    a sum of at most ``bound_terms`` products, can be off by
    ``gamma |q_s| 3B``, and summing S of them costs at most ``sqrt(S)``
    times that. Pruning tests compare against ``tau - slack`` so a key whose
    float32 score reaches ``tau`` is never dropped.
    """
    d = q.shape[0]
    qn = float(np.linalg.norm(np.asarray(q, dtype=np.float64)))
    per_key = _gamma(d, _U32)
    per_bound = 3.0 * math.sqrt(S) * _gamma(bound_terms + 2, _U32)
    return 1.01 * qn * key_bound * (per_key + 2.0 * per_bound + _gamma(4 * d + 8, _U64))
