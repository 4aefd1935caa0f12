"""Two-level index construction: per-subspace grouping plus enclosures."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from louver import _kernels
from louver.geometry import (
    ENCLOSURE_KINDS,
    GATE_COST,
    Enclosure,
    SubspaceLayout,
    as_f32,
    safe_radius,
)
from louver.store import GrowableCols, GrowableRows, KeyStore

GROUPINGS = ("pca_tree", "contiguous", "interleaved", "random")


@dataclass(frozen=True)
class BuildConfig:
    S: int = 4
    r: int = 4
    grouping: str = "pca_tree"
    enclosing: str = "ball"
    rng_seed: int = 0

    def validate(self, d: int) -> None:
        if self.r < 1:
            raise ValueError(f"group size must be >= 1, got {self.r}")
        if not 1 <= self.S <= d:
            raise ValueError(f"subspace count must be in [1, {d}], got {self.S}")
        if self.grouping not in GROUPINGS:
            raise ValueError(f"unknown grouping {self.grouping!r}; choose from {GROUPINGS}")
        if self.enclosing not in ENCLOSURE_KINDS:
            raise ValueError(f"unknown enclosing {self.enclosing!r}; choose from {ENCLOSURE_KINDS}")

    @property
    def gate_cost(self) -> int:
        return GATE_COST[self.enclosing]


def balanced_pca_tree(points, r: int) -> np.ndarray:
    """Group ids from recursive median splits along the widest-variance axis.

    A node with at most ``r`` points becomes one group. Otherwise its points
    are ordered by the max-variance coordinate (ties: lowest axis; equal
    coordinates keep id order) and split at ``floor(m/2)``; the left half
    is numbered before the right.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    if pts.shape[0] == 0:
        raise ValueError("cannot group an empty point set")
    if r < 1:
        raise ValueError(f"group size must be >= 1, got {r}")
    out, _ = _kernels.pca_tree(pts, r)
    return out


def assign_groups(points, cfg: BuildConfig, subspace: int = 0, salt: int = 0) -> np.ndarray:
    """Group id per point under ``cfg.grouping``; ids are dense from 0.

    ``salt`` only feeds the random strategy's seed, so batches appended
    later get their own shuffle.
    """
    m = np.asarray(points).shape[0]
    if m == 0:
        raise ValueError("cannot group an empty point set")
    r = cfg.r
    K = -(-m // r)
    if cfg.grouping == "pca_tree":
        return balanced_pca_tree(points, r)
    if cfg.grouping == "contiguous":
        return np.arange(m, dtype=np.int64) // r
    if cfg.grouping == "interleaved":
        return np.arange(m, dtype=np.int64) % K
    if cfg.grouping == "random":
        rng = np.random.default_rng([cfg.rng_seed, subspace, salt])
        a = np.empty(m, dtype=np.int64)
        a[rng.permutation(m)] = np.arange(m, dtype=np.int64) // r
        return a
    raise ValueError(f"unknown grouping {cfg.grouping!r}")


def _fit(points32: np.ndarray, a: np.ndarray, K: int, kind: str):
    order = np.argsort(a, kind="stable")
    counts = np.bincount(a, minlength=K)
    if np.any(counts == 0):
        raise ValueError("every group needs at least one member")
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    sorted32 = points32[order]
    if kind == "aabb":
        lo = np.minimum.reduceat(sorted32, starts, axis=0)
        hi = np.maximum.reduceat(sorted32, starts, axis=0)
        return lo, hi
    p64 = sorted32.astype(np.float64)
    if kind == "ball":
        c64 = np.add.reduceat(p64, starts, axis=0) / counts[:, None]
    elif kind == "span_ball":
        lo = np.minimum.reduceat(p64, starts, axis=0)
        hi = np.maximum.reduceat(p64, starts, axis=0)
        c64 = 0.5 * (lo + hi)
    else:
        raise ValueError(f"unknown enclosure kind {kind!r}")
    c32 = c64.astype(np.float32)
    diff = p64 - c32.astype(np.float64)[a[order]]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return c32, safe_radius(np.maximum.reduceat(dist, starts))


def enclose_group(points, kind: str = "ball") -> Enclosure:
    """Fit one enclosure around ``points`` (rows are member projections).

    Balls are centered on the member mean with radius equal to the largest
    member distance, rounded up so every member stays inside after float32
    storage. ``span_ball`` centers on the midpoint of the bounding box.
    """
    pts = as_f32(points)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    if pts.shape[0] == 0:
        raise ValueError("cannot enclose an empty group")
    a = np.zeros(pts.shape[0], dtype=np.int64)
    if kind == "aabb":
        lo, hi = _fit(pts, a, 1, kind)
        return Enclosure("aabb", lo=lo[0], hi=hi[0])
    c, rad = _fit(pts, a, 1, kind)
    return Enclosure(kind, center=c[0], radius=float(rad[0]))


@dataclass(frozen=True)
class Group:
    enclosure: Enclosure
    members: np.ndarray


@dataclass(frozen=True)
class SubspaceIndex:
    assignments: np.ndarray
    groups: tuple[Group, ...]

    @property
    def K(self) -> int:
        return len(self.groups)


class LouverIndex:
    """Per-subspace groups and enclosures over key ids ``[0, indexed_count)``.

    Storage is packed across subspaces: the K groups of every subspace share
    one row, with centers (or box corners) laid out in the key's own
    coordinate slots. New groups are only ever appended.
    """

    def __init__(self, layout: SubspaceLayout, config: BuildConfig):
        config.validate(layout.d)
        if config.S != layout.S:
            raise ValueError("layout and config disagree on S")
        self.layout = layout
        self.config = config
        S, d = layout.S, layout.d
        if config.enclosing == "aabb":
            self._lo = GrowableRows(d, np.float32)
            self._hi = GrowableRows(d, np.float32)
        else:
            self._centers = GrowableRows(d, np.float32)
            self._radii = GrowableRows(S, np.float32)
        # column per group: [centers; radii] or [hi; lo], so bound kernels
        # stream over groups with unit stride
        self._gate = GrowableCols(self.gate_width, np.float32)
        self._assign = GrowableCols(S, np.int64)
        self._members = GrowableCols(S, np.int64)
        self._gstart = GrowableCols(S, np.int64)
        self._gstart.extend_rows(np.zeros((1, S), dtype=np.int64))
        self._maxabs = np.zeros(d, dtype=np.float32)
        self.batches = 0

    @property
    def S(self) -> int:
        return self.layout.S

    @property
    def d(self) -> int:
        return self.layout.d

    @property
    def K(self) -> int:
        return self._gstart.size - 1

    @property
    def indexed_count(self) -> int:
        return self._assign.size

    @property
    def gate_cost(self) -> int:
        return self.config.gate_cost

    @property
    def gate_width(self) -> int:
        d = self.layout.d
        return 2 * d if self.config.enclosing == "aabb" else d + self.layout.S

    @property
    def gate(self) -> np.ndarray:
        """(gate_width, capacity) backing array; columns ``[0, K)`` are live."""
        return self._gate.buffer

    @property
    def key_bound(self) -> float:
        """Upper bound on the norm of any indexed key, center or box corner."""
        return float(np.linalg.norm(self._maxabs.astype(np.float64))) * (1 + 1e-12)

    # packed views used by the query kernels
    @property
    def centers(self) -> np.ndarray:
        return self._centers.view

    @property
    def radii(self) -> np.ndarray:
        return self._radii.view

    @property
    def lo(self) -> np.ndarray:
        return self._lo.view

    @property
    def hi(self) -> np.ndarray:
        return self._hi.view

    @property
    def assignments(self) -> np.ndarray:
        """(S, indexed_count) group id of each key in each subspace."""
        return self._assign.view

    @property
    def members(self) -> np.ndarray:
        """(S, indexed_count) key ids ordered by group within each subspace."""
        return self._members.view

    @property
    def group_starts(self) -> np.ndarray:
        """(S, K + 1) offsets of each group's run in :attr:`members`."""
        return self._gstart.view

    def append_batch(self, keys: np.ndarray, first_id: int) -> int:
        """Group and enclose ``keys`` (ids ``first_id..``) as new groups.

        Returns the number of groups added per subspace.
        """
        if first_id != self.indexed_count:
            raise ValueError(f"batch must start at id {self.indexed_count}, got {first_id}")
        keys = as_f32(keys)
        m = keys.shape[0]
        if m == 0:
            return 0
        cfg, S = self.config, self.S
        K0 = self.K
        assign = np.empty((m, S), dtype=np.int64)
        members = np.empty((m, S), dtype=np.int64)
        starts = np.empty((0, S), dtype=np.int64)
        fitted = []
        K_new = None
        for s, sl in enumerate(self.layout.slices):
            proj = np.ascontiguousarray(keys[:, sl])
            a = assign_groups(proj, cfg, s, salt=first_id)
            k_s = int(a.max()) + 1
            if K_new is None:
                K_new = k_s
                starts = np.empty((K_new, S), dtype=np.int64)
            elif k_s != K_new:
                raise AssertionError("group count differs between subspaces")
            fitted.append(_fit(proj, a, K_new, cfg.enclosing))
            assign[:, s] = a + K0
            members[:, s] = first_id + np.argsort(a, kind="stable")
            counts = np.bincount(a, minlength=K_new)
            starts[:, s] = first_id + np.cumsum(counts)
        if cfg.enclosing == "aabb":
            lo = np.concatenate([f[0] for f in fitted], axis=1)
            hi = np.concatenate([f[1] for f in fitted], axis=1)
            self._lo.extend(lo)
            self._hi.extend(hi)
            self._gate.extend_rows(np.concatenate([hi, lo], axis=1))
        else:
            centers = np.concatenate([f[0] for f in fitted], axis=1)
            radii = np.stack([f[1] for f in fitted], axis=1)
            self._centers.extend(centers)
            self._radii.extend(radii)
            self._gate.extend_rows(np.concatenate([centers, radii], axis=1))
        self._assign.extend_rows(assign)
        self._members.extend_rows(members)
        self._gstart.extend_rows(starts)
        np.maximum(self._maxabs, np.abs(keys).max(axis=0), out=self._maxabs)
        self.batches += 1
        return K_new

    def enclosure(self, s: int, i: int) -> Enclosure:
        lo_c, hi_c = self.layout.bounds(s)
        if self.config.enclosing == "aabb":
            return Enclosure("aabb", lo=self.lo[i, lo_c:hi_c].copy(), hi=self.hi[i, lo_c:hi_c].copy())
        return Enclosure(
            self.config.enclosing,
            center=self.centers[i, lo_c:hi_c].copy(),
            radius=float(self.radii[i, s]),
        )

    def group_members(self, s: int, i: int) -> np.ndarray:
        gs = self.group_starts
        return self.members[s, gs[s, i] : gs[s, i + 1]].copy()

    def subspace(self, s: int) -> SubspaceIndex:
        groups = tuple(Group(self.enclosure(s, i), self.group_members(s, i)) for i in range(self.K))
        return SubspaceIndex(self.assignments[s].copy(), groups)

    @property
    def per_subspace(self) -> tuple[SubspaceIndex, ...]:
        return tuple(self.subspace(s) for s in range(self.S))

    def descriptor_count(self) -> int:
        return self.K * self.S

    def state(self) -> dict[str, np.ndarray]:
        """Every stored array, enough to rebuild an identical index."""
        out = {}
        if self.config.enclosing == "aabb":
            out["lo"] = self.lo
            out["hi"] = self.hi
        else:
            out["centers"] = self.centers
            out["radii"] = self.radii
        out["assignments"] = self.assignments
        out["members"] = self.members
        out["group_starts"] = self.group_starts
        out["maxabs"] = self._maxabs
        return {k: np.ascontiguousarray(v) for k, v in out.items()}

    @classmethod
    def from_state(cls, layout: SubspaceLayout, config: BuildConfig, arrays: dict, batches: int) -> LouverIndex:
        index = cls(layout, config)
        S, d = layout.S, layout.d
        gs = np.asarray(arrays["group_starts"], dtype=np.int64)
        K = gs.shape[1] - 1
        n = np.asarray(arrays["assignments"]).shape[1] if K else 0
        shapes = {"assignments": (S, n), "members": (S, n), "group_starts": (S, K + 1), "maxabs": (d,)}
        if config.enclosing == "aabb":
            shapes.update(lo=(K, d), hi=(K, d))
        else:
            shapes.update(centers=(K, d), radii=(K, S))
        for name, shape in shapes.items():
            if name not in arrays or np.asarray(arrays[name]).shape != shape:
                raise ValueError(f"index array {name!r} missing or not of shape {shape}")
        if K:
            if config.enclosing == "aabb":
                lo = np.asarray(arrays["lo"], dtype=np.float32)
                hi = np.asarray(arrays["hi"], dtype=np.float32)
                index._lo.extend(lo)
                index._hi.extend(hi)
                index._gate.extend_rows(np.concatenate([hi, lo], axis=1))
            else:
                c = np.asarray(arrays["centers"], dtype=np.float32)
                rad = np.asarray(arrays["radii"], dtype=np.float32)
                index._centers.extend(c)
                index._radii.extend(rad)
                index._gate.extend_rows(np.concatenate([c, rad], axis=1))
            index._assign.extend_rows(np.asarray(arrays["assignments"], dtype=np.int64).T)
            index._members.extend_rows(np.asarray(arrays["members"], dtype=np.int64).T)
            index._gstart.extend_rows(gs[:, 1:].T)
        if not np.all(gs[:, 0] == 0):
            raise ValueError("group offsets must start at 0")
        index._maxabs[:] = np.asarray(arrays["maxabs"], dtype=np.float32)
        index.batches = batches
        return index


def build_index(store: KeyStore, cfg: BuildConfig) -> LouverIndex:
    """Index every key currently in ``store``."""
    if store.n < 1:
        raise ValueError("cannot index an empty store")
    cfg.validate(store.d)
    index = LouverIndex(SubspaceLayout.split(store.d, cfg.S), cfg)
    index.append_batch(store.keys, 0)
    return index


def expected_group_count(m: int, r: int, grouping: str) -> int:
    """Number of groups a batch of ``m`` keys produces (data independent)."""
    if grouping != "pca_tree" or m <= r:
        return math.ceil(m / r)
    half = m // 2
    return expected_group_count(half, r, grouping) + expected_group_count(m - half, r, grouping)
