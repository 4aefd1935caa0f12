"""Threshold retrieval over a :class:`LouverIndex` and sparse attention.

Two filters are provided. :func:`query_full_subspace` keeps a key only if
its group's enclosure meets the per-subspace halfspace in every subspace;
:func:`query_ta` walks the per-subspace bound lists in descending order and
stops once the summed bounds of the current rank fall below the threshold.
Both return a candidate superset; :func:`exact_check` reduces it to exactly
``{j : dot(q, k_j) >= tau}``. The comparison is between the float32 score and
``tau`` as real numbers; ``tau`` is never rounded to float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from louver import _kernels
from louver.build import LouverIndex
from louver.geometry import as_f32, rounding_slack, scores
from louver.store import KeyStore

_EMPTY = np.empty(0, dtype=np.int64)


class NoAttendedTokens(LookupError):
    """Raised when sparse attention is asked to attend over zero tokens."""


@dataclass
class QueryRequest:
    q: np.ndarray
    tau: float
    tau_subspace: np.ndarray | None = None
    scale: float | None = None

    def __post_init__(self):
        self.q = as_f32(self.q)
        if self.q.ndim != 1:
            raise ValueError("query must be a vector")
        self.tau = float(self.tau)
        if math.isnan(self.tau):
            raise ValueError("tau must not be NaN")
        if self.tau_subspace is not None:
            self.tau_subspace = np.asarray(self.tau_subspace, dtype=np.float64)
            if np.any(np.isnan(self.tau_subspace)):
                raise ValueError("per-subspace thresholds must not be NaN")
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(self.q.shape[0])


@dataclass(frozen=True)
class QueryStats:
    algo: str
    groups_tested: tuple[int, ...]
    groups_kept: tuple[int, ...]
    keys_scanned: int
    indexed_count: int
    gate_cost: int
    gate_cost_equiv: float
    slack: float
    ta_stop_depth: int | None = None
    ta_bound: float | None = None
    ta_halted: bool = False

    @property
    def f_scan(self) -> float:
        if self.indexed_count == 0:
            return 0.0
        return self.keys_scanned / self.indexed_count

    @property
    def cost_estimate(self) -> float:
        """Query cost as a fraction of one brute-force scan."""
        return self.gate_cost_equiv + self.f_scan


@dataclass(frozen=True)
class CandidateSet:
    """Filter output, held as a mask over the indexed ids."""

    mask: np.ndarray = field(repr=False)
    stats: QueryStats

    @cached_property
    def live_ids(self) -> np.ndarray:
        return np.flatnonzero(self.mask).astype(np.int64)

    def __len__(self) -> int:
        return self.stats.keys_scanned


@dataclass(frozen=True)
class AttentionResult:
    selected_ids: np.ndarray
    token_ids: np.ndarray
    weights: np.ndarray
    output: np.ndarray = field(repr=False)


def _as_ids(ids) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(ids, dtype=np.int64).ravel())


def brute_force_range(store: KeyStore, q, tau: float, limit: int | None = None) -> np.ndarray:
    """Every id in ``[0, limit)`` whose score reaches ``tau``, ascending."""
    limit = store.n if limit is None else limit
    if not 0 <= limit <= store.n:
        raise ValueError(f"limit {limit} outside [0, {store.n}]")
    if limit == 0:
        return _EMPTY.copy()
    s = scores(store.keys[:limit], q)
    return np.flatnonzero(s.astype(np.float64) >= tau).astype(np.int64)


def exact_check(store: KeyStore, ids, q, tau: float) -> np.ndarray:
    """Filter ``ids`` down to keys whose score reaches ``tau``, ascending."""
    ids = _as_ids(ids)
    if ids.shape[0] > 1 and not np.all(ids[1:] > ids[:-1]):
        ids = np.unique(ids)
    if ids.shape[0] == 0:
        return _EMPTY.copy()
    s = scores(store.keys, q, ids)
    return ids[s.astype(np.float64) >= tau]


def _bounds32(index: LouverIndex, q: np.ndarray) -> np.ndarray:
    K = index.K
    out = np.empty((index.S, K), dtype=np.float32)
    offs = index.layout.offsets_array()
    if index.config.enclosing == "aabb":
        _kernels.bounds_aabb(index.gate, q, offs, K, out)
    else:
        q64 = q.astype(np.float64)
        qn = np.array([math.sqrt(float(q64[sl] @ q64[sl])) for sl in index.layout.slices], dtype=np.float32)
        _kernels.bounds_ball(index.gate, q, qn, offs, K, out)
    return out


def group_bounds(index: LouverIndex, q) -> np.ndarray:
    """(S, K) per-subspace enclosure upper bounds ``f_{s,i}``.

    Evaluated in float32; the rounding error is covered by
    :func:`louver.geometry.rounding_slack`.
    """
    q = as_f32(q)
    if q.shape != (index.d,):
        raise ValueError(f"query must have length {index.d}")
    return _bounds32(index, q).astype(np.float64)


def _slack(index: LouverIndex, q: np.ndarray) -> float:
    return rounding_slack(q, index.key_bound, index.S, max(index.layout.widths) + 1)


def derive_subspace_thresholds(index: LouverIndex, q, tau: float) -> np.ndarray:
    """Safe per-subspace thresholds ``tau - sum_{s' != s} max_i f_{s',i}``.

    A key reaching ``tau`` overall must reach these in every subspace, since
    the other subspaces can contribute at most their best group bound.
    """
    if index.K == 0:
        return np.full(index.S, float(tau))
    M = group_bounds(index, q).max(axis=1)
    return float(tau) - (M.sum() - M)


def oracle_subspace_thresholds(index: LouverIndex, store: KeyStore, q, tau: float) -> np.ndarray:
    """Tightest valid per-subspace thresholds, read off the exact answer.

    ``tau_s`` is the smallest subspace-``s`` contribution among indexed keys
    that reach ``tau``. It needs the answer set, so it measures the pruning
    power of the enclosures rather than serving live queries.
    """
    q = as_f32(q)
    answer = brute_force_range(store, q, tau, index.indexed_count)
    if answer.shape[0] == 0:
        return np.full(index.S, np.inf)
    k64 = store.keys[answer].astype(np.float64)
    q64 = q.astype(np.float64)
    return np.array([(k64[:, sl] @ q64[sl]).min() for sl in index.layout.slices])


def _check(index: LouverIndex, store: KeyStore, req: QueryRequest) -> None:
    if req.q.shape != (index.d,):
        raise ValueError(f"query must have length {index.d}")
    if index.indexed_count > store.n:
        raise ValueError("index covers more keys than the store holds")


def _gate_equiv(index: LouverIndex, tested) -> float:
    if index.indexed_count == 0:
        return 0.0
    widths = index.layout.widths
    work = sum(t * w for t, w in zip(tested, widths))
    return index.gate_cost * work / (index.d * index.indexed_count)


def _empty(index: LouverIndex, algo: str) -> CandidateSet:
    zeros = (0,) * index.S
    stats = QueryStats(algo, zeros, zeros, 0, 0, index.gate_cost, 0.0, 0.0, 0 if algo == "ta" else None)
    return CandidateSet(np.zeros(0, dtype=np.bool_), stats)


def query_full_subspace(index: LouverIndex, store: KeyStore, req: QueryRequest) -> CandidateSet:
    """Keys whose group meets ``H(q_s, tau_s)`` in all subspaces."""
    _check(index, store, req)
    if req.tau_subspace is None:
        raise ValueError("full-subspace filtering needs per-subspace thresholds")
    if req.tau_subspace.shape != (index.S,):
        raise ValueError(f"expected {index.S} per-subspace thresholds")
    n = index.indexed_count
    if n == 0:
        return _empty(index, "full")
    F = _bounds32(index, req.q)
    slack = _slack(index, req.q)
    mark = np.zeros(n, dtype=np.bool_)
    kept = _kernels.and_filter(F, req.tau_subspace - slack, index.assignments, n, mark)
    tested = (index.K,) * index.S
    stats = QueryStats(
        algo="full",
        groups_tested=tested,
        groups_kept=tuple(int(x) for x in kept),
        keys_scanned=int(np.count_nonzero(mark)),
        indexed_count=n,
        gate_cost=index.gate_cost,
        gate_cost_equiv=_gate_equiv(index, tested),
        slack=slack,
    )
    return CandidateSet(mark, stats)


def query_ta(index: LouverIndex, store: KeyStore, req: QueryRequest) -> CandidateSet:
    """Threshold-algorithm filter with a single global threshold.

    Round ``d`` visits the ``d``-th best group of every subspace. Scanning
    stops after the first round whose summed bounds fall below ``tau``:
    any key not yet visited sits below that rank everywhere, so its score
    cannot exceed that sum.
    """
    _check(index, store, req)
    n = index.indexed_count
    if n == 0:
        return _empty(index, "ta")
    F = _bounds32(index, req.q)
    slack = _slack(index, req.q)
    mark = np.zeros(n, dtype=np.bool_)
    depth, halted, bound = _kernels.ta_filter(F, req.tau - slack, index.group_starts, index.members, mark)
    tested = (index.K,) * index.S
    stats = QueryStats(
        algo="ta",
        groups_tested=tested,
        groups_kept=(int(depth),) * index.S,
        keys_scanned=int(np.count_nonzero(mark)),
        indexed_count=n,
        gate_cost=index.gate_cost,
        gate_cost_equiv=_gate_equiv(index, tested),
        slack=slack,
        ta_stop_depth=int(depth),
        ta_bound=float(bound),
        ta_halted=bool(halted),
    )
    return CandidateSet(mark, stats)


def search(index: LouverIndex, store: KeyStore, q, tau: float, algo: str = "ta") -> tuple[np.ndarray, CandidateSet]:
    """Filter plus exact check; returns the answer over indexed keys."""
    req = QueryRequest(q, tau)
    if algo == "ta":
        cand = query_ta(index, store, req)
    elif algo == "full":
        req.tau_subspace = derive_subspace_thresholds(index, req.q, tau)
        cand = query_full_subspace(index, store, req)
    elif algo == "full-oracle":
        req.tau_subspace = oracle_subspace_thresholds(index, store, req.q, tau)
        cand = query_full_subspace(index, store, req)
    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    if cand.mask.shape[0] == 0:
        return _EMPTY.copy(), cand
    return _kernels.select_masked(store.keys, cand.mask, req.q, float(tau)), cand


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def sparse_attention(store: KeyStore, buffer_ids, selected_ids, q, scale: float | None = None) -> AttentionResult:
    """Softmax attention over ``selected_ids`` together with ``buffer_ids``."""
    q = as_f32(q)
    selected = np.unique(_as_ids(selected_ids))
    tokens = np.union1d(selected, _as_ids(buffer_ids)).astype(np.int64)
    if tokens.shape[0] == 0:
        raise NoAttendedTokens("no tokens to attend: selection and buffer are both empty")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[0])
    logits = float(scale) * scores(store.keys, q, tokens).astype(np.float64)
    w = softmax(logits)
    out = w @ store.values[tokens].astype(np.float64)
    return AttentionResult(selected, tokens, w, out)


def exact_topk(store: KeyStore, q, k: int, limit: int | None = None) -> np.ndarray:
    """Ids of the ``k`` highest-scoring keys (ties go to the lower id)."""
    limit = store.n if limit is None else limit
    s = scores(store.keys[:limit], q)
    order = np.lexsort((np.arange(limit), -s.astype(np.float64)))
    return order[:k].astype(np.int64)


def recall_at_k(exact_topk_ids, retrieved) -> float:
    """Fraction of the exact top-k found in ``retrieved``."""
    top = np.unique(_as_ids(exact_topk_ids))
    if top.shape[0] == 0:
        raise ValueError("k must be >= 1")
    hit = np.intersect1d(top, _as_ids(retrieved)).shape[0]
    return hit / top.shape[0]
