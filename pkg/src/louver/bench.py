"""Decode simulation, pruning metrics and the ablation grid runner."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from louver.build import GROUPINGS, BuildConfig, build_index
from louver.geometry import ENCLOSURE_KINDS, GATE_COST, scores
from louver.io import load_dataset
from louver.query import (
    NoAttendedTokens,
    brute_force_range,
    exact_topk,
    recall_at_k,
    search,
    sparse_attention,
)
from louver.store import KeyStore
from louver.synth import Distribution, gen_synthetic
from louver.thresholds import InsufficientSample, OracleConfig, Reservoir, estimate_tau
from louver.update import DEFAULT_BUFFER, LouverCache

ALGOS = ("ta", "full", "full-oracle")


def speedup_estimate(g: float, r: int, f_scan: float) -> float:
    """Modelled speedup over a brute-force scan: ``1 / (g/r + f_scan)``."""
    if r < 1 or g < 0 or not 0 <= f_scan <= 1:
        raise ValueError(f"need r >= 1, g >= 0, 0 <= f_scan <= 1 (got g={g}, r={r}, f_scan={f_scan})")
    cost = g / r + f_scan
    if cost == 0:
        raise ZeroDivisionError("no gate cost and nothing scanned: speedup is unbounded")
    return 1.0 / cost


def median_ms(fn, repeats: int, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


@dataclass
class QueryRecord:
    step: int
    tau: float
    f_scan: float
    groups_tested: int
    keys_scanned: int
    retrieved: int
    wall_ms: float
    recall: dict[int, float] = field(default_factory=dict)
    violation: bool | None = None


@dataclass
class MetricsReport:
    """Per-query records plus means over them."""

    g: int
    r: int
    cell: dict = field(default_factory=dict)
    records: list[QueryRecord] = field(default_factory=list)
    flushes: int = 0

    def mean(self, name: str) -> float:
        if not self.records:
            return math.nan
        return float(np.mean([getattr(x, name) for x in self.records]))

    @property
    def f_scan(self) -> float:
        return self.mean("f_scan")

    @property
    def speedup_estimate(self) -> float:
        return speedup_estimate(self.g, self.r, self.f_scan)

    def mean_recall(self, k: int) -> float:
        vals = [x.recall[k] for x in self.records if k in x.recall]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def violations(self) -> int:
        return sum(1 for x in self.records if x.violation)

    @property
    def wall_ms(self) -> float:
        return float(np.median([x.wall_ms for x in self.records])) if self.records else math.nan

    def summary(self) -> dict:
        ks = sorted({k for x in self.records for k in x.recall})
        out = dict(self.cell)
        out.update(
            queries=len(self.records),
            f_scan=self.f_scan,
            groups_tested=self.mean("groups_tested"),
            keys_scanned=self.mean("keys_scanned"),
            retrieved=self.mean("retrieved"),
            speedup_estimate=self.speedup_estimate,
            wall_ms_median=self.wall_ms,
            flushes=self.flushes,
        )
        for k in ks:
            out[f"recall@{k}"] = self.mean_recall(k)
        if any(x.violation is not None for x in self.records):
            out["violations"] = self.violations
        return out


@dataclass
class SimConfig:
    build: BuildConfig = field(default_factory=BuildConfig)
    steps: int = 256
    buffer: int = DEFAULT_BUFFER
    algo: str = "ta"
    oracle: OracleConfig | None = None
    tau: float | None = None
    verify: bool = False
    ks: tuple[int, ...] = (10,)
    prefill: int = 1
    strict_buffer: bool = False
    reservoir: int = 256
    seed: int = 0

    def validate(self) -> None:
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algorithm {self.algo!r}; choose from {ALGOS}")
        if self.prefill < 1:
            raise ValueError("prefill must be >= 1 so every step has a key to attend")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if any(k < 1 for k in self.ks):
            raise ValueError("recall ranks must be >= 1")


def run_decode_sim(keys, queries, cfg: SimConfig, values=None) -> MetricsReport:
    """Replay ``keys`` as a decode stream.

    The first ``prefill`` keys are pushed up front. At each step the step's
    query (cycling through ``queries``) gets a threshold, is answered from
    index plus buffer and attends; then the step's key is pushed. With no
    reservoir estimate yet, the step uses ``tau = -inf``. A step's
    ``f_scan`` counts index candidates plus buffered keys over all keys present.
    """
    cfg.validate()
    keys = np.asarray(keys, dtype=np.float32)
    queries = np.asarray(queries, dtype=np.float32)
    n, d = keys.shape
    if n < cfg.prefill + cfg.steps:
        raise ValueError(f"need {cfg.prefill + cfg.steps} keys, have {n}")
    if queries.shape[0] == 0 and cfg.steps:
        raise ValueError("no queries")
    if values is None:
        values = np.random.default_rng(cfg.seed).standard_normal((n, d)).astype(np.float32)
    cache = LouverCache(d, cfg.build, cfg.buffer, cfg.strict_buffer)
    res = Reservoir(d, cfg.reservoir, cfg.seed)

    def push(i):
        cache.push(keys[i], values[i])
        res.update(i, keys[i])

    for i in range(cfg.prefill):
        push(i)
    report = MetricsReport(cfg.build.gate_cost, cfg.build.r, cell=_cell(cfg.build, cfg.algo))
    for t in range(cfg.steps):
        q = queries[t % queries.shape[0]]
        if cfg.tau is not None:
            tau = cfg.tau
        elif cfg.oracle is not None:
            try:
                tau = estimate_tau(res, q, cfg.oracle)
            except InsufficientSample:
                tau = -math.inf
        else:
            tau = -math.inf
        t0 = time.perf_counter()
        try:
            _, ans = cache.attend(q, tau, cfg.algo)
        except NoAttendedTokens:
            # right after a flush the buffer is empty; attend the newest key
            ans = cache.query(q, tau, cfg.algo)
            sparse_attention(cache.store, [cache.n - 1], ans.index_ids, q)
        wall = 1e3 * (time.perf_counter() - t0)
        retrieved = ans.ids if cfg.strict_buffer else np.union1d(ans.ids, cache.buffer.pending_ids)
        # the buffer is always scanned, so it counts towards the scanned fraction
        scanned = ans.candidates.stats.keys_scanned + len(cache.buffer)
        rec = QueryRecord(
            step=t,
            tau=float(tau),
            f_scan=scanned / cache.n,
            groups_tested=sum(ans.candidates.stats.groups_tested),
            keys_scanned=scanned,
            retrieved=int(retrieved.shape[0]),
            wall_ms=wall,
        )
        for k in cfg.ks:
            top = exact_topk(cache.store, q, min(k, cache.n))
            rec.recall[k] = recall_at_k(top, retrieved)
        if cfg.verify:
            rec.violation = not np.array_equal(ans.ids, brute_force_range(cache.store, q, tau))
        report.records.append(rec)
        push(cfg.prefill + t)
    report.flushes = cache.flushes
    return report


def _cell(b: BuildConfig, algo: str) -> dict:
    return {"S": b.S, "r": b.r, "grouping": b.grouping, "enclosing": b.enclosing, "algo": algo}


@dataclass
class ThresholdSource:
    """``fraction:alpha`` (exact per-query quantile), ``tau:x`` or an oracle."""

    kind: str
    value: float | None = None
    oracle: OracleConfig | None = None

    @classmethod
    def parse(cls, text: str) -> ThresholdSource:
        name, _, arg = text.partition(":")
        if name == "fraction":
            a = float(arg)
            if not 0 < a <= 1:
                raise ValueError("retrieval fraction must be in (0, 1]")
            return cls("fraction", a)
        if name == "tau":
            return cls("tau", float(arg))
        return cls("oracle", oracle=OracleConfig.parse(text))

    def __str__(self) -> str:
        if self.kind == "oracle":
            return str(self.oracle)
        return f"{self.kind}:{self.value:g}"


def fraction_tau(s: np.ndarray, alpha: float) -> float:
    """Score of the ``ceil(alpha * n)``-th best key, so about alpha of keys reach it."""
    m = max(1, math.ceil(round(alpha * s.shape[0], 9)))
    return float(np.sort(s.astype(np.float64))[::-1][m - 1])


def thresholds_for(keys: np.ndarray, queries: np.ndarray, src: ThresholdSource, seed: int = 0) -> np.ndarray:
    if src.kind == "tau":
        return np.full(queries.shape[0], src.value)
    if src.kind == "fraction":
        return np.array([fraction_tau(scores(keys, q), src.value) for q in queries])
    res = Reservoir(keys.shape[1], seed=seed)
    for i, k in enumerate(keys):
        res.update(i, k)
    return np.array([estimate_tau(res, q, src.oracle) for q in queries])


@dataclass
class AblationSpec:
    S: tuple[int, ...] = (2, 4, 8, 16)
    r: tuple[int, ...] = (4,)
    grouping: tuple[str, ...] = ("contiguous",)
    enclosing: tuple[str, ...] = ("ball",)
    algo: tuple[str, ...] = ("ta",)
    dist: str = "gaussian"
    n: int = 4096
    d: int = 64
    queries: int = 32
    keys_path: str | None = None
    queries_path: str | None = None
    threshold: str = "fraction:0.05"
    seed: int = 0
    repeats: int | None = None

    def __post_init__(self):
        for name in ("S", "r", "grouping", "enclosing", "algo"):
            v = getattr(self, name)
            v = (v,) if isinstance(v, (int, str)) else tuple(v)
            if not v:
                raise ValueError(f"ablation grid axis {name!r} is empty")
            setattr(self, name, v)
        for g in self.grouping:
            if g not in GROUPINGS:
                raise ValueError(f"unknown grouping {g!r}")
        for e in self.enclosing:
            if e not in ENCLOSURE_KINDS:
                raise ValueError(f"unknown enclosing {e!r}")
        for a in self.algo:
            if a not in ALGOS:
                raise ValueError(f"unknown algorithm {a!r}")
        ThresholdSource.parse(self.threshold)

    @classmethod
    def from_json(cls, path) -> AblationSpec:
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown ablation spec keys: {sorted(extra)}")
        return cls(**data)

    def load_data(self) -> tuple[np.ndarray, np.ndarray]:
        if self.keys_path:
            keys = load_dataset(self.keys_path)
            if self.queries_path:
                queries = load_dataset(self.queries_path)
            else:
                queries = gen_synthetic(1, keys.shape[1], "gaussian", self.seed + 1, self.queries)[1]
            return keys, queries[: self.queries]
        return gen_synthetic(self.n, self.d, Distribution.parse(self.dist), self.seed, self.queries)


CSV_COLUMNS = (
    "S",
    "r",
    "grouping",
    "enclosing",
    "algo",
    "g",
    "n",
    "queries",
    "threshold",
    "scan_pct",
    "recall_pct",
    "speedup_estimate",
    "wall_ms",
    "brute_ms",
    "status",
)


@dataclass
class AblationRow:
    S: int
    r: int
    grouping: str
    enclosing: str
    algo: str
    g: int
    n: int
    queries: int
    threshold: str
    scan_pct: float = math.nan
    recall_pct: float = math.nan
    speedup_estimate: float = math.nan
    wall_ms: float = math.nan
    brute_ms: float = math.nan
    status: str = "ok"


def run_cell(keys, queries, taus, b: BuildConfig, algo: str, threshold: str, repeats: int) -> AblationRow:
    """Build one index and run the whole query batch through it."""
    store = KeyStore.from_arrays(keys)
    row = AblationRow(b.S, b.r, b.grouping, b.enclosing, algo, GATE_COST[b.enclosing], store.n, len(queries), threshold)
    try:
        index = build_index(store, b)
        fs, rec, wall, brute = [], [], [], []
        for q, tau in zip(queries, taus):
            ans, cand = search(index, store, q, tau, algo)
            truth = brute_force_range(store, q, tau)
            fs.append(cand.stats.f_scan)
            rec.append(100.0 if truth.shape[0] == 0 else 100.0 * np.intersect1d(ans, truth).shape[0] / truth.shape[0])
            wall.append(median_ms(lambda: search(index, store, q, tau, algo), repeats))
            brute.append(median_ms(lambda: brute_force_range(store, q, tau), repeats))
        f = float(np.mean(fs))
        row.scan_pct = 100.0 * f
        row.recall_pct = float(np.mean(rec))
        row.speedup_estimate = speedup_estimate(row.g, b.r, f)
        row.wall_ms = float(np.median(wall))
        row.brute_ms = float(np.median(brute))
    except Exception as e:  # a failed cell is reported, the grid goes on
        row.status = f"failed: {type(e).__name__}: {e}"
    return row


def run_ablation(spec: AblationSpec, progress=None) -> list[AblationRow]:
    keys, queries = spec.load_data()
    src = ThresholdSource.parse(spec.threshold)
    taus = thresholds_for(keys, queries, src, spec.seed)
    # at least 100 timed runs per cell overall
    repeats = spec.repeats or max(1, math.ceil(100 / max(1, len(queries))))
    rows = []
    for S in spec.S:
        for r in spec.r:
            for grouping in spec.grouping:
                for enclosing in spec.enclosing:
                    for algo in spec.algo:
                        b = BuildConfig(S=S, r=r, grouping=grouping, enclosing=enclosing, rng_seed=spec.seed)
                        row = run_cell(keys, queries, taus, b, algo, str(src), repeats)
                        rows.append(row)
                        if progress:
                            progress(row)
    return rows


def rows_to_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(row).items()})
    return buf.getvalue()


def render_text(rows: list[AblationRow]) -> str:
    """Aligned table with rounded numbers, for reading on a terminal."""
    head = ("S", "r", "grouping", "enclosing", "algo", "scan%", "recall%", "speed", "wall_ms", "brute_ms", "status")
    body = []
    for x in rows:
        body.append(
            (
                str(x.S),
                str(x.r),
                x.grouping,
                x.enclosing,
                x.algo,
                f"{x.scan_pct:.1f}",
                f"{x.recall_pct:.1f}",
                f"{x.speedup_estimate:.2f}x",
                f"{x.wall_ms:.3f}",
                f"{x.brute_ms:.3f}",
                x.status,
            )
        )
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(head, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines)
