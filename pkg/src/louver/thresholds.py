"""Threshold estimation from a uniform reservoir of past keys."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from louver.geometry import as_f32, scores

VARIANTS = ("sample_max", "sample_topk", "sample_gap", "sample_mean_max", "budget")
DEFAULT_CAPACITY = 256

_ALIASES = {
    "max": "sample_max",
    "topk": "sample_topk",
    "gap": "sample_gap",
    "meanmax": "sample_mean_max",
    "budget": "budget",
}


@dataclass(frozen=True)
class OracleConfig:
    variant: str
    m: int | None = None
    alpha: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown oracle variant {self.variant!r}")
        if self.variant == "sample_topk" and (self.m is None or self.m < 1):
            raise ValueError("sample_topk needs m >= 1")
        if self.variant == "budget" and (self.alpha is None or not 0 < self.alpha < 1):
            raise ValueError("budget needs 0 < alpha < 1")

    @classmethod
    def parse(cls, text: str) -> OracleConfig:
        """Parse ``max``, ``topk:m``, ``gap``, ``meanmax`` or ``budget:alpha``."""
        name, _, arg = text.strip().partition(":")
        variant = _ALIASES.get(name, name)
        if variant == "sample_topk":
            if not arg:
                raise ValueError("topk needs a rank, e.g. topk:5")
            return cls(variant, m=int(arg))
        if variant == "budget":
            if not arg:
                raise ValueError("budget needs a fraction, e.g. budget:0.05")
            return cls(variant, alpha=float(arg))
        if arg:
            raise ValueError(f"{name} takes no argument")
        return cls(variant)

    @property
    def min_sample(self) -> int:
        if self.variant == "sample_topk":
            return self.m
        if self.variant == "sample_gap":
            return 2
        return 1

    def __str__(self) -> str:
        if self.variant == "sample_topk":
            return f"topk:{self.m}"
        if self.variant == "budget":
            return f"budget:{self.alpha:g}"
        return {v: k for k, v in _ALIASES.items()}[self.variant]


class InsufficientSample(ValueError):
    """The reservoir holds too few keys for the requested variant."""


class Reservoir:
    """Uniform sample of a key stream (Algorithm R)."""

    def __init__(self, d: int, capacity: int = DEFAULT_CAPACITY, seed: int = 0):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.d = d
        self.capacity = capacity
        self.keys = np.zeros((capacity, d), dtype=np.float32)
        self.ids = np.full(capacity, -1, dtype=np.int64)
        self.seen = 0
        self.rng = np.random.default_rng(seed)

    @property
    def size(self) -> int:
        return min(self.seen, self.capacity)

    def __len__(self) -> int:
        return self.size

    def update(self, key_id: int, k) -> None:
        k = as_f32(k)
        if k.shape != (self.d,):
            raise ValueError(f"expected a key of length {self.d}")
        self.seen += 1
        if self.seen <= self.capacity:
            slot = self.seen - 1
        else:
            slot = int(self.rng.integers(self.seen))
            if slot >= self.capacity:
                return
        self.keys[slot] = k
        self.ids[slot] = key_id

    def sample(self) -> tuple[np.ndarray, np.ndarray]:
        return self.ids[: self.size].copy(), self.keys[: self.size].copy()


def reservoir_update(res: Reservoir, key_id: int, k) -> Reservoir:
    res.update(key_id, k)
    return res


def tau_from_scores(scores_desc, cfg: OracleConfig) -> float:
    """Apply an oracle variant to scores sorted in descending order."""
    s = np.asarray(scores_desc, dtype=np.float64)
    m = s.shape[0]
    if m < cfg.min_sample:
        raise InsufficientSample(f"{cfg} needs at least {cfg.min_sample} samples, have {m}")
    if cfg.variant == "sample_max":
        return float(s[0])
    if cfg.variant == "sample_topk":
        return float(s[cfg.m - 1])
    if cfg.variant == "sample_gap":
        # argmax returns the first (highest-score) of tied gaps
        return float(s[int(np.argmax(s[:-1] - s[1:]))])
    if cfg.variant == "sample_mean_max":
        return float((s[0] + s.mean()) / 2)
    # nearest rank with ceiling; round first so (1 - 0.1) * 100 lands on 90
    rank = min(math.ceil(round((1 - cfg.alpha) * m, 9)), m - 1)
    return float(s[::-1][rank])


def estimate_tau(res: Reservoir, q, cfg: OracleConfig) -> float:
    """Threshold for ``q`` from its scores against the reservoir sample."""
    if res.size == 0:
        raise InsufficientSample("reservoir is empty")
    s = scores(res.keys[: res.size], q).astype(np.float64)
    return tau_from_scores(np.sort(s)[::-1], cfg)
