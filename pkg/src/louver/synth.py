"""Synthetic key and query generators.

Vectors are left unnormalized; attention keys are not normalized either.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("gaussian", "mixture", "lowrank")


@dataclass(frozen=True)
class Distribution:
    """``gaussian``, ``mixture:k,spread`` or ``lowrank:rank,noise``.

    mixture: ``k`` standard-normal centers, points = center + spread * noise.
    lowrank: points = z @ basis / sqrt(rank) + noise * e, with standard
    normal latent ``z`` and ``basis``.
    """

    kind: str = "gaussian"
    k: int = 16
    spread: float = 0.5
    rank: int = 2
    noise: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distribution {self.kind!r}; choose from {KINDS}")
        if self.k < 1 or self.rank < 1:
            raise ValueError("component count and rank must be >= 1")
        if self.spread < 0 or self.noise < 0:
            raise ValueError("spread and noise must be >= 0")

    @classmethod
    def parse(cls, text: str) -> Distribution:
        kind, _, args = text.strip().partition(":")
        vals = [a for a in args.split(",") if a] if args else []
        if kind == "gaussian":
            if vals:
                raise ValueError("gaussian takes no parameters")
            return cls("gaussian")
        if kind == "mixture":
            k, spread = (vals + [None, None])[:2]
            return cls("mixture", k=int(k) if k else 16, spread=float(spread) if spread else 0.5)
        if kind == "lowrank":
            rank, noise = (vals + [None, None])[:2]
            return cls("lowrank", rank=int(rank) if rank else 2, noise=float(noise) if noise else 0.1)
        raise ValueError(f"unknown distribution {kind!r}; choose from {KINDS}")

    def __str__(self) -> str:
        if self.kind == "mixture":
            return f"mixture:{self.k},{self.spread:g}"
        if self.kind == "lowrank":
            return f"lowrank:{self.rank},{self.noise:g}"
        return "gaussian"


def gen_synthetic(n: int, d: int, dist: Distribution | str = "gaussian", seed: int = 0, n_queries: int = 100):
    """Keys ``(n, d)`` and queries ``(n_queries, d)``, both float32.

    Queries come from the same distribution (same mixture centers or
    subspace basis) as the keys. Fully determined by ``seed``.
    """
    if n < 1 or d < 1 or n_queries < 0:
        raise ValueError("n and d must be >= 1 and n_queries >= 0")
    if isinstance(dist, str):
        dist = Distribution.parse(dist)
    rng = np.random.default_rng(seed)
    if dist.kind == "gaussian":
        keys = rng.standard_normal((n, d))
        queries = rng.standard_normal((n_queries, d))
    elif dist.kind == "mixture":
        centers = rng.standard_normal((dist.k, d))

        def draw(m):
            return centers[rng.integers(dist.k, size=m)] + dist.spread * rng.standard_normal((m, d))

        keys = draw(n)
        queries = draw(n_queries)
    else:
        basis = rng.standard_normal((dist.rank, d)) / np.sqrt(dist.rank)

        def draw(m):
            return rng.standard_normal((m, dist.rank)) @ basis + dist.noise * rng.standard_normal((m, d))

        keys = draw(n)
        queries = draw(n_queries)
    return keys.astype(np.float32), queries.astype(np.float32)
