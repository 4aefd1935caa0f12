import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "louver",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("louver")


def gaussian(n, d, seed):
    return np.random.default_rng(seed).standard_normal((n, d)).astype(np.float32)


def structure_problems(index, keys) -> list[str]:
    """Partition, offset, balance and containment violations of an index."""
    cfg = index.config
    n, S, K = index.indexed_count, index.S, index.K
    problems = []
    for s, sl in enumerate(index.layout.slices):
        a = index.assignments[s]
        gs = index.group_starts[s]
        mem = index.members[s]
        if not np.array_equal(np.sort(mem), np.arange(n)):
            problems.append(f"subspace {s}: members are not a partition")
        sizes = np.diff(gs)
        if np.any(sizes < 1) or not np.array_equal(np.bincount(a, minlength=K), sizes):
            problems.append(f"subspace {s}: group offsets disagree with assignments")
        if np.any(a[mem] != np.repeat(np.arange(K), sizes)):
            problems.append(f"subspace {s}: member runs disagree with assignments")
        if cfg.grouping == "pca_tree" and n >= cfg.r:
            lo = (cfg.r + 1) // 2
            if sizes.min() < lo or sizes.max() > cfg.r:
                problems.append(f"subspace {s}: pca group sizes {sizes.min()}..{sizes.max()}")
        p = keys[:, sl].astype(np.float64)
        if cfg.enclosing == "aabb":
            inside = np.all((index.lo[a, sl] <= p) & (p <= index.hi[a, sl]), axis=1)
        else:
            c = index.centers[a, sl].astype(np.float64)
            inside = np.linalg.norm(p - c, axis=1) <= index.radii[a, s]
        if not inside.all():
            problems.append(f"subspace {s}: {int((~inside).sum())} keys outside their enclosure")
    return problems


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line past pytest's capture and return the verdict."""

    def emit(label: str, ok: bool, detail: str = "") -> bool:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}" + (f": {detail}" if detail else ""))
        return ok

    return emit
