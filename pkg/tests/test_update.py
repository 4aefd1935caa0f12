import hashlib
import time

import numpy as np
import pytest
from conftest import gaussian, structure_problems
from hypothesis import given
from hypothesis import strategies as st

from louver.build import BuildConfig, LouverIndex
from louver.geometry import SubspaceLayout
from louver.query import NoAttendedTokens, brute_force_range
from louver.store import KeyStore
from louver.update import KeyBuffer, LouverCache, flush_buffer, push_key


def fresh(d=8, S=2, r=4, B=128):
    cfg = BuildConfig(S=S, r=r)
    return KeyStore(d), LouverIndex(SubspaceLayout.split(d, S), cfg), KeyBuffer(B)


def test_first_push_only_fills_the_buffer():
    store, index, buf = fresh()
    assert push_key(store, index, buf, np.ones(8), np.zeros(8)) == 0
    assert len(buf) == 1 and buf.pending_ids.tolist() == [0]
    assert index.indexed_count == 0 and index.K == 0 and index.batches == 0


def test_the_capacity_push_flushes():
    store, index, buf = fresh(B=128)
    keys = gaussian(128, 8, seed=1)
    for k in keys[:127]:
        push_key(store, index, buf, k, k)
    assert len(buf) == 127 and index.indexed_count == 0
    push_key(store, index, buf, keys[127], keys[127])
    assert len(buf) == 0 and index.indexed_count == 128 and index.batches == 1


def test_4096_pushes_give_32_flushes():
    cache = LouverCache(8, BuildConfig(S=2, r=4), buffer_capacity=128)
    keys = gaussian(4096, 8, seed=2)
    cache.extend(keys, keys)
    assert cache.flushes == 32 and cache.index.batches == 32
    assert cache.index.indexed_count == 4096 and len(cache.buffer) == 0


def test_flush_of_eight_keys_adds_two_groups():
    store, index, buf = fresh(B=128, r=4)
    for k in gaussian(8, 8, seed=3):
        push_key(store, index, buf, k, k)
    assert flush_buffer(store, index, buf) == 2
    assert index.K == 2 and len(buf) == 0


def test_flushing_an_empty_buffer_does_nothing():
    store, index, buf = fresh()
    assert flush_buffer(store, index, buf) == 0
    for k in gaussian(5, 8, seed=4):
        push_key(store, index, buf, k, k)
    flush_buffer(store, index, buf)
    before = {k: v.copy() for k, v in index.state().items()}
    assert flush_buffer(store, index, buf) == 0
    assert index.batches == 1
    for name, arr in index.state().items():
        assert np.array_equal(arr, before[name])


def test_buffer_must_match_the_unindexed_range():
    store, index, buf = fresh()
    store.append(np.ones(8), np.ones(8))
    buf.stop = 0
    store.append(np.ones(8), np.ones(8))
    buf.stop = 1
    with pytest.raises(RuntimeError):
        flush_buffer(store, index, buf)
    with pytest.raises(ValueError):
        KeyBuffer(0)


@given(
    seed=st.integers(0, 10_000),
    B=st.integers(1, 40),
    ops=st.lists(st.tuples(st.sampled_from(["push", "query", "flush"]), st.integers(1, 30)), min_size=1, max_size=25),
)
def test_interleaved_pushes_and_queries_match_brute_force(seed, B, ops):
    rng = np.random.default_rng(seed)
    cache = LouverCache(12, BuildConfig(S=3, r=4, grouping="pca_tree"), buffer_capacity=B)
    for op, m in ops:
        if op == "push":
            cache.extend(rng.standard_normal((m, 12)), rng.standard_normal((m, 12)))
        elif op == "flush":
            cache.flush()
        else:
            q = rng.standard_normal(12).astype(np.float32)
            tau = float(rng.normal() * 2)
            for algo in ("ta", "full"):
                assert np.array_equal(cache.query(q, tau, algo).ids, brute_force_range(cache.store, q, tau))
        # indexed and pending ids always partition everything present
        assert cache.index.indexed_count == cache.buffer.start
        assert cache.buffer.stop == cache.n
        assert len(cache.buffer) < B


def test_flushed_index_keeps_every_structural_invariant():
    cache = LouverCache(16, BuildConfig(S=4, r=4, grouping="pca_tree"), buffer_capacity=100)
    keys = gaussian(1050, 16, seed=5)
    cache.extend(keys, keys)
    assert cache.index.indexed_count == 1000 and len(cache.buffer) == 50
    assert structure_problems(cache.index, keys[:1000]) == []


def _digest(index, K, n):
    h = hashlib.sha256()
    for a in (index.assignments[:, :n], index.group_starts[:, : K + 1], index.gate[:, :K]):
        h.update(np.ascontiguousarray(a).tobytes())
    st_ = index.state()
    for name in ("centers", "radii", "lo", "hi"):
        if name in st_:
            h.update(np.ascontiguousarray(st_[name][:K]).tobytes())
    return h.hexdigest()


@pytest.mark.parametrize("enclosing", ["ball", "aabb"])
def test_existing_groups_never_change(enclosing):
    cache = LouverCache(8, BuildConfig(S=2, r=4, enclosing=enclosing), buffer_capacity=16)
    keys = gaussian(400, 8, seed=6)
    digests = {}
    for k in keys:
        cache.push(k, k)
        if len(cache.buffer) == 0:
            K, n = cache.index.K, cache.index.indexed_count
            digests[(K, n)] = _digest(cache.index, K, n)
    cache.extend(gaussian(160, 8, seed=7), gaussian(160, 8, seed=8))
    assert len(digests) == 25
    for (K, n), dg in digests.items():
        assert _digest(cache.index, K, n) == dg


def test_attend_uses_the_buffer_and_reports_empty_selections():
    cache = LouverCache(4, BuildConfig(S=2, r=2), buffer_capacity=4)
    with pytest.raises(NoAttendedTokens):
        cache.attend(np.ones(4), 0.0)
    cache.extend(np.eye(4), np.eye(4))
    assert len(cache.buffer) == 0
    with pytest.raises(NoAttendedTokens):
        cache.attend(np.ones(4), 5.0)
    cache.push(np.full(4, -1.0), np.full(4, 7.0))
    res, ans = cache.attend(np.ones(4), 5.0)
    assert ans.ids.tolist() == [] and res.token_ids.tolist() == [4]
    strict = LouverCache(4, BuildConfig(S=2, r=2), buffer_capacity=4, strict_buffer=True)
    strict.extend(np.eye(4), np.eye(4))
    strict.push(np.full(4, -1.0), np.full(4, 7.0))
    with pytest.raises(NoAttendedTokens):
        strict.attend(np.ones(4), 5.0)
    res, ans = strict.attend(np.ones(4), 0.5)
    assert res.token_ids.tolist() == [0, 1, 2, 3]


def _push_seconds(cache, keys) -> float:
    t0 = time.perf_counter()
    for k in keys:
        cache.push(k, k)
    return (time.perf_counter() - t0) / keys.shape[0]


def test_push_cost_does_not_grow_with_the_cache():
    cache = LouverCache(64, BuildConfig(S=4, r=4, grouping="pca_tree"), buffer_capacity=128)
    keys = gaussian(65536, 64, seed=9)
    cache.extend(keys[:1024], keys[:1024])
    early = min(_push_seconds(cache, keys[1024 + 1024 * i : 2048 + 1024 * i]) for i in range(2))
    cache.extend(keys[3072:63488], keys[3072:63488])
    late = min(_push_seconds(cache, keys[63488 + 1024 * i : 64512 + 1024 * i]) for i in range(2))
    assert cache.n == 65536 and cache.flushes == 512
    # amortized O(1): a linear cost would be about 30 times higher here
    assert late < 3 * early, (late, early)
