import math

import numpy as np
import pytest
from conftest import gaussian
from hypothesis import given
from hypothesis import strategies as st

from louver.build import BuildConfig, build_index
from louver.geometry import dot, scores
from louver.query import (
    CandidateSet,
    NoAttendedTokens,
    QueryRequest,
    brute_force_range,
    derive_subspace_thresholds,
    exact_check,
    exact_topk,
    group_bounds,
    oracle_subspace_thresholds,
    query_full_subspace,
    query_ta,
    recall_at_k,
    search,
    softmax,
    sparse_attention,
)
from louver.store import KeyStore

SMALL = np.array([[1, 0], [0, 1], [-1, 0], [0, -1], [2, 2], [0.5, 0.5]], dtype=np.float32)


def indexed(keys, **cfg):
    store = KeyStore.from_arrays(keys)
    return store, build_index(store, BuildConfig(**cfg))


def test_brute_force_examples():
    store = KeyStore.from_arrays(SMALL)
    q = np.array([1, 1], np.float32)
    assert brute_force_range(store, q, 1.0).tolist() == [0, 1, 4, 5]
    assert brute_force_range(store, q, -math.inf).tolist() == list(range(6))
    assert brute_force_range(store, q, 4.0 + 1e-9).tolist() == []
    assert brute_force_range(store, q, 1.0, limit=3).tolist() == [0, 1]
    with pytest.raises(ValueError):
        brute_force_range(store, q, 1.0, limit=7)


def test_threshold_is_not_rounded_to_float32():
    store = KeyStore.from_arrays(np.array([[1.0]], np.float32))
    q = np.array([1.0], np.float32)
    assert brute_force_range(store, q, 1.0).tolist() == [0]
    assert brute_force_range(store, q, 1.0 + 1e-12).tolist() == []
    assert exact_check(store, [0], q, 1.0 + 1e-12).tolist() == []


def test_exact_check_examples():
    keys = gaussian(300, 8, seed=1)
    store = KeyStore.from_arrays(keys)
    q = gaussian(1, 8, seed=2)[0]
    tau = 0.5
    truth = brute_force_range(store, q, tau)
    assert np.array_equal(exact_check(store, np.arange(300), q, tau), truth)
    assert exact_check(store, [], q, tau).tolist() == []
    # unsorted, repeated candidates are accepted
    ids = np.concatenate([np.arange(300)[::-1], np.arange(50)])
    assert np.array_equal(exact_check(store, ids, q, tau), truth)


@given(seed=st.integers(0, 10_000), frac=st.floats(0, 1))
def test_exact_check_is_an_idempotent_subset(seed, frac):
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((120, 6)).astype(np.float32)
    store = KeyStore.from_arrays(keys)
    q = rng.standard_normal(6).astype(np.float32)
    tau = float(rng.normal())
    ids = np.flatnonzero(rng.random(120) < frac)
    once = exact_check(store, ids, q, tau)
    assert set(once.tolist()) <= set(ids.tolist())
    assert np.array_equal(exact_check(store, once, q, tau), once)
    assert set(once.tolist()) == set(brute_force_range(store, q, tau).tolist()) & set(ids.tolist())


def test_full_subspace_with_point_groups_equals_brute_force():
    keys = gaussian(400, 8, seed=3)
    store, index = indexed(keys, S=1, r=1, grouping="contiguous")
    for i, q in enumerate(gaussian(20, 8, seed=4)):
        sc = scores(keys, q).astype(np.float64)
        tau = float(np.sort(sc)[-(10 + i)])
        req = QueryRequest(q, tau, tau_subspace=[tau])
        cand = query_full_subspace(index, store, req)
        truth = brute_force_range(store, q, tau)
        near = (sc >= tau - cand.stats.slack) & (sc < tau)
        if not near.any():
            assert np.array_equal(cand.live_ids, truth)
            assert truth.shape[0] == 10 + i
        assert set(truth.tolist()) <= set(cand.live_ids.tolist())


def test_full_subspace_examples():
    keys = gaussian(512, 16, seed=5)
    store, index = indexed(keys, S=4, r=4)
    q = gaussian(1, 16, seed=6)[0]
    everything = query_full_subspace(index, store, QueryRequest(q, 0.0, tau_subspace=[-math.inf] * 4))
    assert everything.live_ids.tolist() == list(range(512))
    with pytest.raises(ValueError):
        query_full_subspace(index, store, QueryRequest(q, 0.0))
    with pytest.raises(ValueError):
        query_full_subspace(index, store, QueryRequest(q, 0.0, tau_subspace=[0.0] * 3))


@given(seed=st.integers(0, 10_000), grouping=st.sampled_from(["contiguous", "pca_tree", "random"]))
def test_full_subspace_with_derived_thresholds_is_a_superset(seed, grouping):
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((512, 16)).astype(np.float32)
    store, index = indexed(keys, S=4, r=4, grouping=grouping, rng_seed=seed)
    q = rng.standard_normal(16).astype(np.float32)
    tau = float(np.sort(keys @ q)[-int(rng.integers(1, 60))])
    req = QueryRequest(q, tau, tau_subspace=derive_subspace_thresholds(index, q, tau))
    cand = query_full_subspace(index, store, req)
    truth = brute_force_range(store, q, tau)
    assert set(truth.tolist()) <= set(cand.live_ids.tolist())
    assert np.array_equal(exact_check(store, cand.live_ids, q, tau), truth)


def test_derived_threshold_examples():
    keys = gaussian(64, 8, seed=7)
    q = gaussian(1, 8, seed=8)[0]
    _, one = indexed(keys, S=1, r=4)
    assert derive_subspace_thresholds(one, q, 1.25).tolist() == [1.25]
    _, zero = indexed(np.zeros((16, 8), np.float32), S=4, r=4)
    assert derive_subspace_thresholds(zero, q, 1.25).tolist() == [1.25] * 4


def test_oracle_thresholds_are_the_tightest_valid_ones():
    keys = gaussian(512, 16, seed=9)
    store, index = indexed(keys, S=4, r=4, grouping="contiguous")
    q = gaussian(1, 16, seed=10)[0]
    tau = float(np.sort(keys @ q)[-20])
    ts = oracle_subspace_thresholds(index, store, q, tau)
    assert np.all(ts >= derive_subspace_thresholds(index, q, tau) - 1e-6)
    cand = query_full_subspace(index, store, QueryRequest(q, tau, tau_subspace=ts))
    assert set(brute_force_range(store, q, tau).tolist()) <= set(cand.live_ids.tolist())
    assert oracle_subspace_thresholds(index, store, q, math.inf).tolist() == [math.inf] * 4


def test_ta_without_a_threshold_scans_everything():
    keys = gaussian(500, 16, seed=11)
    store, index = indexed(keys, S=4, r=4)
    cand = query_ta(index, store, QueryRequest(gaussian(1, 16, seed=12)[0], -math.inf))
    assert cand.live_ids.tolist() == list(range(500))
    assert not cand.stats.ta_halted and cand.stats.ta_stop_depth == index.K
    assert cand.stats.f_scan == 1.0


@pytest.mark.parametrize("r", [1, 4])
def test_single_subspace_ta_keeps_groups_above_threshold_plus_the_halting_one(r):
    keys = gaussian(600, 8, seed=13)
    store, index = indexed(keys, S=1, r=r, grouping="contiguous")
    for i, q in enumerate(gaussian(10, 8, seed=14)):
        tau = float(np.sort(keys @ q)[-(5 + 7 * i)])
        cand = query_ta(index, store, QueryRequest(q, tau))
        f = group_bounds(index, q)[0]
        order = np.lexsort((np.arange(index.K), -f))
        above = f[order] >= tau - cand.stats.slack
        depth = int(above.sum()) + (0 if above.all() else 1)
        want = np.sort(np.concatenate([index.group_members(0, g) for g in order[:depth]]))
        assert cand.stats.ta_stop_depth == depth
        assert np.array_equal(cand.live_ids, want)


@pytest.mark.parametrize("algo", ["ta", "full", "full-oracle"])
def test_search_equals_brute_force_on_a_full_size_instance(algo):
    keys = gaussian(4096, 64, seed=15)
    store, index = indexed(keys, S=4, r=4)
    for q in gaussian(10, 64, seed=16):
        for frac in (0.001, 0.05, 0.5):
            tau = float(np.quantile((keys @ q).astype(np.float64), 1 - frac))
            ans, _ = search(index, store, q, tau, algo)
            assert np.array_equal(ans, brute_force_range(store, q, tau))


@given(seed=st.integers(0, 10_000))
def test_lowering_the_threshold_only_grows_the_answer(seed):
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((300, 12)).astype(np.float32)
    store, index = indexed(keys, S=3, r=4, grouping="pca_tree")
    q = rng.standard_normal(12).astype(np.float32)
    hi, lo = sorted(rng.normal(size=2) * 3, reverse=True)
    a, ca = search(index, store, q, hi)
    b, cb = search(index, store, q, lo)
    assert set(a.tolist()) <= set(b.tolist())
    assert set(ca.live_ids.tolist()) <= set(cb.live_ids.tolist())


def test_search_rejects_bad_input():
    store, index = indexed(gaussian(40, 8, seed=17), S=2, r=4)
    with pytest.raises(ValueError):
        search(index, store, np.zeros(8), 0.0, algo="kd")
    with pytest.raises(ValueError):
        search(index, store, np.zeros(7), 0.0)
    with pytest.raises(ValueError):
        QueryRequest(np.zeros(8), math.nan)
    with pytest.raises(ValueError):
        QueryRequest(np.zeros((2, 4)), 0.0)


def test_stats_are_self_consistent():
    keys = gaussian(1000, 16, seed=18)
    store, index = indexed(keys, S=4, r=4, enclosing="aabb")
    q = gaussian(1, 16, seed=19)[0]
    cand = query_ta(index, store, QueryRequest(q, float(np.sort(keys @ q)[-30])))
    st_ = cand.stats
    assert isinstance(cand, CandidateSet)
    assert len(cand) == st_.keys_scanned == cand.live_ids.shape[0]
    assert st_.f_scan == len(cand.live_ids) / 1000
    assert st_.gate_cost_equiv == pytest.approx(index.gate_cost * index.K / 1000)
    assert st_.cost_estimate == pytest.approx(st_.gate_cost_equiv + st_.f_scan)


def test_softmax_properties():
    x = np.array([1.0, 2.0, 3.0, -50.0])
    w = softmax(x)
    assert w.sum() == pytest.approx(1.0)
    assert np.allclose(softmax(x + 1000.0), w)
    assert softmax(np.array([3.0])).tolist() == [1.0]


def test_sparse_attention_examples():
    keys = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 3.0]], np.float32)
    values = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], np.float32)
    store = KeyStore.from_arrays(keys, values)
    q = np.array([1.0, 0.0], np.float32)
    one = sparse_attention(store, [], [2], q)
    assert one.weights.tolist() == [1.0] and one.output.tolist() == [5.0, 6.0]
    two = sparse_attention(store, [1], [0], q)
    assert two.token_ids.tolist() == [0, 1]
    assert np.allclose(two.weights, [0.5, 0.5]) and np.allclose(two.output, [2.0, 3.0])
    with pytest.raises(NoAttendedTokens):
        sparse_attention(store, [], [], q)


def test_open_threshold_attention_matches_dense_attention():
    keys = gaussian(700, 32, seed=20)
    values = gaussian(700, 32, seed=21)
    store = KeyStore.from_arrays(keys, values)
    store, index = store, build_index(store, BuildConfig(S=4, r=4))
    q = gaussian(1, 32, seed=22)[0]
    ids, _ = search(index, store, q, -math.inf)
    got = sparse_attention(store, [], ids, q).output
    logits = keys.astype(np.float64) @ q.astype(np.float64) / math.sqrt(32)
    w = np.exp(logits - logits.max())
    want = (w / w.sum()) @ values.astype(np.float64)
    assert np.max(np.abs(got - want)) <= 1e-5 * np.max(np.abs(want))


def test_topk_and_recall():
    keys = np.array([[1.0], [3.0], [3.0], [2.0]], np.float32)
    store = KeyStore.from_arrays(keys)
    q = np.array([1.0], np.float32)
    assert exact_topk(store, q, 2).tolist() == [1, 2]
    assert exact_topk(store, q, 3).tolist() == [1, 2, 3]
    assert recall_at_k([1, 2], [0, 1, 2]) == 1.0
    assert recall_at_k([1, 2], [0, 3]) == 0.0
    assert recall_at_k([1, 2], [2]) == 0.5
    with pytest.raises(ValueError):
        recall_at_k([], [1])


def test_threshold_below_the_kth_score_gives_full_recall():
    keys = gaussian(2000, 32, seed=23)
    store, index = indexed(keys, S=4, r=4)
    for q in gaussian(5, 32, seed=24):
        top = exact_topk(store, q, 10)
        tau = float(np.nextafter(np.float64(dot(q, keys[top[-1]])), -math.inf))
        ans, _ = search(index, store, q, tau)
        assert recall_at_k(top, ans) == 1.0
