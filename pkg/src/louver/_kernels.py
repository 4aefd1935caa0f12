"""Compiled inner loops.

Every routine that produces a key score follows the same rule: products and
partial sums are rounded to float32 and accumulated strictly left to right
over the coordinates. LLVM does not contract or reassociate without fastmath,
so these loops agree bit for bit with a plain Python float32 loop.
"""

import numpy as np
from numba import njit

__all__ = [
    "dot1",
    "dot_range",
    "dot_ids",
    "select_masked",
    "bounds_ball",
    "bounds_aabb",
    "ta_filter",
    "and_filter",
    "pca_tree",
]


@njit(cache=True)
def dot1(a, b):
    acc = np.float32(0.0)
    for i in range(a.shape[0]):
        acc += a[i] * b[i]
    return acc


@njit(cache=True)
def dot_range(keys, q, start, stop, out):
    # Four independent rows per pass keep the FP pipeline busy; each row
    # still accumulates in coordinate order.
    d = keys.shape[1]
    j = start
    while j + 4 <= stop:
        a0 = np.float32(0.0)
        a1 = np.float32(0.0)
        a2 = np.float32(0.0)
        a3 = np.float32(0.0)
        for i in range(d):
            qi = q[i]
            a0 += keys[j, i] * qi
            a1 += keys[j + 1, i] * qi
            a2 += keys[j + 2, i] * qi
            a3 += keys[j + 3, i] * qi
        out[j - start] = a0
        out[j - start + 1] = a1
        out[j - start + 2] = a2
        out[j - start + 3] = a3
        j += 4
    while j < stop:
        a = np.float32(0.0)
        for i in range(d):
            a += keys[j, i] * q[i]
        out[j - start] = a
        j += 1


@njit(cache=True)
def dot_ids(keys, ids, q, out):
    d = keys.shape[1]
    m = ids.shape[0]
    t = 0
    while t + 4 <= m:
        j0 = ids[t]
        j1 = ids[t + 1]
        j2 = ids[t + 2]
        j3 = ids[t + 3]
        a0 = np.float32(0.0)
        a1 = np.float32(0.0)
        a2 = np.float32(0.0)
        a3 = np.float32(0.0)
        for i in range(d):
            qi = q[i]
            a0 += keys[j0, i] * qi
            a1 += keys[j1, i] * qi
            a2 += keys[j2, i] * qi
            a3 += keys[j3, i] * qi
        out[t] = a0
        out[t + 1] = a1
        out[t + 2] = a2
        out[t + 3] = a3
        t += 4
    while t < m:
        j = ids[t]
        a = np.float32(0.0)
        for i in range(d):
            a += keys[j, i] * q[i]
        out[t] = a
        t += 1


@njit(cache=True)
def select_masked(keys, mask, q, tau):
    """Ascending ids j with mask[j] and dot(q, k_j) >= tau."""
    m = 0
    for j in range(mask.shape[0]):
        if mask[j]:
            m += 1
    ids = np.empty(m, np.int64)
    t = 0
    for j in range(mask.shape[0]):
        if mask[j]:
            ids[t] = j
            t += 1
    sc = np.empty(m, np.float32)
    dot_ids(keys, ids, q, sc)
    c = 0
    for t in range(m):
        if sc[t] >= tau:
            ids[c] = ids[t]
            c += 1
    return ids[:c].copy()


@njit(cache=True)
def bounds_ball(G, q, qn, offsets, K, out):
    """out[s, i] = <q_s, c_{s,i}> + rho_{s,i} |q_s| in float32.

    ``G`` rows are center coordinates followed by one radius row per
    subspace; columns are groups.
    """
    S = offsets.shape[0] - 1
    d = offsets[S]
    for s in range(S):
        row = out[s]
        for i in range(K):
            row[i] = 0.0
        for c in range(offsets[s], offsets[s + 1]):
            qc = q[c]
            g = G[c]
            for i in range(K):
                row[i] += g[i] * qc
        g = G[d + s]
        qs = qn[s]
        for i in range(K):
            row[i] += g[i] * qs


@njit(cache=True)
def bounds_aabb(G, q, offsets, K, out):
    """out[s, i] = sum_c max(q_c lo_c, q_c hi_c); ``G`` rows are hi then lo."""
    S = offsets.shape[0] - 1
    d = offsets[S]
    for s in range(S):
        row = out[s]
        for i in range(K):
            row[i] = 0.0
        for c in range(offsets[s], offsets[s + 1]):
            qc = q[c]
            g = G[c] if qc >= 0 else G[d + c]
            for i in range(K):
                row[i] += g[i] * qc


@njit(cache=True)
def _desc_bits(b):
    # float32 bit pattern -> uint32 that sorts ascending as the float sorts descending
    if b == np.uint32(0x80000000):
        b = np.uint32(0)
    if b & np.uint32(0x80000000):
        return b
    return np.uint32(0x7FFFFFFF) - b


@njit(cache=True)
def _ta_prefix(cand, val, cnt, complete, tau_eff, gstart, members, mark):
    """Exact TA halt over per-subspace top prefixes.

    ``cand[s, :cnt[s]]`` holds, in ascending id order, exactly the groups
    whose bound is at least some cutoff, i.e. ranks ``1..cnt[s]`` of
    subspace s; ``val`` holds their bounds at the same positions. Returns ``(ok, depth, halted, U)``; ``ok`` is False when the
    halt lies beyond the shortest prefix and ``complete`` is False, in
    which case nothing is marked.

    Per-subspace histograms give each rank's bound to within a bin (widened
    by one bin on each side against rounding in the bin index), which
    brackets the halt between ``d_lo`` (first rank whose lower estimates sum
    below the threshold) and ``d_hi`` (first rank whose upper estimates do).
    Only the bins between the two are sorted.
    """
    S = cand.shape[0]
    K = gstart.shape[1] - 1
    cmin = K
    cmax = 0
    for s in range(S):
        cmin = min(cmin, cnt[s])
        cmax = max(cmax, cnt[s])
    if cmin == 0:
        return False, 0, False, 0.0
    nb = min(1024, max(16, cmax // 16))
    counts = np.zeros((S, nb), np.int32)
    bins = np.empty((S, cmax), np.int32)
    lo = np.empty(S, np.float32)
    binw = np.empty(S)
    for s in range(S):
        v = val[s]
        c = cnt[s]
        a = v[0]
        b = a
        for t in range(c):
            a = min(a, v[t])
            b = max(b, v[t])
        lo[s] = a
        span = np.float64(b) - np.float64(a)
        if span > 0 and np.isfinite(span):
            sc = np.float32(nb / span)
            binw[s] = span / nb
        else:
            sc = np.float32(0.0)
            binw[s] = 0.0 if span == 0 else np.inf
        h = counts[s]
        bs = bins[s]
        for t in range(c):
            k = min(max(np.int32((v[t] - a) * sc), 0), nb - 1)
            bs[t] = k
            h[k] += 1
    ptr = np.full(S, nb - 1, np.int64)
    above = np.zeros(S, np.int64)
    top_bin = np.empty(S, np.int64)
    top_above = np.empty(S, np.int64)
    d_lo = 0
    d_hi = cmin
    for d in range(1, cmin + 1):
        ulo = 0.0
        uhi = 0.0
        for s in range(S):
            while above[s] + counts[s, ptr[s]] < d:
                above[s] += counts[s, ptr[s]]
                ptr[s] -= 1
            if binw[s] == 0:
                ulo += np.float64(lo[s])
                uhi += np.float64(lo[s])
            else:
                ulo += np.float64(lo[s]) + (ptr[s] - 1) * binw[s]
                uhi += np.float64(lo[s]) + (ptr[s] + 2) * binw[s]
        if d_lo == 0 and ulo < tau_eff:
            d_lo = d
            for s in range(S):
                top_bin[s] = ptr[s]
                top_above[s] = above[s]
        if uhi < tau_eff:
            d_hi = d
            break
    if d_lo == 0:
        if not complete:
            return False, 0, False, 0.0
        for s in range(S):
            for p in range(gstart[s, K]):
                mark[members[s, p]] = True
        U = 0.0
        for s in range(S):
            U += np.float64(lo[s])
        return True, K, False, U
    width = 0
    for s in range(S):
        c = 0
        for t in range(ptr[s], top_bin[s] + 1):
            c += counts[s, t]
        width = max(width, c)
    band = np.empty((S, width), np.int64)
    for s in range(S):
        bs = bins[s]
        tb = top_bin[s]
        pb = ptr[s]
        c = 0
        for t in range(cnt[s]):
            if pb <= bs[t] <= tb:
                band[s, c] = t
                c += 1
        keys = np.empty(c, np.uint64)
        vb = val[s].view(np.uint32)
        for t in range(c):
            keys[t] = (np.uint64(_desc_bits(vb[band[s, t]])) << np.uint64(32)) | np.uint64(band[s, t])
        keys.sort()
        for t in range(c):
            band[s, t] = np.int64(keys[t] & np.uint64(0xFFFFFFFF))
    depth = d_hi
    halted = False
    U = 0.0
    for d in range(d_lo, d_hi + 1):
        U = 0.0
        for s in range(S):
            U += np.float64(val[s, band[s, d - 1 - top_above[s]]])
        if U < tau_eff:
            depth = d
            halted = True
            break
    if not halted and not (complete and d_hi == K):
        return False, 0, False, 0.0
    for s in range(S):
        gs = gstart[s]
        mem = members[s]
        row = cand[s]
        bs = bins[s]
        tb = top_bin[s]
        for t in range(cnt[s]):
            if bs[t] > tb:
                i = row[t]
                for p in range(gs[i], gs[i + 1]):
                    mark[mem[p]] = True
        for t in range(depth - top_above[s]):
            i = row[band[s, t]]
            for p in range(gs[i], gs[i + 1]):
                mark[mem[p]] = True
    return True, depth, halted, U


@njit(cache=True)
def ta_filter(F, tau_eff, gstart, members, mark):
    """Threshold-algorithm scan over the per-subspace bound lists ``F``.

    Round d visits the d-th largest bound of every subspace (ties: lower
    group id first) and stops once the sum of those bounds drops below
    ``tau_eff``. Marks every member of a visited group and returns
    ``(depth, halted, bound_at_depth)``.

    A sorted sample of each list predicts the halting depth; only bounds
    above a cutoff with generous margin past that prediction are ranked.
    If the halt turns out to lie deeper, the full lists are ranked instead.
    """
    S, K = F.shape
    if K == 0:
        return 0, False, -np.inf
    step = max(1, K // 256)
    m = (K + step - 1) // step
    if m >= 64:
        samp = np.empty((S, m), np.float32)
        for s in range(S):
            for j in range(m):
                samp[s, j] = -F[s, j * step]
            samp[s].sort()
        jhat = -1
        for j in range(m):
            u = 0.0
            for s in range(S):
                u -= np.float64(samp[s, j])
            if u < tau_eff:
                jhat = j
                break
        if jhat >= 0:
            jcut = 2 * jhat + 8
            if jcut < m:
                # room for the expected prefix with margin; overflow falls back
                cap = min(K, (jcut + 1) * step * 2 + 64)
                cand = np.empty((S, cap), np.int32)
                val = np.empty((S, cap), np.float32)
                cnt = np.empty(S, np.int64)
                fits = True
                for s in range(S):
                    cut = -samp[s, jcut]
                    row = cand[s]
                    vr = val[s]
                    f = F[s]
                    c = 0
                    i0 = 0
                    while i0 < K:
                        i1 = min(i0 + 16, K)
                        mx = f[i0]
                        for i in range(i0 + 1, i1):
                            mx = max(mx, f[i])
                        if mx >= cut:
                            for i in range(i0, i1):
                                x = f[i]
                                if c < cap:
                                    row[c] = i
                                    vr[c] = x
                                c += x >= cut
                        i0 = i1
                    if c > cap:
                        fits = False
                        break
                    cnt[s] = c
                if fits:
                    ok, depth, halted, U = _ta_prefix(cand, val, cnt, False, tau_eff, gstart, members, mark)
                    if ok:
                        return depth, halted, U
    cand = np.empty((S, K), np.int32)
    for s in range(S):
        for i in range(K):
            cand[s, i] = i
    cnt = np.full(S, K, np.int64)
    ok, depth, halted, U = _ta_prefix(cand, F, cnt, True, tau_eff, gstart, members, mark)
    return depth, halted, U


@njit(cache=True)
def and_filter(F, tau_eff, assign, n, mark):
    """mark[j] = key j's group survives f >= tau_eff[s] in every subspace."""
    S, K = F.shape
    alive = np.empty((S, K), np.bool_)
    survived = np.zeros(S, np.int64)
    for s in range(S):
        for i in range(K):
            ok = F[s, i] >= tau_eff[s]
            alive[s, i] = ok
            if ok:
                survived[s] += 1
    for j in range(n):
        mark[j] = True
    for s in range(S):
        a = assign[s]
        live = alive[s]
        for j in range(n):
            mark[j] &= live[a[j]]
    return survived


@njit(cache=True)
def pca_tree(points, r):
    """Balanced median-split tree; leaf ids are dense in left-first order."""
    m, dim = points.shape
    out = np.empty(m, np.int64)
    perm = np.arange(m)
    # left-first DFS keeps at most one pending right sibling per level
    stack_lo = np.empty(130, np.int64)
    stack_hi = np.empty_like(stack_lo)
    stack_lo[0] = 0
    stack_hi[0] = m
    top = 1
    nxt = 0
    while top > 0:
        top -= 1
        lo = stack_lo[top]
        hi = stack_hi[top]
        size = hi - lo
        if size <= r:
            for t in range(lo, hi):
                out[perm[t]] = nxt
            nxt += 1
            continue
        seg = np.sort(perm[lo:hi])
        best = 0
        best_var = -1.0
        for c in range(dim):
            mu = 0.0
            for t in range(size):
                mu += points[seg[t], c]
            mu /= size
            var = 0.0
            for t in range(size):
                x = points[seg[t], c] - mu
                var += x * x
            var /= size
            if var > best_var:
                best_var = var
                best = c
        vals = np.empty(size, np.float64)
        for t in range(size):
            vals[t] = points[seg[t], best]
        o = np.argsort(vals, kind="mergesort")
        for t in range(size):
            perm[lo + t] = seg[o[t]]
        half = size // 2
        stack_lo[top] = lo + half
        stack_hi[top] = hi
        top += 1
        stack_lo[top] = lo
        stack_hi[top] = lo + half
        top += 1
    return out, nxt
