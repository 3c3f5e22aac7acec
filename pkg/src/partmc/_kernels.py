"""Compiled MCMC kernels on allocations.

State inside a kernel: ``labels`` (0-based, length N), per-cluster member
bitmasks ``masks`` and ``sizes``, and the cluster count. Cluster likelihood
factors are memoized in a typed dict keyed by member bitmask, so N is limited
to 62 observations here.
"""
import math

import numpy as np
from numba import njit, types
from numba.typed import Dict

MAX_KERNEL_N = 62


def new_cache():
    return Dict.empty(key_type=types.int64, value_type=types.float64)


@njit(cache=True, nogil=True)
def _logaddexp(x, y):
    if x > y:
        return x + math.log1p(math.exp(y - x))
    return y + math.log1p(math.exp(x - y))


@njit(cache=True, nogil=True)
def cluster_term(mask, inv_v, zw, st, log_p, log_1mp, cache):
    if mask in cache:
        return cache[mask]
    n, nv = zw.shape
    a = 0.0
    b = np.zeros(nv)
    for i in range(n):
        if (mask >> i) & 1:
            a += inv_v[i]
            for v in range(nv):
                b[v] += zw[i, v]
    shrink = 1.0 + st * a
    half_log_shrink = 0.5 * math.log(shrink)
    total = 0.0
    for v in range(nv):
        d = -half_log_shrink + st * b[v] * b[v] / (2.0 * shrink)
        total += _logaddexp(log_p + d, log_1mp)
    cache[mask] = total
    return total


@njit(cache=True, nogil=True)
def _prior_c(n_clusters, n):
    # the parts of the log prior that depend only on the cluster count
    return math.lgamma(n_clusters) - math.lgamma(n + n_clusters) - math.log(n)


@njit(cache=True, nogil=True)
def canonical_state(labels, masks, sizes):
    """Relabel by first appearance in place; rebuild masks and sizes; return C."""
    n = labels.shape[0]
    remap = np.full(n, -1, dtype=np.int64)
    c = 0
    for i in range(n):
        lab = labels[i]
        if remap[lab] < 0:
            remap[lab] = c
            c += 1
    masks[:] = 0
    sizes[:] = 0
    for i in range(n):
        lab = remap[labels[i]]
        labels[i] = lab
        masks[lab] |= np.int64(1) << i
        sizes[lab] += 1
    return c


@njit(cache=True, nogil=True)
def log_post_state(masks, sizes, n_clusters, n, const, inv_v, zw, st, log_p, log_1mp, cache):
    total = const + _prior_c(n_clusters, n)
    for k in range(n_clusters):
        total += math.lgamma(sizes[k] + 1.0)
        total += cluster_term(masks[k], inv_v, zw, st, log_p, log_1mp, cache)
    return total


@njit(cache=True, nogil=True)
def _categorical(logw, m, rng):
    top = logw[0]
    for k in range(1, m):
        if logw[k] > top:
            top = logw[k]
    tot = 0.0
    for k in range(m):
        logw[k] = math.exp(logw[k] - top)
        tot += logw[k]
    u = rng.random() * tot
    acc = 0.0
    for k in range(m - 1):
        acc += logw[k]
        if u < acc:
            return k
    return m - 1


@njit(cache=True, nogil=True)
def gibbs_sweep(labels, masks, sizes, n_clusters, const, inv_v, zw, st, log_p, log_1mp, cache, rng):
    """One random-scan sweep; returns the new cluster count (state canonical)."""
    n = labels.shape[0]
    order = np.arange(n)
    for k in range(n - 1, 0, -1):
        j = rng.integers(0, k + 1)
        tmp = order[k]
        order[k] = order[j]
        order[j] = tmp
    logw = np.empty(n + 1)
    c = n_clusters
    for idx in range(n):
        i = order[idx]
        bit = np.int64(1) << i
        old = labels[i]
        masks[old] ^= bit
        sizes[old] -= 1
        if sizes[old] == 0:
            # close the gap with the last cluster
            last = c - 1
            if old != last:
                masks[old] = masks[last]
                sizes[old] = sizes[last]
                for u in range(n):
                    if labels[u] == last:
                        labels[u] = old
            masks[last] = 0
            sizes[last] = 0
            c -= 1
        # prior: log N_k! terms change by log(N_k + 1) when i joins cluster k
        for k in range(c):
            logw[k] = (_prior_c(c, n) + math.log(sizes[k] + 1.0)
                       - cluster_term(masks[k], inv_v, zw, st, log_p, log_1mp, cache)
                       + cluster_term(masks[k] | bit, inv_v, zw, st, log_p, log_1mp, cache))
        logw[c] = _prior_c(c + 1, n) + cluster_term(bit, inv_v, zw, st, log_p, log_1mp, cache)
        choice = _categorical(logw, c + 1, rng)
        if choice == c:
            c += 1
        labels[i] = choice
        masks[choice] |= bit
        sizes[choice] += 1
    return canonical_state(labels, masks, sizes)


@njit(cache=True, nogil=True)
def _side_logw(k_bit, mask_a, mask_b, n_a, n_b, inv_v, zw, st, log_p, log_1mp, cache):
    """Unnormalized log weights of placing item k in A or B (neither contains k)."""
    la = (cluster_term(mask_a | k_bit, inv_v, zw, st, log_p, log_1mp, cache)
          + cluster_term(mask_b, inv_v, zw, st, log_p, log_1mp, cache)
          + math.lgamma(n_a + 2.0) + math.lgamma(n_b + 1.0))
    lb = (cluster_term(mask_a, inv_v, zw, st, log_p, log_1mp, cache)
          + cluster_term(mask_b | k_bit, inv_v, zw, st, log_p, log_1mp, cache)
          + math.lgamma(n_a + 1.0) + math.lgamma(n_b + 2.0))
    return la, lb


@njit(cache=True, nogil=True)
def split_merge(labels, masks, sizes, n_clusters, n_scans, const, inv_v, zw, st, log_p, log_1mp, cache, rng):
    """One conjugate split-merge update. Returns ``(n_clusters, accepted)``."""
    n = labels.shape[0]
    i = rng.integers(0, n)
    j = rng.integers(0, n - 1)
    if j >= i:
        j += 1
    ci = labels[i]
    cj = labels[j]
    bit_i = np.int64(1) << i
    bit_j = np.int64(1) << j
    others = np.empty(n, dtype=np.int64)
    m = 0
    for k in range(n):
        if k != i and k != j and (labels[k] == ci or labels[k] == cj):
            others[m] = k
            m += 1

    # launch state: uniform random split of the others, then restricted scans
    mask_a = bit_i
    mask_b = bit_j
    side = np.zeros(n, dtype=np.int64)  # 0 -> with i, 1 -> with j
    for t in range(m):
        k = others[t]
        if rng.random() < 0.5:
            mask_a |= np.int64(1) << k
        else:
            side[k] = 1
            mask_b |= np.int64(1) << k
    n_a = 0
    n_b = 0
    for t in range(n):
        n_a += (mask_a >> t) & 1
        n_b += (mask_b >> t) & 1

    n_rounds = n_scans + 1 if ci == cj else n_scans
    log_q = 0.0
    for scan in range(n_rounds):
        final = ci == cj and scan == n_scans
        for t in range(m):
            k = others[t]
            kb = np.int64(1) << k
            if side[k] == 0:
                mask_a ^= kb
                n_a -= 1
            else:
                mask_b ^= kb
                n_b -= 1
            la, lb = _side_logw(kb, mask_a, mask_b, n_a, n_b, inv_v, zw, st, log_p, log_1mp, cache)
            top = max(la, lb)
            pa = math.exp(la - top) / (math.exp(la - top) + math.exp(lb - top))
            if rng.random() < pa:
                side[k] = 0
                mask_a |= kb
                n_a += 1
                if final:
                    log_q += math.log(pa)
            else:
                side[k] = 1
                mask_b |= kb
                n_b += 1
                if final:
                    log_q += math.log1p(-pa)

    merged = masks[ci] | masks[cj]
    n_merged = sizes[ci] if ci == cj else sizes[ci] + sizes[cj]
    t_merged = cluster_term(merged, inv_v, zw, st, log_p, log_1mp, cache)
    if ci == cj:
        # split proposal; the reverse merge is deterministic
        c_new = n_clusters + 1
        delta = (_prior_c(c_new, n) - _prior_c(n_clusters, n)
                 + math.lgamma(n_a + 1.0) + math.lgamma(n_b + 1.0) - math.lgamma(n_merged + 1.0)
                 + cluster_term(mask_a, inv_v, zw, st, log_p, log_1mp, cache)
                 + cluster_term(mask_b, inv_v, zw, st, log_p, log_1mp, cache)
                 - t_merged)
        log_ratio = delta - log_q
        if math.log(rng.random()) < log_ratio:
            for t in range(m):
                k = others[t]
                if side[k] == 1:
                    labels[k] = n_clusters
            labels[j] = n_clusters
            return canonical_state(labels, masks, sizes), True
        return n_clusters, False

    # merge proposal; probability that a final restricted scan from the launch
    # state recreates the current split
    for t in range(m):
        k = others[t]
        kb = np.int64(1) << k
        if side[k] == 0:
            mask_a ^= kb
            n_a -= 1
        else:
            mask_b ^= kb
            n_b -= 1
        la, lb = _side_logw(kb, mask_a, mask_b, n_a, n_b, inv_v, zw, st, log_p, log_1mp, cache)
        top = max(la, lb)
        pa = math.exp(la - top) / (math.exp(la - top) + math.exp(lb - top))
        if labels[k] == ci:
            log_q += math.log(pa)
            side[k] = 0
            mask_a |= kb
            n_a += 1
        else:
            log_q += math.log1p(-pa)
            side[k] = 1
            mask_b |= kb
            n_b += 1
    c_new = n_clusters - 1
    delta = (_prior_c(c_new, n) - _prior_c(n_clusters, n)
             + math.lgamma(n_merged + 1.0) - math.lgamma(sizes[ci] + 1.0) - math.lgamma(sizes[cj] + 1.0)
             + t_merged
             - cluster_term(masks[ci], inv_v, zw, st, log_p, log_1mp, cache)
             - cluster_term(masks[cj], inv_v, zw, st, log_p, log_1mp, cache))
    log_ratio = delta + log_q
    if math.log(rng.random()) < log_ratio:
        for k in range(n):
            if labels[k] == cj:
                labels[k] = ci
        return canonical_state(labels, masks, sizes), True
    return n_clusters, False


@njit(cache=True, nogil=True)
def run_chain(labels, n_iterations, hybrid, gibbs_per_sm, n_scans,
              const, inv_v, zw, st, log_p, log_1mp, cache, rng):
    """Run a chain from canonical ``labels``; returns (states, log_post, sm_attempts, sm_accepts)."""
    n = labels.shape[0]
    per_iter = 1 + gibbs_per_sm if hybrid else 1
    n_rec = n_iterations * per_iter
    states = np.empty((n_rec, n), dtype=np.int8)
    lp = np.empty(n_rec)
    masks = np.zeros(n, dtype=np.int64)
    sizes = np.zeros(n, dtype=np.int64)
    c = canonical_state(labels, masks, sizes)
    row = 0
    attempts = 0
    accepts = 0
    for it in range(n_iterations):
        if hybrid:
            if n > 1:
                c, ok = split_merge(labels, masks, sizes, c, n_scans, const, inv_v, zw, st, log_p, log_1mp, cache, rng)
                attempts += 1
                if ok:
                    accepts += 1
            states[row] = labels
            lp[row] = log_post_state(masks, sizes, c, n, const, inv_v, zw, st, log_p, log_1mp, cache)
            row += 1
            for g in range(gibbs_per_sm):
                c = gibbs_sweep(labels, masks, sizes, c, const, inv_v, zw, st, log_p, log_1mp, cache, rng)
                states[row] = labels
                lp[row] = log_post_state(masks, sizes, c, n, const, inv_v, zw, st, log_p, log_1mp, cache)
                row += 1
        else:
            c = gibbs_sweep(labels, masks, sizes, c, const, inv_v, zw, st, log_p, log_1mp, cache, rng)
            states[row] = labels
            lp[row] = log_post_state(masks, sizes, c, n, const, inv_v, zw, st, log_p, log_1mp, cache)
            row += 1
    return states, lp, attempts, accepts


@njit(cache=True, nogil=True)
def simulate_markov(cum_p, start, n_steps, rng):
    """Simulate a finite chain from cumulative transition rows; state 1 is ``start``."""
    out = np.empty(n_steps, dtype=np.int64)
    s = start
    m = cum_p.shape[1]
    for t in range(n_steps):
        out[t] = s
        u = rng.random()
        # binary search for the first column with cum_p > u
        lo = 0
        hi = m - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if cum_p[s, mid] > u:
                hi = mid
            else:
                lo = mid + 1
        s = lo
    return out
