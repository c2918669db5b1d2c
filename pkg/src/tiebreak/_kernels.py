"""Compiled inner loops for deferred acceptance and local score evaluation."""

from __future__ import annotations

import numpy as np
from numba import njit

INF_PRIORITY = np.int64(1 << 40)

T_N = np.int8(0)
T_A = np.int8(1)
T_C = np.int8(2)


@njit(cache=True, inline="always")
def _before(hk, hp, hr, hi, a, b):
    # heap entry a ranks strictly better than b on (priority, tie-breaker, index).
    # hk = priority + tie-breaker is monotone in that order, so it settles most
    # comparisons; rounding can only create false equalities, resolved exactly below.
    if hk[a] != hk[b]:
        return hk[a] < hk[b]
    if hp[a] != hp[b]:
        return hp[a] < hp[b]
    if hr[a] != hr[b]:
        return hr[a] < hr[b]
    return hi[a] < hi[b]


@njit(cache=True, inline="always")
def _less(k1, p1, r1, i1, k2, p2, r2, i2):
    if k1 != k2:
        return k1 < k2
    if p1 != p2:
        return p1 < p2
    if r1 != r2:
        return r1 < r2
    return i1 < i2


@njit(cache=True)
def _sift_down(hk, hp, hr, hi, base, size, pos):
    # 4-ary max-heap with the root holding the worst admitted applicant.
    # The entry at ``pos`` is lifted out and the hole moves down until it fits.
    k, p, r, ix = hk[base + pos], hp[base + pos], hr[base + pos], hi[base + pos]
    while True:
        first = 4 * pos + 1
        if first >= size:
            break
        big = base + first
        last = base + min(first + 4, size)
        for c in range(big + 1, last):
            if _before(hk, hp, hr, hi, big, c):
                big = c
        if not _less(k, p, r, ix, hk[big], hp[big], hr[big], hi[big]):
            break
        dst = base + pos
        hk[dst], hp[dst], hr[dst], hi[dst] = hk[big], hp[big], hr[big], hi[big]
        pos = big - base
    dst = base + pos
    hk[dst], hp[dst], hr[dst], hi[dst] = k, p, r, ix


@njit(cache=True)
def _sift_up(hk, hp, hr, hi, base, pos):
    k, p, r, ix = hk[base + pos], hp[base + pos], hr[base + pos], hi[base + pos]
    while pos > 0:
        parent = (pos - 1) >> 2
        src = base + parent
        if not _less(hk[src], hp[src], hr[src], hi[src], k, p, r, ix):
            break
        dst = base + pos
        hk[dst], hp[dst], hr[dst], hi[dst] = hk[src], hp[src], hr[src], hi[src]
        pos = parent
    dst = base + pos
    hk[dst], hp[dst], hr[dst], hi[dst] = k, p, r, ix


@njit(cache=True)
def da_kernel(pref_ptr, pref_school, pref_prio, school_tb, seats, R):
    """Applicant-proposing deferred acceptance.

    Returns (assigned school index or -1, ranked-entry index or -1, filled flag,
    priority, tie-breaker and index of the worst admitted, admitted count).
    A school counts as filled only once it has turned an applicant away, so a
    school whose demand exactly meets its capacity has slack.
    Each school owns a slice of four parallel heap arrays.
    """
    n = pref_ptr.shape[0] - 1
    n_sch = seats.shape[0]
    cap = np.empty(n_sch, np.int64)
    offs = np.zeros(n_sch + 1, np.int64)
    for s in range(n_sch):
        cap[s] = min(max(seats[s], 0), n)
        offs[s + 1] = offs[s] + cap[s]
    m = offs[n_sch]
    hk = np.empty(m, np.float64)
    hp = np.empty(m, np.int64)
    hr = np.empty(m, np.float64)
    hi = np.empty(m, np.int64)
    size = np.zeros(n_sch, np.int64)
    nxt = pref_ptr[:n].copy()
    assigned = np.full(n, -1, np.int64)
    assigned_k = np.full(n, -1, np.int64)
    stack = np.empty(n, np.int64)
    rejected = np.zeros(n_sch, np.bool_)
    top = 0
    for i in range(n - 1, -1, -1):
        stack[top] = i
        top += 1
    while top > 0:
        top -= 1
        i = stack[top]
        while nxt[i] < pref_ptr[i + 1]:
            k = nxt[i]
            nxt[i] += 1
            s = pref_school[k]
            p = pref_prio[k]
            if p >= INF_PRIORITY or cap[s] == 0:
                continue
            r = R[i, school_tb[s]]
            key = p + r
            base = offs[s]
            if size[s] < cap[s]:
                pos = base + size[s]
                hk[pos] = key
                hp[pos] = p
                hr[pos] = r
                hi[pos] = i
                _sift_up(hk, hp, hr, hi, base, size[s])
                size[s] += 1
                assigned[i] = s
                assigned_k[i] = k
                break
            rejected[s] = True
            if key < hk[base] or (key == hk[base] and (
                    p < hp[base] or (p == hp[base] and (r < hr[base] or (r == hr[base] and i < hi[base]))))):
                j = hi[base]
                hk[base] = key
                hp[base] = p
                hr[base] = r
                hi[base] = i
                _sift_down(hk, hp, hr, hi, base, size[s], 0)
                assigned[i] = s
                assigned_k[i] = k
                assigned[j] = -1
                assigned_k[j] = -1
                stack[top] = j
                top += 1
                break
    filled = np.zeros(n_sch, np.bool_)
    worst_p = np.zeros(n_sch, np.int64)
    worst_r = np.zeros(n_sch, np.float64)
    worst_i = np.full(n_sch, -1, np.int64)
    for s in range(n_sch):
        if rejected[s]:
            filled[s] = True
            worst_p[s] = hp[offs[s]]
            worst_r[s] = hr[offs[s]]
            worst_i[s] = hi[offs[s]]
    return assigned, assigned_k, filled, worst_p, worst_r, worst_i, size


@njit(cache=True)
def classify_one(p, r, rho_s, tau_s, slack, lottery, delta):
    if p >= INF_PRIORITY:
        return T_N
    if slack:
        return T_A
    if p > rho_s:
        return T_N
    if p < rho_s:
        return T_A
    if lottery:
        return T_C
    if r > tau_s + delta:
        return T_N
    if r <= tau_s - delta:
        return T_A
    return T_C


@njit(cache=True)
def score_kernel(pref_ptr, pref_school, pref_prio, school_tb, school_lottery, R,
                 cut_rho, cut_tau, cut_slack, delta, n_lottery, n_tb, audit=True):
    """Classification and local score for every ranked entry.

    Per-tie-breaker MID state while scanning a preference list:
    kind 0 = no qualifying preferred school, 1 = clears marginal priority
    somewhere (MID = 1), 2 = marginal-priority max cutoff held in mid_val
    with the determining school in mid_arg and its classification in mid_t.
    With ``audit`` off, entries whose score is forced to zero skip the
    m, sigma and lambda bookkeeping and the audit arrays come back with
    length one, which keeps the oracle's working set small.
    """
    n = pref_ptr.shape[0] - 1
    total = pref_school.shape[0]
    t_out = np.empty(total, np.int8)
    psi = np.zeros(total, np.float64)
    na = total if audit else 1
    m_out = np.zeros(na, np.int64)
    sig_out = np.ones(na, np.float64)
    lam_out = np.ones(na, np.float64)
    mid_own = np.zeros(na, np.float64)
    tie_flag = np.zeros(na, np.bool_)

    kind = np.zeros(n_tb, np.int8)
    mid_val = np.zeros(n_tb, np.float64)
    mid_arg = np.full(n_tb, -1, np.int64)
    mid_t = np.zeros(n_tb, np.int8)
    mid_tie = np.zeros(n_tb, np.bool_)
    touched = np.empty(n_tb, np.int64)
    is_touched = np.zeros(n_tb, np.bool_)

    for i in range(n):
        ntouch = 0
        blocked = False
        for k in range(pref_ptr[i], pref_ptr[i + 1]):
            s = pref_school[k]
            p = pref_prio[k]
            v = school_tb[s]
            lottery = school_lottery[s]
            t = classify_one(p, R[i, v], cut_rho[s], cut_tau[s], cut_slack[s], lottery, delta[s])
            t_out[k] = t

            if audit or not (t == T_N or blocked):
                lam = 1.0
                lam_other = 1.0
                m = 0
                tie = False
                for q in range(ntouch):
                    w = touched[q]
                    if w < n_lottery:
                        f = 1.0 - mid_val[w]
                        lam *= f
                        if w != v:
                            lam_other *= f
                    elif kind[w] == 2 and mid_t[w] == T_C:
                        m += 1
                        if mid_tie[w]:
                            tie = True
                own = mid_val[v]
                sigma = 1.0
                for _ in range(m):
                    sigma *= 0.5
                if audit:
                    m_out[k] = m
                    sig_out[k] = sigma
                    lam_out[k] = lam
                    mid_own[k] = own
                    tie_flag[k] = tie
                if t == T_N or blocked:
                    psi[k] = 0.0
                elif t == T_A:
                    psi[k] = sigma * lam
                elif lottery:
                    gap = cut_tau[s] - own
                    if gap < 0.0:
                        gap = 0.0
                    # equals sigma * lam * gap / (1 - own); zero when own == 1
                    psi[k] = sigma * lam_other * gap
                else:
                    psi[k] = sigma * lam * 0.5

            if t == T_A:
                blocked = True
            if not is_touched[v]:
                is_touched[v] = True
                touched[ntouch] = v
                ntouch += 1
            if p < INF_PRIORITY and kind[v] != 1:
                if cut_slack[s] or p < cut_rho[s]:
                    kind[v] = 1
                    mid_val[v] = 1.0
                elif p == cut_rho[s]:
                    ts = cut_tau[s]
                    if kind[v] == 0 or ts > mid_val[v]:
                        kind[v] = 2
                        mid_val[v] = ts
                        mid_arg[v] = s
                        mid_t[v] = t
                        mid_tie[v] = False
                    elif ts == mid_val[v]:
                        mid_tie[v] = ts < 1.0
                        if s < mid_arg[v]:
                            mid_arg[v] = s
                            mid_t[v] = t
        for q in range(ntouch):
            w = touched[q]
            kind[w] = 0
            mid_val[w] = 0.0
            mid_arg[w] = -1
            mid_t[w] = 0
            mid_tie[w] = False
            is_touched[w] = False
    return t_out, psi, m_out, sig_out, lam_out, mid_own, tie_flag


@njit(cache=True, inline="always")
def _probe(tkeys, key):
    # open addressing with linear probing; the capacity is a power of two
    mask = tkeys.shape[0] - 1
    h = (np.uint64(key) * np.uint64(0x9E3779B97F4A7C15)) >> np.uint64(20)
    j = np.int64(h & np.uint64(mask))
    while tkeys[j] != key and tkeys[j] != -1:
        j = (j + 1) & mask
    return j


@njit(cache=True)
def cell_rehash(slot_key, n_cells, cap):
    """Fresh (keys, slots) hash arrays of size ``cap`` holding the first ``n_cells`` cells."""
    tkeys = np.full(cap, -1, np.int64)
    tslot = np.empty(cap, np.int64)
    for slot in range(n_cells):
        j = _probe(tkeys, slot_key[slot])
        tkeys[j] = slot_key[slot]
        tslot[j] = slot
    return tkeys, tslot


@njit(cache=True)
def oracle_accumulate(pref_ptr, type_id, assigned_k, t_out, psi, tkeys, tslot, slot_key, n_cells,
                      max_len, acc, last_code, last_slot):
    """Add one replicate to the per-(type, T, rank) accumulator.

    A cell key is type_id * 3**max_len + T-code; ``tkeys``/``tslot`` hash it
    to a row of ``acc`` laid out as [occupancy, hits per rank, psi sum per rank].
    ``slot_key`` records each row's key and ``n_cells[0]`` the
    row count. ``last_code``/``last_slot`` cache each applicant's previous
    cell, which usually repeats. The caller keeps the table at most half
    full and ``acc`` large enough for one new cell per applicant.
    """
    n = pref_ptr.shape[0] - 1
    base = 1
    for _ in range(max_len):
        base *= 3
    for i in range(n):
        code = 0
        for k in range(pref_ptr[i], pref_ptr[i + 1]):
            code = code * 3 + t_out[k]
        if code == last_code[i]:
            slot = last_slot[i]
        else:
            key = type_id[i] * base + code
            j = _probe(tkeys, key)
            if tkeys[j] == key:
                slot = tslot[j]
            else:
                slot = n_cells[0]
                n_cells[0] += 1
                tkeys[j] = key
                tslot[j] = slot
                slot_key[slot] = key
            last_code[i] = code
            last_slot[i] = slot
        acc[slot, 0] += 1.0
        j = 1
        for k in range(pref_ptr[i], pref_ptr[i + 1]):
            acc[slot, max_len + j] += psi[k]
            j += 1
        if assigned_k[i] >= 0:
            acc[slot, 1 + assigned_k[i] - pref_ptr[i]] += 1.0


@njit(cache=True)
def draw_tilted(rng, kappa, R):
    """Fill R with 1 - U draws mapped through linear-tilt inverse CDFs (kappa 0 is uniform).

    Consumes the generator in row-major order, so the values equal
    CdfFamily.draw for the same generator state.
    """
    for i in range(R.shape[0]):
        for v in range(R.shape[1]):
            u = 1.0 - rng.random()
            k = kappa[i, v]
            if k != 0.0:
                b = 1.0 - k
                u = 2.0 * u / (b + np.sqrt(b * b + 4.0 * k * u))
            R[i, v] = u


@njit(cache=True)
def cutoff_arrays(seats, filled, worst_p, worst_r):
    """(marginal priority, tau, slack) with zero-seat schools closed to everyone."""
    n_sch = seats.shape[0]
    rho = worst_p.copy()
    tau = worst_r.copy()
    slack = np.empty(n_sch, np.bool_)
    for s in range(n_sch):
        slack[s] = not filled[s]
        if seats[s] <= 0:
            slack[s] = False
            rho[s] = 0
            tau[s] = 0.0
    return rho, tau, slack


@njit(cache=True)
def oracle_step(pref_ptr, pref_school, pref_prio, school_tb, school_lottery, seats, R, delta,
                n_lottery, n_tb, type_id, tkeys, tslot, slot_key, n_cells, max_len, acc, last_code, last_slot):
    """One oracle replicate: DA, reclassification, plug-in scores, accumulation.

    The caller guarantees room for one new cell per applicant.
    """
    assigned, assigned_k, filled, wp, wr, wi, size = da_kernel(
        pref_ptr, pref_school, pref_prio, school_tb, seats, R)
    rho, tau, slack = cutoff_arrays(seats, filled, wp, wr)
    t, psi, m, sig, lam, own, tie = score_kernel(
        pref_ptr, pref_school, pref_prio, school_tb, school_lottery, R,
        rho, tau, slack, delta, n_lottery, n_tb, False)
    oracle_accumulate(pref_ptr, type_id, assigned_k, t, psi, tkeys, tslot, slot_key, n_cells,
                      max_len, acc, last_code, last_slot)
