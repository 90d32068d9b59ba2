"""Compiled loss evaluation for the annealer.

These kernels recompute subgroup medians (with log(-log) band limits) and
two-group Efron Cox fits using the same operation order as
:mod:`kmrecon.survival_core`, so rounded statistics agree with the reference
path. Inputs are pre-sorted by (time, events first) with a stable sort.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .survival_core import Z95

KIND_CODES = {"hr": 0, "hr_lo": 1, "hr_hi": 2, "med": 3, "med_lo": 4, "med_hi": 5}
SENTINEL = 1e6


@njit(cache=True)
def _loglog(s, var, z):
    if s > 0.0 and s < 1.0 and var > 0.0:
        se = math.sqrt(var) / (s * abs(math.log(s)))
        c = math.log(-math.log(s))
        lo = math.exp(-math.exp(c + z * se))
        hi = math.exp(-math.exp(c - z * se))
        return min(max(lo, 0.0), 1.0), min(max(hi, 0.0), 1.0)
    return s, s


@njit(cache=True)
def median_stats(t, ev, idx, out):
    """Median and band-crossing limits for the subjects ``idx`` (sorted)."""
    out[0] = np.nan
    out[1] = np.nan
    out[2] = np.nan
    m = idx.shape[0]
    n = m
    s = 1.0
    cum = 0.0
    i = 0
    while i < m:
        ti = t[idx[i]]
        d = 0
        c = 0
        j = i
        while j < m and t[idx[j]] == ti:
            if ev[idx[j]]:
                d += 1
            else:
                c += 1
            j += 1
        if d > 0:
            s = s * (1.0 - d / n)
            if n > d:
                cum += d / (n * (n - d))
            var = s**2 * cum if s > 0 else 0.0
            lo, hi = _loglog(s, var, Z95)
            if np.isnan(out[0]) and s <= 0.5:
                out[0] = ti
            if np.isnan(out[1]) and lo <= 0.5:
                out[1] = ti
            if np.isnan(out[2]) and hi <= 0.5:
                out[2] = ti
            if not (np.isnan(out[0]) or np.isnan(out[1]) or np.isnan(out[2])):
                return
        n -= d + c
        i = j


@njit(cache=True)
def _efron_eval(beta, zs, first, d, dz, sum_ez):
    n = zs.shape[0]
    shift = max(beta, 0.0)
    s0c = np.empty(n + 1)
    s1c = np.empty(n + 1)
    s0c[n] = 0.0
    s1c[n] = 0.0
    acc0 = 0.0
    acc1 = 0.0
    for i in range(n - 1, -1, -1):
        w = math.exp(beta * zs[i] - shift)
        acc0 += w
        acc1 += w * zs[i]
        s0c[i] = acc0
        s1c[i] = acc1
    e_b = math.exp(beta - shift)
    e_0 = math.exp(-shift)
    rsum = 0.0
    info = 0.0
    for j in range(first.shape[0]):
        t1 = dz[j] * e_b
        t0 = (d[j] - dz[j]) * e_0 + t1
        s0 = s0c[first[j]]
        s1 = s1c[first[j]]
        for l in range(d[j]):
            a = l / d[j]
            ratio = (s1 - a * t1) / (s0 - a * t0)
            rsum += ratio
            info += ratio - ratio**2
    return sum_ez - rsum, info


@njit(cache=True)
def cox_stats(t, ev, z, idx, out):
    """Efron two-group fit on ``idx``; out = (hr, lo, hi), NaN when undefined."""
    out[0] = np.nan
    out[1] = np.nan
    out[2] = np.nan
    n = idx.shape[0]
    if n == 0:
        return
    zs = np.empty(n)
    n_treat = 0
    n_ev = 0
    for i in range(n):
        zs[i] = z[idx[i]]
        n_treat += z[idx[i]]
        if ev[idx[i]]:
            n_ev += 1
    if n_ev == 0 or n_treat == 0 or n_treat == n:
        return
    # distinct event times with their risk-set start, deaths and treated deaths
    first = np.empty(n, np.int64)
    d = np.zeros(n, np.int64)
    dz = np.zeros(n)
    n_t = 0
    i = 0
    sum_ez = 0.0
    while i < n:
        ti = t[idx[i]]
        j = i
        dd = 0
        dzz = 0.0
        while j < n and t[idx[j]] == ti:
            if ev[idx[j]]:
                dd += 1
                dzz += zs[j]
            j += 1
        if dd > 0:
            first[n_t] = i
            d[n_t] = dd
            dz[n_t] = dzz
            sum_ez += dzz
            n_t += 1
        i = j
    first = first[:n_t]
    d = d[:n_t]
    dz = dz[:n_t]
    # divergence check from the limiting scores
    rz = np.empty(n + 1)
    rz[n] = 0.0
    acc = 0.0
    for i in range(n - 1, -1, -1):
        acc += zs[i]
        rz[i] = acc
    any_t = 0.0
    all_t = 0.0
    for j in range(n_t):
        if rz[first[j]] > 0:
            any_t += d[j]
        if rz[first[j]] == n - first[j]:
            all_t += d[j]
    if sum_ez - any_t >= -1e-12 or sum_ez - all_t <= 1e-12:
        return

    lo = -np.inf
    hi = np.inf
    beta = 0.0
    tol = 1e-12
    for _ in range(200):
        score, info = _efron_eval(beta, zs, first, d, dz, sum_ez)
        if score > 0:
            lo = beta
        else:
            hi = beta
        cand = beta + score / info if info > 0 else np.nan
        if not (lo < cand < hi) or not np.isfinite(cand):
            if np.isinf(lo):
                cand = hi - max(1.0, abs(hi))
            elif np.isinf(hi):
                cand = lo + max(1.0, abs(lo))
            else:
                cand = 0.5 * (lo + hi)
        if abs(cand - beta) < tol or (hi - lo) < tol:
            beta = cand
            break
        beta = cand
        if abs(beta) > 700:
            return
    _, info = _efron_eval(beta, zs, first, d, dz, sum_ez)
    if info <= 0:
        return
    se = 1.0 / math.sqrt(info)
    out[0] = math.exp(beta)
    out[1] = math.exp(beta - Z95 * se)
    out[2] = math.exp(beta + Z95 * se)


@njit(cache=True)
def _round_half_up(x, decimals):
    scale = 10.0**decimals
    return math.floor(x * scale + 0.5) / scale


@njit(cache=True)
def recompute(g, t, ev, z, kinds, subgroups, arms, decimals, n_sub, out):
    """Rounded statistic per target component; NaN where undefined."""
    n = g.shape[0]
    need_hr = np.zeros(n_sub, np.bool_)
    need_med = np.zeros((n_sub, 2), np.bool_)
    for j in range(kinds.shape[0]):
        if kinds[j] < 3:
            need_hr[subgroups[j]] = True
        else:
            need_med[subgroups[j], arms[j]] = True
    hr = np.full((n_sub, 3), np.nan)
    med = np.full((n_sub, 2, 3), np.nan)
    buf = np.empty(n, np.int64)
    for k in range(n_sub):
        if need_hr[k]:
            m = 0
            for i in range(n):
                if g[i] == k:
                    buf[m] = i
                    m += 1
            cox_stats(t, ev, z, buf[:m], hr[k])
        for a in range(2):
            if need_med[k, a]:
                m = 0
                for i in range(n):
                    if g[i] == k and z[i] == a:
                        buf[m] = i
                        m += 1
                if m > 0:
                    median_stats(t, ev, buf[:m], med[k, a])
    for j in range(kinds.shape[0]):
        k = subgroups[j]
        if kinds[j] < 3:
            v = hr[k, kinds[j]]
        else:
            v = med[k, arms[j], kinds[j] - 3]
        out[j] = _round_half_up(v, decimals[j]) if not np.isnan(v) else np.nan


@njit(cache=True)
def linf(values, targets):
    worst = 0.0
    for j in range(values.shape[0]):
        if np.isnan(values[j]):
            r = SENTINEL
        else:
            r = abs(values[j] - targets[j]) / abs(targets[j])
        if r > worst:
            worst = r
    return worst
