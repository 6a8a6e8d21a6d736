"""Compiled inner loops: lattice-law lookups and the quenched Volterra sweep."""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _lagrange4(s, out):
    for j in range(4):
        w = 1.0
        for m in range(4):
            if m != j:
                w *= (s - m) / (j - m)
        out[j] = w


@njit(cache=True)
def _p0_spline(tau, sp_x0, sp_dx, sp_c):
    lt = math.log(tau)
    m = sp_c.shape[1]
    i = int((lt - sp_x0) / sp_dx)
    if i < 0:
        i = 0
    elif i > m - 1:
        i = m - 1
    s = lt - (sp_x0 + i * sp_dx)
    return math.exp(((sp_c[0, i] * s + sp_c[1, i]) * s + sp_c[2, i]) * s + sp_c[3, i])


@njit(cache=True)
def _regular(tau, ax, dense_tab, far_tab, tau_min, per_decade, dense, far_step, sp_x0, sp_dx, sp_c, wt, wx):
    cap = _p0_spline(tau, sp_x0, sp_dx, sp_c)
    if ax == 0:
        return cap
    n_tau = dense_tab.shape[0]
    n_far = far_tab.shape[1]
    u = math.log10(tau / tau_min) * per_decade
    base = int(math.floor(u)) - 1
    if base < 0:
        base = 0
    elif base > n_tau - 4:
        base = n_tau - 4
    _lagrange4(u - base, wt)
    acc = 0.0
    if ax <= dense:
        for j in range(4):
            acc += wt[j] * dense_tab[base + j, ax]
    else:
        v = math.log(ax / dense) / far_step
        jb = int(math.floor(v)) - 1
        if jb < 0:
            jb = 0
        elif jb > n_far - 4:
            jb = n_far - 4
        _lagrange4(v - jb, wx)
        for j in range(4):
            row = 0.0
            for k in range(4):
                row += wx[k] * far_tab[base + j, jb + k]
            acc += wt[j] * row
    val = math.exp(acc)
    return val if val < cap else cap


@njit(cache=True)
def law_prob_scalar(tau, ax, dense_tab, far_tab, tau_min, per_decade, dense, far_step, sp_x0, sp_dx, sp_c, j0,
                    wt, wx):
    if tau <= 0.0:
        return 1.0 if ax == 0 else 0.0
    if tau < tau_min:
        if ax == 0:
            return math.exp(-tau * (1.0 - j0))
        base = _regular(tau_min, ax, dense_tab, far_tab, tau_min, per_decade, dense, far_step, sp_x0, sp_dx, sp_c,
                        wt, wx)
        return base * (tau / tau_min) * math.exp(-(tau - tau_min))
    return _regular(tau, ax, dense_tab, far_tab, tau_min, per_decade, dense, far_step, sp_x0, sp_dx, sp_c, wt, wx)


@njit(cache=True)
def law_prob(tau, ax, dense_tab, far_tab, tau_min, per_decade, dense, far_step, sp_x0, sp_dx, sp_c, j0):
    out = np.empty(tau.size)
    wt = np.empty(4)
    wx = np.empty(4)
    for i in range(tau.size):
        out[i] = law_prob_scalar(tau[i], ax[i], dense_tab, far_tab, tau_min, per_decade, dense, far_step,
                                 sp_x0, sp_dx, sp_c, j0, wt, wx)
    return out


@njit(cache=True)
def _lag_plan(n_lags, lag_step, rho, tau_min, per_decade, n_tau, sp_x0, sp_dx, sp_c):
    """Per-lag interpolation rows for lags ``k * lag_step``; ``ok[k]`` false means use the scalar path."""
    base = np.zeros(n_lags, dtype=np.int64)
    wts = np.zeros((n_lags, 4))
    cap = np.zeros(n_lags)
    ok = np.zeros(n_lags, dtype=np.bool_)
    w = np.empty(4)
    for k in range(1, n_lags):
        tau = (1.0 - rho) * k * lag_step
        if tau < tau_min:
            continue
        u = math.log10(tau / tau_min) * per_decade
        b = int(math.floor(u)) - 1
        if b < 0:
            b = 0
        elif b > n_tau - 4:
            b = n_tau - 4
        _lagrange4(u - b, w)
        base[k] = b
        for j in range(4):
            wts[k, j] = w[j]
        cap[k] = _p0_spline(tau, sp_x0, sp_dx, sp_c)
        ok[k] = True
    return base, wts, cap, ok


@njit(cache=True)
def quenched_sweep(times, levels, grid_index, lag_step, ratio, beta0, rho, dense_tab, far_tab, tau_min, per_decade,
                   dense, far_step, sp_x0, sp_dx, sp_c, j0):
    """Trapezoid forward sweep for the constrained quenched partition.

    ``zeta_n = ratio K_w(0, t_n) + ratio sum_j omega_j zeta_j K_w(t_j, t_n)``
    with trapezoid weights on the (possibly repeated) nodes ``times``.
    Nodes with ``grid_index >= 0`` sit at ``grid_index * lag_step``; pairs of
    such nodes reuse per-lag interpolation weights.
    """
    n = times.size
    zeta = np.empty(n)
    wt = np.empty(4)
    wx = np.empty(4)
    kw = np.empty(n)
    n_lags = 0
    for i in range(n):
        if grid_index[i] + 1 > n_lags:
            n_lags = grid_index[i] + 1
    base, wts, cap, ok = _lag_plan(n_lags, lag_step, rho, tau_min, per_decade, dense_tab.shape[0], sp_x0, sp_dx,
                                   sp_c)
    zeta[0] = ratio * beta0
    for i in range(1, n):
        ti = times[i]
        yi = levels[i]
        gi = grid_index[i]
        for j in range(i):
            d = yi - levels[j]
            if d < 0:
                d = -d
            lag = ti - times[j]
            if lag <= 0.0:
                kw[j] = beta0 if d == 0 else 0.0
                continue
            gj = grid_index[j]
            if gi >= 0 and gj >= 0 and d <= dense and ok[gi - gj]:
                k = gi - gj
                if d == 0:
                    kw[j] = beta0 * cap[k]
                else:
                    b = base[k]
                    acc = (wts[k, 0] * dense_tab[b, d] + wts[k, 1] * dense_tab[b + 1, d]
                           + wts[k, 2] * dense_tab[b + 2, d] + wts[k, 3] * dense_tab[b + 3, d])
                    val = math.exp(acc)
                    kw[j] = beta0 * (val if val < cap[k] else cap[k])
            else:
                kw[j] = beta0 * law_prob_scalar((1.0 - rho) * lag, d, dense_tab, far_tab, tau_min, per_decade,
                                                dense, far_step, sp_x0, sp_dx, sp_c, j0, wt, wx)
        acc = 0.0
        for j in range(i):
            left = times[j] - times[j - 1] if j > 0 else 0.0
            right = times[j + 1] - times[j]
            acc += 0.5 * (left + right) * zeta[j] * kw[j]
        # the diagonal term: K_w(t_i, t_i) = beta0
        half = 0.5 * (ti - times[i - 1])
        zeta[i] = ratio * (kw[0] + acc) / (1.0 - ratio * half * beta0)
    return zeta
