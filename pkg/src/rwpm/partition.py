"""Quenched partition functions.

Conditioning on the last contact before ``t`` turns the renewal expansion
of the constrained partition ``zeta(t) = Z^{Y,c}_{beta,[0,t]}`` into

    zeta(t) = c K_w(0, t) + c int_0^t zeta(s) K_w(s, t) ds,   c = beta/beta0,

with ``K_w(s, t) = beta0 P(X_{(1-rho)(t-s)} = Y_t - Y_s)``, and the free
partition is ``Z^Y = 1 + int_0^T zeta``.  :func:`volterra_quenched` solves
this with trapezoid weights on a uniform grid augmented by the left and right
limits at each jump of ``Y``, so the integrand is smooth between nodes.
:func:`mc_normalized` estimates ``Z^{Y,c} / z^c`` as an average of products
of weights over renewal bridges.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _compiled
from .environment import EnvPath
from .homogeneous import AnnealedModel, annealed_partition, free_energy, renewal_density
from .kernel import KernelTable
from .spectral import lattice_law
from .stats import mean_stderr


@dataclass(frozen=True)
class RenewalTrajectory:
    """Renewal points in ``[0, T]``, starting at 0."""

    points: np.ndarray
    beta: float
    bridge: bool
    T: float

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", p)
        if p.size == 0 or p[0] != 0.0 or np.any(np.diff(p) <= 0) or p[-1] > self.T:
            raise ValueError("renewal points must increase from 0 inside [0, T]")
        if self.bridge and p[-1] != self.T:
            raise ValueError("a bridge trajectory must end at T")

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.points)


@dataclass(frozen=True)
class PartitionResult:
    value: float
    log_value: float
    kind: str
    method: str
    stderr: float = math.nan
    grid_step: float = math.nan

    def __post_init__(self):
        if not (self.value > 0 and math.isfinite(self.value)):
            raise ValueError(f"partition value must be positive and finite, got {self.value}")
        if not math.isclose(self.log_value, math.log(self.value), rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError("log_value does not match value")
        if self.kind not in ("free", "constrained", "normalized"):
            raise ValueError(f"unknown kind {self.kind}")
        if self.method not in ("volterra", "mc"):
            raise ValueError(f"unknown method {self.method}")

    @classmethod
    def of(cls, value: float, kind: str, method: str, **kw) -> "PartitionResult":
        return cls(float(value), math.log(value) if value > 0 else -math.inf, kind, method, **kw)


@dataclass(frozen=True)
class QuenchedSolution:
    """Volterra output: ``zeta`` on the nodes and the free partition."""

    times: np.ndarray
    levels: np.ndarray
    zeta: np.ndarray
    free_value: float
    step: float
    error_estimate: float

    @property
    def constrained(self) -> PartitionResult:
        return PartitionResult.of(self.zeta[-1], "constrained", "volterra", grid_step=self.step)

    @property
    def free(self) -> PartitionResult:
        return PartitionResult.of(self.free_value, "free", "volterra", grid_step=self.step)


def kw(kernel: KernelTable, model: AnnealedModel, s, t, path: EnvPath, rho: float | None = None):
    """``K_w(s, t, Y) = beta0 P(X_{(1-rho)(t-s)} = Y_t - Y_s)``."""
    rho = path.rho if rho is None else rho
    s_arr, t_arr = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
    if np.any(t_arr <= s_arr) or np.any(s_arr < 0):
        raise ValueError("need 0 <= s < t")
    disp = path.y_at(t_arr) - path.y_at(s_arr)
    out = model.beta0 * lattice_law(kernel).prob((1.0 - rho) * (t_arr - s_arr), disp)
    return float(out) if out.ndim == 0 else out


def quenched_nodes(path: EnvPath, T: float, n_steps: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniform grid on ``[0, T]`` plus a left and right node at each jump in ``(0, T)``.

    Returns ``(times, levels, grid_index)`` with ``grid_index = -1`` on jump nodes.
    """
    grid = np.linspace(0.0, T, n_steps + 1)
    jumps = path.theta[path.theta < T]
    # a grid node at a jump time already serves as the right limit
    off_grid = jumps[~np.isin(jumps, grid)]
    times = np.concatenate([grid, jumps, off_grid])
    # left limits sort before right limits at equal times
    side = np.concatenate([np.ones(grid.size), np.zeros(jumps.size), np.ones(off_grid.size)])
    gidx = np.concatenate([np.arange(grid.size), -np.ones(jumps.size + off_grid.size, dtype=np.int64)])
    order = np.lexsort((side, times))
    times, side, gidx = times[order], side[order], gidx[order]
    idx = np.searchsorted(path.theta, times, side="right")
    idx = idx - ((side == 0) & (gidx < 0))
    return times, path.levels[idx].astype(np.int64), gidx


def _sweep(kernel: KernelTable, model: AnnealedModel, path: EnvPath, beta: float, times, levels, gidx,
           lag_step: float):
    law = lattice_law(kernel)
    law.ensure_range((1.0 - path.rho) * times[-1])
    return _compiled.quenched_sweep(times, levels, gidx, lag_step, beta / model.beta0, model.beta0,
                                    float(path.rho), *law.compiled_args())


def volterra_quenched(kernel: KernelTable, model: AnnealedModel, path: EnvPath, beta: float, T: float,
                      step: float | None = None, extrapolate: bool = True) -> QuenchedSolution:
    """Constrained quenched partition on ``[0, t]`` for all nodes ``t <= T``.

    The sweep runs at ``step`` and at half of it; with ``extrapolate`` the
    two are combined by Richardson extrapolation.  The error estimate is a
    third of their difference at ``T``.
    """
    step = model.step if step is None else step
    if T > path.T + 1e-12:
        raise ValueError("horizon beyond the environment path")
    n = max(1, int(round(T / step)))
    h = T / n
    t_f, y_f, g_f = quenched_nodes(path, T, 2 * n)
    coarse = (g_f < 0) | (g_f % 2 == 0)
    times, levels = t_f[coarse], y_f[coarse]
    zeta = _sweep(kernel, model, path, beta, times, levels, g_f[coarse], 0.5 * h)
    z_f = _sweep(kernel, model, path, beta, t_f, y_f, g_f, 0.5 * h)
    free = 1.0 + float(np.trapezoid(zeta, times))
    free_f = 1.0 + float(np.trapezoid(z_f, t_f))
    z_on = z_f[coarse]
    err = abs(z_on[-1] - zeta[-1]) / 3.0
    if extrapolate:
        zeta = (4.0 * z_on - zeta) / 3.0
        free = (4.0 * free_f - free) / 3.0
    else:
        gaps = np.diff(np.concatenate([[0.0], path.theta[path.theta < T], [T]]))
        if gaps.size > 1 and h > 0.5 * gaps.min():
            warnings.warn(f"step {h:.3g} coarser than half the smallest jump gap {gaps.min():.3g}; "
                          f"discretization bias about {err:.3g}", RuntimeWarning, stacklevel=2)
    return QuenchedSolution(times, levels, zeta, free, h, err)


def normalized_volterra(kernel: KernelTable, model: AnnealedModel, path: EnvPath, beta: float, T: float,
                        step: float | None = None) -> float:
    """``Z^{Y,c}_{beta,T} / z^c_{beta,T}`` from the Volterra engine."""
    sol = volterra_quenched(kernel, model, path, beta, T, step)
    return float(sol.zeta[-1] / annealed_partition(model, beta, T, step))


# ---------------------------------------------------------------------------
# renewal bridges


def _fraction_grid(n: int = 512) -> np.ndarray:
    """Points in ``(0, 1)`` refined geometrically towards both ends."""
    half = np.geomspace(1e-7, 0.5, n // 2)
    return np.unique(np.concatenate([half, 1.0 - half[::-1]]))


class RenewalBridgeSampler:
    """Sequential sampler of ``Q_beta( . | T in tau)``.

    From remaining length ``r`` the next increment has density
    ``K_beta(x) u_beta(r - x) / u_beta(r)`` on ``(0, r)`` and an atom at ``r``
    of mass ``K_beta(r) / u_beta(r)``.  The density is tabulated on
    ``x = v r`` for a fixed fraction grid ``v``; the atom probability is
    taken relative to the discrete total so each step is a proper law.
    """

    def __init__(self, model: AnnealedModel, beta: float, T: float, step: float | None = None, n_fraction: int = 512):
        if beta < model.beta0:
            raise ValueError("bridge sampling needs beta >= beta0")
        self.model = model
        self.beta = float(beta)
        self.T = float(T)
        self.F = free_energy(model, beta)
        step = min(model.step, 0.05) if step is None else step
        self.curve = renewal_density(model, T, step, beta)
        self.v = _fraction_grid(n_fraction)
        self._law = lattice_law(model.kernel)

    def k_beta(self, x: np.ndarray) -> np.ndarray:
        return self.beta * np.exp(-self.F * x) * self._law.p0(np.maximum(x, 1e-7))

    def u_beta(self, r: np.ndarray) -> np.ndarray:
        return np.interp(r, self.curve.t, self.curve.u)

    def sample(self, rng: np.random.Generator, n: int) -> list[RenewalTrajectory]:
        pos = [[0.0] for _ in range(n)]
        s = np.zeros(n)
        active = np.arange(n)
        v = self.v
        while active.size:
            r = self.T - s[active]
            x = r[:, None] * v[None, :]
            dens = self.k_beta(x) * self.u_beta(r[:, None] - x)
            cells = 0.5 * (dens[:, 1:] + dens[:, :-1]) * np.diff(x, axis=1)
            cont = np.cumsum(cells, axis=1)
            atom = self.k_beta(r)
            total = cont[:, -1] + atom
            draw = rng.random(active.size) * total
            hit_end = draw >= cont[:, -1]
            nxt = np.empty(active.size)
            nxt[hit_end] = r[hit_end]
            inner = np.flatnonzero(~hit_end)
            if inner.size:
                c = cont[inner]
                k = np.array([np.searchsorted(c[i], draw[inner[i]], side="right") for i in range(inner.size)])
                prev = np.where(k > 0, c[np.arange(inner.size), np.maximum(k - 1, 0)], 0.0)
                width = cells[inner, k]
                frac = np.where(width > 0, (draw[inner] - prev) / np.where(width > 0, width, 1.0), 0.5)
                lo = x[inner, k]
                hi = x[inner, k + 1]
                nxt[inner] = lo + np.clip(frac, 0.0, 1.0) * (hi - lo)
            s_new = s[active] + nxt
            s_new[hit_end] = self.T
            for i, idx in enumerate(active):
                if s_new[i] > pos[idx][-1]:
                    pos[idx].append(float(s_new[i]) if not hit_end[i] else self.T)
            s[active] = s_new
            active = active[~hit_end]
        return [RenewalTrajectory(np.array(p), self.beta, True, self.T) for p in pos]


def renewal_bridge_sampler(model: AnnealedModel, beta: float, T: float, rng: np.random.Generator,
                           n: int | None = None):
    """One trajectory (``n=None``) or a list of ``n`` trajectories under ``Q_{beta,T}``."""
    sampler = RenewalBridgeSampler(model, beta, T)
    out = sampler.sample(rng, 1 if n is None else n)
    return out[0] if n is None else out


def weight_products(kernel: KernelTable, trajectories, path: EnvPath, rho: float | None = None) -> np.ndarray:
    """``prod_i w(tau_{i-1}, tau_i, Y)`` for each trajectory."""
    rho = path.rho if rho is None else rho
    law = lattice_law(kernel)
    pts = [np.asarray(tr.points if isinstance(tr, RenewalTrajectory) else tr) for tr in trajectories]
    lengths = np.array([p.size - 1 for p in pts])
    a = np.concatenate([p[:-1] for p in pts])
    b = np.concatenate([p[1:] for p in pts])
    d = path.y_at(b) - path.y_at(a)
    lag = b - a
    logw = np.log(law.prob((1.0 - rho) * lag, d)) - np.log(law.p0(lag))
    owner = np.repeat(np.arange(len(pts)), lengths)
    return np.exp(np.bincount(owner, weights=logw, minlength=len(pts)))


def mc_normalized(kernel: KernelTable, model: AnnealedModel, path: EnvPath, beta: float, T: float, n_samples: int,
                  rng: np.random.Generator, sampler: RenewalBridgeSampler | None = None) -> PartitionResult:
    """Average of weight products over renewal bridges: an estimate of ``Z^{Y,c}/z^c``."""
    if path.rho == 0:
        return PartitionResult.of(1.0, "normalized", "mc", stderr=0.0)
    sampler = RenewalBridgeSampler(model, beta, T) if sampler is None else sampler
    trajectories = sampler.sample(rng, n_samples)
    w = weight_products(kernel, trajectories, path)
    mean, err = mean_stderr(w)
    ess = w.sum() ** 2 / np.sum(w * w) if np.any(w > 0) else 0.0
    if ess < 0.01 * n_samples:
        warnings.warn(f"effective sample size {ess:.1f} below 1% of {n_samples}", RuntimeWarning, stacklevel=2)
    return PartitionResult.of(mean, "normalized", "mc", stderr=err)
