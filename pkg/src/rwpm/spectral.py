"""Lattice transition probabilities of the rate-one walk.

Two engines share the characteristic exponent ``h`` of the kernel:

* :class:`SpectralGrid` integrates over ``theta`` with 16-point Gauss-Legendre
  rules on dyadic panels ``[pi 2^-(k+1), pi 2^-k]``.  On each panel ``h`` is
  analytic, so return probabilities, resolvents and Laplace transforms
  converge to near machine precision even where ``h ~ c theta^gamma``.
* :class:`LatticeLaw` gives ``P(W_t = x)`` at arbitrary ``(t, x)`` from FFTs of
  the exactly wrapped kernel, which is the exact law of ``W_t mod N``; a
  first-order alias correction recovers ``P(W_t = x)`` for ``|x| <= N/4``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.interpolate import CubicSpline

from . import _compiled
from .kernel import KernelTable, char_exponent, composite_gauss, raw_tail_integral

#: Smallest panel edge; below it ``h`` is treated as a pure power.
THETA_FLOOR = 1e-40

QUAD_TOL = 1e-10


# Geometric panels on (0, 1] for the floor piece, where the integrand may be
# singular at 0.
_FLOOR_W, _FLOOR_WT = composite_gauss(np.concatenate([[0.0], 2.0 ** -np.arange(100, -1, -1.0)]))


class QuadratureError(RuntimeError):
    """Quadrature failed to reach the requested tolerance."""


@dataclass(frozen=True, eq=False)
class SpectralGrid:
    """Gauss-Legendre nodes on dyadic panels of ``(0, pi]`` with ``h`` at the nodes."""

    kernel: KernelTable
    edges: np.ndarray
    theta: np.ndarray
    weight: np.ndarray
    h: np.ndarray
    floor: float
    h_floor: float
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def gamma(self) -> float:
        return self.kernel.gamma

    def _floor_p0(self, t: np.ndarray) -> np.ndarray:
        # int_0^floor exp(-t h_f (theta/floor)^gamma) dtheta
        g = self.gamma
        b = t * self.h_floor
        out = np.full(b.shape, self.floor)
        pos = b > 0
        bp = b[pos]
        out[pos] = self.floor * special.gamma(1 / g) * special.gammainc(1 / g, bp) / (g * bp ** (1 / g))
        return out

    def p0(self, t):
        """``P(W_t = 0)`` for ``t >= 0``."""
        scalar = np.ndim(t) == 0
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < 0):
            raise ValueError("t must be non-negative")
        out = np.empty(t.shape)
        flat_t, flat_o = t.ravel(), out.ravel()
        for start in range(0, flat_t.size, 256):
            chunk = flat_t[start : start + 256]
            flat_o[start : start + 256] = np.exp(-np.outer(chunk, self.h)) @ self.weight
        out = (flat_o.reshape(t.shape) + self._floor_p0(t)) / math.pi
        return float(out[0]) if scalar else out

    def integrate_fn(self, fn) -> np.ndarray:
        """``(1/pi) int_0^pi fn(h(theta)) dtheta`` for a vectorized ``fn``.

        ``fn`` receives ``h`` as a 1-D array and may broadcast it against
        leading axes; the floor panel uses ``h ~ h_floor (theta/floor)^gamma``.
        """
        g = self.gamma
        body = np.sum(self.weight * fn(self.h), axis=-1)
        w, wt = _FLOOR_W, _FLOOR_WT
        floor = self.floor * np.sum(wt * w ** (1.0 / g - 1.0) / g * fn(self.h_floor * w), axis=-1)
        return (body + floor) / math.pi

    def resolvent(self, lam, power: int = 1):
        """``(1/pi) int_0^pi (lam + h)^-power dtheta`` for real or complex ``lam``.

        Infinite when ``lam = 0`` and ``power * gamma >= 1``.
        """
        lam_arr = np.asarray(lam)
        flat = lam_arr.reshape(-1, 1)
        val = self.integrate_fn(lambda h: (flat + h) ** (-power))
        if power * self.gamma >= 1:
            val = np.where(flat[:, 0] == 0, np.inf, val)
        if not np.iscomplexobj(lam_arr):
            val = val.real
        val = val.reshape(lam_arr.shape)
        return val[()] if val.ndim == 0 else val

    def resolvent_difference(self, a, b):
        """``R(a) - R(b) = (1/pi) int (b - a) / ((a + h)(b + h))`` without cancellation."""
        a_arr, b_arr = np.broadcast_arrays(np.asarray(a), np.asarray(b))
        fa, fb = a_arr.reshape(-1, 1), b_arr.reshape(-1, 1)
        val = self.integrate_fn(lambda h: (fb - fa) / ((fa + h) * (fb + h)))
        if not (np.iscomplexobj(a_arr) or np.iscomplexobj(b_arr)):
            val = val.real
        val = val.reshape(a_arr.shape)
        return val[()] if val.ndim == 0 else val

    def resolvent_gap(self, lam):
        """``R(0) - R(lam)``."""
        return self.resolvent_difference(0.0, lam)

    def scale(self, t: float) -> float:
        """Spatial scale ``1/theta_t`` where ``t h(theta_t) = 1``."""
        if t <= 0:
            return 1.0
        target = 1.0 / t
        if target >= self.h.max():
            return 1.0
        order = np.argsort(self.theta)
        th, hh = self.theta[order], self.h[order]
        lt = np.interp(math.log(target), np.log(hh), np.log(th))
        return float(math.exp(-lt))


def spectral_grid(kernel: KernelTable) -> SpectralGrid:
    """Build (or fetch the cached) node set for ``kernel``."""
    grid = kernel._cache.get("spectral_grid")
    if grid is not None:
        return grid
    n_panels = int(math.ceil(math.log2(math.pi / THETA_FLOOR)))
    edges = math.pi * 2.0 ** -np.arange(n_panels + 1, dtype=float)
    edges = edges[::-1]
    theta, weight = composite_gauss(edges)
    h = char_exponent(kernel, theta)
    floor = float(edges[0])
    grid = SpectralGrid(kernel, edges, theta, weight, h, floor, float(char_exponent(kernel, floor)))
    kernel._cache["spectral_grid"] = grid
    return grid


def _panel_nodes(grid: SpectralGrid, k: int, x_range: int, refine: int):
    """Nodes on panel ``k`` fine enough for ``cos(theta x)``, ``x <= x_range``."""
    key = ("panel", k, x_range, refine)
    hit = grid._cache.get(key)
    if hit is not None:
        return hit
    lo, hi = grid.edges[k], grid.edges[k + 1]
    m = max(1, int(math.ceil((hi - lo) * x_range / math.pi))) * refine
    if m == 1:
        sl = slice(16 * k, 16 * (k + 1))
        out = (grid.theta[sl], grid.weight[sl], grid.h[sl])
    else:
        th, w = composite_gauss(np.linspace(lo, hi, m + 1))
        out = (th, w, char_exponent(grid.kernel, th))
    grid._cache[key] = out
    return out


def _oscillatory_nodes(grid: SpectralGrid, x_range: int, refine: int = 1, theta_max: float = math.pi):
    """Nodes resolving ``cos(theta x)`` for ``x <= x_range`` on ``(floor, theta_max]``."""
    n_panels = int(np.searchsorted(grid.edges, theta_max, side="left"))
    n_panels = min(max(n_panels, 1), grid.edges.size - 1)
    pieces = [_panel_nodes(grid, k, x_range, refine) for k in range(n_panels)]
    return tuple(np.concatenate([pc[i] for pc in pieces]) for i in range(3))


@dataclass(frozen=True)
class TransitionTable:
    """``probs[x] = P(W_t = x)`` for ``x = 0..x_range``."""

    t: float
    probs: np.ndarray
    x_range: int
    error_estimate: float = 0.0

    @property
    def accounted_mass(self) -> float:
        return float(self.probs[0] + 2.0 * self.probs[1:].sum())


def _quadrature_probs(grid: SpectralGrid, t: float, x_range: int, refine: int = 1) -> np.ndarray:
    # drop panels where exp(-t h) underflows
    alive = grid.theta[t * grid.h <= 745.0]
    theta_max = float(alive.max()) if alive.size else grid.floor
    theta, w, h = _oscillatory_nodes(grid, max(x_range, 1), refine, theta_max)
    env = w * np.exp(-t * h)
    probs = np.empty(x_range + 1)
    for start in range(0, x_range + 1, 256):
        x = np.arange(start, min(start + 256, x_range + 1), dtype=float)
        probs[start : start + x.size] = np.cos(np.outer(x, theta)) @ env
    probs = probs + grid._floor_p0(np.array([t]))[0]
    return probs / math.pi


def transition_probs(kernel: KernelTable, t: float, x_range: int, check: bool = False) -> TransitionTable:
    """``P(W_t = x)`` for ``0 <= x <= x_range``.

    Uses the Gauss-Legendre node set for ``x_range <= 512`` and an FFT of the
    wrapped kernel otherwise.  With ``check=True`` the quadrature is repeated
    on panels split in two and :class:`QuadratureError` is raised when the
    two differ by more than ``QUAD_TOL``.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    x_range = int(x_range)
    if t == 0:
        probs = np.zeros(x_range + 1)
        probs[0] = 1.0
        return TransitionTable(0.0, probs, x_range)
    err = 0.0
    if x_range <= 512:
        grid = spectral_grid(kernel)
        probs = _quadrature_probs(grid, t, x_range)
        if check:
            fine = _quadrature_probs(grid, t, x_range, refine=2)
            err = float(np.max(np.abs(fine - probs)))
            if err > QUAD_TOL:
                raise QuadratureError(f"transition_probs(t={t}) achieved error {err:.2e} > {QUAD_TOL:.0e}")
    else:
        probs = lattice_law(kernel).exact_table(t, x_range)
    # Rounding can produce ulp-level increases; the law itself is unimodal.
    if np.any(np.diff(probs) > 1e-13):
        raise QuadratureError(f"unimodality violated at t={t} beyond rounding")
    probs = np.minimum.accumulate(np.maximum(probs, 0.0))
    return TransitionTable(float(t), probs, x_range, err)


@dataclass(frozen=True)
class ReturnProbabilityCurve:
    """Return probabilities ``p0(t)`` on a time grid.

    ``K`` is filled once the critical point is known.  Values off the grid
    are evaluated exactly through :attr:`spectral`.
    """

    grid: np.ndarray
    p0: np.ndarray
    fitted_exponent: float
    spectral: SpectralGrid
    K: np.ndarray | None = None

    def p0_at(self, t):
        return self.spectral.p0(t)


def hybrid_grid(t_max: float = 1e4, linear_step: float = 0.05, per_decade: int = 40) -> np.ndarray:
    """Linear up to ``t = 10``, geometric beyond."""
    lin = np.arange(0.0, 10.0, linear_step)
    if t_max <= 10.0:
        return np.append(lin[lin < t_max], t_max)
    n_geo = int(math.ceil(per_decade * math.log10(t_max / 10.0)))
    geo = np.geomspace(10.0, t_max, n_geo + 1)
    return np.concatenate([lin, geo])


def fit_power_exponent(t: np.ndarray, values: np.ndarray) -> float:
    """Least-squares slope of ``log values`` against ``log t`` (sign flipped)."""
    slope = np.polyfit(np.log(t), np.log(values), 1)[0]
    return float(-slope)


def return_prob_curve(kernel: KernelTable, grid=None) -> ReturnProbabilityCurve:
    """Tabulate ``p0`` and fit its decay exponent on the last decade of the grid."""
    grid = hybrid_grid() if grid is None else np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ValueError("grid must be increasing and non-negative")
    sg = spectral_grid(kernel)
    p0 = sg.p0(grid)
    last = grid >= grid[-1] / 10.0
    if np.count_nonzero(last) < 3 or grid[-1] <= 0:
        exponent = math.nan
    else:
        exponent = fit_power_exponent(grid[last], p0[last])
    return ReturnProbabilityCurve(grid, p0, exponent, sg)


# ---------------------------------------------------------------------------
# FFT tables


def _wrapped_alias(kernel: KernelTable, n_fft: int, x: np.ndarray) -> np.ndarray:
    """``sum_{m != 0} J(x + m N)`` for ``0 <= x <= N/2``."""
    spec = kernel.spec
    s = spec.exponent
    z = kernel.normalization
    xf = x.astype(float)
    if spec.slow_var == "constant":
        nf = float(n_fft)
        return nf ** (-s) * (special.zeta(s, 1.0 + (1.0 + xf) / nf) + special.zeta(s, 1.0 + (1.0 - xf) / nf)) / z
    out = np.zeros(xf.shape)
    for m in range(1, 9):
        out += spec.raw(m * n_fft + xf) + spec.raw(m * n_fft - xf)
    out += (raw_tail_integral(spec, 8.5 * n_fft + xf) + raw_tail_integral(spec, 8.5 * n_fft - xf)) / n_fft
    return out / z


class LatticeLaw:
    """``P(W_t = x)`` at arbitrary real ``t`` and integer ``x``.

    Tables are computed lazily on a log-uniform grid of times (``per_decade``
    per decade from ``tau_min``) and interpolated with four-point Lagrange
    polynomials in ``log t`` and, for ``|x| > dense``, in ``log |x|``.
    ``x = 0`` is served by a cubic spline of the exact return probability.

    Each table combines two alias-corrected transforms of sizes ``N/2`` and
    ``N >= 256 * scale`` by Richardson extrapolation, the aliasing error
    decaying like ``N^-(1 + 2 gamma)``.  When the walk's scale outgrows
    :attr:`max_fft` the dense range comes from direct quadrature instead and
    ``degraded_from`` records the first such time.  Beyond ``N/8`` the
    one-big-jump form ``t J(x)`` is used with a correction factor matched at
    ``N/8``.
    """

    max_fft = 2**22

    def __init__(self, kernel: KernelTable, per_decade: int = 64, tau_min: float = 1e-7,
                 tau_max: float = 1e6, dense: int = 2048, far_per_decade: int = 64):
        self.kernel = kernel
        self.grid = spectral_grid(kernel)
        self.per_decade = per_decade
        self.tau_min = tau_min
        self.tau_max = tau_max
        self.n_tau = int(math.ceil(per_decade * math.log10(tau_max / tau_min))) + 1
        self.dense = dense
        self.far_step = math.log(10.0) / far_per_decade
        self.n_far = int(math.ceil(math.log(2.0**63 / dense) / self.far_step)) + 1
        self.far_x = dense * np.exp(self.far_step * np.arange(self.n_far))
        self._dense = np.full((self.n_tau, dense + 1), np.nan)
        self._far = np.full((self.n_tau, self.n_far), np.nan)
        self._ready = np.zeros(self.n_tau, dtype=bool)
        self._wrapped: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.degraded_from: float | None = None
        log_tau = np.linspace(math.log(tau_min), math.log(tau_max), int(400 * math.log10(tau_max / tau_min)) + 1)
        self._log_p0 = CubicSpline(log_tau, np.log(self.grid.p0(np.exp(log_tau))))

    def tau_at(self, i):
        return self.tau_min * 10.0 ** (np.asarray(i) / self.per_decade)

    def p0(self, tau) -> np.ndarray:
        """``P(W_tau = 0)`` from the spline (``tau_min <= tau <= tau_max``)."""
        return np.exp(self._log_p0(np.log(tau)))

    def _fft_size(self, tau: float, x_needed: int = 0) -> int:
        want = max(2.0**17, 256.0 * self.grid.scale(tau), 4.0 * (x_needed + 1))
        return 1 << int(math.ceil(math.log2(want)))

    def _wrapped_exponent(self, n_fft: int):
        hit = self._wrapped.get(n_fft)
        if hit is not None:
            return hit
        half = n_fft // 2
        x = np.arange(half + 1)
        alias = _wrapped_alias(self.kernel, n_fft, x)
        wrapped = self.kernel.j(x) + alias
        circ = np.empty(n_fft)
        circ[: half + 1] = wrapped
        circ[half + 1 :] = wrapped[1:half][::-1]
        spectrum = np.fft.rfft(circ).real
        h = np.maximum(circ.sum() - spectrum, 0.0)
        h[0] = 0.0
        self._wrapped[n_fft] = (h, alias)
        return h, alias

    def _fft_probs(self, tau: float, n_fft: int) -> np.ndarray:
        """Alias-corrected ``P(W_tau = x)`` for ``0 <= x <= N/4``."""
        h, alias = self._wrapped_exponent(n_fft)
        quarter = n_fft // 4
        probs = np.fft.irfft(np.exp(-tau * h), n=n_fft)[: quarter + 1]
        return probs - tau * alias[: quarter + 1]

    def _probs(self, tau: float, x_range: int) -> np.ndarray:
        """``P(W_tau = x)`` for ``0 <= x <= max(x_range, N/8)``."""
        n_fft = self._fft_size(tau, 2 * x_range)
        power = 2.0 ** (1.0 + 2.0 * self.kernel.gamma)
        degraded = n_fft > self.max_fft
        n_fft = min(n_fft, self.max_fft)
        fine = self._fft_probs(tau, n_fft)
        coarse = self._fft_probs(tau, n_fft // 2)
        probs = (power * fine[: coarse.size] - coarse) / (power - 1.0)
        if not degraded:
            return probs
        if self.degraded_from is None or tau < self.degraded_from:
            self.degraded_from = tau
            warnings.warn(f"walk scale at t={tau:.3g} exceeds FFT capacity; dense range from quadrature",
                          RuntimeWarning, stacklevel=4)
        n_exact = max(self.dense, x_range)
        exact = _quadrature_probs(self.grid, tau, n_exact)
        # the alias error is nearly constant for x << N
        probs[n_exact + 1 :] += exact[-1] - probs[n_exact]
        probs[: n_exact + 1] = exact
        return probs

    def exact_table(self, tau: float, x_range: int) -> np.ndarray:
        """``P(W_tau = x)`` for ``0 <= x <= x_range`` without time interpolation."""
        probs = self._probs(tau, x_range)
        if probs.size < x_range + 1:
            raise ValueError(f"x_range={x_range} too large for FFT capacity")
        return probs[: x_range + 1]

    def _build(self, i: int) -> None:
        tau = float(self.tau_at(i))
        probs = np.maximum(self._probs(tau, 0), 1e-300)
        probs[0] = self.p0(tau)
        quarter = probs.size - 1
        self._dense[i] = np.log(probs[: self.dense + 1])
        logp = np.log(probs)
        far = np.empty(self.n_far)
        inside = self.far_x <= quarter
        xi = self.far_x[inside]
        lo = np.floor(xi).astype(np.int64)
        frac = xi - lo
        hi = np.minimum(lo + 1, quarter)
        far[inside] = (1 - frac) * logp[lo] + frac * logp[hi]
        one_jump_b = tau * float(self.kernel.j(quarter))
        ratio_b = probs[quarter] / one_jump_b
        xo = self.far_x[~inside]
        ratio = 1.0 + (ratio_b - 1.0) * (quarter / xo) ** self.kernel.gamma
        far[~inside] = np.log(tau * self.kernel.j_continuous(xo)) + np.log(np.maximum(ratio, 1e-300))
        self._far[i] = far
        self._ready[i] = True

    def _ensure(self, idx: np.ndarray) -> None:
        for i in np.unique(idx):
            if not self._ready[i]:
                self._build(int(i))

    def ensure_range(self, tau_hi: float) -> None:
        """Build every table needed for lookups at times up to ``tau_hi``."""
        u = math.log10(max(tau_hi, self.tau_min) / self.tau_min) * self.per_decade
        top = min(int(math.floor(u)) + 3, self.n_tau - 1)
        self._ensure(np.arange(top + 1))

    def compiled_args(self) -> tuple:
        """Table arguments for the compiled lookups (see :mod:`rwpm._compiled`)."""
        spline = self._log_p0
        return (self._dense, self._far, self.tau_min, float(self.per_decade), self.dense, self.far_step,
                float(spline.x[0]), float(spline.x[1] - spline.x[0]), spline.c, float(self.kernel.j_values[0]))

    def prob(self, tau, x) -> np.ndarray:
        """``P(W_tau = x)``, vectorized over broadcast ``tau`` and ``x``."""
        tau, x = np.broadcast_arrays(np.asarray(tau, dtype=float), np.asarray(x))
        shape = tau.shape
        tau = np.ascontiguousarray(tau.ravel())
        ax = np.ascontiguousarray(np.abs(x.ravel()).astype(np.int64))
        if np.any(tau > self.tau_max):
            raise ValueError(f"time {tau.max():.3g} beyond table range {self.tau_max:.3g}")
        moved = (ax > 0) & (tau > 0)
        if np.any(moved):
            u = np.log10(np.maximum(tau[moved], self.tau_min) / self.tau_min) * self.per_decade
            base = np.clip(np.floor(u).astype(np.int64) - 1, 0, self.n_tau - 4)
            self._ensure(np.unique(base)[:, None] + np.arange(4))
        out = _compiled.law_prob(tau, ax, *self.compiled_args())
        return out.reshape(shape)


def lattice_law(kernel: KernelTable) -> LatticeLaw:
    law = kernel._cache.get("lattice_law")
    if law is None:
        law = LatticeLaw(kernel)
        kernel._cache["lattice_law"] = law
    return law
