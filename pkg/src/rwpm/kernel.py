"""Symmetric heavy-tailed jump kernel and its enriched Poisson marginals.

The kernel is

    J(x) = phi(|x|) (1 + |x|)^-(1 + gamma) / Z,

with ``phi`` either constant or ``log(e + x)**kappa``.  Values for
``|x| <= x_max`` are tabulated; everything beyond is handled analytically
(Hurwitz zeta for constant ``phi``, Euler-Maclaurin otherwise), so ``J`` and
its tail sums are available at any integer.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, interpolate, special

#: Amplitudes are capped here so that sums of a few hundred jumps fit in int64.
AMPLITUDE_CAP = 2**56

#: Radius of the exact head sum used by :func:`char_exponent`.
HEAD_RADIUS = 2**16

_SLOW_VARS = ("constant", "log_power")


@dataclass(frozen=True)
class KernelSpec:
    """Parameters of the jump kernel.

    ``normalization`` is filled in by :func:`build_kernel`.
    """

    gamma: float
    slow_var: str = "constant"
    kappa: float = 0.0
    x_max: int = 2**20
    tail_tol: float = 1e-8
    normalization: float | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.slow_var not in _SLOW_VARS:
            raise ValueError(f"slow_var must be one of {_SLOW_VARS}, got {self.slow_var!r}")
        if self.slow_var == "log_power" and not math.isfinite(self.kappa):
            raise ValueError("kappa must be finite")
        if int(self.x_max) < 2**10:
            raise ValueError(f"x_max must be at least 2**10, got {self.x_max}")

    @property
    def exponent(self) -> float:
        return 1.0 + self.gamma

    @property
    def key(self) -> tuple:
        return (self.gamma, self.slow_var, self.kappa if self.slow_var == "log_power" else 0.0)

    def phi(self, x):
        """Slowly varying factor at real ``x >= 0``."""
        x = np.asarray(x, dtype=float)
        if self.slow_var == "constant":
            return np.ones_like(x)
        return np.log(math.e + x) ** self.kappa

    def raw(self, x):
        """Unnormalized kernel at real ``x >= 0``."""
        x = np.asarray(x, dtype=float)
        return self.phi(x) * (1.0 + x) ** (-self.exponent)

    def raw_derivative(self, x):
        x = np.asarray(x, dtype=float)
        slope = -self.exponent / (1.0 + x)
        if self.slow_var == "log_power":
            slope = slope + self.kappa / ((math.e + x) * np.log(math.e + x))
        return self.raw(x) * slope


@functools.lru_cache(maxsize=16)
def _log_tail_integral_spline(gamma: float, kappa: float):
    """Spline of log int_a^inf raw(u) du against log a for a log-power kernel."""
    spec = KernelSpec(gamma, "log_power", kappa)
    s = spec.exponent

    def integrand(v):
        # u = e^v - 1, du = e^v dv
        return (v + np.log1p((math.e - 1.0) * np.exp(-v))) ** kappa * np.exp((1.0 - s) * v)

    log_a = np.arange(8 * 6, 8 * 260 + 1) / 8.0 * math.log(2.0)
    values = []
    for la in log_a:
        v0 = math.log1p(math.exp(la))
        scale = integrand(v0) / (s - 1.0)
        val, _ = integrate.quad(integrand, v0, np.inf, epsabs=1e-15 * scale, epsrel=1e-13, limit=200)
        values.append(val)
    return interpolate.CubicSpline(log_a, np.log(values))


def raw_tail_integral(spec: KernelSpec, a):
    """``int_a^inf raw(u) du`` for ``a >= 64``."""
    a = np.asarray(a, dtype=float)
    s = spec.exponent
    if spec.slow_var == "constant":
        return (1.0 + a) ** (1.0 - s) / (s - 1.0)
    spline = _log_tail_integral_spline(spec.gamma, spec.kappa)
    return np.exp(spline(np.log(a)))


def raw_tail_sum(spec: KernelSpec, n):
    """``sum_{x > n} raw(x)`` for integers ``n >= 1023`` (float input allowed)."""
    n = np.asarray(n, dtype=float)
    if spec.slow_var == "constant":
        return special.zeta(spec.exponent, n + 2.0)
    a = n + 1.0
    # Euler-Maclaurin from the first omitted term.
    return raw_tail_integral(spec, a) + 0.5 * spec.raw(a) - spec.raw_derivative(a) / 12.0


def _euler_maclaurin_error(spec: KernelSpec, n: int) -> float:
    if spec.slow_var == "constant":
        return 0.0
    s = spec.exponent
    a = n + 1.0
    return float(spec.raw(a) * s * (s + 1) * (s + 2) / (720.0 * a**3))


@dataclass(frozen=True, eq=False)
class KernelTable:
    """Tabulated kernel with enriched marginals and tail sums.

    Arrays are indexed by ``0..x_max``:

    * ``j_values[x]`` is ``J(x)``;
    * ``mu_bar[k]`` is ``(2k+1)(J(k) - J(k+1))``;
    * ``tail_mubar[n]`` is ``sum_{l >= n} mu_bar(l)``;
    * ``tail_j[n]`` is ``sum_{x > n} J(x)``.
    """

    spec: KernelSpec
    j_values: np.ndarray
    mu_bar: np.ndarray
    tail_mubar: np.ndarray
    tail_j: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def gamma(self) -> float:
        return self.spec.gamma

    @property
    def x_max(self) -> int:
        return self.spec.x_max

    @property
    def normalization(self) -> float:
        return float(self.spec.normalization)

    def _piecewise(self, n, table, beyond):
        n = np.asarray(n)
        flat = np.atleast_1d(n).astype(np.int64)
        out = np.empty(flat.shape)
        inside = flat <= self.x_max
        out[inside] = table[flat[inside]]
        if not np.all(inside):
            out[~inside] = beyond(flat[~inside].astype(float))
        return float(out[0]) if n.ndim == 0 else out.reshape(n.shape)

    def j(self, x):
        """``J(x)`` at arbitrary integers (symmetric)."""
        return self._piecewise(np.abs(np.asarray(x)), self.j_values, self.j_continuous)

    def j_continuous(self, u):
        """Smooth extension of ``J`` to real ``u >= 0``."""
        return self.spec.raw(u) / self.normalization

    def tail_j_at(self, n):
        """``sum_{x > n} J(x)`` for integers ``n >= 0``."""
        return self._piecewise(n, self.tail_j, lambda m: raw_tail_sum(self.spec, m) / self.normalization)

    def tail_mubar_at(self, n):
        """``sum_{l >= n} mu_bar(l)`` for integers ``n >= 0``."""

        def beyond(m):
            return (2.0 * m + 1.0) * self.j_continuous(m) + 2.0 * raw_tail_sum(self.spec, m) / self.normalization

        return self._piecewise(n, self.tail_mubar, beyond)

    def mubar_at(self, k):
        k = np.asarray(k)
        return (2.0 * k.astype(float) + 1.0) * (self.j(k) - self.j(k + 1))


def build_kernel(spec: KernelSpec) -> KernelTable:
    """Tabulate ``J`` and its enriched marginals.

    Raises ``ValueError`` if the kernel is not non-increasing or if the
    analytic tail cannot meet ``spec.tail_tol``.
    """
    x_max = int(spec.x_max)
    err = _euler_maclaurin_error(spec, x_max)
    x = np.arange(x_max + 1, dtype=float)
    raw = spec.raw(x)
    raw_beyond = float(raw_tail_sum(spec, x_max))
    total = raw[0] + 2.0 * (math.fsum(raw[1:]) + raw_beyond)
    if err > spec.tail_tol * total:
        raise ValueError(f"x_max={x_max} too small: tail error {err:.2e} exceeds tolerance")
    if np.any(np.diff(raw) > 0.0):
        bad = int(np.argmax(np.diff(raw) > 0.0))
        raise ValueError(f"kernel is not non-increasing (fails at x={bad}); adjust kappa")

    j_values = raw / total
    j_next = np.append(j_values[1:], spec.raw(x_max + 1.0) / total)
    mu_bar = (2.0 * x + 1.0) * (j_values - j_next)

    beyond_j = raw_beyond / total
    rev = np.cumsum(j_values[:0:-1].astype(np.longdouble))[::-1]
    tail_j = np.empty(x_max + 1)
    tail_j[:-1] = (rev + np.longdouble(beyond_j)).astype(float)
    tail_j[-1] = beyond_j

    # Mass of mu_bar beyond the table, from the summation-by-parts identity.
    n1 = x_max + 1
    beyond_mubar = (2.0 * n1 + 1.0) * j_next[-1] + 2.0 * float(raw_tail_sum(spec, n1)) / total
    rev_mu = np.cumsum(mu_bar[::-1].astype(np.longdouble))[::-1]
    tail_mubar = (rev_mu + np.longdouble(beyond_mubar)).astype(float)

    for arr in (j_values, mu_bar, tail_mubar, tail_j):
        arr.setflags(write=False)
    return KernelTable(replace(spec, normalization=float(total)), j_values, mu_bar, tail_mubar, tail_j)


def _stable_cosine_constant(gamma: float) -> float:
    """``int_0^inf u^-(1+gamma) (1 - cos u) du``."""
    return special.gamma(1.0 - gamma) * math.cos(math.pi * gamma / 2.0) / gamma


_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def composite_gauss(edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of 16-point Gauss-Legendre on each panel of ``edges``."""
    edges = np.asarray(edges, dtype=float)
    lo, hi = edges[:-1, None], edges[1:, None]
    half = 0.5 * (hi - lo)
    nodes = (lo + half * (1.0 + _GL_X)).ravel()
    weights = (half * _GL_W).ravel()
    return nodes, weights


_ROT_Y, _ROT_W = composite_gauss(np.concatenate([[0.0, 0.25, 0.5], np.arange(1.0, 49.0)]))
_ROT_W = _ROT_W * np.exp(-_ROT_Y)


def _far_integral(table: KernelTable, theta: float, a: float) -> float:
    """``int_a^inf J(u) (1 - cos(theta u)) du`` for the smooth extension of J."""
    spec = table.spec
    z = table.normalization
    lo = theta * a
    total = 0.0
    if lo < 1.0:
        # (1 - cos v) ~ v^2/2 here; integrate in log v to span many decades.
        n_pan = max(1, int(math.ceil(-math.log(lo))))
        w, wt = composite_gauss(np.linspace(math.log(lo), 0.0, n_pan + 1))
        v = np.exp(w)
        total = float(np.sum(wt * spec.raw(v / theta) / theta * 2.0 * np.sin(0.5 * v) ** 2 * v)) / z
        lo = 1.0
    mass = float(raw_tail_integral(spec, lo / theta)) / z
    return total + mass - _cosine_tail(spec, theta, lo) / z


def _cosine_tail(spec: KernelSpec, theta: float, c: float) -> float:
    """``int_c^inf raw(v/theta)/theta cos(v) dv``.

    The contour is rotated to ``v = c + iy``, which turns the oscillatory
    tail into an exponentially damped integral (the integrand is analytic
    for ``Re v > -theta``).
    """
    zeta = (c + 1j * _ROT_Y) / theta
    val = (1.0 + zeta) ** (-spec.exponent) / theta
    if spec.slow_var == "log_power":
        val = val * np.log(math.e + zeta) ** spec.kappa
    return float((1j * np.exp(1j * c) * np.sum(_ROT_W * val)).real)


def _head_sums(table: KernelTable, theta: np.ndarray, radius: int) -> np.ndarray:
    """``sum_{x=1}^{radius} J(x)(1 - cos theta x)``."""
    j = table.j_values[1 : radius + 1]
    x = np.arange(1, radius + 1, dtype=float)
    out = np.empty(theta.shape)
    small = theta * radius <= 0.5
    if np.any(small):
        moments = table._cache.get(("moments", radius))
        if moments is None:
            xs = x / radius
            moments = np.array([math.fsum(j * xs ** (2 * k)) for k in range(1, 12)])
            table._cache[("moments", radius)] = moments
        z = (theta[small] * radius) ** 2
        acc = np.zeros(z.shape)
        for k in range(11, 0, -1):
            sign = 1.0 if k % 2 else -1.0
            acc += sign * moments[k - 1] * z**k / math.factorial(2 * k)
        out[small] = acc
    big = np.flatnonzero(~small)
    for start in range(0, big.size, 64):
        idx = big[start : start + 64]
        s = np.sin(0.5 * np.outer(theta[idx], x))
        out[idx] = 2.0 * (s * s) @ j
    return out


def char_exponent(table: KernelTable, theta) -> np.ndarray | float:
    """Characteristic exponent ``h(theta) = sum_x J(x)(1 - cos theta x)``.

    The sum over ``|x| <= HEAD_RADIUS`` is exact.  Beyond it the lattice sum is
    replaced by the integral of the smooth extension of ``J`` with the
    midpoint aliasing factor ``(theta/2)/sin(theta/2)``; the error is of order
    ``J'(HEAD_RADIUS)``, far below 1e-12.
    """
    scalar = np.ndim(theta) == 0
    theta = np.abs(np.atleast_1d(np.asarray(theta, dtype=float)))
    if np.any(theta > math.pi + 1e-12):
        raise ValueError("theta must lie in [0, pi]")
    radius = min(HEAD_RADIUS, table.x_max)
    head = _head_sums(table, theta, radius)
    a = radius + 0.5
    mass_lattice = float(table.tail_j[radius])
    key = ("far_mass", radius)
    if key not in table._cache:
        table._cache[key] = float(raw_tail_integral(table.spec, a)) / table.normalization
    mass_cont = table._cache[key]
    out = np.empty(theta.shape)
    for i, th in enumerate(theta):
        if th == 0.0:
            out[i] = 0.0
            continue
        alias = 0.5 * th / math.sin(0.5 * th)
        far = _far_integral(table, th, a) * mass_lattice / mass_cont
        # lattice tail of (1 - cos) = mass - alias * (mass - far)
        out[i] = 2.0 * (head[i] + mass_lattice * (1.0 - alias) + alias * far)
    return float(out[0]) if scalar else out


def stable_constant(table: KernelTable) -> float:
    """Leading coefficient ``c`` in ``h(theta) ~ c theta^gamma`` for constant phi."""
    return 2.0 * _stable_cosine_constant(table.gamma) / table.normalization


def _invert_tail(tail_table: np.ndarray, tail_fn, levels: np.ndarray, x_max: int) -> np.ndarray:
    """Largest ``k`` with ``tail(k) >= level``; ``tail`` is decreasing with ``tail(0) = 1``."""
    k = np.searchsorted(-tail_table, -levels, side="right") - 1
    k = k.astype(np.int64)
    beyond = levels < tail_table[-1]
    if np.any(beyond):
        lv = levels[beyond]
        lo = np.full(lv.shape, x_max, dtype=np.int64)
        hi = np.full(lv.shape, AMPLITUDE_CAP, dtype=np.int64)
        capped = tail_fn(hi) >= lv
        while True:
            active = (hi - lo > 1) & ~capped
            if not np.any(active):
                break
            mid = lo + (hi - lo) // 2
            ok = tail_fn(mid) >= lv
            lo = np.where(active & ok, mid, lo)
            hi = np.where(active & ~ok, mid, hi)
        k[beyond] = np.where(capped, AMPLITUDE_CAP, lo)
    return k


def sample_jump_amplitude(table: KernelTable, rng: np.random.Generator, size=None):
    """Draw ``U`` with law ``mu_bar`` (total mass one).

    Inverse-CDF against the tabulated upper tails; beyond ``x_max`` the tail
    ``(2n+1)J(n) + 2 sum_{l>n} J(l)`` is inverted by integer bisection.
    Draws are capped at :data:`AMPLITUDE_CAP`.
    """
    levels = 1.0 - rng.random(size)
    k = _invert_tail(table.tail_mubar, table.tail_mubar_at, np.atleast_1d(levels), table.x_max)
    return int(k[0]) if size is None else k.reshape(np.shape(levels))


def sample_jump_displacement(table: KernelTable, rng: np.random.Generator, size=None):
    """Draw ``X`` with law ``J`` directly (plain construction of the walk)."""
    n = 1 if size is None else int(np.prod(size))
    levels = 1.0 - rng.random(n)
    key = "abs_tail"
    tail = table._cache.get(key)
    if tail is None:
        # P(|X| >= k): 1 at k = 0, then 2 * sum_{x >= k} J(x).
        tail = np.empty(table.x_max + 1)
        tail[0] = 1.0
        tail[1:] = 2.0 * table.tail_j[:-1]
        table._cache[key] = tail

    def tail_fn(k):
        return 2.0 * table.tail_j_at(k - 1)

    mag = _invert_tail(tail, tail_fn, levels, table.x_max)
    sign = np.where(rng.random(n) < 0.5, -1, 1)
    out = mag * sign
    return int(out[0]) if size is None else out.reshape(size)
