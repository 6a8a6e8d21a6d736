"""Annealed (homogeneous) pinning model.

With ``p0(t) = P(W_t = 0)`` the inter-arrival density is ``K = beta0 * p0``
where ``1/beta0 = int_0^inf p0``.  Every Laplace-type integral of ``p0``
reduces to a ``theta`` integral, e.g.
``int_0^inf exp(-lam t) p0(t) dt = (1/pi) int_0^pi dtheta / (lam + h)``,
which :class:`~rwpm.spectral.SpectralGrid` evaluates to near machine
precision.  Renewal densities are computed on grids by a trapezoid Volterra
solver and at large times by fixed-Talbot Laplace inversion.
"""

from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, optimize
from scipy.interpolate import PchipInterpolator

from .kernel import KernelTable
from .spectral import ReturnProbabilityCurve, SpectralGrid, fit_power_exponent, hybrid_grid, return_prob_curve


class ModelViolation(ValueError):
    """Input outside the regime where the model is defined."""


def compute_beta0(curve: ReturnProbabilityCurve) -> float:
    """``1 / int_0^inf p0`` from the tabulated curve.

    Simpson's rule on the linear part of the grid, Simpson in ``log t`` on the
    geometric part, and an analytic power-law tail fitted on the last decade.
    """
    t, p = curve.grid, curve.p0
    if not math.isfinite(curve.fitted_exponent) or curve.fitted_exponent <= 1.0:
        raise ModelViolation(f"return probability decays with exponent {curve.fitted_exponent:.3f} <= 1; walk is recurrent")
    dt = np.diff(t)
    linear = np.isclose(dt, dt[0], rtol=1e-9, atol=0.0)
    n_lin = int(np.argmin(linear)) if not linear.all() else dt.size
    total = integrate.simpson(p[: n_lin + 1], x=t[: n_lin + 1])
    if n_lin < dt.size:
        tg, pg = t[n_lin:], p[n_lin:]
        total += integrate.simpson(pg * tg, x=np.log(tg))
    last = t >= t[-1] / 10.0
    slope = fit_power_exponent(t[last], p[last])
    total += p[-1] * t[-1] / (slope - 1.0)
    return 1.0 / total


@dataclass(frozen=True)
class RenewalCurve:
    """Renewal density on a uniform grid ``t = 0, h, 2h, ...``."""

    t: np.ndarray
    u: np.ndarray
    step: float
    beta: float


@dataclass(frozen=True)
class TruncatedMoments:
    m_beta: float
    truncated_mean: float
    laplace_constant: float
    ratio: float


@dataclass(eq=False)
class AnnealedModel:
    """Annealed quantities for one kernel.

    ``beta0`` is the critical point from the spectral resolvent; the
    time-domain estimate from :func:`compute_beta0` is kept in
    ``beta0_time_domain`` as a cross-check.
    """

    kernel: KernelTable
    spectral: SpectralGrid
    beta0: float
    beta0_time_domain: float
    curve: ReturnProbabilityCurve
    step: float = 0.05
    free_energy_cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _renewal: dict = field(default_factory=dict, repr=False)

    @property
    def gamma(self) -> float:
        return self.kernel.gamma

    @property
    def alpha(self) -> float:
        return (1.0 - self.gamma) / self.gamma

    @property
    def u_grid(self) -> RenewalCurve:
        return renewal_density(self, 1e3, self.step)

    @property
    def mean_interarrival(self) -> float:
        """``int t K(t) dt``; infinite when ``alpha <= 1``."""
        return self.beta0 * float(self.spectral.resolvent(0.0, 2))

    def p0(self, t):
        return self.spectral.p0(t)

    def K(self, t):
        return self.beta0 * self.spectral.p0(t)

    def K_beta(self, beta: float, t):
        """``(beta/beta0) exp(-F t) K(t)``."""
        f = free_energy(self, beta)
        return beta * np.exp(-f * np.asarray(t, dtype=float)) * self.spectral.p0(t)

    def kbeta_tail(self, beta: float, t):
        """``int_t^inf K_beta``."""
        f = free_energy(self, beta)
        t = np.asarray(t, dtype=float)
        flat = t.reshape(-1, 1)
        val = beta * self.spectral.integrate_fn(lambda h: np.exp(-(f + h) * flat) / (f + h))
        return val.reshape(t.shape)[()] if t.ndim == 0 else val.reshape(t.shape)


def build_model(kernel: KernelTable, t_max: float = 1e6, step: float = 0.05) -> AnnealedModel:
    """Tabulate ``p0``, compute ``beta0`` both ways and attach ``K`` to the curve."""
    curve = return_prob_curve(kernel, hybrid_grid(t_max, linear_step=step))
    sg = curve.spectral
    beta0 = 1.0 / float(sg.resolvent(0.0))
    beta0_td = compute_beta0(curve)
    if abs(beta0_td / beta0 - 1.0) > 1e-3:
        raise ModelViolation(f"time-domain beta0 {beta0_td:.8g} disagrees with spectral value {beta0:.8g}")
    curve = replace(curve, K=beta0 * curve.p0)
    return AnnealedModel(kernel, sg, beta0, beta0_td, curve, step)


def free_energy(model: AnnealedModel, beta: float) -> float:
    """Root ``F`` of ``int exp(-F t) p0(t) dt = 1/beta`` (zero for ``beta <= beta0``).

    Written as ``R(0) - R(F) = 1/beta0 - 1/beta`` to avoid cancellation.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if beta <= model.beta0:
        return 0.0
    cached = model.free_energy_cache.get(beta)
    if cached is not None:
        return cached
    target = 1.0 / model.beta0 - 1.0 / beta
    sg = model.spectral

    def resid(log_f):
        return float(sg.resolvent_gap(math.exp(log_f))) - target

    lo, hi = math.log(1e-12), math.log(max(10.0 * float(sg.h.max()), 2.0 * beta))
    while resid(lo) > 0:
        lo -= 10.0
        if lo < -700:
            raise ArithmeticError(f"free energy root not bracketed at beta={beta}")
    if resid(hi) < 0:
        raise ArithmeticError(f"free energy root not bracketed at beta={beta}")
    log_f = optimize.brentq(resid, lo, hi, xtol=1e-12, rtol=1e-13)
    value = math.exp(log_f)
    with model._lock:
        model.free_energy_cache.setdefault(beta, value)
    return model.free_energy_cache[beta]


def beta_for_free_energy(model: AnnealedModel, f: float) -> float:
    """Inverse of :func:`free_energy` on ``F > 0``: ``1/beta = 1/beta0 - (R(0) - R(F))``."""
    if f <= 0:
        raise ValueError("free energy must be positive")
    gap = float(model.spectral.resolvent_gap(f))
    if gap >= 1.0 / model.beta0:
        raise ArithmeticError(f"no beta with free energy {f}")
    return 1.0 / (1.0 / model.beta0 - gap)


def implicit_residual(model: AnnealedModel, beta: float) -> float:
    """``int exp(-F t) p0 dt - 1/beta`` at the computed root."""
    f = free_energy(model, beta)
    return float(model.spectral.resolvent(f)) - 1.0 / beta


def nu_exponent(model: AnnealedModel, rel_lo: float = 1e-6, rel_hi: float = 1e-3, n: int = 16) -> float:
    """Slope of ``log F(beta)`` against ``log(beta - beta0)``."""
    d = model.beta0 * np.geomspace(rel_lo, rel_hi, n)
    f = np.array([free_energy(model, model.beta0 + x) for x in d])
    return float(np.polyfit(np.log(d), np.log(f), 1)[0])


def solve_renewal(g: np.ndarray, kern: np.ndarray, step: float) -> np.ndarray:
    """Solve ``y = g + kern * y`` on a uniform grid by trapezoid forward stepping."""
    n = g.size
    y = np.empty(n)
    rev = kern[::-1].copy()  # rev[n-1-j] = kern[j]
    denom = 1.0 - 0.5 * step * kern[0]
    if denom <= 0:
        raise ValueError("step too coarse for kernel value at 0")
    y[0] = g[0]
    for i in range(1, n):
        conv = 0.5 * kern[i] * y[0] + np.dot(rev[n - i : n - 1], y[1:i])
        y[i] = (g[i] + step * conv) / denom
    return y


def renewal_residual(g: np.ndarray, kern: np.ndarray, step: float, y: np.ndarray) -> np.ndarray:
    """Pointwise residual of the discrete renewal equation, recomputed independently."""
    n = y.size
    res = np.empty(n)
    for i in range(n):
        w = np.full(i + 1, step)
        w[0] = w[-1] = 0.5 * step
        if i == 0:
            w[:] = 0.0
        res[i] = y[i] - g[i] - np.sum(w * kern[i::-1] * y[: i + 1])
    return res


def solve_renewal_extrapolated(kern_fine: np.ndarray, step: float) -> np.ndarray:
    """Richardson-extrapolated solution of ``y = kern + kern * y``.

    ``kern_fine`` is sampled with spacing ``step / 2``; the result lives on
    the coarse grid of spacing ``step``.  The trapezoid error is ``O(step^2)``
    with a smooth coefficient, so ``(4 y_fine - y_coarse) / 3`` is
    ``O(step^4)`` accurate.
    """
    coarse = kern_fine[::2]
    y_c = solve_renewal(coarse, coarse, step)
    y_f = solve_renewal(kern_fine, kern_fine, 0.5 * step)
    return (4.0 * y_f[::2] - y_c) / 3.0


def renewal_density(model: AnnealedModel, T_max: float, step: float, beta: float | None = None,
                    extrapolate: bool = True) -> RenewalCurve:
    """Renewal density on ``[0, T_max]`` for the inter-arrival law ``K_beta``.

    ``beta=None`` means ``beta0`` (``u = z^c_{beta0}``).  For ``beta > beta0``
    this is ``u_beta(t) = exp(-F t) z^c_{beta,t}``.
    """
    if step > 0.05:
        warnings.warn(f"step {step} may not resolve K near 0", RuntimeWarning, stacklevel=2)
    beta = model.beta0 if beta is None else float(beta)
    key = (float(T_max), float(step), beta, extrapolate)
    hit = model._renewal.get(key)
    if hit is not None:
        return hit
    n = int(round(T_max / step))
    t = np.linspace(0.0, n * step, n + 1)
    if extrapolate:
        tf = np.linspace(0.0, n * step, 2 * n + 1)
        u = solve_renewal_extrapolated(model.K_beta(beta, tf), step)
    else:
        kb = model.K_beta(beta, t)
        u = solve_renewal(kb, kb, step)
    curve = RenewalCurve(t, u, step, beta)
    model._renewal[key] = curve
    return curve


def talbot_inverse(transform, t, n_terms: int = 32) -> np.ndarray:
    """Fixed-Talbot inversion of a Laplace transform at times ``t > 0``.

    ``transform`` maps a complex array to a complex array.  Valid when all
    singularities lie on the non-positive real axis.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    m = n_terms
    out = np.empty(t.shape)
    k = np.arange(1, m)
    th = k * math.pi / m
    cot = 1.0 / np.tan(th)
    sigma = th + (th * cot - 1.0) * cot
    for i, ti in enumerate(t):
        r = 2.0 * m / (5.0 * ti)
        s = r * th * (cot + 1j)
        vals = transform(np.concatenate([[r + 0j], s]))
        head = 0.5 * np.exp(r * ti) * vals[0].real
        body = np.sum((np.exp(ti * s) * vals[1:] * (1.0 + 1j * sigma)).real)
        out[i] = r / m * (head + body)
    return out


def renewal_density_at(model: AnnealedModel, t, beta: float | None = None, n_terms: int = 32) -> np.ndarray:
    """``u_beta(t)`` at arbitrary times via Laplace inversion.

    The transform is ``beta R(F + lam) / (beta (R(F) - R(F + lam)))`` with
    ``R(F) = 1/beta``.
    """
    beta = model.beta0 if beta is None else float(beta)
    f = free_energy(model, beta)
    sg = model.spectral

    def transform(lam):
        num = sg.resolvent(f + lam)
        den = sg.resolvent_difference(np.full(lam.shape, f + 0j), f + lam)
        return num / den

    return talbot_inverse(transform, t, n_terms)


def annealed_partition_curve(model: AnnealedModel, beta: float, T: float, step: float | None = None,
                             extrapolate: bool = True):
    """``(t, z^c_{beta,t})`` on a uniform grid ending at ``T``.

    For ``beta > beta0`` the equation is solved for ``exp(-F t) z^c`` and
    rescaled, which keeps the kernel a probability density.
    """
    step = model.step if step is None else step
    n = max(1, int(round(T / step)))
    h = T / n
    t = np.linspace(0.0, T, n + 1)
    f = free_energy(model, beta)
    if beta >= model.beta0:
        density = lambda s: model.K_beta(beta, s)  # noqa: E731
    else:
        density = lambda s: (beta / model.beta0) * model.K(s)  # noqa: E731
    if extrapolate:
        y = solve_renewal_extrapolated(density(np.linspace(0.0, T, 2 * n + 1)), h)
    else:
        kb = density(t)
        y = solve_renewal(kb, kb, h)
    return t, y * np.exp(f * t)


def annealed_partition(model: AnnealedModel, beta: float, T: float, step: float | None = None,
                       extrapolate: bool = True) -> float:
    """Constrained annealed partition ``z^c_{beta,T}``."""
    return float(annealed_partition_curve(model, beta, T, step, extrapolate)[1][-1])


def annealed_free_partition(model: AnnealedModel, beta: float, T: float, step: float | None = None) -> float:
    """``Z_{beta,T} = 1 + int_0^T z^c_{beta,t} dt`` (free endpoint)."""
    t, z = annealed_partition_curve(model, beta, T, step)
    return 1.0 + float(integrate.trapezoid(z, t))


class KBetaSampler:
    """Inverse-CDF sampler for the inter-arrival density ``K_beta``.

    The tail ``S(t) = int_t^inf K_beta`` is tabulated exactly on a dense grid
    and inverted by monotone interpolation of ``log t`` against ``log S``.
    Beyond the table, ``S`` is continued as ``S_end (t/t_end)^-a exp(-F (t - t_end))``
    with ``a`` the local power of the table's last decade.
    """

    def __init__(self, model: AnnealedModel, beta: float, t_end: float | None = None):
        if beta < model.beta0:
            raise ValueError("K_beta is a probability density only for beta >= beta0")
        self.model = model
        self.beta = float(beta)
        self.F = free_energy(model, beta)
        if t_end is None:
            t_end = 1e5 if self.F == 0 else float(np.clip(60.0 / self.F, 1e3, 1e7))
        t = np.concatenate([np.linspace(0.0, 1.0, 201)[:-1], np.geomspace(1.0, t_end, 2000)])
        s = np.asarray(model.kbeta_tail(beta, t))
        s[0] = 1.0
        keep = np.concatenate([[True], np.diff(s) < 0]) & (s > 1e-300)
        self.t_tab, self.s_tab = t[keep], s[keep]
        self.total = float(model.kbeta_tail(beta, 0.0))
        self.t_end, self.s_end = float(self.t_tab[-1]), float(self.s_tab[-1])
        last = self.t_tab >= self.t_end / 10.0
        self.tail_power = float(-np.polyfit(np.log(self.t_tab[last]), np.log(self.s_tab[last]) + self.F * self.t_tab[last], 1)[0])
        # interpolate t against -log S, both increasing
        self._inv = PchipInterpolator(-np.log(self.s_tab), self.t_tab)

    def tail(self, t):
        return self.model.kbeta_tail(self.beta, t)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        v = 1.0 - rng.random(size)
        return self.invert(v)

    def invert(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = np.empty(v.shape)
        inside = v >= self.s_end
        out[inside] = self._inv(-np.log(v[inside]))
        if np.any(~inside):
            out[~inside] = self._invert_tail(v[~inside])
        return out

    def _invert_tail(self, v: np.ndarray) -> np.ndarray:
        target = np.log(v / self.s_end)
        lo = np.zeros(v.shape)
        hi = np.full(v.shape, 1.0)

        def log_ratio(x):  # x = log(t / t_end)
            return -self.tail_power * x - self.F * self.t_end * np.expm1(x)

        while np.any(log_ratio(hi) > target):
            hi = np.where(log_ratio(hi) > target, 2.0 * hi, hi)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            above = log_ratio(mid) > target
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        return self.t_end * np.exp(0.5 * (lo + hi))


def kbeta_sampler(model: AnnealedModel, beta: float) -> KBetaSampler:
    key = ("kbeta_sampler", float(beta))
    sampler = model._renewal.get(key)
    if sampler is None:
        sampler = KBetaSampler(model, beta)
        model._renewal[key] = sampler
    return sampler


def mean_beta(model: AnnealedModel, beta: float) -> float:
    """``m_beta = int t K_beta(t) dt = beta (1/pi) int (F + h)^-2``."""
    f = free_energy(model, beta)
    return beta * float(model.spectral.resolvent(f, 2))


def truncated_moments(model: AnnealedModel, beta: float, lambdas=(1 / 8, 1 / 4, 3 / 8)) -> TruncatedMoments:
    """Mean, truncated mean at ``1/F`` and exponential-moment constant of ``K_beta``.

    The constant ``C`` is the smallest value with
    ``Q[exp(lam tau)] <= 1 + lam m + C lam^2 m / F`` at ``lam = c F`` for each
    ``c`` in ``lambdas``; ``Q[exp(lam tau)] = beta R(F - lam)``.
    """
    if not (model.beta0 < beta):
        raise ValueError("truncated moments need beta > beta0")
    f = free_energy(model, beta)
    sg = model.spectral
    m = mean_beta(model, beta)
    horizon = 1.0 / f

    def trunc(h):
        a = f + h
        x = a * horizon
        # (1 - exp(-x)(1 + x)) / a^2 with a series for small x
        num = np.where(x < 1e-4, x * x / 2 - x**3 / 3, -np.expm1(-x) - x * np.exp(-x))
        return num / (a * a)

    tmean = beta * float(sg.integrate_fn(trunc))
    consts = []
    for c in lambdas:
        lam = c * f
        # beta R(F - lam) - 1 = beta (R(F - lam) - R(F))
        excess = beta * float(sg.resolvent_difference(f - lam, f))
        consts.append((excess - lam * m) / (lam * lam * m / f))
    ratio = m / (f**-2 * float(model.K(horizon)))
    return TruncatedMoments(m, tmean, float(max(consts)), ratio)


def doney_ratio(model: AnnealedModel, t, u=None) -> np.ndarray:
    """``u(t) t^2 K(t)``; tends to ``alpha sin(pi alpha)/pi`` when ``alpha < 1``."""
    t = np.asarray(t, dtype=float)
    u = renewal_density_at(model, t) if u is None else u
    return u * t**2 * model.K(t)


def doney_constant(alpha: float) -> float:
    return alpha * math.sin(math.pi * alpha) / math.pi


def implicit_relation(model: AnnealedModel, t) -> np.ndarray:
    """``t K(t)^gamma phi(1/K(t))``, which tends to a positive constant."""
    k = model.K(np.asarray(t, dtype=float))
    return np.asarray(t) * k**model.gamma * model.kernel.spec.phi(1.0 / k)
