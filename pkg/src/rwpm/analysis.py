"""Experiments and proof diagnostics.

Event statistics are functionals of the enriched environment (jump times,
amplitudes ``U`` and displacements ``V``).  Their means under the weighted
laws ``P_t`` and ``P_tau`` follow from Mecke's formula: a jump of amplitude
``l`` placed inside a block of length ``d`` is reweighted by
``(2l+1)^-1 sum_{|x|<=l} P(W_d = x) / P(W_d = 0)``.  Summing by parts over
amplitudes gives the compact form used here,

    sum_{l >= L} mu_bar(l) (2l+1)^-1 P(|W_d| <= l) = E[J(L v |W_d|)],

so every weighted mean reduces to one sum against the lattice law.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .environment import EnvBatch, EnvPath, local_time_max, sample_env, sample_env_batch, size_biased_blocks
from .homogeneous import AnnealedModel, annealed_free_partition, annealed_partition_curve, free_energy
from .kernel import AMPLITUDE_CAP, KernelTable, composite_gauss, sample_jump_amplitude
from .partition import RenewalBridgeSampler, RenewalTrajectory, volterra_quenched
from .spectral import lattice_law, spectral_grid
from .parallel import map_tasks
from .rng import stream
from .stats import StatReport, mean_stderr, self_normalized

REGIMES = ("truncated_fenergy", "criticality", "large_rho", "sub_two_thirds", "marginal")


def nu_from_alpha(alpha: float) -> float:
    """Critical exponent of the annealed free energy, ``1 v 1/alpha``."""
    return max(1.0, 1.0 / alpha)


def _p0(kernel: KernelTable, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.ones(t.shape)
    pos = t > 0
    if np.any(pos):
        out[pos] = lattice_law(kernel).p0(t[pos])
    return out


def _xi(kernel: KernelTable, k) -> np.ndarray:
    """Marginal jump weight ``k^(1/3) phi(k)^-2`` at real ``k >= 0``."""
    k = np.asarray(k, dtype=float)
    return np.cbrt(k) / kernel.spec.phi(k) ** 2


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class EventSpec:
    """Regime, event parameters, horizon and window ``[r, s]``."""

    regime: str
    params: dict
    T: float
    window: tuple[float, float] | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.T <= 0:
            raise ValueError("T must be positive")
        r, s = self.window if self.window is not None else (0.0, self.T)
        if not 0.0 <= r < s <= self.T:
            raise ValueError(f"window [{r}, {s}] not inside [0, {self.T}]")
        eps = self.params.get("epsilon")
        if eps is not None and s - r < eps * self.T - 1e-12:
            raise ValueError("window shorter than epsilon * T")
        object.__setattr__(self, "window", (float(r), float(s)))

    def param(self, name: str, default=None):
        value = self.params.get(name, default)
        if value is None:
            raise ValueError(f"regime {self.regime} needs parameter {name!r}")
        return value


@dataclass(frozen=True, eq=False)
class MarginalWeights:
    """Weights of the marginal statistic at horizon ``T``."""

    kernel: KernelTable
    T: float
    S_of_T: float
    psi_of_T: float
    threshold: float

    def xi(self, k) -> np.ndarray:
        return _xi(self.kernel, k)

    @property
    def max_amplitude(self) -> int:
        return int(math.floor(self.threshold))


@dataclass(frozen=True)
class CoarseGrainConfig:
    theta: float
    block_T: float
    n_blocks: int

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie in (0, 1)")
        if self.n_blocks < 1:
            raise ValueError("need at least one block")

    @classmethod
    def default(cls, model: AnnealedModel, beta: float, n_blocks: int) -> "CoarseGrainConfig":
        theta = (1.0 + model.alpha) ** -0.5
        return cls(theta, 1.0 / free_energy(model, beta), n_blocks)

    def check(self, alpha: float) -> None:
        if (1.0 + alpha) * self.theta <= 1.0:
            raise ValueError(f"need (1 + alpha) theta > 1, got {(1.0 + alpha) * self.theta:.4f}")


# ---------------------------------------------------------------------------
# thresholds and amplitude sums


def amplitude_level(kernel: KernelTable, t) -> np.ndarray:
    """``beta0 / K(t) = 1 / P(W_t = 0)``: the amplitude scale matched to time ``t``."""
    return 1.0 / _p0(kernel, t)


def f_beta(kernel: KernelTable, model: AnnealedModel, beta: float) -> float:
    """``sum_{k >= beta0/K(1/F)} mu_bar(k)``: rate of large jumps at the correlation length."""
    if beta <= model.beta0:
        raise ValueError("f_beta needs beta > beta0")
    level = float(amplitude_level(kernel, 1.0 / free_energy(model, beta)))
    return float(kernel.tail_mubar_at(math.ceil(level)))


def _gauss_tail(fn, start: float, stop: float = float(AMPLITUDE_CAP), panels_per_octave: int = 2) -> float:
    """``int_start^stop fn(x) dx`` on geometric panels."""
    if stop <= start:
        return 0.0
    n = max(2, int(math.ceil(math.log2(stop / start) * panels_per_octave)))
    nodes, weights = composite_gauss(np.geomspace(start, stop, n + 1))
    return float(np.sum(weights * fn(nodes)))


def mubar_sum(kernel: KernelTable, fn, lo: int = 0, hi: int | None = None) -> float:
    """``sum_{lo <= k <= hi} mu_bar(k) fn(k)``, amplitudes capped at the sampler cap.

    Exact on the table; beyond it ``mu_bar`` is continued by ``-(2k+1) J'(k)``.
    """
    hi = AMPLITUDE_CAP if hi is None else min(int(hi), AMPLITUDE_CAP)
    if hi < lo:
        return 0.0
    top = min(hi, kernel.x_max)
    total = 0.0
    if lo <= top:
        k = np.arange(lo, top + 1)
        total += float(np.sum(kernel.mu_bar[lo : top + 1] * fn(k.astype(float))))
    if hi > kernel.x_max:
        start = max(lo, kernel.x_max + 1) - 0.5
        spec, z = kernel.spec, kernel.normalization
        total += _gauss_tail(lambda x: -(2 * x + 1) * spec.raw_derivative(x) / z * fn(x), start, hi + 0.5)
    return total


def _level_integral(kernel: KernelTable, a: float, b: float, fn, per_decade: int = 400) -> float:
    """``int_a^b fn(ceil(1/P(W_t = 0))) dt`` with the level crossings located on a log grid."""
    if b <= a:
        return 0.0
    a_eff = max(a, 1e-9)
    grid = np.geomspace(a_eff, b, max(64, int(per_decade * math.log10(b / a_eff)) + 2))
    inv = amplitude_level(kernel, grid)
    lo = int(math.ceil(inv[0]))
    hi = int(math.ceil(inv[-1]))
    # crossing of level m -> m + 1 where 1/p0 = m
    m = np.arange(lo, hi)
    cross = np.exp(np.interp(np.log(m.astype(float)), np.log(inv), np.log(grid))) if m.size else np.zeros(0)
    edges = np.concatenate([[a], np.clip(cross, a, b), [b]])
    levels = np.arange(lo, hi + 1)
    widths = np.diff(edges)
    values = np.asarray(fn(levels), dtype=float)
    return float(np.sum(widths * values))


@dataclass(frozen=True, eq=False)
class _AbsLaw:
    """``P(|W_t| <= l)`` and ``sum_{|x| > l} J(x) P(W_t = x)`` for ``l <= x_hi``."""

    t: float
    cdf: np.ndarray
    j_tail: np.ndarray

    def mixed(self, kernel: KernelTable, level) -> np.ndarray:
        """``E[J(level v |W_t|)]``."""
        level = np.asarray(level, dtype=np.int64)
        if np.any(level >= self.cdf.size):
            raise ValueError("level beyond tabulated range")
        return kernel.j(level) * self.cdf[level] + self.j_tail[level]


def _abs_law(kernel: KernelTable, t: float, max_level: int) -> _AbsLaw:
    law = lattice_law(kernel)
    x_hi = int(min(max(64 * max_level, 4096), 2**22))
    x_hi = max(x_hi, max_level + 1)
    x = np.arange(x_hi + 1)
    p = law.prob(t, x)
    cdf = p[0] + 2.0 * np.concatenate([[0.0], np.cumsum(p[1:])])
    jp = 2.0 * kernel.j(x) * p
    # sum over x > l up to x_hi, then the far field by quadrature
    rev = np.concatenate([np.cumsum(jp[::-1])[::-1][1:], [0.0]])
    far = 2.0 * _gauss_tail(lambda u: kernel.j_continuous(u) * law.prob(t, np.floor(u).astype(np.int64)),
                            x_hi + 0.5, 2.0**60)
    return _AbsLaw(float(t), np.minimum(cdf, 1.0), rev + far)


# ---------------------------------------------------------------------------
# path statistics


def jump_count(path: EnvPath, a: float, b: float, threshold: float = 0.0) -> int:
    """Records with ``theta`` in ``(a, b]`` and ``U >= threshold``."""
    if not 0.0 <= a < b <= path.T + 1e-12:
        raise ValueError("need 0 <= a < b <= T")
    inside = (path.theta > a) & (path.theta <= b)
    if threshold > 0:
        if path.U is None:
            raise ValueError("thresholded counts need amplitudes")
        inside &= path.U >= threshold
    return int(np.count_nonzero(inside))


def criticality_stat(path: EnvPath, a: float, b: float, kernel: KernelTable) -> int:
    """``sum 1{U_i K(theta_i) >= beta0}`` over jumps in ``(a, b]``."""
    if not 0.0 <= a < b:
        raise ValueError("need 0 <= a < b")
    if path.U is None:
        raise ValueError("criticality statistic needs amplitudes")
    inside = (path.theta > a) & (path.theta <= b)
    if not np.any(inside):
        return 0
    return int(np.count_nonzero(path.U[inside] * _p0(kernel, path.theta[inside]) >= 1.0))


def marginal_weights(kernel: KernelTable, model: AnnealedModel, T: float) -> MarginalWeights:
    """``S(T) = int_1^{1/K(T)} ds / (s phi(s)^3)``, ``psi(T) = phi(1/K(T))^3 S(T)``."""
    top = 1.0 / (model.beta0 * float(_p0(kernel, T)))
    phi = kernel.spec.phi
    if top <= 1.0:
        s_val = 0.0
    else:
        s_val, _ = integrate.quad(lambda v: float(phi(math.exp(v))) ** -3, 0.0, math.log(top), epsrel=1e-12,
                                  limit=200)
    psi = float(phi(top)) ** 3 * s_val
    return MarginalWeights(kernel, float(T), float(s_val), float(psi), 2.0 / float(_p0(kernel, T)))


def marginal_stat(path: EnvPath, T: float, weights: MarginalWeights) -> float:
    """``F_T = sum xi(U_i) 1{U_i K(T) <= 2 beta0}`` over jumps in ``(0, T]``."""
    if abs(weights.T - T) > 1e-9 * max(1.0, T):
        raise ValueError("weights built for a different horizon")
    if path.U is None:
        raise ValueError("marginal statistic needs amplitudes")
    keep = (path.theta <= T) & (path.U <= weights.threshold)
    return float(np.sum(weights.xi(path.U[keep])))


def marginal_moments(weights: MarginalWeights, rho: float) -> tuple[float, float]:
    """Mean and variance of ``F_T`` under the environment law (a compound Poisson sum)."""
    k_max = weights.max_amplitude
    m1 = mubar_sum(weights.kernel, weights.xi, 0, k_max)
    m2 = mubar_sum(weights.kernel, lambda k: weights.xi(k) ** 2, 0, k_max)
    return rho * weights.T * m1, rho * weights.T * m2


def psi_curve(kernel: KernelTable, model: AnnealedModel, T_grid) -> np.ndarray:
    return np.array([marginal_weights(kernel, model, float(t)).psi_of_T for t in np.atleast_1d(T_grid)])


def psi_growth_exponent(kernel: KernelTable, model: AnnealedModel, T_grid) -> float:
    """Slope of ``log psi(T)`` against ``log log(1/K(T))``.

    ``log(1/K(T))`` grows like ``log(T)/gamma``, so the slope estimates the
    power of ``log T`` in ``psi``; using the amplitude scale itself removes
    the additive constant that biases a fit against ``log log T`` at moderate ``T``.
    """
    T_grid = np.asarray(T_grid, dtype=float)
    scale = np.log(1.0 / (model.beta0 * _p0(kernel, T_grid)))
    return float(np.polyfit(np.log(scale), np.log(psi_curve(kernel, model, T_grid)), 1)[0])


def psi_inverse(kernel: KernelTable, model: AnnealedModel, value: float, t_lo: float = 2.0,
                t_hi: float = 1e6) -> float:
    """Smallest tabulated-then-bisected ``T`` with ``psi(T) >= value``."""
    grid = np.geomspace(t_lo, t_hi, 241)
    psi = psi_curve(kernel, model, grid)
    if np.any(np.diff(psi) < 0):
        raise ArithmeticError("psi is not monotone on the tabulation grid")
    if value <= psi[0]:
        return float(grid[0])
    if value > psi[-1]:
        raise ValueError(f"psi never reaches {value} below T={t_hi}")
    i = int(np.searchsorted(psi, value))
    lo, hi = grid[i - 1], grid[i]
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        if marginal_weights(kernel, model, mid).psi_of_T >= value:
            hi = mid
        else:
            lo = mid
    return float(hi)


def beta_sub_two_thirds(model: AnnealedModel, rho: float, c1: float = 0.5, C0: float = 10.0) -> float:
    """``beta0 + c1 (rho/C0)^(1/(2-nu))``."""
    nu = nu_from_alpha(model.alpha)
    return model.beta0 + c1 * (rho / C0) ** (1.0 / (2.0 - nu))


def beta_marginal(kernel: KernelTable, model: AnnealedModel, rho: float, c1: float = 0.5, C0: float = 10.0) -> float:
    """``beta0 + c1 / psi^{-1}(C0/rho)``."""
    return model.beta0 + c1 / psi_inverse(kernel, model, C0 / rho)


def weight_factorization_constant(kernel: KernelTable, t_lo: float = 1e-3, t_hi: float = 1e6) -> float:
    """``sup_r K(r/2)/K(r)`` on a log grid."""
    r = np.geomspace(t_lo, t_hi, 4001)
    return float(np.max(_p0(kernel, r / 2) / _p0(kernel, r)))


def holder_mass(p_event: float, theta: float) -> tuple[float, float]:
    """``(eta, (P(A^c) + 1)^(1-theta))`` with ``eta = P(A)^(theta/(1-theta))``."""
    eta = p_event ** (theta / (1.0 - theta))
    return eta, (1.0 - p_event + 1.0) ** (1.0 - theta)


# ---------------------------------------------------------------------------
# renewal events


def b_event(tau, spec: EventSpec, model: AnnealedModel) -> bool:
    """Indicator of the regime's renewal event on the window of ``spec``."""
    pts = np.asarray(tau.points if isinstance(tau, RenewalTrajectory) else tau, dtype=float)
    r, s = spec.window
    pts = pts[(pts >= r) & (pts <= s)] - r
    T = spec.T
    if pts.size < 2:
        return False
    inc = np.diff(pts)
    right = pts[1:]
    if spec.regime == "truncated_fenergy":
        f = free_energy(model, spec.param("beta"))
        first = right <= T / 2
        total = np.sum(inc[first] * (inc[first] * f <= 1.0))
        return bool(total >= spec.param("delta") * T)
    if spec.regime == "criticality":
        first = right <= T / 2
        total = np.sum(inc[first] / np.maximum(1.0, right[first]))
        return bool(total >= spec.param("delta") * math.log(T))
    if spec.regime in ("large_rho", "sub_two_thirds"):
        count = np.count_nonzero((inc >= 1.0) & (inc <= 2.0))
        return bool(count >= T ** min(model.alpha, 1.0) / spec.param("R"))
    # marginal
    kernel = model.kernel
    k_inc = model.beta0 * _p0(kernel, inc)
    total = np.sum(_xi(kernel, 1.0 / k_inc))
    weights = marginal_weights(kernel, model, T)
    k_T = model.beta0 * float(_p0(kernel, T))
    eps = spec.params.get("epsilon", 0.1)
    delta = spec.params.get("delta", eps**5)
    return bool(total >= delta * weights.S_of_T / (T * k_T))


def dk_frequency(model: AnnealedModel, ks, n: int, rng: np.random.Generator) -> StatReport:
    """``Q(tau_1 <= 2^{k+1} | tau_1 >= 2^k)``: exact from the tail of ``K`` and by sampling."""
    from .homogeneous import kbeta_sampler

    report = StatReport("dk_frequency")
    sampler = kbeta_sampler(model, model.beta0)
    for k in ks:
        lo, hi = 2.0**k, 2.0 ** (k + 1)
        tail = model.kbeta_tail(model.beta0, np.array([lo, hi]))
        exact = 1.0 - tail[1] / tail[0]
        # sample the conditioned law by inverting the tail on [lo, inf)
        v = tail[0] * (1.0 - rng.random(n))
        draws = sampler.invert(v)
        hits = draws <= hi
        report.add("Q(D_k)", hits.mean(), math.sqrt(hits.mean() * (1 - hits.mean()) / n), n, k=int(k))
        report.add("Q(D_k) exact", exact, 0.0, 0, k=int(k))
    report.add("limit 1-2^-alpha", 1.0 - 2.0 ** (-model.alpha), 0.0, 0)
    return report


# ---------------------------------------------------------------------------
# Mecke closed forms


def criticality_mean(kernel: KernelTable, rho: float, a: float, b: float) -> float:
    """``E[F_(a,b]] = rho int_a^b sum_{l >= beta0/K(t)} mu_bar(l) dt``."""
    return rho * _level_integral(kernel, a, b, kernel.tail_mubar_at)


def weighted_jump_mean(kernel: KernelTable, rho: float, t: float, level: int = 0) -> float:
    """``E_t[#{jumps in (0,t] with U >= level}]`` under ``dP_t = w(0,t,Y) dP``."""
    law = _abs_law(kernel, t, max(int(level), 1))
    return rho * t * float(law.mixed(kernel, int(level))) / float(_p0(kernel, t))


def block_criticality_means(kernel: KernelTable, rho: float, prev: float, cur: float) -> tuple[float, float]:
    """``(E[F^(j)], E_tau[F^(j)])`` for ``F^(j) = F_((prev+cur)/2, cur]``."""
    mid = 0.5 * (prev + cur)
    plain = criticality_mean(kernel, rho, mid, cur)
    d = cur - prev
    top = int(math.ceil(float(amplitude_level(kernel, cur))))
    law = _abs_law(kernel, d, top)
    p0d = float(_p0(kernel, d))
    weighted = rho * _level_integral(kernel, mid, cur, lambda lv: law.mixed(kernel, lv)) / p0d
    return plain, weighted


def block_count_law(kernel: KernelTable, rho: float, d: float, n_max: int | None = None) -> np.ndarray:
    """Exact law of the jump count of one block of length ``d`` under ``P_tau``.

    ``P(N = n) = e^{-rho d} (rho d)^n / n! (1/pi) int (1-h)^n e^{-(1-rho) d h} / P(W_d = 0)``.
    """
    if n_max is None:
        lam = rho * d
        n_max = int(lam + 12.0 * math.sqrt(lam + 1.0) + 20)
    n = np.arange(n_max + 1)
    sg = spectral_grid(kernel)
    moments = sg.integrate_fn(lambda h: (1.0 - h) ** n[:, None] * np.exp(-(1.0 - rho) * d * h))
    pois = stats.poisson.pmf(n, rho * d)
    pmf = pois * moments / float(_p0(kernel, d))
    return np.maximum(pmf, 0.0)


def shift_bound_report(kernel: KernelTable, model: AnnealedModel, rho: float, beta: float, t_grid) -> StatReport:
    """``E[J^beta] - E_t[J^beta] >= rho f(beta) t / 2`` for ``t <= 1/F(beta)``."""
    report = StatReport("shift_bound")
    f = free_energy(model, beta)
    level = int(math.ceil(float(amplitude_level(kernel, 1.0 / f))))
    fb = float(kernel.tail_mubar_at(level))
    for t in t_grid:
        if t > 1.0 / f * (1 + 1e-12):
            raise ValueError("shift bound only applies for t <= 1/F(beta)")
        plain = rho * fb * t
        weighted = weighted_jump_mean(kernel, rho, t, level)
        report.add("E[J]", plain, t=float(t))
        report.add("E_t[J]", weighted, t=float(t))
        report.add("shift/(rho f t)", (plain - weighted) / (rho * fb * t), t=float(t))
        report.add("bound holds", float(plain - weighted >= 0.5 * plain), t=float(t))
    return report


def expectation_shift_report(model: AnnealedModel, kernel: KernelTable, rho: float, regime: str, grid,
                             beta: float | None = None) -> StatReport:
    """Closed-form mean shifts ``E - E_tau`` per block length in ``grid``."""
    report = StatReport(f"shift_{regime}")
    for d in np.atleast_1d(grid).astype(float):
        p0d = float(_p0(kernel, d))
        if regime == "sub_two_thirds":
            plain = rho * d
            weighted = rho * d * float(_abs_law(kernel, d, 1).mixed(kernel, 0)) / p0d
            scale = rho * d
        elif regime == "marginal":
            lo = int(math.ceil(1.0 / p0d))
            hi = int(math.floor(2.0 / p0d))
            law = _abs_law(kernel, d, hi)
            ks = np.arange(lo, hi + 1)
            xi = _xi(kernel, ks)
            plain = rho * d * float(np.sum(kernel.mubar_at(ks) * xi))
            dj = kernel.j(ks) - kernel.j(ks + 1)
            weighted = rho * d * float(np.sum(dj * xi * law.cdf[ks])) / p0d
            scale = rho * float(_xi(kernel, 1.0 / (model.beta0 * p0d)))
        elif regime == "criticality":
            plain, weighted = block_criticality_means(kernel, rho, 0.0, d)
            scale = rho * d / max(1.0, d)
        elif regime == "truncated_fenergy":
            if beta is None:
                raise ValueError("truncated_fenergy shift needs beta")
            f = free_energy(model, beta)
            level = int(math.ceil(float(amplitude_level(kernel, 1.0 / f))))
            plain = rho * d * float(kernel.tail_mubar_at(level))
            weighted = weighted_jump_mean(kernel, rho, d, level)
            scale = plain
        else:
            raise ValueError(f"no shift report for regime {regime!r}")
        report.add("E", plain, block=d)
        report.add("E_tau", weighted, block=d)
        report.add("shift", plain - weighted, block=d)
        report.add("shift/scale", (plain - weighted) / scale if scale > 0 else math.nan, block=d)
    return report


def poisson_deviation_check(lam: float, t: float, n: int, rng: np.random.Generator) -> tuple[float, float, float]:
    """Empirical ``P(X - lam <= -t)`` with its stderr, and the bound ``exp(-t^2 / (4 lam))``."""
    if not 0 < t <= lam:
        raise ValueError("need 0 < t <= lam")
    x = rng.poisson(lam, n)
    p = float(np.mean(x - lam <= -t))
    return p, math.sqrt(max(p * (1 - p), 1.0 / n) / n), math.exp(-t * t / (4.0 * lam))


# ---------------------------------------------------------------------------
# weighted environments


def weighted_batch(kernel: KernelTable, rho: float, t: float, n: int, rng: np.random.Generator):
    """``n`` paths on ``[0, t]`` under ``P`` with weights ``w(0, t, Y)``."""
    batch = sample_env_batch(kernel, rho, t, n, rng)
    law = lattice_law(kernel)
    w = law.prob((1.0 - rho) * t, batch.endpoints()) / float(_p0(kernel, t))
    return batch, w


def domination_report(kernel: KernelTable, rho: float, t_grid, n: int, rng: np.random.Generator,
                      threshold: int = 10) -> StatReport:
    """Weighted versus plain means of non-decreasing functionals of the amplitudes."""
    report = StatReport("domination")
    plain_rates = {
        "jump count": 1.0,
        "thresholded count": float(kernel.tail_mubar_at(threshold)),
        "sum xi(U)": mubar_sum(kernel, lambda k: _xi(kernel, k)),
    }
    for t in t_grid:
        batch, w = weighted_batch(kernel, rho, t, n, rng)
        values = {
            "jump count": batch.counts.astype(float),
            "thresholded count": batch.per_path(batch.U >= threshold),
            "sum xi(U)": batch.per_path(_xi(kernel, batch.U)),
        }
        for name, v in values.items():
            est = self_normalized(v, w)
            mean, err, ess = est.value, est.stderr, est.ess
            report.add(f"E_t[{name}]", mean, err, n, t=float(t))
            report.add(f"E[{name}]", rho * t * plain_rates[name], 0.0, 0, t=float(t))
            report.add(f"ess[{name}]", ess, 0.0, n, t=float(t))
    return report


def sample_p_tau(kernel: KernelTable, points, rho: float, T: float, rng: np.random.Generator) -> EnvPath:
    """Environment on ``[0, T]`` under ``P_tau`` for renewal points inside ``[0, T]``.

    Blocks between consecutive points are size-biased; the rest is free.
    """
    points = np.asarray(points, dtype=float)
    r, s = float(points[0]), float(points[-1])
    parts_t, parts_u, parts_v = [], [], []
    if r > 0:
        free = sample_env(kernel, rho, r, rng)
        parts_t.append(free.theta), parts_u.append(free.U), parts_v.append(free.V)
    if points.size > 1:
        biased = size_biased_blocks(kernel, points - r, rho, rng)
        parts_t.append(biased.theta + r), parts_u.append(biased.U), parts_v.append(biased.V)
    if s < T:
        free = sample_env(kernel, rho, T - s, rng)
        parts_t.append(free.theta + s), parts_u.append(free.U), parts_v.append(free.V)
    theta = np.concatenate(parts_t) if parts_t else np.zeros(0)
    u = np.concatenate(parts_u).astype(np.int64) if parts_u else np.zeros(0, dtype=np.int64)
    v = np.concatenate(parts_v).astype(np.int64) if parts_v else np.zeros(0, dtype=np.int64)
    return EnvPath(rho, T, np.minimum(theta, T), v, u)


# ---------------------------------------------------------------------------
# epsilon-good probes


@dataclass
class _EventRule:
    """Statistic, event ``A`` and the exact ``P(A)`` when the statistic is Poisson."""

    name: str
    level: int | None  # amplitude threshold for count statistics
    is_bad: callable  # statistic -> bool array, True on A
    p_exact: float = math.nan
    per_path: callable = None


def _event_rule(spec: EventSpec, model: AnnealedModel, kernel: KernelTable, rho: float) -> _EventRule:
    T = spec.T
    if spec.regime == "sub_two_thirds":
        R = spec.param("R")
        cut = rho * T - R * math.sqrt(rho * T)
        p = float(stats.poisson.cdf(math.ceil(cut) - 1, rho * T))
        return _EventRule("jump count", 0, lambda x: x < cut, p)
    if spec.regime == "truncated_fenergy":
        beta, eta = spec.param("beta"), spec.param("eta")
        level = int(math.ceil(float(amplitude_level(kernel, 1.0 / free_energy(model, beta)))))
        mean = rho * T * float(kernel.tail_mubar_at(level))
        cut = (1.0 - eta) * mean
        return _EventRule("large jump count", level, lambda x: x <= cut, float(stats.poisson.cdf(math.floor(cut), mean)))
    if spec.regime == "criticality":
        eta = spec.param("eta")
        mean = criticality_mean(kernel, rho, 0.0, T)
        cut = mean - eta * rho * math.log(T)
        return _EventRule("criticality count", None, lambda x: x <= cut, float(stats.poisson.cdf(math.floor(cut), mean)),
                          lambda p: criticality_stat(p, 0.0, T, kernel) if p.n_jumps else 0)
    if spec.regime == "marginal":
        eps = spec.param("epsilon")
        weights = marginal_weights(kernel, model, T)
        mean, var = marginal_moments(weights, rho)
        cut = mean - math.sqrt(var) / eps
        return _EventRule("marginal statistic", None, lambda x: x <= cut, math.nan,
                          lambda p: marginal_stat(p, T, weights))
    # large_rho
    cut = math.log(T) ** 2
    return _EventRule("max local time", None, lambda x: x >= cut, math.nan, lambda p: local_time_max(p)[0])


def _batch_statistic(rule: _EventRule, batch: EnvBatch, kernel: KernelTable, T: float) -> np.ndarray:
    if rule.level is not None:
        return batch.per_path(batch.U >= rule.level) if rule.level > 0 else batch.counts.astype(float)
    if rule.name == "criticality count":
        hit = batch.U * _p0(kernel, batch.theta) >= 1.0
        return batch.per_path(hit)
    return np.array([rule.per_path(batch.path(i)) for i in range(batch.size)], dtype=float)


def _block_is_pmf(kernel: KernelTable, rho: float, d: float, level: int, n: int, rng: np.random.Generator):
    """Weighted pmf of a block's (thresholded) jump count, proposal ``P``, weight ``w``."""
    batch = sample_env_batch(kernel, rho, d, n, rng)
    w = lattice_law(kernel).prob((1.0 - rho) * d, batch.endpoints()) / float(_p0(kernel, d))
    counts = (batch.per_path(batch.U >= level) if level > 0 else batch.counts).astype(np.int64)
    return counts, w


def _pmf_from(counts: np.ndarray, w: np.ndarray) -> np.ndarray:
    pmf = np.bincount(counts, weights=w)
    return pmf / pmf.sum()


def epsilon_good_probe(spec: EventSpec, model: AnnealedModel, kernel: KernelTable, rho: float, n_outer: int,
                       n_inner: int, rng: np.random.Generator, method: str | None = None,
                       n_batches: int = 8) -> StatReport:
    """Nested estimate of ``P(A)``, ``Q_[r,s][P_tau(A^c)]`` and ``Q_[r,s](B^c)``.

    Outer renewal paths come from the bridge sampler at ``beta0``.  For count
    statistics the inner law is estimated block by block (``method="block_is"``):
    each block's count is drawn under ``P`` and reweighted by ``w``, the
    weighted block laws are convolved, and batch means give the stderr.
    Other statistics use exact size-biased sampling (``method="exact"``).
    """
    rule = _event_rule(spec, model, kernel, rho)
    if method is None:
        method = "block_is" if rule.level is not None else "exact"
    if method == "block_is" and rule.level is None:
        raise ValueError("block importance sampling needs a count statistic")
    T = spec.T
    r, s = spec.window
    report = StatReport(f"probe_{spec.regime}")
    params = dict(regime=spec.regime, rho=rho, T=T)

    batch = sample_env_batch(kernel, rho, T, n_outer * n_inner, rng)
    bad = rule.is_bad(_batch_statistic(rule, batch, kernel, T))
    p_a = float(bad.mean())
    report.add("P(A)", p_a, math.sqrt(max(p_a * (1 - p_a), 1.0 / bad.size) / bad.size), bad.size, **params)
    if math.isfinite(rule.p_exact):
        report.add("P(A) exact", rule.p_exact, 0.0, 0, **params)
    if spec.regime in ("sub_two_thirds", "marginal"):
        bound = spec.param("R") ** -2 if spec.regime == "sub_two_thirds" else spec.param("epsilon") ** 2
        report.add("P(A) Chebyshev bound", bound, 0.0, 0, **params)

    sampler = RenewalBridgeSampler(model, model.beta0, s - r)
    outer = sampler.sample(rng, n_outer)
    inner, inner_exact, ess_min, b_fail = [], [], [], []
    for traj in outer:
        pts = traj.points + r
        b_fail.append(not b_event(pts, spec, model))
        if method == "block_is":
            level = rule.level
            pmf_b = [np.ones(1)] * n_batches
            ess_fracs = []
            exact_pmf = np.ones(1)
            for d in np.diff(pts):
                counts, w = _block_is_pmf(kernel, rho, d, level, n_inner, rng)
                ess_fracs.append(w.sum() ** 2 / np.sum(w * w) / n_inner)
                groups = np.array_split(np.arange(n_inner), n_batches)
                pmf_b = [np.convolve(acc, _pmf_from(counts[g], w[g])) for acc, g in zip(pmf_b, groups)]
                if level == 0:
                    exact_pmf = np.convolve(exact_pmf, block_count_law(kernel, rho, d))
            outside = (T - (s - r)) * rho * (float(kernel.tail_mubar_at(level)) if level > 0 else 1.0)
            if outside > 0:
                n_out = int(outside + 12 * math.sqrt(outside + 1) + 20)
                free = stats.poisson.pmf(np.arange(n_out + 1), outside)
                pmf_b = [np.convolve(p, free) for p in pmf_b]
                exact_pmf = np.convolve(exact_pmf, free)
            est = [float(np.sum(p[~rule.is_bad(np.arange(p.size))])) for p in pmf_b]
            inner.append((float(np.mean(est)), float(np.std(est, ddof=1) / math.sqrt(n_batches))))
            ess_min.append(min(ess_fracs) if ess_fracs else 1.0)
            if level == 0:
                inner_exact.append(float(np.sum(exact_pmf[~rule.is_bad(np.arange(exact_pmf.size))])))
        else:
            stat = np.array([_path_statistic(rule, sample_p_tau(kernel, pts, rho, T, rng)) for _ in range(n_inner)])
            m = float(np.mean(~rule.is_bad(stat)))
            inner.append((m, math.sqrt(max(m * (1 - m), 1.0 / n_inner) / n_inner)))
            ess_min.append(1.0)
    vals = np.array([v for v, _ in inner])
    mean, err = mean_stderr(vals)
    report.add("Q[P_tau(A^c)]", mean, err, n_outer, **params)
    if inner_exact:
        m_ex, e_ex = mean_stderr(inner_exact)
        report.add("Q[P_tau(A^c)] exact inner", m_ex, e_ex, n_outer, **params)
    report.add("max inner stderr", max(e for _, e in inner), 0.0, n_inner, **params)
    report.add("min inner ess fraction", min(ess_min), 0.0, n_inner, **params)
    q_bc = float(np.mean(b_fail))
    report.add("Q(B^c)", q_bc, math.sqrt(max(q_bc * (1 - q_bc), 1.0 / n_outer) / n_outer), n_outer, **params)
    collapsed = min(ess_min) < 0.01 or not np.all(np.isfinite(vals))
    if collapsed:
        warnings.warn("inner effective sample collapsed below 1%", RuntimeWarning, stacklevel=2)
    report.add("inner collapse", float(collapsed), 0.0, 0, **params)
    report.summary.append(f"{spec.regime}: P(A)={p_a:.4g}, Q[P_tau(A^c)]={mean:.4g} +- {err:.2g}, "
                          f"Q(B^c)={q_bc:.3g}, min ESS fraction {min(ess_min):.3f}")
    return report


def _path_statistic(rule: _EventRule, path: EnvPath) -> float:
    if rule.per_path is not None:
        return float(rule.per_path(path))
    if rule.level <= 0:
        return float(path.n_jumps)
    return float(np.count_nonzero(path.U >= rule.level))


def pinned_probability_check(kernel: KernelTable, points, rho: float, n: int, rng: np.random.Generator):
    """``P_tau(Y = 0 at every renewal point)`` by exact sampling, with the lower bound ``e^{-(1-rho) s}``."""
    points = np.asarray(points, dtype=float)
    hits = 0
    for _ in range(n):
        path = size_biased_blocks(kernel, points, rho, rng, enrich=False)
        hits += int(np.all(path.y_at(points) == 0))
    p = hits / n
    return p, math.sqrt(max(p * (1 - p), 1.0 / n) / n), math.exp(-(1.0 - rho) * (points[-1] - points[0]))


def pinned_probability_exact(kernel: KernelTable, points, rho: float) -> float:
    """``prod_i P(W_{rho d_i} = 0) P(W_{(1-rho) d_i} = 0) / P(W_{d_i} = 0)``."""
    d = np.diff(np.asarray(points, dtype=float))
    return float(np.prod(_p0(kernel, rho * d) * _p0(kernel, (1 - rho) * d) / _p0(kernel, d)))


# ---------------------------------------------------------------------------
# Volterra-based experiments


def _node_values(sol, times) -> np.ndarray:
    idx = np.searchsorted(sol.times, np.asarray(times, dtype=float) + 1e-9, side="right") - 1
    return sol.zeta[idx]


def _free_values(sol, times) -> np.ndarray:
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (sol.zeta[1:] + sol.zeta[:-1]) * np.diff(sol.times))])
    idx = np.searchsorted(sol.times, np.asarray(times, dtype=float) + 1e-9, side="right") - 1
    return 1.0 + cum[idx]


def _grid_step(horizons, step: float) -> float:
    """Largest step not above ``step`` that puts every horizon on the grid."""
    base = np.asarray(horizons, dtype=float)
    unit = math.gcd(*[int(round(h * 1000)) for h in base]) / 1000.0
    n = max(1, math.ceil(unit / step))
    return unit / n


def _task_seed(rng: np.random.Generator) -> int:
    """Master seed for per-environment streams, so results ignore the worker count."""
    return int(rng.integers(2**63))


def _solve_envs(kernel: KernelTable, model: AnnealedModel, rho: float, beta: float, T_max: float, h: float,
                reps: int, seed: int, reader, workers: int = 1, offset: int = 0,
                moving: bool = False) -> np.ndarray:
    """``reader(solution)`` for ``reps`` environments on ``[0, T_max]``, environment ``i`` from stream ``i``.

    With ``moving`` the environments are conditioned on ``Y`` leaving 0 before ``T_max``.
    """
    lattice_law(kernel).ensure_range(T_max)

    def task(i):
        rng = stream(seed, offset + i)
        env = sample_env(kernel, rho, T_max, rng)
        while moving and not np.any(env.V):
            env = sample_env(kernel, rho, T_max, rng)
        return reader(volterra_quenched(kernel, model, env, beta, T_max, h))

    return np.array(map_tasks(task, reps, workers))


def normalized_curve(kernel: KernelTable, model: AnnealedModel, rho: float, beta: float, T_grid, reps: int,
                     rng: np.random.Generator, step: float | None = None, workers: int = 1,
                     moving: bool = False) -> np.ndarray:
    """``W_{beta,T}`` for each environment (rows) and horizon (columns), one sweep per environment."""
    T_grid = np.asarray(T_grid, dtype=float)
    T_max = float(T_grid.max())
    h = _grid_step(T_grid, model.step if step is None else step)
    tz, zc = annealed_partition_curve(model, beta, T_max, h)
    z_at = zc[np.round(T_grid / h).astype(int)]
    vals = _solve_envs(kernel, model, rho, beta, T_max, h, reps, _task_seed(rng),
                       lambda sol: _node_values(sol, T_grid), workers, moving=moving)
    return vals / z_at


def constant_environment(kernel: KernelTable, model: AnnealedModel, rho: float, beta: float, T: float,
                         step: float | None = None) -> tuple[float, float]:
    """``(P(Y_t = 0 for t <= T), W_{beta,T})`` on that event.

    Every jump displaces by 0 with probability ``J(0)``, so the event has
    probability ``exp(-rho T (1 - J(0)))`` and ``W`` there is deterministic.
    """
    h = _grid_step([T], model.step if step is None else step)
    flat = EnvPath(rho, T, np.zeros(0), np.zeros(0, dtype=np.int64))
    sol = volterra_quenched(kernel, model, flat, beta, T, h)
    z = annealed_partition_curve(model, beta, T, h)[1][-1]
    return math.exp(-rho * T * (1.0 - float(kernel.j(0)))), float(sol.zeta[-1] / z)


def criticality_experiment(model: AnnealedModel, kernel: KernelTable, rho: float, T_grid, reps: int,
                           rng: np.random.Generator, n_boot: int = 400, step: float | None = None,
                           workers: int = 1) -> StatReport:
    """Distribution of ``W_{beta0,T}`` per ``T`` and the slope of ``log median`` against ``log T``."""
    T_grid = np.asarray(T_grid, dtype=float)
    if T_grid.size < 2:
        raise ValueError("a slope needs at least two horizons")
    w = normalized_curve(kernel, model, rho, model.beta0, T_grid, reps, rng, step, workers)
    report = StatReport("criticality")
    for j, T in enumerate(T_grid):
        col = w[:, j]
        mean, err = mean_stderr(col)
        report.add("median", np.median(col), n=reps, rho=rho, T=T)
        report.add("q25", np.quantile(col, 0.25), n=reps, rho=rho, T=T)
        report.add("q75", np.quantile(col, 0.75), n=reps, rho=rho, T=T)
        report.add("mean", mean, err, reps, rho=rho, T=T)
    x = np.log(T_grid)
    slope = float(np.polyfit(x, np.log(np.median(w, axis=0)), 1)[0])
    boot = []
    for _ in range(n_boot):
        pick = rng.integers(0, reps, reps)
        boot.append(np.polyfit(x, np.log(np.median(w[pick], axis=0)), 1)[0])
    report.add("slope log median", slope, float(np.std(boot, ddof=1)), reps, rho=rho, T=math.nan)
    report.summary.append(f"rho={rho}: slope of log median W against log T = {slope:.4f}")
    return report


def irrelevance_gap(model: AnnealedModel, kernel: KernelTable, rho: float, beta_grid, T: float | None, reps: int,
                    rng: np.random.Generator, step: float | None = None, workers: int = 1) -> StatReport:
    """``(1/T) log E[1 ^ W_{beta,T}]`` per ``beta``, with ``T = 3/F(beta)`` unless given."""
    report = StatReport("irrelevance")
    for beta in beta_grid:
        f = free_energy(model, beta)
        horizon = 3.0 / f if T is None else float(T)
        # W is deterministic when Y never moves; that atom is weighted exactly and
        # the sample is drawn from the complementary event
        p_flat, w_flat = constant_environment(kernel, model, rho, beta, horizon, step)
        w = normalized_curve(kernel, model, rho, beta, [horizon], reps, rng, step, workers, moving=True)[:, 0]

        def stratified(values, at_flat):
            m, e = mean_stderr(values)
            return p_flat * at_flat + (1.0 - p_flat) * m, (1.0 - p_flat) * e

        low, low_err = stratified(np.minimum(w, 1.0), min(w_flat, 1.0))
        high, high_err = stratified(np.maximum(w, 1.0), max(w_flat, 1.0))
        mean, err = stratified(w, w_flat)
        gap = math.log(low) / horizon
        gap_err = low_err / (low * horizon)
        params = dict(rho=rho, beta=float(beta), T=horizon)
        report.add("P(Y constant)", p_flat, 0.0, 0, **params)
        report.add("W if Y constant", w_flat, 0.0, 0, **params)
        report.add("E[1^W]", low, low_err, reps, **params)
        report.add("gap", gap, gap_err, reps, **params)
        report.add("gap/F", gap / f, gap_err / f, reps, **params)
        report.add("E[W]", mean, err, reps, **params)
        report.add("E[1vW]", high, high_err, reps, **params)
        report.summary.append(f"beta={beta:.6g}: (1/T) log E[1^W] = {gap:.4g} +- {gap_err:.2g} at T={horizon:.4g}")
    return report


def quenched_free_energy(model: AnnealedModel, kernel: KernelTable, rho: float, beta: float, T_grid, reps: int,
                         rng: np.random.Generator, step: float | None = None, workers: int = 1) -> StatReport:
    """``(1/T) E[log Z^Y_T]`` per ``T`` and its linear extrapolation in ``1/T``."""
    T_grid = np.asarray(T_grid, dtype=float)
    T_max = float(T_grid.max())
    h = _grid_step(T_grid, model.step if step is None else step)
    logs = _solve_envs(kernel, model, rho, beta, T_max, h, reps, _task_seed(rng),
                       lambda sol: np.log(_free_values(sol, T_grid)) / T_grid, workers)
    report = StatReport("quenched_free_energy")
    means = logs.mean(axis=0)
    errs = logs.std(axis=0, ddof=1) / math.sqrt(reps) if reps > 1 else np.full(T_grid.size, np.nan)
    for T, m, e in zip(T_grid, means, errs):
        report.add("(1/T) E log Z", m, e, reps, rho=rho, beta=beta, T=T)
    x = 1.0 / T_grid
    if T_grid.size >= 2:
        wts = 1.0 / np.maximum(errs, 1e-12) if reps > 1 and np.all(errs > 0) else np.ones_like(x)
        coef, cov = np.polyfit(x, means, 1, w=wts, cov="unscaled") if T_grid.size > 2 else (np.polyfit(x, means, 1),
                                                                                            np.zeros((2, 2)))
        f_hat = float(coef[1])
        f_err = float(math.sqrt(max(cov[1, 1], 0.0)))
    else:
        f_hat, f_err = float(means[0]), float(errs[0])
    report.add("F_hat", f_hat, f_err, reps, rho=rho, beta=beta, T=math.inf)
    report.add("annealed F", free_energy(model, beta), 0.0, 0, rho=rho, beta=beta, T=math.inf)
    return report


@dataclass
class FractionalMoments:
    n: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    n_env: int
    complete: bool
    block_T: float
    theta: float
    annealed: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def spread(self) -> float:
        return float(self.values.max() / self.values.min())


def fractional_moment(model: AnnealedModel, kernel: KernelTable, rho: float, beta: float, theta: float,
                      n_blocks: int, mc_budget: int, rng: np.random.Generator, step: float | None = None,
                      max_seconds: float | None = None, block_T: float | None = None,
                      workers: int = 1) -> FractionalMoments:
    """``E[(Z^Y_{beta, nT})^theta]`` for ``n = 1..n_blocks`` with ``T = 1/F(beta)``.

    Each environment is solved once on ``[0, n_blocks T]``; ``mc_budget`` caps
    the number of environments and ``max_seconds`` the wall time, in which
    case the partial result is returned with ``complete=False``.
    """
    if n_blocks > 8:
        raise ValueError("at most 8 blocks")
    T = 1.0 / free_energy(model, beta) if block_T is None else float(block_T)
    if T > 500:
        raise ValueError(f"block length {T:.4g} above 500")
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    if theta < 1.0:
        # theta = 1 is the annealed control and needs no coarse-graining condition
        CoarseGrainConfig(theta, T, n_blocks).check(model.alpha)
    horizons = T * np.arange(1, n_blocks + 1)
    h = _grid_step([T], model.step if step is None else step)
    n_env = 1 if rho == 0 else mc_budget
    seed = _task_seed(rng)
    chunk = max(1, workers) * 4
    start = time.monotonic()
    parts = []
    done = 0
    while done < n_env:
        if max_seconds is not None and done and time.monotonic() - start > max_seconds:
            break
        size = min(chunk, n_env - done)
        part = _solve_envs(kernel, model, rho, beta, float(horizons[-1]), h, size, seed,
                           lambda sol: _free_values(sol, horizons) ** theta, workers, offset=done)
        parts.append(part)
        done += size
    vals = np.concatenate(parts)
    if vals.shape[0] > 1:
        mean, err = vals.mean(axis=0), vals.std(axis=0, ddof=1) / math.sqrt(vals.shape[0])
    else:
        mean, err = vals[0], np.zeros(n_blocks)
    annealed = np.array([annealed_free_partition(model, beta, float(x), h) for x in horizons])
    return FractionalMoments(np.arange(1, n_blocks + 1), mean, err, vals.shape[0], done == n_env, T, theta,
                             annealed)
