"""End-to-end acceptance criteria at their stated tolerances.

Each test records one PASS/FAIL line, printed in the terminal summary.
"""

import functools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, kernel_for, model_for
from helpers import binned_chi2_pvalue, weighted_two_sample_pvalue, within
from rwpm import analysis as an
from rwpm.environment import sample_bridges, sample_env, sample_env_batch, sample_walk_endpoints
from rwpm.homogeneous import (annealed_partition_curve, beta_for_free_energy, doney_constant, doney_ratio,
                              free_energy, mean_beta, nu_exponent, renewal_density_at)
from rwpm.partition import mc_normalized, normalized_volterra, volterra_quenched
from rwpm.rng import stream
from rwpm.spectral import fit_power_exponent, lattice_law, return_prob_curve, spectral_grid, transition_probs

SEED = 20261016


def criterion(number, title, budget):
    """Record a PASS/FAIL line with the wall time, which must stay within ``budget`` seconds."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.monotonic()
            try:
                detail = fn(*args, **kwargs)
                elapsed = time.monotonic() - start
                assert elapsed <= budget, f"took {elapsed:.0f}s, budget {budget}s"
            except BaseException as exc:
                ACCEPTANCE.append(f"C{number:<2} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0][:160]}")
                raise
            ACCEPTANCE.append(f"C{number:<2} PASS  {title}: {detail} ({elapsed:.0f}s)")

        return run

    return wrap


@criterion(1, "kernel exactness", 60)
def test_c01_kernel_exactness():
    k = kernel_for(2 / 3)
    mass = abs(k.j_values[0] + 2.0 * k.tail_j_at(0) - 1.0)
    assert mass <= 1e-12
    # J(3) recovered by telescoping the second marginal differences
    tele = abs(np.sum(k.j_values[3:-1] - k.j_values[4:]) + k.j_values[-1] - k.j(3))
    assert tele <= 1e-14
    n = np.arange(k.x_max)
    tail = np.max(np.abs(k.tail_mubar[n] - ((2 * n + 1) * k.j_values[n] + 2.0 * k.tail_j[n])))
    assert tail <= 1e-12
    ratio = k.tail_mubar_at(10**5) / (10**5 * k.j(10**5))
    assert ratio == pytest.approx(2 * (1 + 2 / 3) / (2 / 3), rel=0.01)
    return f"mass {mass:.1e}, telescoping {tele:.1e}, tail identity {tail:.1e}, ratio {ratio:.4f}"


@criterion(2, "local limit", 300)
def test_c02_local_limit():
    t = np.geomspace(1e2, 1e4, 20)
    slopes = []
    for gamma in (0.4, 0.5, 0.75):
        k = kernel_for(gamma)
        slope = fit_power_exponent(t, spectral_grid(k).p0(t))
        assert abs(slope - 1 / gamma) <= 0.05
        slopes.append(slope)
        curve = return_prob_curve(k)
        assert np.all(np.diff(curve.p0) <= 0)
        previous = None
        for tau in (0.1, 1.0, 10.0, 100.0, 1000.0):
            probs = transition_probs(k, tau, 400).probs
            assert np.all(np.diff(probs) <= 0)
            central = probs[0] + 2.0 * np.concatenate([[0.0], np.cumsum(probs[1:])])
            if previous is not None:
                assert np.all(central <= previous + 1e-12)
            previous = central
    return "exponents " + ", ".join(f"{s:.4f}" for s in slopes)


@criterion(3, "homogeneous free energy", 600)
def test_c03_free_energy():
    m = model_for(0.75)
    at_critical = free_energy(m, m.beta0)
    assert abs(at_critical) <= 1e-8
    f = np.array([free_energy(m, b) for b in m.beta0 * np.linspace(1.0, 2.0, 40)])
    assert np.all(np.diff(f) >= 0) and np.all(np.diff(f, 2) >= -1e-12)
    nu_low, nu_high = nu_exponent(model_for(0.4)), nu_exponent(m)
    assert abs(nu_low - 1.0) <= 0.05
    assert abs(nu_high - 3.0) <= 0.15
    return f"F(beta0) {at_critical:.1e}, nu {nu_low:.4f} at gamma 0.4, {nu_high:.4f} at gamma 0.75"


@criterion(4, "renewal asymptotics", 300)
def test_c04_doney():
    m = model_for(0.75)
    ratio = doney_ratio(m, 1e3)[0] / doney_constant(m.alpha)
    assert ratio == pytest.approx(1.0, rel=0.10)
    m04 = model_for(0.4)
    limit = renewal_density_at(m04, 1e4)[0] * mean_beta(m04, m04.beta0)
    assert limit == pytest.approx(1.0, rel=0.02)
    return f"u t^2 K / constant {ratio:.4f} at gamma 0.75, u m {limit:.4f} at gamma 0.4"


@criterion(5, "construction equivalence", 300)
def test_c05_construction_equivalence():
    k = kernel_for(0.6)
    rng = stream(SEED, 5)
    enriched = sample_env_batch(k, 0.4, 50.0, 10**5, rng).endpoints()
    plain = sample_walk_endpoints(k, 0.4 * 50.0, rng, 10**5)
    p = binned_chi2_pvalue(enriched, plain, n_bins=40)
    assert p > 1e-3
    return f"chi-square p {p:.3f}"


@criterion(6, "size-biased marginal", 600)
def test_c06_size_biased_identity():
    k = kernel_for(0.75)
    rho, t = 0.3, 20.0
    rng = stream(SEED, 6)
    batch = sample_env_batch(k, rho, t, 10**5, rng)
    ends = batch.endpoints()
    law = lattice_law(k)
    w = law.prob((1 - rho) * t, ends) / law.p0(t)
    bridges = sample_bridges(k, t, 10**5, rng)
    bridge_vals = np.array([int(b.steps[b.times <= rho * t].sum()) for b in bridges])
    cuts = np.unique(np.quantile(bridge_vals, np.linspace(0, 1, 21)[1:-1]))
    edges = np.concatenate([[-np.inf], cuts + 0.5, [np.inf]])
    p = weighted_two_sample_pvalue(ends, w, bridge_vals, edges)
    assert p > 1e-3
    return f"weighted chi-square p {p:.3f} on {edges.size - 1} bins"


@criterion(7, "stochastic domination", 600)
def test_c07_domination():
    k = kernel_for(0.75)
    rep = an.domination_report(k, 0.5, [5.0, 20.0, 50.0], 10**5, stream(SEED, 7))
    worst = -math.inf
    for t in (5.0, 20.0, 50.0):
        for name in ("jump count", "thresholded count", "sum xi(U)"):
            row = rep.get(f"E_t[{name}]", t=t)
            z = (row["value"] - rep.get(f"E[{name}]", t=t)["value"]) / row["stderr"]
            assert z <= 4.0, f"{name} at t={t}: z={z:.2f}"
            worst = max(worst, z)
    return f"largest (E_t - E)/stderr {worst:.2f}"


def _regime_functional(kernel, regime, batch, d, level=None):
    if regime == "sub_two_thirds":
        return batch.counts.astype(float)
    if regime == "criticality":
        late = (batch.theta > d / 2) & (batch.U * an._p0(kernel, batch.theta) >= 1.0)
        return batch.per_path(late)
    if regime == "marginal":
        p0d = float(an._p0(kernel, d))
        keep = (batch.U >= math.ceil(1 / p0d)) & (batch.U <= math.floor(2 / p0d))
        return batch.per_path(np.where(keep, an._xi(kernel, batch.U), 0.0))
    return batch.per_path(batch.U >= level)


@criterion(8, "Mecke closed forms", 300)
def test_c08_mecke():
    rng = stream(SEED, 8)
    rho = 0.5
    m75, m23 = model_for(0.75), model_for(2 / 3)
    beta = 1.3 * m75.beta0
    f = free_energy(m75, beta)
    level = int(math.ceil(float(an.amplitude_level(m75.kernel, 1.0 / f))))
    cases = [(m75, "sub_two_thirds", 6.0), (m75, "criticality", 30.0), (m23, "marginal", 6.0),
             (m75, "truncated_fenergy", 8.0)]
    worst = 0.0
    for model, regime, d in cases:
        kernel = model.kernel
        rep = an.expectation_shift_report(model, kernel, rho, regime, [d], beta=beta)
        batch, w = an.weighted_batch(kernel, rho, d, 10**5, rng)
        values = _regime_functional(kernel, regime, batch, d, level)
        est = an.self_normalized(values, w)
        plain_err = values.std(ddof=1) / math.sqrt(values.size)
        for target, got, err in ((rep.get("E_tau", block=d)["value"], est.value, est.stderr),
                                 (rep.get("E", block=d)["value"], values.mean(), plain_err)):
            assert within(got, target, err), f"{regime}: {got} vs {target} +- {err}"
            worst = max(worst, abs(got - target) / err)
    for lv in (0, 5, 40):
        batch, w = an.weighted_batch(m75.kernel, rho, 8.0, 10**5, rng)
        est = an.self_normalized(batch.per_path(batch.U >= lv), w)
        target = an.weighted_jump_mean(m75.kernel, rho, 8.0, lv)
        assert within(est.value, target, est.stderr)
        worst = max(worst, abs(est.value - target) / est.stderr)
    bound = an.shift_bound_report(m75.kernel, m75, rho, beta, np.linspace(0.25, 1.0 / f, 12))
    assert np.all(bound.values("bound holds") == 1.0)
    return f"largest |MC - closed form|/stderr {worst:.2f}, shift bound holds on 12 horizons"


@criterion(9, "partition engines", 1800)
def test_c09_partition_engines():
    m = model_for(0.75)
    k = m.kernel
    T = 30.0
    flat = sample_env(k, 0.0, T, stream(SEED, 9, 0))
    zero_gap = 0.0
    for rel in (1.0, 1.3):
        beta = rel * m.beta0
        sol = volterra_quenched(k, m, flat, beta, T)
        z = annealed_partition_curve(m, beta, T, sol.step)[1][-1]
        zero_gap = max(zero_gap, abs(sol.zeta[-1] / z - 1.0))
    assert zero_gap <= 1e-6

    rho, n_env = 0.5, 10**4
    # the constant environment is an atom of small mass and large W; it is weighted exactly
    p_flat, w_flat = an.constant_environment(k, m, rho, m.beta0, T)
    w = an.normalized_curve(k, m, rho, m.beta0, [T], n_env, stream(SEED, 9, 1), moving=True)[:, 0]
    mean = p_flat * w_flat + (1 - p_flat) * w.mean()
    err = (1 - p_flat) * w.std(ddof=1) / math.sqrt(n_env)
    assert within(mean, 1.0, err)

    worst = 0.0
    for i in range(20):
        rng = stream(SEED, 9, 2, i)
        path = sample_env(k, 0.3, T, rng)
        mc = mc_normalized(k, m, path, m.beta0, T, 20000, rng)
        ref = normalized_volterra(k, m, path, m.beta0, T)
        assert within(mc.value, ref, mc.stderr), f"environment {i}: {mc.value} +- {mc.stderr} vs {ref}"
        worst = max(worst, abs(mc.value - ref) / mc.stderr)
    return (f"rho=0 gap {zero_gap:.1e}, E[W] {mean:.4f} +- {err:.4f}, "
            f"largest |MC - Volterra|/stderr {worst:.2f}")


@criterion(10, "criticality decay", 7200)
def test_c10_criticality_decay():
    m = model_for(0.8)
    T_grid = [25.0, 50.0, 100.0, 200.0]
    slopes, errs = {}, {}
    for rho, reps in ((0.0, 1), (0.2, 120), (0.5, 1500), (0.8, 120)):
        rep = an.criticality_experiment(m, m.kernel, rho, T_grid, reps, stream(SEED, 10, int(rho * 10)))
        row = rep.get("slope log median", rho=rho)
        slopes[rho], errs[rho] = row["value"], row["stderr"]
    detail = "slopes " + ", ".join(f"rho={r}: {slopes[r]:+.4f} +- {errs[r]:.3f}" for r in slopes)
    assert abs(slopes[0.0]) <= 0.01, detail
    assert slopes[0.5] <= -0.02, detail
    assert slopes[0.8] < slopes[0.2], detail
    return detail


@criterion(11, "irrelevance gap", 3600)
def test_c11_irrelevance_gap():
    m = model_for(0.8)
    beta = beta_for_free_energy(m, 0.15)
    rep = an.irrelevance_gap(m, m.kernel, 0.5, [beta], None, 4000, stream(SEED, 11))
    gap = rep.get("gap")
    mean = rep.get("E[W]")
    assert gap["T"] == pytest.approx(20.0)
    assert gap["value"] + 3 * gap["stderr"] < 0
    assert within(mean["value"], 1.0, mean["stderr"])
    return (f"(1/T) log E[1^W] {gap['value']:.4f} +- {gap['stderr']:.4f} at T=20, "
            f"E[W] {mean['value']:.3f} +- {mean['stderr']:.3f}")


@criterion(12, "marginal statistics", 1200)
def test_c12_marginal_statistics():
    T_grid = np.geomspace(50, 800, 9)
    rho = 0.5
    rng = stream(SEED, 12)
    parts = []
    for kappa, expected in ((0.0, 1.0), (1.0, 3.0)):
        m = model_for(2 / 3, "log_power" if kappa else "constant", kappa)
        ratios = []
        for T in T_grid:
            weights = an.marginal_weights(m.kernel, m, T)
            ratios.append(an.marginal_moments(weights, rho)[1] / (rho * T * weights.S_of_T))
        ratios = np.array(ratios)
        assert np.all(ratios > 0) and ratios.max() / ratios.min() <= 1.25
        # the closed-form variance against sampled environments at both ends
        for T in (T_grid[0], T_grid[-1]):
            weights = an.marginal_weights(m.kernel, m, T)
            batch = sample_env_batch(m.kernel, rho, T, 10**5, rng)
            values = batch.per_path(np.where(batch.U <= weights.threshold, weights.xi(batch.U), 0.0))
            centred = values - values.mean()
            var_err = math.sqrt((np.mean(centred**4) - values.var() ** 2) / values.size)
            assert within(values.var(ddof=1), an.marginal_moments(weights, rho)[1], var_err)
        exponent = an.psi_growth_exponent(m.kernel, m, T_grid)
        assert abs(exponent - expected) <= 0.15
        parts.append(f"kappa={kappa:g}: ratio in [{ratios.min():.3f}, {ratios.max():.3f}], psi exponent {exponent:.3f}")
    return "; ".join(parts)


@criterion(13, "epsilon-good probe", 1800)
def test_c13_probe():
    m = model_for(0.4)
    R = 5.0
    spec = an.EventSpec("sub_two_thirds", dict(R=R), 200.0)
    rep = an.epsilon_good_probe(spec, m, m.kernel, 0.5, 20, 2000, stream(SEED, 13))
    p = rep.get("P(A)")
    assert p["value"] <= 1 / R**2 + 3 * p["stderr"]
    rows = [rep.get(name)["value"] for name in ("Q[P_tau(A^c)]", "max inner stderr", "Q(B^c)")]
    assert all(math.isfinite(v) for v in rows)
    ess = rep.get("min inner ess fraction")["value"]
    assert ess >= 0.10
    assert rep.get("inner collapse")["value"] == 0.0
    return f"P(A) {p['value']:.2g} +- {p['stderr']:.1g}, min inner ess fraction {ess:.3f}"
