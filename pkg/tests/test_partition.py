import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats
from scipy.interpolate import BarycentricInterpolator

from conftest import kernel_for, model_for
from helpers import within
from rwpm.environment import EnvPath, sample_env, sample_env_batch
from rwpm.homogeneous import annealed_partition, annealed_partition_curve, free_energy, renewal_density
from rwpm.partition import (PartitionResult, RenewalBridgeSampler, RenewalTrajectory, kw, mc_normalized,
                            normalized_volterra, quenched_nodes, renewal_bridge_sampler, volterra_quenched,
                            weight_products)
from rwpm.spectral import lattice_law


def series_terms(model, path, beta, T, n_terms, n_nodes=24, n_quad=40):
    """Terms of the renewal expansion of the constrained partition by direct integration.

    Term ``k`` is the integral over ``0 < s_1 < ... < s_{k-1} < T`` of the
    product of ``K_w`` factors.  Each partial integral is tabulated on
    Chebyshev nodes of the intervals where ``Y`` is constant and integrated
    by Gauss-Legendre, which is spectrally accurate since the integrand is
    smooth on each interval.
    """
    law = lattice_law(model.kernel)
    c = beta / model.beta0
    edges = np.concatenate([[0.0], path.theta[path.theta < T], [T]])
    levels = path.levels[: edges.size - 1]
    cheb = 0.5 * (1 - np.cos(np.pi * np.arange(n_nodes) / (n_nodes - 1)))
    gx, gw = np.polynomial.legendre.leggauss(n_quad)
    gx, gw = 0.5 * (gx + 1), 0.5 * gw
    nodes = [a + (b - a) * cheb for a, b in zip(edges[:-1], edges[1:])]

    def k_w(s, ys, t, yt):
        return model.beta0 * law.prob((1 - path.rho) * (t - s), yt - ys)

    g = [k_w(0.0, 0, x, y) for x, y in zip(nodes, levels)]
    terms = [g[-1][-1]]
    for _ in range(n_terms - 1):
        interp = [BarycentricInterpolator(x, v) for x, v in zip(nodes, g)]
        new = []
        for j, (xs, yt) in enumerate(zip(nodes, levels)):
            vals = np.zeros(xs.size)
            for m, t in enumerate(xs):
                for i in range(j + 1):
                    a, b = edges[i], min(edges[i + 1], t)
                    if b > a:
                        s = a + (b - a) * gx
                        vals[m] += (b - a) * np.sum(gw * interp[i](s) * k_w(s, levels[i], t, yt))
            new.append(vals)
        g = new
        terms.append(g[-1][-1])
    return np.array(terms) * c ** np.arange(1, n_terms + 1)


FIXED_PATH = EnvPath(0.3, 2.0, [0.7, 1.3], [2, -1], [2, 3])


def test_kw_without_disorder(m75):
    path = EnvPath(0.0, 10.0, [], [], [])
    for s, t in ((0.0, 1.0), (2.5, 9.0)):
        assert kw(m75.kernel, m75, s, t, path) == pytest.approx(float(m75.K(t - s)), rel=1e-10)


def test_kw_mean_is_k_and_capped(m75, rng):
    rho, t = 0.4, 5.0
    law = lattice_law(m75.kernel)
    values = np.array([kw(m75.kernel, m75, 1.0, t, sample_env(m75.kernel, rho, t, rng)) for _ in range(20000)])
    target = float(m75.K(t - 1.0))
    assert within(values.mean(), target, values.std(ddof=1) / math.sqrt(values.size))
    assert values.max() <= m75.beta0 * float(law.p0((1 - rho) * (t - 1.0))) * (1 + 1e-12)


def test_kw_rejects_bad_interval(m75):
    with pytest.raises(ValueError):
        kw(m75.kernel, m75, 1.0, 1.0, FIXED_PATH)


def test_quenched_nodes_keep_both_limits():
    path = EnvPath(0.5, 1.0, [0.25, 0.6], [3, -1], [3, 1])
    times, levels, gidx = quenched_nodes(path, 1.0, 4)
    at = times == 0.25
    assert list(levels[at]) == [0, 3]  # jump on a grid node: left limit then the grid node
    at = times == 0.6
    assert list(levels[at]) == [3, 2] and np.all(gidx[at] < 0)
    assert np.all(np.diff(times) >= 0)


def test_small_beta_limit(m75):
    beta = 1e-9
    sol = volterra_quenched(m75.kernel, m75, FIXED_PATH, beta, 2.0)
    assert sol.free_value == pytest.approx(1.0, abs=1e-8)
    first = beta / m75.beta0 * kw(m75.kernel, m75, 0.0, 2.0, FIXED_PATH)
    assert sol.zeta[-1] == pytest.approx(first, rel=1e-6)


@pytest.mark.parametrize("rel", [1.0, 1.4])
def test_no_disorder_matches_annealed(m75, rel):
    beta = rel * m75.beta0
    path = EnvPath(0.0, 20.0, [], [], [])
    sol = volterra_quenched(m75.kernel, m75, path, beta, 20.0, step=0.05)
    t, z = annealed_partition_curve(m75, beta, 20.0, 0.05)
    assert np.allclose(sol.times, t)
    assert np.max(np.abs(sol.zeta - z) / np.maximum(z, 1e-300)) <= 1e-6


def test_low_order_expansion_oracle(m75):
    """First three terms by direct integration, then the remainder."""
    T = 2.0
    terms = series_terms(m75, FIXED_PATH, m75.beta0, T, 12)
    sol = volterra_quenched(m75.kernel, m75, FIXED_PATH, m75.beta0, T)
    head = terms[:3].sum()
    # remainder of the cap series bounds what the first three terms miss
    law = lattice_law(m75.kernel)
    h = 1e-3
    grid = np.arange(0, int(round(T / h)) + 1) * h
    cap = m75.beta0 * law.p0((1 - FIXED_PATH.rho) * np.maximum(grid, 1e-9))
    conv, tail = cap.copy(), 0.0
    for k in range(2, 30):
        conv = np.convolve(conv, cap)[: grid.size] * h
        if k >= 4:
            tail += conv[-1]
    assert head <= sol.zeta[-1] <= head + 1.01 * tail
    assert abs(sol.zeta[-1] - terms.sum()) <= 1e-4
    assert terms[-1] < 1e-10


def test_free_partition_integrates_constrained(m75):
    sol = volterra_quenched(m75.kernel, m75, FIXED_PATH, m75.beta0, 2.0, step=0.01)
    coarse = volterra_quenched(m75.kernel, m75, FIXED_PATH, m75.beta0, 2.0, step=0.05)
    assert sol.free_value == pytest.approx(1.0 + integrate.trapezoid(sol.zeta, sol.times), abs=1e-6)
    assert coarse.free_value == pytest.approx(sol.free_value, abs=1e-6)


@pytest.mark.filterwarnings("ignore:step")
def test_grid_convergence(m75, rng):
    path = sample_env(m75.kernel, 0.5, 15.0, rng)
    beta = 1.2 * m75.beta0
    for extrapolate in (False, True):
        a = volterra_quenched(m75.kernel, m75, path, beta, 15.0, step=0.1, extrapolate=extrapolate)
        b = volterra_quenched(m75.kernel, m75, path, beta, 15.0, step=0.05, extrapolate=extrapolate)
        assert abs(a.zeta[-1] - b.zeta[-1]) <= 4 * a.error_estimate


def test_coarse_step_warns(m75):
    path = EnvPath(0.5, 2.0, [0.5, 0.52], [1, 1], [1, 1])
    with pytest.warns(RuntimeWarning, match="coarser"):
        volterra_quenched(m75.kernel, m75, path, m75.beta0, 2.0, step=0.1, extrapolate=False)


def test_horizon_beyond_path_rejected(m75):
    with pytest.raises(ValueError):
        volterra_quenched(m75.kernel, m75, FIXED_PATH, m75.beta0, 3.0)


def test_partition_result_validation():
    r = PartitionResult.of(2.5, "free", "volterra", grid_step=0.05)
    assert r.log_value == pytest.approx(math.log(2.5))
    with pytest.raises(ValueError):
        PartitionResult.of(1.0, "total", "volterra")
    with pytest.raises(ValueError):
        PartitionResult.of(1.0, "free", "exact")
    with pytest.raises(ValueError):
        PartitionResult(0.0, -math.inf, "free", "mc")
    with pytest.raises(ValueError):
        PartitionResult(2.0, 0.0, "free", "mc")


def test_mc_without_disorder_is_one(m75, rng):
    path = EnvPath(0.0, 10.0, [], [], [])
    r = mc_normalized(m75.kernel, m75, path, m75.beta0, 10.0, 50, rng)
    assert r.value == 1.0 and r.kind == "normalized" and r.method == "mc"


def test_annealing_identity_pairs(m75, rng):
    """Averaged over environment and trajectory, the weight product has mean one."""
    T, rho = 10.0, 0.5
    sampler = RenewalBridgeSampler(m75, m75.beta0, T)
    traj = sampler.sample(rng, 20000)
    batch = sample_env_batch(m75.kernel, rho, T, len(traj), rng)
    w = np.array([weight_products(m75.kernel, [tr], batch.path(i))[0] for i, tr in enumerate(traj)])
    assert within(w.mean(), 1.0, w.std(ddof=1) / math.sqrt(w.size))


def test_mc_matches_volterra_fixed_path(m75):
    rng = np.random.default_rng(7)
    T = 30.0
    path = sample_env(m75.kernel, 0.3, T, rng)
    beta = m75.beta0
    mc = mc_normalized(m75.kernel, m75, path, beta, T, 40000, rng)
    ref = normalized_volterra(m75.kernel, m75, path, beta, T)
    assert within(mc.value, ref, mc.stderr)


def test_jensen_gap(m75, rng):
    T, rho = 30.0, 0.3
    logs = np.array([math.log(normalized_volterra(m75.kernel, m75, sample_env(m75.kernel, rho, T, rng),
                                                  m75.beta0, T)) for _ in range(60)])
    assert logs.mean() + 4 * logs.std(ddof=1) / math.sqrt(logs.size) < 0


def test_bridge_endpoint_and_increments(m75, rng):
    for tr in renewal_bridge_sampler(m75, 1.2 * m75.beta0, 12.0, rng, n=500):
        assert tr.points[0] == 0.0 and tr.points[-1] == 12.0
        assert np.all(tr.increments > 0)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        RenewalTrajectory(np.array([0.0, 2.0, 1.0]), 1.0, False, 3.0)
    with pytest.raises(ValueError):
        RenewalTrajectory(np.array([0.0, 1.0]), 1.0, True, 3.0)


def test_bridge_rejects_subcritical(m75):
    with pytest.raises(ValueError):
        RenewalBridgeSampler(m75, 0.5 * m75.beta0, 5.0)


@pytest.mark.parametrize("T", [5.0, 20.0])
def test_bridge_expected_point_count(m75, rng, T):
    """Interior points of the bridge have intensity u(s) u(T - s) / u(T)."""
    curve = renewal_density(m75, T, 0.01)
    u = curve.u
    dens = u * u[::-1] / u[-1]
    expected = integrate.simpson(dens[1:-1], x=curve.t[1:-1])
    counts = np.array([tr.points.size - 2 for tr in RenewalBridgeSampler(m75, m75.beta0, T).sample(rng, 20000)])
    assert within(counts.mean(), expected, counts.std(ddof=1) / math.sqrt(counts.size))


def test_bridge_first_increment_law(m75, rng):
    beta, T = 1.3 * m75.beta0, 10.0
    sampler = RenewalBridgeSampler(m75, beta, T)
    first = np.array([tr.points[1] for tr in sampler.sample(rng, 20000)])
    f = free_energy(m75, beta)
    law = lattice_law(m75.kernel)
    u_T = float(sampler.u_beta(T))

    def density(x):
        return beta * math.exp(-f * x) * float(law.p0(x)) * float(sampler.u_beta(T - x)) / u_T

    edges = np.array([0.0, 0.05, 0.2, 0.5, 1.0, 2.0, 3.5, 5.0, 6.5, 8.0, 9.0, 9.6, 9.9, T - 1e-9])
    probs = np.array([integrate.quad(density, a, b, limit=200)[0] for a, b in zip(edges[:-1], edges[1:])])
    atom = beta * math.exp(-f * T) * float(law.p0(T)) / u_T
    probs = np.append(probs, atom)
    probs /= probs.sum()
    observed = np.append(np.histogram(first[first < T], edges)[0], np.count_nonzero(first == T))
    assert stats.chisquare(observed, probs * first.size).pvalue > 1e-3


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), rel=st.floats(1.0, 2.0))
def test_quenched_free_exceeds_one(seed, rel):
    m = model_for(0.75)
    path = sample_env(m.kernel, 0.5, 5.0, np.random.default_rng(seed))
    sol = volterra_quenched(m.kernel, m, path, rel * m.beta0, 5.0)
    assert sol.free_value > 1.0 and np.all(sol.zeta >= 0)
