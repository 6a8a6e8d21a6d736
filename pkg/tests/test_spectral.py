import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import kernel_for
from helpers import poisson_series_p0
from rwpm.environment import sample_walk_endpoints
from rwpm.homogeneous import implicit_relation
from rwpm.spectral import (QuadratureError, fit_power_exponent, hybrid_grid, lattice_law, return_prob_curve,
                           spectral_grid, transition_probs)


def test_time_zero_is_identity():
    tab = transition_probs(kernel_for(0.75), 0.0, 10)
    assert tab.probs[0] == 1.0
    assert np.all(tab.probs[1:] == 0.0)


def test_small_time_series():
    k = kernel_for(0.75)
    t = 0.01
    p0 = transition_probs(k, t, 4).probs[0]
    assert abs(p0 - poisson_series_p0(k.j(0), t)) <= 1e-4


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        transition_probs(kernel_for(0.75), -1.0, 4)


def test_return_probability_exponent_075():
    k = kernel_for(0.75)
    t = np.geomspace(1e2, 1e4, 20)
    slope = -fit_power_exponent(t, spectral_grid(k).p0(t))
    assert abs(slope + 4 / 3) <= 0.04


def test_fitted_exponent_half():
    curve = return_prob_curve(kernel_for(0.5), hybrid_grid(1e4))
    assert abs(curve.fitted_exponent - 2.0) <= 0.05
    assert np.all(np.diff(curve.p0) <= 0)
    assert np.all(curve.p0 > 0)


def test_implicit_relation_settles():
    from conftest import model_for

    m = model_for(2 / 3)
    vals = implicit_relation(m, np.array([1e3, 1e4, 1e5]))
    assert vals[2] / vals[1] == pytest.approx(1.0, abs=0.05)


def test_quadrature_check_passes():
    tab = transition_probs(kernel_for(0.75), 3.0, 100, check=True)
    assert tab.error_estimate <= 1e-10
    assert tab.accounted_mass <= 1.0 + 1e-8


def test_lattice_law_matches_quadrature():
    k = kernel_for(0.75)
    law = lattice_law(k)
    for t in (0.3, 7.0, 150.0):
        exact = transition_probs(k, t, 300).probs
        x = np.arange(301)
        assert np.allclose(law.prob(t, x), exact, rtol=1e-6, atol=1e-14)


def test_lattice_law_far_field_one_jump():
    k = kernel_for(0.75)
    law = lattice_law(k)
    t, x = 2.0, 10**9
    # a single jump dominates far away: P(W_t = x) ~ t J(x) e^{-...}
    assert law.prob(t, x) / (t * k.j(x)) == pytest.approx(1.0, rel=0.05)


def test_walk_sampler_total_variation(rng):
    from scipy import stats

    k = kernel_for(0.75)
    t = 10.0
    a = np.abs(sample_walk_endpoints(k, t, rng, 10**6))
    tab = transition_probs(k, t, 2**12).probs
    mass = np.concatenate([[tab[0]], 2.0 * tab[1:]])  # law of |W_t|
    # dyadic shells {0}, {1}, [2, 4), ... keep the histogram noise far below the bound
    edges = np.concatenate([[0, 1], 2 ** np.arange(1, 13)])
    exact = np.add.reduceat(mass, edges[:-1])
    exact = np.append(exact, 1.0 - exact.sum())
    emp = np.histogram(a, np.append(edges, np.inf))[0] / a.size
    assert 0.5 * np.sum(np.abs(emp - exact)) <= 0.01
    # finer check: chi-square on single sites up to 60 plus the shells beyond
    fine = np.concatenate([np.arange(61), 2 ** np.arange(6, 13)])
    obs = np.histogram(a, np.append(fine, np.inf))[0]
    exp = np.append(np.add.reduceat(mass, fine[:-1]), 0.0)
    exp[-1] = 1.0 - exp[:-1].sum()
    assert stats.chisquare(obs, exp * a.size).pvalue > 0.001


@settings(max_examples=20, deadline=None)
@given(t1=st.floats(0.05, 500.0), ratio=st.floats(1.01, 20.0))
def test_unimodal_and_stochastically_decreasing(t1, ratio):
    k = kernel_for(0.75)
    a = transition_probs(k, t1, 200).probs
    b = transition_probs(k, t1 * ratio, 200).probs
    assert np.all(np.diff(a) <= 0) and np.all(np.diff(b) <= 0)
    ca = a[0] + 2 * np.concatenate([[0], np.cumsum(a[1:])])
    cb = b[0] + 2 * np.concatenate([[0], np.cumsum(b[1:])])
    assert np.all(cb <= ca + 1e-12)


@pytest.mark.parametrize("gamma", [0.4, 0.5, 0.75])
def test_local_limit_exponents(gamma):
    k = kernel_for(gamma)
    t = np.geomspace(1e2, 1e4, 20)
    assert abs(fit_power_exponent(t, spectral_grid(k).p0(t)) - 1 / gamma) <= 0.05


def test_quadrature_error_is_a_runtime_error():
    assert issubclass(QuadratureError, RuntimeError)
