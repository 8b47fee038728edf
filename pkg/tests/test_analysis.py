import itertools
import json
import math
from fractions import Fraction
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stars.analysis import (
    Empirical,
    Gaussian,
    PointMixture,
    RateSetup,
    TwoPoint,
    beta,
    check_shift,
    effective_threshold,
    moment_matched_pair,
    monte_carlo_rate,
    random_ordered_pairs,
    rate_functional,
    rate_gap,
    std_normal_cdf,
)

SETUP = RateSetup(2.0, 1.0, 4)


def series_cdf(x, terms=200):
    """Φ(x) from the Maclaurin series of erf, summed with exact rationals then rounded."""
    z = Fraction(x) / Fraction(math.sqrt(2.0))
    total, term = Fraction(0), z
    for n in range(terms):
        total += term / (2 * n + 1)
        term = -term * z * z / (n + 1)
    erf = total * 2 / Fraction(math.sqrt(math.pi))
    return float(Fraction(1, 2) + erf / 2)


@pytest.mark.parametrize("x", [0.0, 0.5, -0.5, 1.0, -1.0, 2.0, -2.0])
def test_normal_cdf_against_series(x):
    assert std_normal_cdf(x) == pytest.approx(series_cdf(x), rel=1e-15, abs=1e-16)


def test_beta_and_thresholds():
    assert [beta(t, 2.0) for t in (1, 2, 3)] == [0.5, 0.75, 0.875]
    assert all(beta(t, 1.0) == 1.0 for t in range(1, 10))
    assert [effective_threshold(t, SETUP) for t in (1, 2, 3)] == [2.0, 4 / 3, 8 / 7]
    no_leak = RateSetup(1.0, 0.7, 5)
    assert no_leak.thresholds().tolist() == [0.7] * 5
    ths = RateSetup(3.0, 1.0, 20).thresholds()
    assert np.all(np.diff(ths) < 0) and np.all(ths > 1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.floats(1.0, 50.0), st.floats(0.1, 10.0))
def test_beta_theta_product(t, tau, v_th):
    b = beta(t, tau)
    assert 0 < b <= 1 and (t == 1 or beta(t - 1, tau) <= b)
    assert b * effective_threshold(t, RateSetup(tau, v_th, t)) == pytest.approx(v_th, rel=1e-15)


def test_cdf_and_survival_examples():
    assert Gaussian(0.0, 1.0).cdf(0.0) == 0.5
    assert TwoPoint(-1.0, 0.5, 1.0).survival(0.5) == 0.5
    assert Gaussian(0.0, 1.0).survival(0.5) == pytest.approx(1 - series_cdf(0.5), rel=1e-14)
    assert abs(Gaussian(0.0, 1.0).survival(0.5) - 0.308538) < 1e-6
    e = Empirical([1.0, 2.0, 2.0, 3.0])
    assert (e.cdf(2.0), e.cdf_left(2.0), e.survival(2.0)) == (0.75, 0.25, 0.75)


def test_rate_functional_examples():
    assert rate_functional(TwoPoint(1.0, 1.0, 5.0), SETUP) == 0.0  # all mass below θ_T
    assert rate_functional(TwoPoint(2.5, 1.0, 0.0), SETUP) == 1.0  # all mass above θ_1
    assert rate_functional(TwoPoint(0.0, 0.5, 2.5), RateSetup(2.0, 1.0, 2)) == 0.5
    d = Gaussian(0.3, 2.0)
    rates = [rate_functional(d, RateSetup(2.0, 1.0, T)) for T in range(1, 12)]
    assert all(b >= a for a, b in zip(rates, rates[1:]))


def brute_force_rate(atoms, setup):
    """Enumerate (atom, step) pairs and count crossings."""
    total = 0.0
    for (x, p), t in itertools.product(atoms, range(1, setup.steps + 1)):
        if x >= setup.v_th / beta(t, setup.tau):
            total += p
    return total / setup.steps


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 5), min_size=1, max_size=100), st.integers(1, 10), st.floats(1.0, 6.0))
def test_rate_functional_matches_enumeration(samples, steps, tau):
    setup = RateSetup(tau, 1.0, steps)
    e = Empirical(samples)
    assert rate_functional(e, setup) == pytest.approx(brute_force_rate(e.atoms(), setup), abs=1e-12)


def test_rate_gap_examples_and_antisymmetry():
    p, q = moment_matched_pair(0.0, 1.0)
    assert rate_gap(p, p, SETUP) == 0.0
    assert rate_gap(p, q, SETUP) == -rate_gap(q, p, SETUP)
    assert rate_gap(p, q, SETUP) == pytest.approx(rate_functional(p, SETUP) - rate_functional(q, SETUP),
                                                  abs=1e-15)


def test_rate_gap_regression_fixture():
    doc = json.loads(resources.files("stars").joinpath("fixtures/rate_gap.json").read_text())
    p, q = moment_matched_pair(0.0, 1.0, "gaussian_vs_two_point")
    setup = RateSetup(**doc["setup"])
    assert (p.describe(), q.describe()) == (doc["P"], doc["Q"])
    assert rate_gap(p, q, setup) == doc["rate_gap"]
    assert doc["rate_gap"] != 0.0


def test_moment_matched_pairs():
    p, q = moment_matched_pair(0.0, 1.0)
    assert q.atoms() == [(-1.0, 0.5), (1.0, 0.5)]
    for mu, var in [(0.0, 1.0), (1.5, 0.3), (-2.0, 4.0)]:
        for pair in (moment_matched_pair(mu, var),
                     moment_matched_pair(mu, var, "base_vs_variance_preserving_mixture",
                                         delta=math.sqrt(var) * 1.5, eps=0.2)):
            for d in pair:
                assert abs(d.mean() - mu) <= 1e-12 and abs(d.variance() - var) <= 1e-12
    with pytest.raises(ValueError, match="infeasible"):
        moment_matched_pair(0.0, 1.0, "base_vs_variance_preserving_mixture", delta=3.0, eps=0.2)
    with pytest.raises(ValueError):
        moment_matched_pair(0.0, 0.0)


def test_mixture_weights_and_sampling():
    _, q = moment_matched_pair(0.0, 1.0, "base_vs_variance_preserving_mixture", delta=2.0, eps=0.1)
    assert q.survival(2.0) == pytest.approx(0.9 * Gaussian(0.0, (1 - 0.4) / 0.9).survival(2.0) + 0.05, rel=1e-14)
    x = q.sample(np.random.default_rng(0), 200_000)
    assert abs(np.mean(x == 2.0) - 0.05) < 0.003 and abs(np.mean(x == -2.0) - 0.05) < 0.003
    assert abs(x.var() - 1.0) < 0.02


def test_check_shift_examples():
    ref = Gaussian(0.5, 1.0)
    res = check_shift(Gaussian(-0.5, 1.0), ref, SETUP)
    assert res.kind == "under_firing" and res.rate_s < res.rate_r
    assert check_shift(Gaussian(1.5, 1.0), ref, SETUP).kind == "over_firing"
    assert check_shift(ref, ref, SETUP).kind == "neither"
    p, q = moment_matched_pair(0.0, 1.0)
    assert check_shift(p, q, SETUP).kind == "over_firing"


def test_random_pairs_all_classified_with_strict_rates():
    pairs = random_ordered_pairs(40, seed=3, setup=SETUP)
    for syn, ref, expected in pairs:
        res = check_shift(syn, ref, SETUP)
        assert res.kind == expected
        assert (res.rate_s < res.rate_r) if expected == "under_firing" else (res.rate_s > res.rate_r)


def test_monte_carlo_basics():
    assert monte_carlo_rate(TwoPoint(0.0, 1.0, 1.0), SETUP, 1000) == (0.0, 0.0)
    sub = TwoPoint(-1.0, 0.3, 0.9)  # both atoms below θ_T = 16/15
    assert monte_carlo_rate(sub, SETUP, 5000, reset=True)[0] == rate_functional(sub, SETUP) == 0.0
    with pytest.raises(ValueError):
        monte_carlo_rate(sub, SETUP, 999)
    assert monte_carlo_rate(Gaussian(0.0, 1.0), SETUP, 2000, seed=4) == monte_carlo_rate(
        Gaussian(0.0, 1.0), SETUP, 2000, seed=4)


def test_reset_discrepancy_for_point_mass():
    # point mass at 2.5 with T=2: both steps fire in either regime, so no discrepancy here;
    # at 1.5 with T=4 reset halves the no-reset count
    short = RateSetup(2.0, 1.0, 2)
    atom = TwoPoint(2.5, 1.0, 0.0)
    assert monte_carlo_rate(atom, short, 1000)[0] == rate_functional(atom, short) == 1.0
    mid = TwoPoint(1.5, 1.0, 0.0)
    assert rate_functional(mid, SETUP) == 0.75
    assert monte_carlo_rate(mid, SETUP, 1000, reset=True)[0] == 0.5
    assert monte_carlo_rate(mid, SETUP, 1000, reset=False)[0] == 0.75


def test_distribution_validation():
    with pytest.raises(ValueError):
        TwoPoint(1.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        TwoPoint(0.0, 1.5, 1.0)
    with pytest.raises(ValueError):
        PointMixture(Gaussian(0, 1), 1.0, 0.0)
    with pytest.raises(ValueError):
        Empirical([])
    with pytest.raises(ValueError):
        Gaussian(0.0, -1.0)
