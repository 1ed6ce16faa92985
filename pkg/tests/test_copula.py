import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bivmeta.copula import (
    DiscreteJointPmf, NumericalInstabilityError, bernoulli_frank_table, binom_cdf, binom_frank_logpmf,
    binom_frank_pmf, frank_cdf, rect_mass, sample_bernoulli_pair, spearman_rho, theta_from_spearman,
)
from oracles import binom_cdf_sum, frank_binom_pmf_mp, frank_cdf_mp, spearman_debye

# values from the 50+ digit closed-form oracle (tests/oracles.py)
FRANK_05_05_5 = 0.37714851074652084
RECT_07_02_08_03_2 = 0.25763689973874031
SPEARMAN_5 = 0.6434871080559886


def test_boundaries_and_independence():
    assert frank_cdf(0.3, 1.0, 5.0) == pytest.approx(0.3, abs=1e-15)
    assert frank_cdf(1.0, 0.6, -7.0) == pytest.approx(0.6, abs=1e-15)
    assert frank_cdf(0.0, 0.6, 3.0) == 0.0
    assert frank_cdf(0.4, 0.7, 1e-12) == pytest.approx(0.28, abs=1e-15)


def test_frank_cdf_matches_high_precision_reference():
    assert frank_cdf(0.5, 0.5, 5.0) == pytest.approx(FRANK_05_05_5, abs=1e-15)


@pytest.mark.parametrize("u,v,theta", [
    (0.3, 0.7, 5.0), (0.9, 0.95, -20.0), (0.999, 0.998, 200.0), (0.01, 0.02, -0.5),
    (0.5, 0.5, 1e-3), (0.2, 0.9, 300.0), (0.6, 0.7, -300.0), (1e-6, 0.5, 40.0), (0.999999, 0.999999, 35.0),
    (0.05, 0.97, 800.0), (0.97, 0.98, -800.0),
])
def test_frank_cdf_against_oracle(u, v, theta):
    assert frank_cdf(u, v, theta) == pytest.approx(frank_cdf_mp(u, v, theta), abs=5e-15)


def test_frechet_bounds_random_triples():
    rng = np.random.default_rng(11)
    u, v = rng.random(10_000), rng.random(10_000)
    theta = rng.uniform(-1000, 1000, 10_000) * rng.random(10_000) ** 3
    c = frank_cdf(u, v, theta)
    assert np.all(c >= np.maximum(u + v - 1, 0) - 1e-15)
    assert np.all(c <= np.minimum(u, v) + 1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(-60, 60))
def test_two_increasing(a, b, c, d, theta):
    u1, u2 = sorted((a, b))
    v1, v2 = sorted((c, d))
    assert rect_mass(u2, u1, v2, v1, theta) >= 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 50))
def test_reflection_symmetry(u, v, theta):
    # C_{-theta}(u, v) = u - C_theta(u, 1 - v)
    assert frank_cdf(u, v, -theta) == pytest.approx(u - frank_cdf(u, 1 - v, theta), abs=1e-12)


def test_rect_mass_examples():
    assert rect_mass(1, 0, 1, 0, 3.0) == pytest.approx(1.0, abs=1e-15)
    assert rect_mass(0.5, 0.5, 0.9, 0.1, 3.0) == 0.0
    assert rect_mass(0.7, 0.2, 0.8, 0.3, 2.0) == pytest.approx(RECT_07_02_08_03_2, abs=1e-14)


def test_rect_mass_raises_on_real_negative_mass():
    # reversed rectangle has genuinely negative four-term mass
    with pytest.raises(NumericalInstabilityError, match="theta"):
        rect_mass(0.2, 0.7, 0.8, 0.3, 2.0)


@pytest.mark.parametrize("k,n,p", [(0, 1, 0.3), (3, 10, 0.02), (49, 50, 0.98), (7, 20, 0.5), (300, 350, 0.9),
                                   (10, 350, 0.02), (-1, 5, 0.5), (5, 5, 0.5)])
def test_binom_cdf_against_summation(k, n, p):
    assert binom_cdf(k, n, p) == pytest.approx(binom_cdf_sum(k, n, p), abs=1e-13)


def test_binom_cdf_edge_probabilities():
    assert binom_cdf(0, 10, 0.0) == 1.0
    assert binom_cdf(9, 10, 1.0) == 0.0
    assert binom_cdf(10, 10, 1.0) == 1.0


def test_bernoulli_independent_fair():
    assert binom_frank_pmf(1, 1, 0.5, 0.5, 1, 1, 1e-12) == pytest.approx(0.25, abs=1e-12)


def test_bernoulli_table_against_enumeration():
    c = FRANK_05_05_5
    expected = {(0, 0): c, (0, 1): 0.5 - c, (1, 0): 0.5 - c, (1, 1): c}
    table = DiscreteJointPmf(1, 1, 0.5, 0.5, 5.0).table()
    for (x1, x2), val in expected.items():
        assert binom_frank_pmf(x1, x2, 0.5, 0.5, 1, 1, 5.0) == pytest.approx(val, abs=1e-15)
        assert table[x1, x2] == pytest.approx(val, abs=1e-15)
    assert np.allclose(bernoulli_frank_table(0.5, 0.5, 5.0), table, atol=1e-15)


@pytest.mark.parametrize("x1,x2,n1,n2,p1,p2,theta", [
    (3, 4, 5, 5, 0.3, 0.8, 4.0), (0, 0, 20, 20, 0.02, 0.98, -3.0), (18, 19, 20, 20, 0.9, 0.95, 20.0),
    (2, 7, 10, 12, 0.4, 0.6, -20.0),
])
def test_pmf_against_precise_oracle(x1, x2, n1, n2, p1, p2, theta):
    assert binom_frank_pmf(x1, x2, p1, p2, n1, n2, theta) == pytest.approx(
        frank_binom_pmf_mp(x1, x2, n1, n2, p1, p2, theta), abs=1e-13)


def test_normalisation_example():
    t = DiscreteJointPmf(20, 20, 0.3, 0.8, 4.0).table()
    assert abs(t.sum() - 1) < 1e-8


@pytest.mark.parametrize("n,p1,p2,theta", list(itertools.product(
    [1, 5, 20, 100, 350], [0.02, 0.5, 0.98], [0.02, 0.5, 0.98], [-20.0, -3.0, 0.0, 3.0, 20.0])))
def test_stress_grid_margins(n, p1, p2, theta):
    t = DiscreteJointPmf(n, n, p1, p2, theta).table()
    assert t.min() >= 0
    assert abs(t.sum() - 1) < 1e-8
    k = np.arange(n + 1)
    assert np.abs(t.sum(1) - stats.binom.pmf(k, n, p1)).max() < 1e-8
    assert np.abs(t.sum(0) - stats.binom.pmf(k, n, p2)).max() < 1e-8


def test_table_matches_pointwise_pmf():
    d = DiscreteJointPmf(6, 4, 0.35, 0.7, -2.5)
    t = d.table()
    x1, x2 = np.meshgrid(np.arange(7), np.arange(5), indexing="ij")
    assert np.allclose(d.pmf(x1, x2), t, atol=1e-15)


def test_theta_zero_continuity():
    t0 = DiscreteJointPmf(20, 20, 0.3, 0.6, 0.0).table()
    t1 = DiscreteJointPmf(20, 20, 0.3, 0.6, 1e-9).table()
    t2 = DiscreteJointPmf(20, 20, 0.3, 0.6, -1e-9).table()
    assert np.abs(t0 - t1).max() < 1e-6 and np.abs(t0 - t2).max() < 1e-6


def test_logpmf_floor():
    lp, hits = binom_frank_logpmf(0, 350, 0.98, 0.02, 350, 350, 20.0, return_floor_hits=True)
    assert lp == pytest.approx(np.log(1e-300)) and hits == 1
    assert binom_frank_logpmf(2, 3, 0.4, 0.5, 5, 5, 1.0) == pytest.approx(np.log(binom_frank_pmf(2, 3, 0.4, 0.5, 5, 5, 1.0)))


def test_correlation_sign_follows_theta():
    assert DiscreteJointPmf(10, 10, 0.4, 0.6, 5).correlation() > 0
    assert DiscreteJointPmf(10, 10, 0.4, 0.6, -5).correlation() < 0
    assert abs(DiscreteJointPmf(10, 10, 0.4, 0.6, 0).correlation()) < 1e-12


def test_spearman_basic():
    assert spearman_rho(0.0) == 0.0
    for th in (0.5, 3.0, 12.0):
        assert spearman_rho(-th) == pytest.approx(-spearman_rho(th), abs=1e-12)


def test_spearman_against_debye_closed_form():
    assert spearman_rho(5.0) == pytest.approx(SPEARMAN_5, abs=1e-7)
    for th in (0.3, 2.0, 15.0):
        assert spearman_rho(th) == pytest.approx(spearman_debye(th), abs=1e-7)


def test_spearman_monotone():
    grid = np.linspace(-30, 30, 25)
    vals = [spearman_rho(float(t)) for t in grid]
    assert np.all(np.diff(vals) > 0)


def test_theta_from_spearman_roundtrip():
    assert theta_from_spearman(0.0) == 0.0
    for r in (0.6, -0.3, 0.95):
        assert spearman_rho(theta_from_spearman(r)) == pytest.approx(r, abs=1e-4)
    assert theta_from_spearman(0.8) > 0
    with pytest.raises(ValueError):
        theta_from_spearman(0.999)
    with pytest.raises(ValueError):
        theta_from_spearman(-1.0)


def test_sample_independent_correlation():
    rng = np.random.default_rng(3)
    x1, x2 = sample_bernoulli_pair(0.3, 0.6, 0.0, rng, size=100_000)
    assert abs(np.corrcoef(x1, x2)[0, 1]) < 0.01


def test_sample_strong_dependence_agrees():
    rng = np.random.default_rng(4)
    x1, x2 = sample_bernoulli_pair(0.5, 0.5, 50.0, rng, size=20_000)
    assert np.mean(x1 == x2) > 0.95


def test_sample_phi_matches_exact_table():
    rng = np.random.default_rng(5)
    theta = theta_from_spearman(0.7)
    t = bernoulli_frank_table(0.5, 0.5, theta)
    phi_exact = (t[1, 1] - 0.25) / 0.25
    n = 100_000
    x1, x2 = sample_bernoulli_pair(0.5, 0.5, theta, rng, size=n)
    phi = np.corrcoef(x1, x2)[0, 1]
    se = (1 - phi_exact**2) / np.sqrt(n)
    assert abs(phi - phi_exact) < 3 * se


def test_sample_scalar_and_vector_shapes():
    rng = np.random.default_rng(6)
    a, b = sample_bernoulli_pair(0.2, 0.7, 3.0, rng)
    assert a in (0, 1) and b in (0, 1)
    x1, x2 = sample_bernoulli_pair(np.array([0.1, 0.9]), 0.5, 2.0, rng, size=7)
    assert x1.shape == (7, 2)


@pytest.mark.parametrize("x1,x2,n1,n2,p1,p2", [
    (117, 118, 123, 123, 0.5, 0.5), (60, 2, 61, 61, 0.3, 0.6), (0, 349, 350, 350, 0.4, 0.45),
])
def test_upper_tail_cells_keep_relative_precision(x1, x2, n1, n2, p1, p2):
    # theta = 0 reduces to a product of binomial pmfs, known to full relative precision
    want = stats.binom.logpmf(x1, n1, p1) + stats.binom.logpmf(x2, n2, p2)
    assert binom_frank_logpmf(x1, x2, p1, p2, n1, n2, 0.0) == pytest.approx(want, rel=1e-10)


@pytest.mark.parametrize("theta", [-6.0, 3.0, 15.0])
def test_tail_cell_against_precise_oracle(theta):
    args = (48, 49, 50, 50, 0.6, 0.7)
    want = frank_binom_pmf_mp(*args, theta)
    got = binom_frank_pmf(args[0], args[1], args[4], args[5], args[2], args[3], theta)
    assert got == pytest.approx(want, rel=1e-9)
