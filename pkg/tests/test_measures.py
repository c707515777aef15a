import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate as sp_integrate
from scipy import stats

from twolevel import measures as M
from twolevel.measures import (AtomicMeasure, Beta, BetaSpec, GridMeasure, Mixture, MeasureError,
                               TailDescriptor)
from twolevel.testfunctions import constant, monomial, parse, polynomial


# --- test functions ---------------------------------------------------------

def test_polynomial_derivatives():
    f = polynomial([1.0, -2.0, 3.0])
    x = np.array([0.0, 0.5, 1.0])
    np.testing.assert_allclose(f(x), 1 - 2 * x + 3 * x * x)
    np.testing.assert_allclose(f.d1(x), -2 + 6 * x)
    np.testing.assert_allclose(f.d2(x), 6.0)


def test_parse_names():
    assert parse("x").name == "x"
    assert parse("x^3")(2.0) == 8.0
    assert parse("1")(0.3) == 1.0
    assert parse("const:2.5")(0.1) == 2.5
    with pytest.raises(ValueError):
        parse("sin")


def test_missing_derivative_raises():
    from twolevel.testfunctions import TestFunction
    f = TestFunction(lambda x: x)
    with pytest.raises(ValueError):
        f.d1(0.5)


# --- integrate / mean / tail_mass --------------------------------------------

@pytest.mark.parametrize("mu", [M.uniform(), Beta(3, 1), M.delta(0.3), M.linear_decreasing(),
                                GridMeasure.uniform(5), M.truncated_uniform(0.8)])
def test_unit_mass(mu):
    assert M.integrate(mu, constant(1.0)) == pytest.approx(1.0, abs=1e-12)


def test_integrate_examples():
    assert M.integrate(Beta(3, 1), monomial(1)) == pytest.approx(2 / 3, abs=1e-12)
    assert M.integrate(GridMeasure([0.5, 0, 0.5]), monomial(1)) == 0.5


def test_mean_examples():
    assert M.mean(M.delta(0.0)) == 0.0
    assert M.mean(M.uniform()) == pytest.approx(0.5, abs=1e-13)
    assert M.mean(Beta(2, 1)) == pytest.approx(0.5, abs=1e-13)


def test_tail_mass_examples():
    assert M.tail_mass(M.delta(1.0), 0.0) == 1.0
    assert M.tail_mass(M.linear_decreasing(), 0.1) == pytest.approx(0.01, rel=1e-10)
    assert M.tail_mass(M.uniform(), 0.25) == pytest.approx(0.25, rel=1e-12)


def test_integrate_rejects_nonfinite():
    with pytest.raises(M.EvaluationError):
        M.integrate(M.uniform(), lambda x: np.where(x > 0.5, np.inf, x))


@pytest.mark.parametrize("a,b", [(0.5, 0.5), (2.0, 1.0), (0.3, 4.0), (7.0, 0.6)])
def test_beta_moments_against_scipy(a, b):
    d = M.beta_density(a, b)
    for k in (1, 2, 3):
        assert M.integrate(d, monomial(k)) == pytest.approx(stats.beta(a, b).moment(k), rel=1e-10)
    assert M.tail_mass(d, 1e-3) == pytest.approx(stats.beta(a, b).sf(1 - 1e-3), rel=1e-8)


def test_truncated_uniform_cdf():
    d = M.truncated_uniform(0.8)
    np.testing.assert_allclose(d.cdf(np.array([0.2, 0.4, 0.8, 0.9])), [0.25, 0.5, 1.0, 1.0], atol=1e-12)


# --- wasserstein1 --------------------------------------------------------------

def test_w1_examples():
    mu = Beta(3, 1)
    assert M.wasserstein1(mu, mu) == 0.0
    assert M.wasserstein1(M.delta(0.0), M.delta(1.0)) == 1.0
    assert M.wasserstein1(M.delta(0.0), M.uniform()) == pytest.approx(0.5, abs=1e-13)


def test_w1_densities_against_quad():
    a, b = M.beta_density(2.0, 1.0), M.beta_density(0.5, 2.5)
    ref = sp_integrate.quad(lambda x: abs(stats.beta(2, 1).cdf(x) - stats.beta(0.5, 2.5).cdf(x)),
                            0, 1, limit=200, epsabs=1e-13)[0]
    assert M.wasserstein1(a, b) == pytest.approx(ref, abs=1e-10)


def test_w1_grid_vs_density():
    g = GridMeasure.uniform(4)
    ref = sp_integrate.quad(lambda x: abs(min(int(x * 4) + 1, 5) / 5 - x), 0, 1,
                            points=[0.25, 0.5, 0.75], epsabs=1e-13)[0]
    assert M.wasserstein1(g, M.uniform()) == pytest.approx(ref, abs=1e-12)


atoms = st.lists(st.tuples(st.floats(0, 1), st.floats(0.01, 1)), min_size=1, max_size=8)


def _atomic(pairs):
    return AtomicMeasure([p for p, _ in pairs], [w for _, w in pairs], normalize=True)


@settings(max_examples=60, deadline=None)
@given(atoms, atoms)
def test_w1_atomic_matches_scipy(p, q):
    mu, nu = _atomic(p), _atomic(q)
    ref = stats.wasserstein_distance(mu.positions, nu.positions, mu.weights, nu.weights)
    assert M.wasserstein1(mu, nu) == pytest.approx(ref, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(atoms, atoms, atoms)
def test_w1_metric_axioms(p, q, r):
    a, b, c = _atomic(p), _atomic(q), _atomic(r)
    ab = M.wasserstein1(a, b)
    assert ab == pytest.approx(M.wasserstein1(b, a), abs=1e-14)
    assert 0.0 <= ab <= 1.0 + 1e-14
    assert ab <= M.wasserstein1(a, c) + M.wasserstein1(c, b) + 1e-12


# --- discretized_beta / discretize / sample -----------------------------------

def test_discretized_beta_n2():
    np.testing.assert_array_equal(M.discretized_beta(2, BetaSpec(3, 1)).weights, [0, 1, 0])


def test_discretized_beta_weights():
    # (k/n)^(lam-alpha-1) (1-k/n)^(alpha-1) on k=1..3 for n=4
    np.testing.assert_allclose(M.discretized_beta(4, BetaSpec(3, 1)).weights,
                               [0, 1 / 6, 2 / 6, 3 / 6, 0], atol=1e-15)
    np.testing.assert_allclose(M.discretized_beta(4, BetaSpec(2, 1)).weights,
                               [0, 1 / 3, 1 / 3, 1 / 3, 0], atol=1e-15)


def test_discretized_beta_extreme_exponents_stay_finite():
    w = M.discretized_beta(10, BetaSpec(2000.0, 1000.0)).weights
    assert np.all(np.isfinite(w)) and w.sum() == pytest.approx(1.0)
    assert int(np.argmax(w)) == 5


def test_discretize_atoms_and_mixture():
    mu = Mixture([(0.3, M.delta(1.0)), (0.7, M.delta(0.26))])
    np.testing.assert_allclose(M.discretize(mu, 4).weights, [0, 0.7, 0, 0, 0.3])


def test_sample_point_mass_and_determinism():
    rng = np.random.default_rng(0)
    assert set(M.sample(GridMeasure.point_mass(5, 3), 100, rng)) == {3}
    g = GridMeasure([0.25, 0.75])
    a = M.sample(g, 50, np.random.default_rng(7))
    b = M.sample(g, 50, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_sample_uniform_chisquare():
    n, count = 6, 10 ** 5
    s = M.sample(GridMeasure.uniform(n), count, np.random.default_rng(3))
    obs = np.bincount(s, minlength=n + 1)
    assert stats.chisquare(obs).pvalue > 1e-3


# --- constructors and validation ---------------------------------------------

def test_beta_spec_validation():
    with pytest.raises(ValueError):
        BetaSpec(2.0, 2.0)
    with pytest.raises(ValueError):
        BetaSpec(2.0, 0.0)
    spec = BetaSpec(3.0, 1.0)
    assert (spec.a, spec.b, spec.mean) == (2.0, 1.0, pytest.approx(2 / 3))


def test_atomic_validation():
    with pytest.raises(MeasureError):
        AtomicMeasure([0.5], [0.9])
    with pytest.raises(MeasureError):
        AtomicMeasure([1.5], [1.0])


def test_grid_validation():
    with pytest.raises(MeasureError):
        GridMeasure([1.0])
    with pytest.raises(MeasureError):
        GridMeasure([0.5, -0.1, 0.6])


def test_tail_descriptor_validation():
    with pytest.raises(ValueError):
        TailDescriptor(M.POWER_TAIL, alpha=-1.0, C=1.0)


# --- serialisation -----------------------------------------------------------

@pytest.mark.parametrize("mu", [M.delta(0.25), Beta(3, 1), M.uniform(), M.truncated_uniform(0.6),
                                Mixture([(0.3, M.delta(1.0)), (0.7, M.uniform())]),
                                GridMeasure([0.2, 0.3, 0.5])])
def test_roundtrip(mu):
    back = M.loads(M.dumps(mu))
    assert M.wasserstein1(mu, back) < 1e-12
    assert M.mean(back) == pytest.approx(M.mean(mu), abs=1e-12)


def test_density_normalisation_of_unnormalised_logpdf():
    d = M.GridDensity(lambda x, xc: np.log(3.0) + 2 * np.log(x) + 7.0)
    assert M.integrate(d, constant(1.0)) == pytest.approx(1.0, abs=1e-12)
    assert M.mean(d) == pytest.approx(0.75, abs=1e-12)
    assert math.isfinite(d.log_norm)
