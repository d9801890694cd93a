import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from eplab.gaussian import (
    DomainError,
    GaussianDensity1D,
    GaussianDensityND,
    NaturalParams1D,
    NaturalParamsND,
    NotADensityError,
    cavity_subtract,
    from_moments,
    from_moments_nd,
    kl_gaussian,
    kl_gaussian_nd,
    to_moments,
    tv_upper_bound,
)

means = st.floats(-50, 50, allow_nan=False)
variances = st.floats(1e-3, 1e3, allow_nan=False)
reals = st.floats(-1e3, 1e3, allow_nan=False)


@pytest.mark.parametrize("beta, r, mean, var", [(1, 0, 0, 1), (4, 2, 0.5, 0.25), (100, 0, 0, 0.01)])
def test_to_moments_examples(beta, r, mean, var):
    assert to_moments(GaussianDensity1D(NaturalParams1D(beta, r))) == pytest.approx((mean, var), abs=1e-15)


@pytest.mark.parametrize("mean, var, beta, r", [(0, 1, 1, 0), (0.5, 0.25, 4, 2)])
def test_from_moments_examples(mean, var, beta, r):
    p = from_moments(mean, var).params
    assert (p.precision, p.shift) == pytest.approx((beta, r))


@pytest.mark.parametrize("var", [0.0, -1.0])
def test_from_moments_rejects_non_positive_variance(var):
    with pytest.raises(DomainError):
        from_moments(0.0, var)


@pytest.mark.parametrize("beta", [0.0, -1.0, math.inf, math.nan])
def test_density_requires_positive_precision(beta):
    with pytest.raises(NotADensityError):
        GaussianDensity1D(NaturalParams1D(beta, 0.0))


def test_natural_params_allow_negative_precision():
    p = NaturalParams1D(-3.0, 1.0) + NaturalParams1D(1.0, 1.0)
    assert (p.precision, p.shift) == (-2.0, 2.0)


def test_nd_precision_symmetrised_and_checked():
    Q = np.array([[2.0, 0.5 + 1e-13], [0.5, 1.0]])
    p = NaturalParamsND(Q, np.zeros(2))
    assert np.array_equal(p.precision_matrix, p.precision_matrix.T)
    with pytest.raises(NotADensityError):
        GaussianDensityND(NaturalParamsND(np.array([[1.0, 2.0], [2.0, 1.0]]), np.zeros(2)))


@settings(max_examples=100, deadline=None)
@given(means, variances)
def test_moment_round_trip(mean, var):
    m, v = to_moments(from_moments(mean, var))
    assert m == pytest.approx(mean, rel=1e-12, abs=1e-300)
    assert v == pytest.approx(var, rel=1e-12)


def test_kl_examples():
    q = from_moments(0.0, 1.0)
    assert kl_gaussian(q, q) == 0.0
    assert kl_gaussian(from_moments(1.0, 1.0), q) == pytest.approx(0.5, rel=1e-15)
    assert kl_gaussian(from_moments(0.0, 2.0), q) == pytest.approx(0.5 * (1.0 - math.log(2.0)), rel=1e-14)
    assert kl_gaussian(from_moments(0.0, 2.0), q) == pytest.approx(0.153426, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(means, variances, means, variances)
def test_kl_non_negative_and_zero_on_diagonal(m1, v1, m2, v2):
    q1, q2 = from_moments(m1, v1), from_moments(m2, v2)
    assert kl_gaussian(q1, q1) == 0.0
    assert kl_gaussian(q1, q2) >= 0.0


def test_kl_matches_numerical_integration():
    rng = np.random.default_rng(11)
    for _ in range(50):
        m1, m2 = rng.normal(0, 2, 2)
        v1, v2 = np.exp(rng.uniform(-1.5, 1.5, 2))
        p, q = stats.norm(m1, math.sqrt(v1)), stats.norm(m2, math.sqrt(v2))
        lo, hi = m1 - 20 * math.sqrt(v1), m1 + 20 * math.sqrt(v1)
        ref, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), lo, hi,
                                epsabs=0, epsrel=1e-12, limit=200)
        assert kl_gaussian(from_moments(m1, v1), from_moments(m2, v2)) == pytest.approx(ref, rel=1e-6)


def test_kl_nd_identity_and_separability():
    I = from_moments_nd(np.zeros(2), np.eye(2))
    assert kl_gaussian_nd(I, I) == pytest.approx(0.0, abs=1e-15)
    a = from_moments_nd([1.0, -0.5], np.diag([2.0, 0.3]))
    b = from_moments_nd([0.2, 0.4], np.diag([0.7, 1.5]))
    sep = kl_gaussian(from_moments(1.0, 2.0), from_moments(0.2, 0.7)) \
        + kl_gaussian(from_moments(-0.5, 0.3), from_moments(0.4, 1.5))
    assert kl_gaussian_nd(a, b) == pytest.approx(sep, rel=1e-12)


def test_kl_nd_dimension_mismatch():
    with pytest.raises(DomainError):
        kl_gaussian_nd(from_moments_nd(np.zeros(2), np.eye(2)), from_moments_nd(np.zeros(3), np.eye(3)))


def test_kl_nd_monte_carlo():
    rng = np.random.default_rng(5)
    m1, m2 = np.array([0.3, -0.2]), np.array([-0.1, 0.4])
    S1 = np.array([[1.0, 0.4], [0.4, 0.8]])
    S2 = np.array([[1.5, -0.2], [-0.2, 0.6]])
    x = rng.multivariate_normal(m1, S1, size=1_000_000)
    llr = stats.multivariate_normal(m1, S1).logpdf(x) - stats.multivariate_normal(m2, S2).logpdf(x)
    est, se = llr.mean(), llr.std(ddof=1) / math.sqrt(llr.size)
    kl = kl_gaussian_nd(from_moments_nd(m1, S1), from_moments_nd(m2, S2))
    assert abs(kl - est) <= 3 * se


@pytest.mark.parametrize("kl, tv", [(0.0, 0.0), (2.0, 1.0), (0.5, 0.5)])
def test_tv_examples(kl, tv):
    assert tv_upper_bound(kl) == pytest.approx(tv)


def test_tv_rejects_negative():
    with pytest.raises(DomainError):
        tv_upper_bound(-1e-3)


@given(st.floats(0, 1e6), st.floats(0, 1e6))
def test_tv_monotone(a, b):
    lo, hi = sorted((a, b))
    assert tv_upper_bound(lo) <= tv_upper_bound(hi)


def test_cavity_examples():
    c = cavity_subtract(NaturalParams1D(10, 1), NaturalParams1D(2, 0.5))
    assert (c.precision, c.shift) == (8.0, 0.5)
    t = NaturalParams1D(3.0, -1.0)
    assert cavity_subtract(t, NaturalParams1D.zeros()) == t
    a = NaturalParams1D(10.0, 5.0) * (4 / 5)
    assert (a.precision, a.shift) == pytest.approx((8.0, 4.0))


@given(reals, reals, reals, reals)
def test_cavity_subtract_inverts_add(b1, r1, b2, r2):
    a, b = NaturalParams1D(b1, r1), NaturalParams1D(b2, r2)
    back = cavity_subtract(a + b, b)
    scale = max(1.0, abs(b1), abs(r1), abs(b2), abs(r2))
    assert abs(back.precision - b1) <= 1e-12 * scale
    assert abs(back.shift - r1) <= 1e-12 * scale


def test_cavity_subtract_nd():
    a = NaturalParamsND(np.array([[2.0, 0.1], [0.1, 1.0]]), np.array([1.0, 2.0]))
    b = NaturalParamsND(np.eye(2), np.ones(2))
    assert cavity_subtract(a + b, b) == a
