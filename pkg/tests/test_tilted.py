import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eplab.gaussian import (
    DomainError,
    NaturalParams1D,
    density,
    from_moments,
    from_moments_nd,
)
from eplab.sites import (
    builtin_sites_1d,
    cauchy_site,
    gaussian_site,
    logit_site,
    probit_site,
)
from eplab.tilted import (
    QuadratureConfig,
    brascamp_lieb_check,
    site_update_from_moments,
    stein_residual,
    tilted_moments,
    tilted_moments_mixture,
    tilted_moments_probit,
    tilted_moments_quadrature,
    tilted_moments_rank_one,
)

ORACLE = json.loads((Path(__file__).parent / "oracles" / "frozen_moments.json").read_text())
SITES = builtin_sites_1d()
CAVITY_GRID = [(b, m) for b in (0.5, 1.0, 10.0, 100.0, 1e4) for m in (-2.0, 0.0, 3.0)]


def cavity(beta, mu):
    return density(NaturalParams1D(beta, beta * mu))


def test_oracle_covers_every_builtin_site():
    assert {c["site_index"] for c in ORACLE["tilted_1d"]} == set(range(len(SITES)))
    assert [SITES[c["site_index"]].name for c in ORACLE["tilted_1d"]] == [c["site"] for c in ORACLE["tilted_1d"]]


@pytest.mark.parametrize("case", ORACLE["tilted_1d"], ids=lambda c: f"{c['site']}-b{c['beta']:g}-m{c['mu']:g}")
def test_quadrature_matches_trapezoid_oracle(case):
    site = SITES[case["site_index"]]
    m = tilted_moments_quadrature(site, cavity(case["beta"], case["mu"]))
    sd = math.sqrt(case["variance"])
    assert abs(m.mean - case["mean"]) <= 1e-8 * (abs(case["mean"]) + sd)
    assert m.variance == pytest.approx(case["variance"], rel=1e-8)
    assert abs(m.log_z - case["log_z"]) <= 1e-8 * (1 + abs(case["log_z"]))


def test_gaussian_site_quadrature_is_conjugate():
    site = gaussian_site(1.0, 0.3)
    q = density(NaturalParams1D(2.0, 0.0))
    m = tilted_moments_quadrature(site, q)
    assert m.mean == pytest.approx(0.1, rel=1e-10)
    assert m.variance == pytest.approx(1 / 3, rel=1e-10)
    exact = tilted_moments(site, q)
    assert (exact.mean, exact.variance) == pytest.approx((0.1, 1 / 3), rel=1e-15)


def test_logit_sharp_cavity_against_trapezoid_and_expansion():
    beta = 100.0
    x = np.linspace(-1.0, 1.0, 1_000_000)
    w = np.exp(-0.5 * beta * x * x - np.logaddexp(0.0, -x))
    ref = np.trapezoid(w * x, x) / np.trapezoid(w, x)
    m = tilted_moments_quadrature(logit_site(), cavity(beta, 0.0))
    assert m.mean == pytest.approx(ref, rel=1e-8)
    assert abs(m.mean - 0.5 / (beta + 0.25)) <= 1.0 / beta**2
    assert m.mean == pytest.approx(4.988e-3, abs=1e-6)


def test_unit_site_returns_cavity():
    q = cavity(3.0, -0.4)
    m = tilted_moments_quadrature(gaussian_site(0.0, 0.0), q)
    assert m.mean == pytest.approx(q.mean, abs=1e-15)
    assert m.variance == pytest.approx(q.variance, rel=1e-14)
    upd = site_update_from_moments(m, q.params)
    assert abs(upd.precision) < 1e-12 and abs(upd.shift) < 1e-12


def test_quadrature_config_validation():
    for bad in ({"nodes": 10}, {"nodes": 12}, {"tail_width": 4.0}, {"center_on": "mode"}):
        with pytest.raises(DomainError):
            QuadratureConfig(**bad)


def test_cavity_mean_centering_is_still_accurate_for_broad_hybrids():
    cfg = QuadratureConfig(center_on="cavity_mean", adaptive_tol=0.0, nodes=101)
    ref = tilted_moments_quadrature(logit_site(), cavity(1.0, 0.0))
    m = tilted_moments_quadrature(logit_site(), cavity(1.0, 0.0), cfg)
    assert m.mean == pytest.approx(ref.mean, rel=1e-8)


def test_gaussian_site_update_is_exact():
    for beta, mu in [(0.3, -1.0), (5.0, 2.0), (1e4, 0.0)]:
        q = cavity(beta, mu)
        upd = site_update_from_moments(tilted_moments(gaussian_site(2.0, 1.0), q), q.params)
        assert (upd.precision, upd.shift) == pytest.approx((2.0, 1.0), rel=1e-9)


def test_logit_site_update_limit():
    q = cavity(1e6, 0.0)
    upd = site_update_from_moments(tilted_moments(logit_site(), q), q.params)
    assert abs(upd.precision - 0.25) < 1e-4 and abs(upd.shift - 0.5) < 1e-4


# --- probit closed form -------------------------------------------------------


def test_probit_closed_form_matches_quadrature_along_e1():
    q = from_moments_nd(np.zeros(2), np.eye(2))
    m = tilted_moments_probit(1, [1.0, 0.0], q)
    ref = tilted_moments_quadrature(probit_site(1), from_moments(0.0, 1.0))
    assert m.mean[0] == pytest.approx(ref.mean, rel=1e-8)
    assert m.covariance[0, 0] == pytest.approx(ref.variance, rel=1e-8)
    assert m.mean[1] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.sampled_from([-1, 1]))
def test_probit_closed_form_matches_rank_one_quadrature(v, mu, y):
    v = np.array(v)
    if np.linalg.norm(v) < 1e-2:
        return
    S = np.array([[1.0, 0.3, 0.0], [0.3, 0.8, -0.2], [0.0, -0.2, 0.5]])
    q = from_moments_nd(mu, S)
    a = tilted_moments_probit(y, v, q)
    b = tilted_moments_rank_one(probit_site(y), v, q)
    scale = np.sqrt(np.diag(S))
    assert np.all(np.abs(a.mean - b.mean) <= 1e-8 * (np.abs(b.mean) + scale))
    assert np.allclose(a.covariance, b.covariance, rtol=1e-8, atol=1e-10)
    assert a.log_z == pytest.approx(b.log_z, rel=1e-8, abs=1e-10)
    flipped = tilted_moments_probit(-y, -v, q)
    assert np.allclose(flipped.mean, a.mean, rtol=1e-12, atol=1e-14)
    assert np.allclose(flipped.covariance, a.covariance, rtol=1e-12, atol=1e-14)


def test_probit_zero_regressor_returns_cavity():
    q = from_moments_nd([0.2, -0.3], [[1.0, 0.2], [0.2, 2.0]])
    m = tilted_moments_probit(1, [0.0, 0.0], q)
    assert np.array_equal(m.mean, q.mean) and np.array_equal(m.covariance, q.covariance)


def test_probit_far_tail_is_finite():
    q = from_moments_nd([-40.0], [[1e-2]])
    m = tilted_moments_probit(1, [1.0], q)
    assert np.isfinite(m.log_z) and m.covariance[0, 0] > 0


# --- mixture closed form ------------------------------------------------------


@pytest.mark.parametrize("case", ORACLE["mixture_2d"], ids=lambda c: f"y{c['y']:g}")
def test_mixture_matches_grid_oracle(case):
    q = from_moments_nd(case["cavity_mean"], case["cavity_cov"])
    m = tilted_moments_mixture(case["y"], q)
    sd = np.sqrt(np.diag(case["covariance"]))
    assert np.all(np.abs(m.mean - case["mean"]) <= 1e-6 * (np.abs(case["mean"]) + sd))
    assert np.allclose(m.covariance, case["covariance"], rtol=1e-6, atol=1e-6 * sd.max() ** 2)
    assert abs(m.log_z - case["log_z"]) <= 1e-6 * (1 + abs(case["log_z"]))


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 5), st.floats(-0.9, 0.9))
def test_mixture_exchange_symmetry(y, m, v, rho):
    q = from_moments_nd([m, m], [[v, rho * v], [rho * v, v]])
    t = tilted_moments_mixture(y, q)
    assert t.mean[0] == pytest.approx(t.mean[1], rel=1e-12, abs=1e-12)
    assert t.covariance[0, 0] == pytest.approx(t.covariance[1, 1], rel=1e-12, abs=1e-12)
    assert np.all(np.linalg.eigvalsh(t.covariance) > 0)


def test_mixture_sharp_cavity_site_contribution_bounded():
    # the site update stays O(1) in natural parameters as the cavity sharpens
    contribs = []
    for beta in (1e2, 1e3, 1e4):
        q = from_moments_nd([0.5, -1.0], np.eye(2) / beta)
        upd = site_update_from_moments(tilted_moments_mixture(0.2, q), q.params)
        contribs.append(np.abs(upd.precision_matrix).max())
    assert max(contribs) < 1.0
    assert np.ptp(contribs) < 0.1


def test_mixture_rejects_wrong_dimension():
    with pytest.raises(DomainError):
        tilted_moments_mixture(0.0, from_moments_nd(np.zeros(3), np.eye(3)))


# --- Stein and Brascamp-Lieb --------------------------------------------------


def _update(site, q):
    m = tilted_moments_quadrature(site, q)
    return m, site_update_from_moments(m, q.params)


@pytest.mark.parametrize("site, beta, mu", [(logit_site(), 0.1, 0.0), (cauchy_site(0.0), 0.2, 0.5)])
def test_stein_examples(site, beta, mu):
    q = cavity(beta, mu)
    m, upd = _update(site, q)
    assert stein_residual(site, q, upd, m) <= 1e-6


def test_stein_exact_for_gaussian():
    q = cavity(2.0, 1.0)
    m, upd = _update(gaussian_site(1.5, -0.4), q)
    assert stein_residual(gaussian_site(1.5, -0.4), q, upd, m) <= 1e-10


@pytest.mark.parametrize("site", SITES, ids=lambda s: s.name)
def test_stein_on_audit_grid(site):
    for beta, mu in CAVITY_GRID:
        q = cavity(beta, mu)
        m, upd = _update(site, q)
        assert stein_residual(site, q, upd, m) <= 1e-6 * (1 + abs(upd.shift)), (beta, mu)


def test_brascamp_lieb_examples():
    assert brascamp_lieb_check(logit_site(), cavity(1.0, 0.0)).holds is True
    assert brascamp_lieb_check(probit_site(1), cavity(0.5, 0.3)).holds is True
    res = brascamp_lieb_check(gaussian_site(2.0, 0.0), cavity(3.0, 0.0))
    assert res.var == pytest.approx(0.2, rel=1e-12) and res.bound == pytest.approx(0.2, rel=1e-12)


@pytest.mark.parametrize("site", [s for s in SITES if s.family != "cauchy"], ids=lambda s: s.name)
def test_brascamp_lieb_on_audit_grid(site):
    for beta, mu in CAVITY_GRID:
        assert brascamp_lieb_check(site, cavity(beta, mu)).holds is True, (beta, mu)


def test_brascamp_lieb_flags_non_log_concave_hybrid():
    res = brascamp_lieb_check(cauchy_site(0.0), cavity(0.1, 0.0))
    assert res.holds is None and math.isnan(res.bound)
