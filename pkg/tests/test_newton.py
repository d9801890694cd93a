import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eplab.asymptotics import RateScan
from eplab.experiments import mixture_problem
from eplab.gaussian import GaussianDensityND, NaturalParamsND, from_moments_nd
from eplab.newton import (
    ModeNotFoundError,
    NotPositiveDefiniteError,
    ObjectiveND,
    SaddlePointError,
    SingularHessianError,
    cga,
    find_mode,
    newton_inference_step,
    newton_step,
)
from eplab.sites import generate_regression_data, logit_site


def power_objective():
    """psi = |x|^{4/3}, whose plain Newton map is x -> -2x."""
    return ObjectiveND.scalar(
        lambda x: abs(x) ** (4 / 3),
        lambda x: 4 / 3 * np.sign(x) * abs(x) ** (1 / 3),
        lambda x: 4 / 9 * abs(x) ** (-2 / 3) if x != 0 else np.inf,
    )


def quadratic(A, b):
    A, b = np.asarray(A, float), np.asarray(b, float)
    return ObjectiveND(lambda x: float(0.5 * x @ A @ x - b @ x), lambda x: A @ x - b, lambda x: A, len(b))


def logit_pair(c=1.3):
    return ObjectiveND.from_sites([logit_site(c, 1), logit_site(-c, -1), logit_site(0.4, 1), logit_site(-0.4, -1)])


def test_quadratic_one_step():
    assert newton_step(ObjectiveND.scalar(lambda x: x * x / 2, lambda x: x, lambda x: 1.0), [5.0]) == [0.0]
    A, b = [[3.0, 1.0], [1.0, 2.0]], [1.0, -1.0]
    x = newton_step(quadratic(A, b), [7.0, -4.0])
    assert np.allclose(x, np.linalg.solve(A, b), atol=1e-14)


def test_power_newton_map_diverges_oscillating():
    obj = power_objective()
    xs = [np.array([1.0])]
    for _ in range(6):
        xs.append(newton_step(obj, xs[-1]))
    assert xs[1][0] == pytest.approx(-2.0)
    assert [x[0] for x in xs] == pytest.approx([(-2.0) ** k for k in range(7)])


def test_singular_hessian():
    obj = ObjectiveND.scalar(lambda x: x, lambda x: 1.0, lambda x: 0.0)
    with pytest.raises(SingularHessianError):
        newton_step(obj, [0.0])


def test_find_mode_tames_power_objective():
    res = find_mode(power_objective(), [1.0], grad_tol=1e-4)
    assert res.converged and abs(res.x_star[0]) <= 1e-3


def test_find_mode_symmetric_logit_sum():
    res = find_mode(logit_pair(), [2.0])
    assert res.converged and abs(res.x_star[0]) < 1e-10
    assert res.hess_at_mode[0, 0] > 0


def test_find_mode_never_increases_psi():
    obj = logit_pair()
    res = find_mode(obj, [8.0])
    values = [obj.psi(x) for x in res.path]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_local_quadratic_convergence():
    # no backtracking inside 0.1 of the mode: plain Newton steps
    sites = [logit_site(-1.0, 1), logit_site(0.5, -1), logit_site(2.0, -1), logit_site(0.3, 1)]
    obj = ObjectiveND.from_sites(sites)
    x_star = find_mode(obj, [0.0]).x_star[0]
    x = np.array([x_star + 0.09])
    errs = [abs(x[0] - x_star)]
    while errs[-1] > 1e-12:
        x = newton_step(obj, x)
        errs.append(abs(x[0] - x_star))
    c = [b / a**2 for a, b in zip(errs, errs[1:]) if b > 1e-14]
    assert len(c) >= 2 and max(c) < 10.0


def test_inference_step_mean_matches_newton_steps():
    obj = logit_pair()
    x = np.array([0.8])
    g = GaussianDensityND(NaturalParamsND(np.eye(1), x.copy()))
    for _ in range(5):
        x = newton_step(obj, x)
        g = newton_inference_step(obj, g)
        assert np.allclose(g.mean, x, rtol=1e-12, atol=1e-15)


def test_inference_step_fixed_point_is_cga():
    obj = logit_pair()
    q = cga(obj, [1.0])
    again = newton_inference_step(obj, q)
    assert np.allclose(again.mean, q.mean, atol=1e-10)
    assert np.allclose(again.params.precision_matrix, q.params.precision_matrix, rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.floats(0.2, 3), st.floats(-0.9, 0.9))
def test_gaussian_target_inference_step_and_cga_exact(mu, v, rho):
    target = from_moments_nd(mu, [[v, rho * v], [rho * v, v]])
    Q, r = target.params.precision_matrix, target.params.shift
    obj = quadratic(Q, r)
    start = from_moments_nd([0.3, -0.1], np.eye(2))
    step = newton_inference_step(obj, start)
    assert np.allclose(step.mean, target.mean, rtol=1e-9, atol=1e-9)
    assert np.allclose(step.params.precision_matrix, Q, rtol=1e-12)
    q = cga(obj, [0.0, 0.0])
    assert np.allclose(q.mean, target.mean, rtol=1e-9, atol=1e-9)


def test_inference_step_rejects_indefinite_hessian():
    obj = quadratic([[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0])
    with pytest.raises(NotPositiveDefiniteError):
        newton_inference_step(obj, from_moments_nd(np.zeros(2), np.eye(2)))


def test_cga_errors():
    unbounded = ObjectiveND.scalar(lambda x: -x, lambda x: -1.0, lambda x: 0.0)
    with pytest.raises(ModeNotFoundError):
        cga(unbounded, [0.0], max_iter=20)
    saddle = ObjectiveND(lambda x: float(x[0] ** 2 - x[1] ** 2), lambda x: np.array([2 * x[0], -2 * x[1]]),
                         lambda x: np.diag([2.0, -2.0]), 2)
    for start in ([0.0, 0.0], [0.5, 0.0]):
        with pytest.raises(SaddlePointError):
            cga(saddle, start)


def test_objective_derivatives_consistent():
    obj = ObjectiveND.from_sites(generate_regression_data("probit", 20, 4).sites())
    rng = np.random.default_rng(0)
    h = 1e-5
    for x in rng.uniform(-2, 2, size=(5, 4)):
        fd = np.array([(obj.psi(x + h * e) - obj.psi(x - h * e)) / (2 * h) for e in np.eye(4)])
        g = obj.grad(x)
        assert np.all(np.abs(g - fd) <= 1e-5 * (1 + np.abs(g)))
        fdh = np.array([(obj.grad(x + h * e) - obj.grad(x - h * e)) / (2 * h) for e in np.eye(4)])
        assert np.all(np.abs(obj.hess(x) - fdh) <= 1e-5 * (1 + np.abs(obj.hess(x))))


def test_mixture_modes_exchange_symmetric():
    _, sites = mixture_problem(20, (0.0, -2.5), 1)
    obj = ObjectiveND.from_sites(sites)
    a = cga(obj, [0.0, -2.5])
    b = cga(obj, [-2.5, 0.0])
    assert np.allclose(a.mean, b.mean[::-1], atol=1e-8)
    assert np.linalg.norm(a.mean - b.mean) > 1.0
    assert np.allclose(a.params.precision_matrix, b.params.precision_matrix[::-1, ::-1], rtol=1e-8)


def test_probit_cga_curvature_grows_linearly():
    ns = [50, 100, 200, 400]
    growth = []
    for n in ns:
        q = cga(ObjectiveND.from_sites(generate_regression_data("probit", n, 0).sites()), np.zeros(4))
        assert np.all(np.linalg.eigvalsh(q.params.precision_matrix) > 0)
        # the unit prior adds exactly 1 to every eigenvalue
        growth.append(np.linalg.eigvalsh(q.params.precision_matrix).min() - 1.0)
    assert RateScan.fit(ns, growth).within(1.0, 0.15)
