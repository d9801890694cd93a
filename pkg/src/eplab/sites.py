"""Site models: negative log-likelihoods with analytic derivatives.

Every 1D derivative function is vectorised over numpy arrays, which is what
the quadrature routines rely on.  Special functions use stable forms:

* softplus ``log(1 + e^z)`` is evaluated as ``max(z, 0) + log1p(e^{-|z|})``,
  so for ``z < -30`` it returns ``e^z`` to full relative precision and for
  large ``z`` it returns ``z`` without overflow;
* ``log Phi`` goes through :func:`scipy.special.log_ndtr`, which switches to
  an asymptotic series in the far left tail;
* the mixture site combines its two components with ``logaddexp``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import expit, log_ndtr

from .gaussian import DomainError

Fn = Callable[[np.ndarray], np.ndarray]

_LOG_2PI = math.log(2.0 * math.pi)


def softplus(z):
    z = np.asarray(z, dtype=float)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def mills_ratio(z):
    """``N(z; 0, 1) / Phi(z)``, stable for very negative ``z``."""
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * z * z - 0.5 * _LOG_2PI - log_ndtr(z))


@dataclass(frozen=True)
class SiteModel1D:
    """A scalar site ``l(x) = exp(-phi(x))`` together with its derivatives.

    ``curvature_range`` is the bound ``max phi'' - min phi''``; ``k3`` and
    ``k4`` bound the third and fourth derivatives.  All three are optional
    and only used for diagnostics.
    """

    phi: Fn
    d1: Fn
    d2: Fn
    d3: Optional[Fn] = None
    d4: Optional[Fn] = None
    curvature_range: Optional[float] = None
    k3: Optional[float] = None
    k4: Optional[float] = None
    name: str = "site"
    family: str = "custom"
    params: dict = field(default_factory=dict)

    dim = 1

    def shifted(self, offset: float) -> "SiteModel1D":
        """The same site translated so that it acts on ``x - offset``."""
        c = float(offset)
        wrap = (lambda f: None if f is None else (lambda x: f(np.asarray(x) - c)))
        return SiteModel1D(
            phi=wrap(self.phi), d1=wrap(self.d1), d2=wrap(self.d2),
            d3=wrap(self.d3), d4=wrap(self.d4),
            curvature_range=self.curvature_range, k3=self.k3, k4=self.k4,
            name=f"{self.name}@{c:g}", family=self.family + "-shifted",
            params={**self.params, "offset": c},
        )


@dataclass(frozen=True)
class SiteModelND:
    phi: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    dim: int
    name: str = "site"
    family: str = "custom"
    params: dict = field(default_factory=dict)
    base: Optional[SiteModel1D] = None
    regressor: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# 1D site families


def gaussian_site(gamma: float, alpha: float) -> SiteModel1D:
    """``l(x) = exp(-gamma/2 x^2 + alpha x)``; gamma may take any sign."""
    g, a = float(gamma), float(alpha)
    zero = lambda x: np.zeros_like(np.asarray(x, dtype=float))
    return SiteModel1D(
        phi=lambda x: 0.5 * g * np.asarray(x) ** 2 - a * np.asarray(x),
        d1=lambda x: g * np.asarray(x) - a,
        d2=lambda x: np.full_like(np.asarray(x, dtype=float), g),
        d3=zero, d4=zero,
        curvature_range=0.0, k3=0.0, k4=0.0,
        name=f"gaussian({g:g},{a:g})", family="gaussian",
        params={"gamma": g, "alpha": a},
    )


def logit_site(offset: float = 0.0, label: int = 1) -> SiteModel1D:
    """Logistic likelihood ``1 / (1 + exp(-label (x - offset)))``.

    With the defaults this is ``phi(x) = log(1 + e^{-x})``.
    """
    c, y = float(offset), int(label)
    if y not in (-1, 1):
        raise DomainError(f"label must be +1 or -1, got {label}")

    def u(x):
        return y * (np.asarray(x, dtype=float) - c)

    def d2(x):
        s = expit(u(x))
        return s * (1.0 - s)

    def d3(x):
        s = expit(u(x))
        return y * s * (1.0 - s) * (1.0 - 2.0 * s)

    def d4(x):
        s = expit(u(x))
        p = s * (1.0 - s)
        return p * (1.0 - 6.0 * p)

    return SiteModel1D(
        phi=lambda x: softplus(-u(x)),
        d1=lambda x: -y * expit(-u(x)),
        d2=d2, d3=d3, d4=d4,
        curvature_range=0.25, k3=1.0 / (6.0 * math.sqrt(3.0)), k4=0.125,
        name="logit" if (c == 0.0 and y == 1) else f"logit({y:+d},{c:g})",
        family="logit", params={"offset": c, "label": y},
    )


def double_logistic_site(scale: float = 5.0) -> SiteModel1D:
    """``l(x) = (1 + e^{sx})^{-1} (1 + e^{-sx})^{-1}``, an even site with exponential tails."""
    s = float(scale)
    if not s > 0:
        raise DomainError(f"scale must be positive, got {scale}")

    def phi(x):
        z = s * np.asarray(x, dtype=float)
        return softplus(z) + softplus(-z)

    def d2(x):
        p = expit(s * np.asarray(x, dtype=float))
        return 2.0 * s * s * p * (1.0 - p)

    def d3(x):
        p = expit(s * np.asarray(x, dtype=float))
        return 2.0 * s ** 3 * p * (1.0 - p) * (1.0 - 2.0 * p)

    def d4(x):
        p = expit(s * np.asarray(x, dtype=float))
        q = p * (1.0 - p)
        return 2.0 * s ** 4 * q * (1.0 - 6.0 * q)

    return SiteModel1D(
        phi=phi,
        d1=lambda x: s * np.tanh(0.5 * s * np.asarray(x, dtype=float)),
        d2=d2, d3=d3, d4=d4,
        curvature_range=0.5 * s * s,
        k3=2.0 * s ** 3 / (6.0 * math.sqrt(3.0)),
        k4=2.0 * s ** 4 / 8.0,
        name=f"double_logistic({s:g})", family="double_logistic", params={"scale": s},
    )


def probit_site(y: int) -> SiteModel1D:
    """``phi(a) = -log Phi(y a)`` for a sign ``y``; acts on the linear predictor."""
    y = int(y)
    if y not in (-1, 1):
        raise DomainError(f"probit response must be +1 or -1, got {y}")

    def d2(a):
        z = y * np.asarray(a, dtype=float)
        R = mills_ratio(z)
        return R * (z + R)

    return SiteModel1D(
        phi=lambda a: -log_ndtr(y * np.asarray(a, dtype=float)),
        d1=lambda a: -y * mills_ratio(y * np.asarray(a, dtype=float)),
        d2=d2,
        curvature_range=1.0,
        name=f"probit({y:+d})", family="probit", params={"y": y},
    )


def cauchy_site(y: float) -> SiteModel1D:
    """Unit-scale Cauchy likelihood of residual ``y - a``.

    ``phi''`` is positive (2 at the centre) for ``|y - a| < 1`` and negative
    beyond, down to ``-1/4`` at ``|y - a| = sqrt(3)``: the site is not
    log-concave in its tails.
    """
    y = float(y)
    log_pi = math.log(math.pi)

    def e(a):
        return np.asarray(a, dtype=float) - y

    def d2(a):
        e2 = e(a) ** 2
        return 2.0 * (1.0 - e2) / (1.0 + e2) ** 2

    def d3(a):
        t = e(a)
        e2 = t * t
        return 4.0 * t * (e2 - 3.0) / (1.0 + e2) ** 3

    def d4(a):
        e2 = e(a) ** 2
        return -12.0 * (e2 * e2 - 6.0 * e2 + 1.0) / (1.0 + e2) ** 4

    return SiteModel1D(
        phi=lambda a: np.log1p(e(a) ** 2) + log_pi,
        d1=lambda a: 2.0 * e(a) / (1.0 + e(a) ** 2),
        d2=d2, d3=d3, d4=d4,
        curvature_range=2.25, k3=1.5 + math.sqrt(2.0), k4=12.0,
        name=f"cauchy({y:g})", family="cauchy", params={"y": y},
    )


# ---------------------------------------------------------------------------
# ND sites


def compose_linear(site: SiteModel1D, regressor) -> SiteModelND:
    """Lift a scalar site to ``x -> phi(v^T x)``."""
    v = np.asarray(regressor, dtype=float).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise DomainError("regressor must be finite")
    v.setflags(write=False)
    outer = np.outer(v, v)
    return SiteModelND(
        phi=lambda x: float(site.phi(v @ np.asarray(x, dtype=float))),
        grad=lambda x: float(site.d1(v @ np.asarray(x, dtype=float))) * v,
        hess=lambda x: float(site.d2(v @ np.asarray(x, dtype=float))) * outer,
        dim=v.size, name=f"{site.name}∘linear", family="linear",
        params={"base": site.family, **site.params}, base=site, regressor=v,
    )


def gaussian_site_nd(precision_matrix, shift) -> SiteModelND:
    """``l(x) = exp(-x^T Q x / 2 + r^T x)``, typically a prior."""
    Q = np.atleast_2d(np.asarray(precision_matrix, dtype=float))
    r = np.atleast_1d(np.asarray(shift, dtype=float))
    return SiteModelND(
        phi=lambda x: float(0.5 * x @ Q @ x - r @ x),
        grad=lambda x: Q @ x - r,
        hess=lambda x: Q.copy(),
        dim=r.size, name="gaussian", family="gaussian",
        params={"precision_matrix": Q, "shift": r},
    )


def mixture_site_2d(y: float) -> SiteModelND:
    """``l(x) = (N(y; x1, 1) + N(y; x2, 1)) / 2``, exchangeable in ``(x1, x2)``."""
    y = float(y)

    def parts(x):
        x = np.asarray(x, dtype=float)
        g = y - x
        logc = -0.5 * g * g
        w = np.exp(logc - np.logaddexp(logc[0], logc[1]))
        return g, logc, w

    def phi(x):
        _, logc, _ = parts(x)
        return float(-(np.logaddexp(logc[0], logc[1]) - math.log(2.0) - 0.5 * _LOG_2PI))

    def grad(x):
        g, _, w = parts(x)
        return -w * g

    def hess(x):
        g, _, w = parts(x)
        wg = w * g
        return np.diag(w - w * g * g) + np.outer(wg, wg)

    return SiteModelND(phi=phi, grad=grad, hess=hess, dim=2,
                       name=f"mixture({y:g})", family="mixture2d", params={"y": y})


# ---------------------------------------------------------------------------
# synthetic data

_BSPLINE_KNOTS = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0])


def bspline_basis(locations) -> np.ndarray:
    """Cubic B-spline basis on the open uniform knot vector over [0, 1] (4 functions).

    Rows sum to one on [0, 1].
    """
    x = np.asarray(locations, dtype=float)
    return BSpline.design_matrix(x, _BSPLINE_KNOTS, 3).toarray()


@dataclass(frozen=True, eq=False)
class RegressionDataset:
    model: str
    seed: int
    alpha_true: np.ndarray
    regressors: np.ndarray
    responses: np.ndarray

    @property
    def n(self) -> int:
        return len(self.responses)

    @property
    def dim(self) -> int:
        return self.regressors.shape[1]

    def likelihood_sites(self) -> list[SiteModelND]:
        make = {"probit": lambda y: probit_site(int(y)), "cauchy": cauchy_site,
                "logit": lambda y: logit_site(label=int(y)),
                "gaussian": lambda y: gaussian_site(1.0, y)}[self.model]
        return [compose_linear(make(y), x) for x, y in zip(self.regressors, self.responses)]

    def sites(self) -> list[SiteModelND]:
        """Unit Gaussian prior (site 0) followed by the likelihood sites."""
        d = self.dim
        return [gaussian_site_nd(np.eye(d), np.zeros(d))] + self.likelihood_sites()

    def to_json(self) -> str:
        return json.dumps({
            "model": self.model, "seed": self.seed, "n": self.n,
            "alpha_true": self.alpha_true.tolist(),
            "regressors": self.regressors.tolist(),
            "responses": self.responses.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "RegressionDataset":
        d = json.loads(text)
        return cls(d["model"], d["seed"], np.array(d["alpha_true"], dtype=float),
                   np.array(d["regressors"], dtype=float), np.array(d["responses"], dtype=float))


REGRESSION_MODELS = ("probit", "cauchy", "logit", "gaussian")


def generate_regression_data(model: str, n: int, seed: int, dim: int = 4) -> RegressionDataset:
    """Simulate a regression dataset with B-spline regressors on ``n`` equispaced points.

    ``dim=4`` uses the cubic B-spline basis.  ``dim=1`` uses the raw location
    rescaled to ``[-2, 2]`` as a single covariate.
    """
    if model not in REGRESSION_MODELS:
        raise DomainError(f"unknown model {model!r}")
    if n < 4:
        raise DomainError(f"need at least 4 locations, got {n}")
    rng = np.random.default_rng(seed)
    loc = np.linspace(0.0, 1.0, n)
    if dim == 4:
        X = bspline_basis(loc)
    elif dim == 1:
        X = (4.0 * loc - 2.0)[:, None]
    else:
        raise DomainError(f"dim must be 1 or 4, got {dim}")
    alpha = rng.standard_normal(dim)
    eta = X @ alpha
    if model == "probit":
        y = np.where(eta + rng.standard_normal(n) >= 0.0, 1.0, -1.0)
    elif model == "logit":
        y = np.where(rng.random(n) < expit(eta), 1.0, -1.0)
    elif model == "cauchy":
        y = eta + rng.standard_cauchy(n)
    else:
        y = eta + rng.standard_normal(n)
    return RegressionDataset(model, int(seed), alpha, X, y)


def generate_mixture_data(n: int, means: Sequence[float], seed: int) -> np.ndarray:
    """``n`` draws from ``(N(means[0], 1) + N(means[1], 1)) / 2``."""
    if n < 1:
        raise DomainError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, 2, size=n)
    return np.asarray(means, dtype=float)[comp] + rng.standard_normal(n)


# ---------------------------------------------------------------------------
# finite-difference audit


@dataclass
class AuditResult:
    name: str
    max_d1_error: float
    max_d2_error: float
    worst_point: float
    passed: bool


def audit_site(site: SiteModel1D, points=None, rtol: float = 1e-5, seed: int = 0) -> AuditResult:
    """Compare ``d1`` and ``d2`` against central differences of ``phi``.

    Errors are scaled as ``|analytic - fd| / (1 + |analytic|)``.
    """
    if points is None:
        points = np.random.default_rng(seed).uniform(-10.0, 10.0, size=20)
    x = np.asarray(points, dtype=float)
    h1, h2 = 1e-5, 1e-4
    fd1 = (site.phi(x + h1) - site.phi(x - h1)) / (2 * h1)
    fd2 = (site.phi(x + h2) - 2.0 * site.phi(x) + site.phi(x - h2)) / (h2 * h2)
    a1, a2 = site.d1(x), site.d2(x)
    e1 = np.abs(a1 - fd1) / (1.0 + np.abs(a1))
    e2 = np.abs(a2 - fd2) / (1.0 + np.abs(a2))
    worst = int(np.argmax(np.maximum(e1, e2)))
    return AuditResult(site.name, float(e1.max()), float(e2.max()), float(x[worst]),
                       bool(e1.max() <= rtol and e2.max() <= rtol))


def audit_site_nd(site: SiteModelND, points=None, rtol: float = 1e-5, seed: int = 0) -> AuditResult:
    """Gradient against differences of ``phi``; Hessian against differences of ``grad``."""
    if points is None:
        points = np.random.default_rng(seed).uniform(-3.0, 3.0, size=(20, site.dim))
    h = 1e-5
    e1 = e2 = 0.0
    worst = 0
    eye = np.eye(site.dim)
    for k, x in enumerate(np.asarray(points, dtype=float)):
        g, H = site.grad(x), site.hess(x)
        fdg = np.array([(site.phi(x + h * e) - site.phi(x - h * e)) / (2 * h) for e in eye])
        fdh = np.array([(site.grad(x + h * e) - site.grad(x - h * e)) / (2 * h) for e in eye])
        err1 = float(np.max(np.abs(g - fdg) / (1.0 + np.abs(g))))
        err2 = float(np.max(np.abs(H - fdh) / (1.0 + np.abs(H))))
        if max(err1, err2) > max(e1, e2):
            worst = k
        e1, e2 = max(e1, err1), max(e2, err2)
    return AuditResult(site.name, e1, e2, float(worst), bool(e1 <= rtol and e2 <= rtol))


def builtin_sites_1d() -> list[SiteModel1D]:
    """Representative instances of every built-in scalar family."""
    return [
        gaussian_site(1.0, 0.3), gaussian_site(2.0, -1.0),
        logit_site(), logit_site(0.5, -1),
        double_logistic_site(5.0),
        probit_site(1), probit_site(-1),
        cauchy_site(0.0), cauchy_site(1.5),
    ]


def builtin_sites_nd() -> list[SiteModelND]:
    v = np.array([0.3, -0.7, 0.5])
    return [
        compose_linear(logit_site(), v), compose_linear(probit_site(-1), v),
        compose_linear(cauchy_site(0.4), v),
        gaussian_site_nd(np.array([[2.0, 0.3], [0.3, 1.0]]), np.array([0.5, -0.2])),
        mixture_site_2d(0.3), mixture_site_2d(-1.7),
    ]
