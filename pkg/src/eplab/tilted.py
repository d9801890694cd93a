"""Moments of hybrid (tilted) distributions ``h(x) ∝ q_cavity(x) l(x)``.

The reference path is Gauss-Hermite quadrature under the cavity, refined by
re-centring on the hybrid itself.  Closed forms exist for Gaussian, probit
and two-component mixture sites and are used as fast paths.  Rank-one sites
``phi(v^T x)`` in several dimensions are reduced to a 1D problem along ``v``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import log_ndtr, roots_hermite

from .gaussian import (
    DomainError,
    GaussianDensity1D,
    GaussianDensityND,
    NaturalParams1D,
    NaturalParamsND,
    from_moments,
    from_moments_nd,
)
from .sites import SiteModel1D, SiteModelND, mills_ratio

_LOG_PI = math.log(math.pi)
_SQRT2 = math.sqrt(2.0)


class QuadratureError(RuntimeError):
    """The hybrid integrand could not be evaluated."""


class DegenerateMomentsError(QuadratureError):
    """Quadrature produced a non-positive variance."""


@dataclass(frozen=True)
class TiltedMoments1D:
    log_z: float
    mean: float
    variance: float

    def __post_init__(self):
        if not (self.variance > 0 and math.isfinite(self.variance)
                and math.isfinite(self.mean) and math.isfinite(self.log_z)):
            raise DegenerateMomentsError(f"invalid tilted moments {self}")


@dataclass(frozen=True, eq=False)
class TiltedMomentsND:
    log_z: float
    mean: np.ndarray
    covariance: np.ndarray


TiltedMoments2D = TiltedMomentsND
TiltedMoments = Union[TiltedMoments1D, TiltedMomentsND]


@dataclass(frozen=True)
class QuadratureConfig:
    """Gauss-Hermite settings.

    ``center_on="cavity_mean"`` disables refinement.  ``tail_width`` caps
    how far (in cavity sds) a refined centre may drift from the cavity mean.
    After refinement the rule size is doubled (``2n + 1``) until successive
    moment estimates agree to ``adaptive_tol`` or ``max_nodes`` is reached;
    ``adaptive_tol=0`` keeps the fixed rule.
    """

    nodes: int = 61
    expansion_passes: int = 3
    center_on: str = "refined"
    tail_width: float = 10.0
    adaptive_tol: float = 1e-11
    max_nodes: int = 1000

    def __post_init__(self):
        if self.nodes < 11 or self.nodes % 2 == 0:
            raise DomainError(f"nodes must be odd and >= 11, got {self.nodes}")
        if self.tail_width < 5:
            raise DomainError(f"tail_width must be >= 5, got {self.tail_width}")
        if self.center_on not in ("cavity_mean", "refined"):
            raise DomainError(f"unknown center_on {self.center_on!r}")


DEFAULT_QUADRATURE = QuadratureConfig()


@lru_cache(maxsize=None)
def _hermite_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    t, w = roots_hermite(n)
    # outer weights of large rules underflow to zero and carry no mass
    keep = w > 0
    t, w = t[keep], w[keep]
    t.setflags(write=False)
    logw = np.log(w)
    logw.setflags(write=False)
    return t, logw


@dataclass(frozen=True, eq=False)
class _Rule:
    """Final quadrature nodes and normalised hybrid weights."""

    x: np.ndarray
    p: np.ndarray
    moments: TiltedMoments1D


def _flat_reference(site: SiteModel1D) -> tuple[float, float]:
    """Centre and scale for a site integrated against a flat cavity."""
    res = minimize_scalar(lambda z: float(site.phi(z)), bracket=(-1.0, 1.0))
    curv = float(site.d2(res.x))
    return float(res.x), 1.0 / math.sqrt(curv) if curv > 0 else 1.0


def _evaluate(site: SiteModel1D, t, logw, center: float, scale: float,
              mu_c: float, sd_c: float, flat: bool):
    x = center + _SQRT2 * scale * t
    # log of cavity / reference; the reference contributes exp(-t^2) via the rule
    if flat:
        log_ratio = t * t + 0.5 * math.log(2.0 * math.pi) + math.log(scale)
    elif center == mu_c and scale == sd_c:
        log_ratio = 0.0
    else:
        u = (x - mu_c) / sd_c
        log_ratio = t * t - 0.5 * u * u + math.log(scale / sd_c)
    logf = logw - site.phi(x) + log_ratio
    bad = ~np.isfinite(logf)
    if np.any(bad):
        j = int(np.argmax(bad))
        raise QuadratureError(f"site {site.name}: non-finite integrand at node x={x[j]!r}")
    amax = float(np.max(logf))
    p = np.exp(logf - amax)
    total = float(np.sum(p))
    p /= total
    mt = float(p @ t)
    # central moments about the node centre avoid cancellation when var << mean^2
    vt = float(p @ (t - mt) ** 2)
    var = 2.0 * scale * scale * vt
    if not var > 0.0:
        raise DegenerateMomentsError(f"site {site.name}: variance {var} after refinement")
    log_z = amax + math.log(total) - 0.5 * _LOG_PI
    return _Rule(x, p, TiltedMoments1D(log_z, center + _SQRT2 * scale * mt, var))


def _close(a: TiltedMoments1D, b: TiltedMoments1D, tol: float) -> bool:
    sd = math.sqrt(b.variance)
    return (abs(a.log_z - b.log_z) <= tol * (1.0 + abs(b.log_z))
            and abs(a.mean - b.mean) <= tol * (abs(b.mean) + sd)
            and abs(a.variance - b.variance) <= tol * b.variance)


def _hybrid_rule(site: SiteModel1D, cavity, cfg: QuadratureConfig) -> _Rule:
    if isinstance(cavity, NaturalParams1D) and not cavity.is_flat():
        cavity = GaussianDensity1D(cavity)
    flat = isinstance(cavity, NaturalParams1D)
    if flat:
        mu_c, sd_c = _flat_reference(site)
    else:
        mu_c, sd_c = cavity.mean, cavity.sd
    t, logw = _hermite_rule(cfg.nodes)
    center, scale = mu_c, sd_c
    passes = cfg.expansion_passes if cfg.center_on == "refined" else 0
    for k in range(passes + 1):
        rule = _evaluate(site, t, logw, center, scale, mu_c, sd_c, flat)
        m = rule.moments
        if k == passes:
            break
        new_scale = math.sqrt(m.variance)
        if abs(m.mean - center) < 1e-3 * sd_c and abs(math.log(new_scale / scale)) < 1e-3:
            break
        lim = cfg.tail_width * sd_c
        center = min(max(m.mean, mu_c - lim), mu_c + lim)
        scale = new_scale
    # escalate the rule until two successive sizes agree
    n = cfg.nodes
    while cfg.adaptive_tol > 0 and n < cfg.max_nodes:
        n = 2 * n + 1
        t, logw = _hermite_rule(n)
        finer = _evaluate(site, t, logw, center, scale, mu_c, sd_c, flat)
        done = _close(rule.moments, finer.moments, cfg.adaptive_tol)
        rule = finer
        if done:
            break
    return rule


def tilted_moments_quadrature(site: SiteModel1D, cavity, cfg: QuadratureConfig = DEFAULT_QUADRATURE
                              ) -> TiltedMoments1D:
    """Log-normaliser, mean and variance of ``l(x) N(x | cavity)``.

    ``log_z`` is ``log ∫ l(x) q(x) dx`` with ``q`` the normalised cavity.  An
    exactly flat cavity (zero natural parameters) is accepted, in which case
    the moments are those of the normalised site itself and ``log_z`` is
    ``log ∫ l(x) dx``.
    """
    return _hybrid_rule(site, cavity, cfg).moments


def hybrid_expectation(site: SiteModel1D, cavity, f: Callable[[np.ndarray], np.ndarray],
                       cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
    """``E_h[f(x)]`` under the hybrid, with the same rule as the moments."""
    rule = _hybrid_rule(site, cavity, cfg)
    return float(rule.p @ f(rule.x))


# ---------------------------------------------------------------------------
# closed forms


def tilted_moments_gaussian(site: SiteModel1D, cavity) -> TiltedMoments1D:
    """Exact hybrid for a Gaussian site: natural parameters add."""
    g, a = site.params["gamma"], site.params["alpha"]
    if isinstance(cavity, NaturalParams1D):
        beta, r, log_norm_c = cavity.precision, cavity.shift, 0.0
    else:
        beta, r = cavity.params.precision, cavity.params.shift
        log_norm_c = r * r / (2 * beta) - 0.5 * math.log(beta) + 0.5 * math.log(2 * math.pi)
    bh, rh = beta + g, r + a
    if not bh > 0:
        raise DegenerateMomentsError(f"hybrid precision {bh} is not positive")
    log_norm_h = rh * rh / (2 * bh) - 0.5 * math.log(bh) + 0.5 * math.log(2 * math.pi)
    return TiltedMoments1D(log_norm_h - log_norm_c, rh / bh, 1.0 / bh)


def _probit_1d(y: int, m: float, s2: float) -> tuple[float, float, float]:
    """Tilted (log_z, mean, var) of ``Phi(y a) N(a; m, s2)``."""
    if s2 == 0.0:
        return float(log_ndtr(y * m)), m, 0.0
    c = math.sqrt(1.0 + s2)
    z = y * m / c
    R = float(mills_ratio(z))
    mean = m + y * s2 * R / c
    var = s2 - s2 * s2 * R * (z + R) / (1.0 + s2)
    return float(log_ndtr(z)), mean, var


def _lift_rank_one(cavity: GaussianDensityND, v: np.ndarray, log_z: float,
                   mean_a: float, var_a: float) -> TiltedMomentsND:
    mu, S = cavity.mean, cavity.covariance
    Sv = S @ v
    s2 = float(v @ Sv)
    if s2 == 0.0:
        return TiltedMomentsND(log_z, mu, S)
    m_a = float(v @ mu)
    mean = mu + Sv * (mean_a - m_a) / s2
    cov = S - np.outer(Sv, Sv) * ((s2 - var_a) / (s2 * s2))
    return TiltedMomentsND(log_z, mean, 0.5 * (cov + cov.T))


def tilted_moments_probit(y: int, v, cavity: GaussianDensityND) -> TiltedMomentsND:
    """Closed-form hybrid for ``Phi(y v^T x)`` against a Gaussian cavity."""
    v = np.asarray(v, dtype=float)
    mu, S = cavity.mean, cavity.covariance
    s2 = float(v @ S @ v)
    log_z, mean_a, var_a = _probit_1d(int(y), float(v @ mu), s2)
    return _lift_rank_one(cavity, v, log_z, mean_a, var_a)


def tilted_moments_rank_one(site: SiteModel1D, v, cavity: GaussianDensityND,
                            cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> TiltedMomentsND:
    """Hybrid for ``phi(v^T x)``: 1D quadrature on the projected cavity, then lifted."""
    v = np.asarray(v, dtype=float)
    mu, S = cavity.mean, cavity.covariance
    s2 = float(v @ S @ v)
    if s2 == 0.0:
        return TiltedMomentsND(-float(site.phi(0.0)), mu, S)
    proj = from_moments(float(v @ mu), s2)
    m = tilted_moments_quadrature(site, proj, cfg)
    return _lift_rank_one(cavity, v, m.log_z, m.mean, m.variance)


def tilted_moments_mixture(y: float, cavity: GaussianDensityND) -> TiltedMomentsND:
    """Closed-form hybrid of ``(N(y; x1, 1) + N(y; x2, 1)) / 2`` and a 2D Gaussian cavity.

    The product is a two-component Gaussian mixture; each component is a
    rank-one conjugate update along a coordinate axis.
    """
    if cavity.dim != 2:
        raise DomainError("mixture site needs a 2D cavity")
    mu, S = cavity.mean, cavity.covariance
    logw, means, covs = [], [], []
    for k in range(2):
        s2 = S[k, k]
        denom = 1.0 + s2
        resid = y - mu[k]
        logw.append(math.log(0.5) - 0.5 * math.log(2 * math.pi * denom) - 0.5 * resid * resid / denom)
        Sk = S[:, k]
        means.append(mu + Sk * resid / denom)
        covs.append(S - np.outer(Sk, Sk) / denom)
    logw = np.array(logw)
    top = float(np.max(logw))
    log_z = top + math.log(float(np.sum(np.exp(logw - top))))
    w = np.exp(logw - log_z)
    mean = w[0] * means[0] + w[1] * means[1]
    d = means[0] - means[1]
    cov = w[0] * covs[0] + w[1] * covs[1] + w[0] * w[1] * np.outer(d, d)
    return TiltedMomentsND(log_z, mean, 0.5 * (cov + cov.T))


def tilted_moments_gaussian_nd(site: SiteModelND, cavity: GaussianDensityND) -> TiltedMomentsND:
    Q, r = site.params["precision_matrix"], site.params["shift"]
    hybrid = GaussianDensityND(NaturalParamsND(cavity.params.precision_matrix + Q,
                                               cavity.params.shift + r))

    def log_norm(g):
        m = g.mean
        return 0.5 * float(m @ g.params.shift) - 0.5 * g.logdet_precision()

    return TiltedMomentsND(log_norm(hybrid) - log_norm(cavity), hybrid.mean, hybrid.covariance)


# ---------------------------------------------------------------------------
# dispatch and site updates


def tilted_moments(site, cavity, cfg: QuadratureConfig = DEFAULT_QUADRATURE,
                   closed_form: bool = True) -> TiltedMoments:
    """Hybrid moments for any built-in site, choosing a closed form when one exists."""
    if isinstance(site, SiteModel1D):
        if site.family == "gaussian":
            return tilted_moments_gaussian(site, cavity)
        if closed_form and site.family == "probit" and not isinstance(cavity, NaturalParams1D):
            log_z, m, v = _probit_1d(site.params["y"], cavity.mean, cavity.variance)
            return TiltedMoments1D(log_z, m, v)
        return tilted_moments_quadrature(site, cavity, cfg)
    if site.family == "gaussian":
        return tilted_moments_gaussian_nd(site, cavity)
    if site.family == "mixture2d":
        return tilted_moments_mixture(site.params["y"], cavity)
    if site.family == "linear":
        base = site.base
        if closed_form and base.family == "probit":
            return tilted_moments_probit(base.params["y"], site.regressor, cavity)
        return tilted_moments_rank_one(base, site.regressor, cavity, cfg)
    raise NotImplementedError(f"no tilted-moment routine for ND site family {site.family!r}")


SiteMomentsFn = Callable[[int, object], TiltedMoments]


def make_moments_fn(sites: Sequence, cfg: QuadratureConfig = DEFAULT_QUADRATURE,
                    closed_form: bool = True) -> SiteMomentsFn:
    """Bind a site list to a ``(index, cavity) -> TiltedMoments`` callable.

    Repeated 1D requests for the same site object under the same cavity are
    served from a small memo, which makes aEP passes over repeated sites cheap.
    """
    sites = list(sites)
    memo: dict = {}

    def moments(i: int, cavity) -> TiltedMoments:
        site = sites[i]
        if not isinstance(site, SiteModel1D):
            return tilted_moments(site, cavity, cfg, closed_form)
        key = (id(site), _cavity_params(cavity))
        hit = memo.get(key)
        if hit is None:
            if len(memo) > 256:
                memo.clear()
            hit = memo[key] = tilted_moments(site, cavity, cfg, closed_form)
        return hit

    return moments


def site_update_from_moments(m: TiltedMoments, cavity):
    """Natural parameters of the moment-matched Gaussian minus the cavity."""
    if isinstance(m, TiltedMoments1D):
        return from_moments(m.mean, m.variance).params - cavity
    return from_moments_nd(m.mean, m.covariance).params - cavity


def _cavity_params(cavity) -> NaturalParams1D:
    return cavity if isinstance(cavity, NaturalParams1D) else cavity.params


def stein_residual(site: SiteModel1D, cavity, update: NaturalParams1D, m: TiltedMoments1D,
                   cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
    """``|r_i - (beta_i mu_h - E_h[phi'])|``, an identity every exact site update satisfies."""
    e_d1 = hybrid_expectation(site, cavity, site.d1, cfg)
    return abs(update.shift - (update.precision * m.mean - e_d1))


@dataclass(frozen=True)
class BrascampLiebResult:
    var: float
    bound: float
    holds: Optional[bool]


def brascamp_lieb_check(site: SiteModel1D, cavity: GaussianDensity1D,
                        cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> BrascampLiebResult:
    """Compare the hybrid variance with ``E_h[1 / (phi'' + beta)]``.

    ``holds`` is None when the hybrid is not log-concave on the quadrature
    nodes, in which case the bound is undefined and reported as NaN.
    """
    rule = _hybrid_rule(site, cavity, cfg)
    curv = site.d2(rule.x) + cavity.params.precision
    var = rule.moments.variance
    if np.any(curv <= 0):
        return BrascampLiebResult(var, math.nan, None)
    bound = float(rule.p @ (1.0 / curv))
    return BrascampLiebResult(var, bound, bool(var <= bound + 1e-10))
