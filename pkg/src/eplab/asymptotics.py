"""Empirical rate scans for the large-precision and large-data behaviour of EP.

Each scan measures an error on a log-spaced grid and fits the log-log slope
by ordinary least squares.  Nothing here proves a rate; it measures one.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy import stats

from .engine import (
    AEPState,
    EPState,
    InvalidCavityError,
    MomentsFailure,
    RunConfig,
    aep_averaged_pass,
    aep_pass,
    initialize,
    parallel_pass,
    run,
    to_aep,
)
from .gaussian import (
    DomainError,
    NaturalParams,
    NaturalParams1D,
    NaturalParamsND,
    density,
    kl_gaussian_nd,
    tv_upper_bound,
)
from .newton import ObjectiveND, cga
from .sites import SiteModel1D, gaussian_site, generate_regression_data, logit_site
from .tilted import (
    DEFAULT_QUADRATURE,
    QuadratureConfig,
    make_moments_fn,
    site_update_from_moments,
    tilted_moments,
)


@dataclass(frozen=True, eq=False)
class RateScan:
    xs: np.ndarray
    errors: np.ndarray
    fitted_slope: float
    slope_ci: float

    @classmethod
    def fit(cls, xs, errors, level: float = 0.95) -> "RateScan":
        """OLS of ``log(error)`` on ``log(x)``; ``slope_ci`` is the ``level`` half-width.

        The slope is NaN when any error is zero or fewer than three points exist.
        """
        xs = np.asarray(xs, dtype=float)
        errors = np.asarray(errors, dtype=float)
        if xs.shape != errors.shape:
            raise DomainError("xs and errors must have the same length")
        if np.any(np.diff(xs) <= 0):
            raise DomainError("xs must be strictly increasing")
        if np.any(errors < 0) or not np.all(np.isfinite(errors)):
            raise DomainError("errors must be finite and non-negative")
        if xs.size < 3 or np.any(errors == 0):
            return cls(xs, errors, math.nan, math.nan)
        fit = stats.linregress(np.log(xs), np.log(errors))
        half = stats.t.ppf(0.5 + level / 2, xs.size - 2) * fit.stderr
        return cls(xs, errors, float(fit.slope), float(half))

    def within(self, target: float, tol: float) -> bool:
        return bool(abs(self.fitted_slope - target) <= tol)

    def summary(self) -> dict:
        return {"fitted_slope": self.fitted_slope, "slope_ci": self.slope_ci,
                "xs": self.xs.tolist(), "errors": self.errors.tolist()}


def write_scan(path, columns: dict, slopes: dict) -> tuple[Path, Path]:
    """Write ``columns`` as a CSV (one row per grid point) and ``slopes`` as a JSON sidecar."""
    path = Path(path)
    names = list(columns)
    rows = zip(*(columns[k] for k in names))
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    side = path.with_suffix(".slopes.json")
    side.write_text(json.dumps(slopes, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path, side


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# ---------------------------------------------------------------------------
# single site under a sharpening cavity


@dataclass(frozen=True)
class SiteLimitRow:
    beta: float
    mu_h: float
    var_h: float
    r_i: float
    beta_i: float


def site_limit_table(site: SiteModel1D, mu0: float, delta_r: float, betas: Sequence[float],
                     cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> list[SiteLimitRow]:
    """Exact site update against the cavity ``(beta, beta * mu0 - delta_r)`` for each beta."""
    rows = []
    for beta in betas:
        cavity = NaturalParams1D(beta, beta * mu0 - delta_r)
        m = tilted_moments(site, density(cavity), cfg)
        upd = site_update_from_moments(m, cavity)
        rows.append(SiteLimitRow(float(beta), m.mean, m.variance, upd.shift, upd.precision))
    return rows


def thm1_scan(site: SiteModel1D, mu0: float, delta_r: float, betas: Sequence[float],
              cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> tuple[RateScan, RateScan, RateScan]:
    """Errors of ``r_i``, ``beta_i`` and the hybrid mean against their large-beta limits."""
    betas = np.asarray(betas, dtype=float)
    if betas.min() < 10:
        raise DomainError("cavity precisions must be at least 10")
    rows = site_limit_table(site, mu0, delta_r, betas, cfg)
    d1, d2 = float(site.d1(mu0)), float(site.d2(mu0))
    err_r = [abs(row.r_i - (-d1 + row.beta_i * mu0)) for row in rows]
    err_b = [abs(row.beta_i - d2) for row in rows]
    err_m = [abs(row.mu_h - mu0) for row in rows]
    return RateScan.fit(betas, err_r), RateScan.fit(betas, err_b), RateScan.fit(betas, err_m)


# ---------------------------------------------------------------------------
# one pass against one Newton step


class Thm2Result(NamedTuple):
    newton_target: NaturalParams
    ep_result: NaturalParams
    aep_result: NaturalParams
    gaps: dict


def newton_target(sites: Sequence, mean) -> NaturalParams:
    """Natural parameters ``(psi''(mu), psi''(mu) mu - psi'(mu))`` of the Newton-as-inference step."""
    obj = ObjectiveND.from_sites(sites)
    mu = np.atleast_1d(np.asarray(mean, dtype=float))
    H, g = obj.hess(mu), obj.grad(mu)
    if isinstance(sites[0], SiteModel1D):
        h = float(H[0, 0])
        return NaturalParams1D(h, h * float(mu[0]) - float(g[0]))
    return NaturalParamsND(H, H @ mu - g)


def thm2_discrepancy(sites: Sequence, state: EPState, moments, cfg: RunConfig = RunConfig()) -> Thm2Result:
    """One parallel-EP pass and one aEP pass from ``state``, compared with one Newton step."""
    g = density(state.global_params)
    target = newton_target(sites, g.mean)
    ep = parallel_pass(state, sites, moments, cfg).global_params
    aep = aep_pass(to_aep(state), sites, moments, cfg).global_params
    gaps = {"ep": np.abs(ep.as_vector() - target.as_vector()),
            "aep": np.abs(aep.as_vector() - target.as_vector())}
    return Thm2Result(target, ep, aep, gaps)


def thm2_setup(scale: float, n_sites: int = 10, seed: int = 0, mean: float = 0.3,
               site_init: NaturalParams1D = NaturalParams1D(0.1, 0.0)):
    """Logit sites plus a Gaussian site of precision ``scale``.

    Offsets are standard normal and labels are fair coin flips, both drawn
    from ``seed``.  Every logit site starts at ``site_init``; the Gaussian
    site's shift is chosen so that the global mean equals ``mean``.
    """
    rng = np.random.default_rng(seed)
    offsets = rng.standard_normal(n_sites)
    labels = rng.choice([-1, 1], size=n_sites)
    logits = [logit_site(float(c), int(y)) for c, y in zip(offsets, labels)]
    total_prec = scale + n_sites * site_init.precision
    shift = mean * total_prec - n_sites * site_init.shift
    sites = [gaussian_site(scale, shift)] + logits
    state = EPState.from_sites([NaturalParams1D(scale, shift)] + [site_init] * n_sites)
    return sites, state


def thm2_scan(scales: Sequence[float], n_sites: int = 10, seed: int = 0, mean: float = 0.3,
              cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> dict:
    """Gap scans keyed ``ep_precision``, ``ep_shift``, ``aep_precision``, ``aep_shift``."""
    gaps = {k: [] for k in ("ep_precision", "ep_shift", "aep_precision", "aep_shift")}
    for s in scales:
        sites, state = thm2_setup(s, n_sites, seed, mean)
        res = thm2_discrepancy(sites, state, make_moments_fn(sites, cfg))
        for alg in ("ep", "aep"):
            gaps[f"{alg}_precision"].append(res.gaps[alg][0])
            gaps[f"{alg}_shift"].append(res.gaps[alg][1])
    return {k: RateScan.fit(scales, v) for k, v in gaps.items()}


# ---------------------------------------------------------------------------
# stable boxes around the CGA


@dataclass(frozen=True)
class StableRegionSpec:
    center: NaturalParams1D
    delta_r: float
    delta_beta: float
    samples: int = 500
    seed: int = 0

    def __post_init__(self):
        if not (self.delta_r > 0 and self.delta_beta > 0):
            raise DomainError("box half-widths must be positive")


@dataclass(frozen=True, eq=False)
class ProbeResult:
    fraction_retained: float
    escapes: list
    delta: float
    delta_aep: float
    kind: str


_AEP_PASSES = (aep_pass, aep_averaged_pass)


def cga_center(sites: Sequence[SiteModel1D], x0: float = 0.0) -> NaturalParams1D:
    g = cga(ObjectiveND.from_sites(sites), [x0])
    return NaturalParams1D(float(g.params.precision_matrix[0, 0]), float(g.params.shift[0]))


def stability_scales(sites: Sequence[SiteModel1D], x_star: float) -> tuple[float, float]:
    """``delta = n K / psi''`` and ``delta_aep = K sum|phi'| / psi''`` with ``K = max(K3, K4)``.

    NaN when a site lacks third/fourth derivative bounds.
    """
    n = len(sites)
    ks = [max(s.k3, s.k4) if s.k3 is not None and s.k4 is not None else math.nan for s in sites]
    k = max(ks)
    curv = sum(float(s.d2(x_star)) for s in sites)
    slope = sum(abs(float(s.d1(x_star))) for s in sites)
    return n * k / curv, k * slope / curv


def thm3_probe(sites: Sequence[SiteModel1D], spec: StableRegionSpec, pass_fn: Callable = aep_pass,
               moments=None, cfg: RunConfig = RunConfig(), kind: Optional[str] = None) -> ProbeResult:
    """Fraction of uniformly sampled in-box states that one pass maps back into the box.

    ``kind='aep'`` samples the global box ``|r - beta x*| <= n delta_r``,
    ``|beta - psi''(x*)| <= n delta_beta``.  ``kind='ep'`` samples every site
    independently in ``|r_i + phi_i'(x*) - beta_i x*| <= delta_r``,
    ``|beta_i - phi_i''(x*)| <= delta_beta``.  By default the kind follows
    ``pass_fn``.
    """
    sites = list(sites)
    n = len(sites)
    kind = kind or ("aep" if pass_fn in _AEP_PASSES else "ep")
    moments = moments or make_moments_fn(sites)
    x_star = spec.center.shift / spec.center.precision
    d1 = np.array([float(s.d1(x_star)) for s in sites])
    d2 = np.array([float(s.d2(x_star)) for s in sites])
    psi2 = spec.center.precision
    rng = np.random.default_rng(spec.seed)
    escapes = []
    for k in range(spec.samples):
        if kind == "aep":
            beta = psi2 + n * spec.delta_beta * rng.uniform(-1, 1)
            r = beta * x_star + n * spec.delta_r * rng.uniform(-1, 1)
            try:
                new = pass_fn(AEPState(NaturalParams1D(beta, r), n), sites, moments, cfg).global_params
            except (InvalidCavityError, MomentsFailure) as exc:
                escapes.append({"sample": k, "beta_excess": math.inf, "r_excess": math.inf,
                                "error": str(exc)})
                continue
            off_b = abs(new.precision - psi2) / (n * spec.delta_beta)
            off_r = abs(new.shift - new.precision * x_star) / (n * spec.delta_r)
        else:
            beta = d2 + spec.delta_beta * rng.uniform(-1, 1, n)
            r = beta * x_star - d1 + spec.delta_r * rng.uniform(-1, 1, n)
            start = EPState.from_sites([NaturalParams1D(b, s) for b, s in zip(beta, r)])
            new_sites = pass_fn(start, sites, moments, cfg).site_params
            nb = np.array([p.precision for p in new_sites])
            nr = np.array([p.shift for p in new_sites])
            off_b = float(np.max(np.abs(nb - d2))) / spec.delta_beta
            off_r = float(np.max(np.abs(nr + d1 - nb * x_star))) / spec.delta_r
        if off_b > 1.0 or off_r > 1.0:
            escapes.append({"sample": k, "beta_excess": off_b, "r_excess": off_r})
    delta, delta_aep = stability_scales(sites, x_star)
    frac = 1.0 - len(escapes) / spec.samples
    return ProbeResult(frac, escapes, delta, delta_aep, kind)


def thm3_sites(n: int, seed: int = 0, location: float = 0.5, spread: float = 2.0) -> list[SiteModel1D]:
    """Unit Gaussian prior followed by ``n`` logit sites with seed-fixed offsets and labels.

    Offsets are ``N(0, spread^2)``; label ``+1`` has probability
    ``sigmoid(location - offset)``.
    """
    rng = np.random.default_rng(seed)
    offsets = spread * rng.standard_normal(n)
    p = 1.0 / (1.0 + np.exp(-(location - offsets)))
    labels = np.where(rng.random(n) < p, 1, -1)
    return [gaussian_site(1.0, 0.0)] + [logit_site(float(c), int(y)) for c, y in zip(offsets, labels)]


# ---------------------------------------------------------------------------
# large-data exactness


@dataclass(frozen=True, eq=False)
class Thm4Result:
    kl: RateScan
    tv: RateScan
    records: list = field(default_factory=list)
    excluded: int = 0


def ep_fixed_point(sites: Sequence, moments, damping: float = 0.5, max_passes: int = 500,
                   tol: float = 1e-10):
    """Damped parallel EP from the prior; returns the run report."""
    prior = sites[0]
    lam = (NaturalParamsND(prior.params["precision_matrix"], prior.params["shift"])
           if prior.family == "gaussian" and not isinstance(prior, SiteModel1D)
           else NaturalParams1D(prior.params["gamma"], prior.params["alpha"]))
    dim = lam.dim
    state = initialize(len(sites), "flat_sites_with_prior", prior=lam, dim=dim)
    return run(state, sites, moments, RunConfig(damping=damping, max_passes=max_passes, tol=tol))


def thm4_rate(model: str, ns: Sequence[int], seeds: Sequence[int], moments: Optional[Callable] = None,
              damping: float = 0.5, dim: int = 4) -> Thm4Result:
    """KL(q_EP || q_CGA) and its Pinsker TV bound, averaged over seeds, against n.

    ``moments`` maps a site list to a moment function; it defaults to
    :func:`make_moments_fn` with closed forms enabled.  Runs that do not
    converge are excluded and counted.
    """
    moments = moments or make_moments_fn
    records = []
    excluded = 0
    for n in ns:
        for seed in seeds:
            data = generate_regression_data(model, n, seed, dim)
            sites = data.sites()
            rep = ep_fixed_point(sites, moments(sites), damping)
            if rep.status.kind != "converged":
                excluded += 1
                records.append({"n": n, "seed": seed, "status": str(rep.status),
                                "kl": math.nan, "tv": math.nan})
                continue
            q_ep = density(rep.final_state.global_params)
            q_cga = cga(ObjectiveND.from_sites(sites), q_ep.mean)
            kl = kl_gaussian_nd(q_ep, q_cga)
            records.append({"n": n, "seed": seed, "status": "converged",
                            "kl": kl, "tv": tv_upper_bound(kl)})
    kl_mean, tv_mean = [], []
    for n in ns:
        ok = [r for r in records if r["n"] == n and r["status"] == "converged"]
        if not ok:
            raise RuntimeError(f"no converged replicate at n={n}")
        kl_mean.append(float(np.mean([r["kl"] for r in ok])))
        tv_mean.append(float(np.mean([r["tv"] for r in ok])))
    return Thm4Result(RateScan.fit(ns, kl_mean), RateScan.fit(ns, tv_mean), records, excluded)
