"""Batch experiments behind the ``eplab`` command.

Each experiment takes a resolved config dict, a seed and an output
directory, writes tidy CSV/JSON files there, and returns an
:class:`Outcome` with named pass/fail checks.  Rows are sorted by key before
writing, and floats are written with ``repr``, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import asymptotics as asy
from .engine import (
    AEPState,
    EPState,
    RunConfig,
    aep_pass,
    initialize,
    parallel_pass,
    run,
)
from .gaussian import NaturalParams1D, NaturalParamsND, density, from_moments, relative_change
from .newton import ObjectiveND, find_mode
from .sites import (
    SiteModel1D,
    audit_site,
    audit_site_nd,
    builtin_sites_1d,
    builtin_sites_nd,
    double_logistic_site,
    gaussian_site,
    gaussian_site_nd,
    generate_mixture_data,
    generate_regression_data,
    logit_site,
    mixture_site_2d,
)
from .tilted import make_moments_fn


@dataclass
class Outcome:
    files: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_csv(path: Path, header: list, rows: list, sort_key: Callable = None) -> Path:
    rows = sorted(rows, key=sort_key) if sort_key else list(rows)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(_plain(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _params_dict(p):
    if isinstance(p, NaturalParams1D):
        return {"precision": p.precision, "shift": p.shift}
    return {"precision_matrix": p.precision_matrix, "shift": p.shift}


# ---------------------------------------------------------------------------
# site-limit


def site_limit(cfg: dict, seed: int, out: Path) -> Outcome:
    betas = np.logspace(cfg["log10_beta_min"], cfg["log10_beta_max"], cfg["points"])
    rows = asy.site_limit_table(logit_site(), cfg["mu0"], cfg["delta_r"], betas)
    path = write_csv(out / "site_limit.csv", ["beta", "mu_h", "var_h", "r_i", "beta_i"],
                     [(r.beta, r.mu_h, r.var_h, r.r_i, r.beta_i) for r in rows], lambda r: r[0])
    last = rows[-1]
    checks = {}
    if cfg["mu0"] == 0.0 and cfg["delta_r"] == 0.0 and last.beta >= 1e6:
        checks = {
            "r_i_limit": abs(last.r_i - 0.5) < 1e-4,
            "beta_i_limit": abs(last.beta_i - 0.25) < 1e-4,
            "var_h_times_beta": abs(last.var_h * last.beta - 1.0) < 1e-3,
            "mu_h_limit": abs(last.mu_h) < 1e-5,
        }
    return Outcome([path], checks, {"last_row": last.__dict__})


# ---------------------------------------------------------------------------
# basin of attraction of aEP on double-logistic sites


def basin_problem(scale: float = 5.0, copies: int = 5):
    dl = double_logistic_site(scale)
    return [gaussian_site(1.0, 0.0)] + [dl] * copies


def basin_labels(sites, means, variances, cfg: RunConfig) -> list[dict]:
    """Run undamped aEP from every (mean, variance) pair; one record per start."""
    moments = make_moments_fn(sites)
    n = len(sites)
    records = []
    for m in means:
        for v in variances:
            start = AEPState(from_moments(float(m), float(v)).params, n)
            rep = run(start, sites, moments, cfg, pass_fn=aep_pass)
            kind = rep.status.kind
            label = ("fixed_point" if kind == "converged"
                     else "cycle(2)" if kind == "cycle" and rep.status.period == 2 else "other")
            records.append({"mean0": float(m), "var0": float(v), "label": label,
                            "status": str(rep.status), "passes": rep.passes_used,
                            "trajectory": rep.trajectory})
    return records


def attraction_distance(trajectory: list, step: int, period: int) -> float:
    """Relative distance at ``step`` to the attractor point of the same phase."""
    last = len(trajectory) - 1
    target = last - ((last - step) % period)
    return relative_change(trajectory[step], trajectory[target])


def settling_pass(trajectory: list, period: int, tol: float) -> int:
    """First pass after which the trajectory stays within ``tol`` of its attractor."""
    dist = [attraction_distance(trajectory, k, period) for k in range(len(trajectory))]
    k = len(dist)
    while k > 0 and dist[k - 1] < tol:
        k -= 1
    return k


def basin(cfg: dict, seed: int, out: Path) -> Outcome:
    sites = basin_problem(cfg["scale"], cfg["copies"])
    means = np.linspace(cfg["mean_min"], cfg["mean_max"], cfg["grid"])
    variances = np.logspace(math.log10(cfg["var_min"]), math.log10(cfg["var_max"]), cfg["grid"])
    rc = RunConfig(damping=1.0, max_passes=cfg["max_passes"])
    recs = basin_labels(sites, means, variances, rc)

    rows = []
    for r in recs:
        g = r["trajectory"][-1]
        mean, var = ((g.shift / g.precision, 1.0 / g.precision) if g.precision > 0 else (math.nan, math.nan))
        rows.append((r["mean0"], r["var0"], r["label"], r["status"], r["passes"], mean, var))
    grid_path = write_csv(out / "basin_grid.csv",
                          ["mean0", "var0", "label", "status", "passes", "final_mean", "final_var"],
                          rows, lambda row: (row[0], row[1]))

    fixed = [r["trajectory"][-1] for r in recs if r["label"] == "fixed_point"]
    spread = max((relative_change(fixed[0], f) for f in fixed), default=0.0)
    examples = {}
    settled_by_4 = {}
    mid_m = 0.5 * (means[0] + means[-1])
    mid_lv = 0.5 * (math.log(variances[0]) + math.log(variances[-1]))
    for label, period in (("fixed_point", 1), ("cycle(2)", 2)):
        members = [r for r in recs if r["label"] == label]
        if not members:
            continue
        for r in members:
            r["settle"] = settling_pass(r["trajectory"], period, cfg["settle_tol"])
        settled_by_4[label] = float(np.mean([r["settle"] <= 4 for r in members]))
        # a typical member: median settling time, then nearest the grid centre
        median = sorted(r["settle"] for r in members)[len(members) // 2]
        ex = min((r for r in members if r["settle"] == median),
                 key=lambda r: ((r["mean0"] - mid_m) ** 2 + (math.log(r["var0"]) - mid_lv) ** 2,
                                r["mean0"], r["var0"]))
        traj = ex["trajectory"]
        dist = [attraction_distance(traj, k, period) for k in range(len(traj))]
        examples[label] = {
            "start": {"mean": ex["mean0"], "variance": ex["var0"]},
            "status": ex["status"],
            "trajectory": [_params_dict(p) for p in traj],
            "distance_to_attractor": dist,
            "distance_at_pass_4": dist[4] if len(dist) > 4 else 0.0,
        }
    traj_path = write_json(out / "basin_trajectories.json", examples)
    counts = {lab: sum(r["label"] == lab for r in recs) for lab in ("fixed_point", "cycle(2)", "other")}
    checks = {
        "both_attractors_found": counts["fixed_point"] > 0 and counts["cycle(2)"] > 0,
        "examples_settle_by_pass_4": bool(examples) and all(e["distance_at_pass_4"] < cfg["settle_tol"]
                                                            for e in examples.values()),
        "fixed_point_unique": spread < 1e-6,
    }
    summary = {"counts": counts, "fixed_point_spread": spread, "fraction_settled_by_pass_4": settled_by_4,
               "fixed_point": _params_dict(fixed[0]) if fixed else None}
    return Outcome([grid_path, traj_path], checks, summary)


# ---------------------------------------------------------------------------
# Gaussian-mixture posterior with several EP fixed points


def mixture_problem(n: int, means, seed: int):
    y = generate_mixture_data(n, means, seed)
    sites = [gaussian_site_nd(np.eye(2), np.zeros(2))] + [mixture_site_2d(float(v)) for v in y]
    return y, sites


def mixture_oracle(y, lo: float = -9.0, hi: float = 7.0, points: int = 801) -> dict:
    """Posterior moments on a tensor grid, with and without the constraint ``x2 > x1``."""
    t = np.linspace(lo, hi, points)
    X1, X2 = np.meshgrid(t, t, indexing="ij")
    logp = -0.5 * (X1 ** 2 + X2 ** 2)
    for v in y:
        logp = logp + np.logaddexp(-0.5 * (v - X1) ** 2, -0.5 * (v - X2) ** 2)
    w = np.exp(logp - logp.max())

    def moments(mask):
        ww = w * mask
        ww = ww / ww.sum()
        m = np.array([np.sum(ww * X1), np.sum(ww * X2)])
        d1, d2 = X1 - m[0], X2 - m[1]
        c = np.array([[np.sum(ww * d1 * d1), np.sum(ww * d1 * d2)],
                      [np.sum(ww * d1 * d2), np.sum(ww * d2 * d2)]])
        return m, c

    m_all, c_all = moments(np.ones_like(w))
    m_con, c_con = moments((X2 > X1).astype(float))
    return {"mean": m_all, "cov": c_all, "mean_constrained": m_con, "cov_constrained": c_con}


def mixture_fixed_points(sites, starts, damping: float, max_passes: int, dedup_tol: float):
    """Damped parallel EP from each start ``N(m, I)``; converged fixed points deduplicated."""
    n = len(sites)
    moments = make_moments_fn(sites)
    prior = NaturalParamsND(np.eye(2), np.zeros(2))
    cfg = RunConfig(damping=damping, max_passes=max_passes, tol=1e-10)
    found = []
    runs = []
    for k, m in enumerate(starts):
        # the prior site is exact; the likelihood sites share the rest of N(m, I)
        rest = NaturalParamsND(np.zeros((2, 2)), np.asarray(m, dtype=float)) * (1.0 / (n - 1))
        state = EPState.from_sites([prior] + [rest] * (n - 1))
        rep = run(state, sites, moments, cfg)
        runs.append({"start": list(map(float, m)), "status": str(rep.status), "passes": rep.passes_used})
        if rep.status.kind != "converged":
            continue
        g = rep.final_state.global_params
        for fp in found:
            if relative_change(fp["params"], g) < dedup_tol:
                fp["basin"].append(k)
                break
        else:
            found.append({"params": g, "basin": [k]})
    return found, runs


def mixture(cfg: dict, seed: int, out: Path) -> Outcome:
    means = (cfg["mean_a"], cfg["mean_b"])
    y, sites = mixture_problem(cfg["n"], means, seed)
    grid = np.linspace(cfg["start_min"], cfg["start_max"], cfg["start_grid"])
    starts = [(a, b) for a in grid for b in grid]
    found, runs = mixture_fixed_points(sites, starts, cfg["damping"], cfg["max_passes"], cfg["dedup_tol"])

    obj = ObjectiveND.from_sites(sites)
    modes = []
    for x0 in ((means[0], means[1]), (means[1], means[0])):
        res = find_mode(obj, x0)
        modes.append({"start": list(x0), "x_star": res.x_star, "converged": res.converged,
                      "cov": np.linalg.inv(res.hess_at_mode)})
    oracle = mixture_oracle(y)

    fps = []
    for fp in found:
        g = density(fp["params"])
        sd = np.sqrt(np.diag(g.covariance))
        # the posterior is exchangeable, so a global approximation sits on the diagonal
        kind = "global" if abs(g.mean[0] - g.mean[1]) <= cfg["dedup_tol"] * (1.0 + np.abs(g.mean).max()) else "local"
        near = [i for i, md in enumerate(modes) if np.all(np.abs(g.mean - md["x_star"]) <= 3 * sd)]
        fps.append({"mean": g.mean, "cov": g.covariance, "sd": sd, "basin": fp["basin"], "kind": kind,
                    "modes_within_3sd": near})
    fps.sort(key=lambda f: (f["mean"][0], f["mean"][1]))

    locals_ = [f for f in fps if f["kind"] == "local"]
    sym = any(np.allclose(a["mean"][::-1], b["mean"], atol=1e-3)
              for i, a in enumerate(locals_) for b in locals_[i + 1:])
    locals_near_modes = bool(locals_) and all(f["modes_within_3sd"] for f in locals_)
    globals_ = [f for f in fps if f["kind"] == "global"]
    glob_err = [float(np.max(np.abs(f["mean"] - oracle["mean"]))) for f in globals_]
    payload = {"data": y, "starts": starts, "runs": runs, "fixed_points": fps,
               "modes": modes, "oracle": oracle, "global_mean_error": glob_err}
    path = write_json(out / "mixture_fixed_points.json", payload)
    checks = {
        "at_least_two_fixed_points": len(fps) >= 2,
        "symmetric_local_pair": sym,
        "local_fixed_points_near_modes": locals_near_modes,
        "global_mean_matches_oracle": all(e <= 0.2 for e in glob_err),
    }
    return Outcome([path], checks, {"fixed_points": len(fps), "local": len(locals_), "global": len(globals_)})


# ---------------------------------------------------------------------------
# aEP against EP on regression posteriors


def compare_metrics(q_ep, q_aep) -> tuple[float, float]:
    """Per-parameter ``|mu_EP - mu_aEP| / min(sd)`` and ``max(sd ratio)``, averaged."""
    s_ep = np.sqrt(np.diag(q_ep.covariance))
    s_aep = np.sqrt(np.diag(q_aep.covariance))
    d_mu = np.abs(q_ep.mean - q_aep.mean) / np.minimum(s_ep, s_aep)
    d_sigma = np.maximum(s_ep / s_aep, s_aep / s_ep)
    return float(np.mean(d_mu)), float(np.mean(d_sigma))


def aep_vs_ep_replicate(model: str, n: int, seed: int, passes: int = 20, damping: float = 0.4) -> dict:
    data = generate_regression_data(model, n, seed)
    sites = data.sites()
    moments = make_moments_fn(sites)
    d = data.dim
    start = initialize(len(sites), prior=NaturalParamsND(np.eye(d), np.zeros(d)), dim=d)
    cfg = RunConfig(damping=damping, max_passes=passes, tol=1e-10)
    ep = run(start, sites, moments, cfg, pass_fn=parallel_pass)
    aep = run(AEPState(start.global_params, start.n), sites, moments, cfg, pass_fn=aep_pass)
    row = {"model": model, "n": n, "seed": seed, "ep_status": str(ep.status), "aep_status": str(aep.status)}
    try:
        row["d_mu"], row["d_sigma"] = compare_metrics(density(ep.final_state.global_params),
                                                      density(aep.final_state.global_params))
    except ValueError:
        row["d_mu"] = row["d_sigma"] = math.nan
    # a replicate counts as settled when both runs stopped moving within the pass budget
    settled = {"converged", "max_passes"}
    tail = [relative_change(r.trajectory[-2], r.trajectory[-1]) for r in (ep, aep) if len(r.trajectory) > 1]
    row["flagged"] = not (ep.status.kind in settled and aep.status.kind in settled
                          and all(t < 1e-4 for t in tail))
    return row


def aep_vs_ep(cfg: dict, seed: int, out: Path) -> Outcome:
    rows = []
    for model in cfg["models"]:
        for n in cfg["ns"]:
            for k in range(cfg["replicates"]):
                rows.append(aep_vs_ep_replicate(model, n, seed + k, cfg["passes"], cfg["damping"]))
    header = ["model", "n", "seed", "d_mu", "d_sigma", "flagged", "ep_status", "aep_status"]
    path = write_csv(out / "aep_vs_ep.csv", header, [[r[h] for h in header] for r in rows],
                     lambda r: (r[0], r[1], r[2]))
    means = summarize_comparison(rows)
    checks = {}
    models = cfg["models"]
    if "probit" in models and "cauchy" in models:
        n0 = min(cfg["ns"])
        checks["probit_below_cauchy_at_smallest_n"] = means["probit"][n0] < means["cauchy"][n0]
    for model in models:
        checks[f"{model}_decreasing_in_n"] = trend_down(means[model])
    return Outcome([path], checks, {"mean_d_mu": means})


def summarize_comparison(rows: list) -> dict:
    """Mean ``d_mu`` per model and ``n`` (flagged replicates included, NaNs dropped)."""
    out = {}
    for r in rows:
        out.setdefault(r["model"], {}).setdefault(r["n"], []).append(r["d_mu"])
    return {m: {n: float(np.nanmean(v)) for n, v in sorted(by_n.items())} for m, by_n in out.items()}


def trend_down(by_n: dict) -> bool:
    """Negative log-log slope over the grid and a smaller value at the largest n than at the smallest."""
    ns = sorted(by_n)
    vals = np.array([by_n[n] for n in ns])
    if np.any(~np.isfinite(vals)) or np.any(vals <= 0):
        return False
    slope = np.polyfit(np.log(ns), np.log(vals), 1)[0]
    return bool(slope < 0 and vals[-1] < vals[0])


# ---------------------------------------------------------------------------
# rate scans


def rate(cfg: dict, seed: int, out: Path) -> Outcome:
    which = cfg["which"]
    if which == "thm1":
        betas = np.logspace(cfg["log10_beta_min"], cfg["log10_beta_max"], cfg["points"])
        site = logit_site()
        s_r, s_b, s_m = asy.thm1_scan(site, 0.0, 0.0, betas)
        a_r, a_b, a_m = asy.thm1_scan(site, 0.0, 0.5, betas)
        cols = {"beta": betas, "err_r_i": s_r.errors, "err_beta_i": s_b.errors, "err_mu_h": s_m.errors,
                "err_mu_h_matched_shift": a_m.errors}
        slopes = {"r_i": s_r.summary(), "beta_i": s_b.summary(), "mu_h": s_m.summary(),
                  "mu_h_matched_shift": a_m.summary()}
        checks = {"beta_i_slope": s_b.within(-1.0, 0.15)}
    elif which == "thm2":
        scales = np.logspace(cfg["log10_scale_min"], cfg["log10_scale_max"], cfg["points"])
        scans = asy.thm2_scan(scales, cfg["n_sites"], seed)
        cols = {"scale": scales, **{k: v.errors for k, v in scans.items()}}
        slopes = {k: v.summary() for k, v in scans.items()}
        checks = {f"{k}_slope": v.within(-1.0, 0.2) for k, v in scans.items()}
    elif which == "thm4":
        res = asy.thm4_rate(cfg["model"], cfg["ns"], list(range(seed, seed + cfg["replicates"])))
        cols = {"n": res.kl.xs, "mean_kl": res.kl.errors, "mean_tv_bound": res.tv.errors}
        slopes = {"kl": res.kl.summary(), "tv": res.tv.summary(), "excluded": res.excluded,
                  "records": res.records}
        checks = {"kl_slope": res.kl.within(-1.0, 0.3), "tv_slope": res.tv.within(-0.5, 0.15)}
    else:
        raise ValueError(f"unknown rate scan {which!r}")
    csv_path, side = asy.write_scan(out / f"rate_{which}.csv", cols, _plain(slopes))
    return Outcome([csv_path, side], checks, {"slopes": {k: v["fitted_slope"] for k, v in slopes.items()
                                                         if isinstance(v, dict) and "fitted_slope" in v}})


# ---------------------------------------------------------------------------
# derivative audit


def corrupted_site() -> SiteModel1D:
    """A logit site whose first derivative is off by 1e-2, for exercising the audit."""
    base = logit_site()
    return replace(base, d1=lambda x: base.d1(x) + 1e-2, name="corrupted_logit")


def derivative_audit(cfg: dict, seed: int, out: Path) -> Outcome:
    sites = builtin_sites_1d() + ([corrupted_site()] if cfg["inject_fault"] else [])
    results = [audit_site(s, rtol=cfg["rtol"], seed=seed) for s in sites]
    results += [audit_site_nd(s, rtol=cfg["rtol"], seed=seed) for s in builtin_sites_nd()]
    report = [{"site": r.name, "max_d1_error": r.max_d1_error, "max_d2_error": r.max_d2_error,
               "worst_point": r.worst_point, "passed": r.passed} for r in results]
    path = write_json(out / "derivative_audit.json", {"rtol": cfg["rtol"], "sites": report})
    failures = [r["site"] for r in report if not r["passed"]]
    return Outcome([path], {"all_sites_pass": not failures}, {"failures": failures})


# ---------------------------------------------------------------------------
# registry


EXPERIMENTS: dict[str, tuple[Callable, dict]] = {
    "site-limit": (site_limit, {"mu0": 0.0, "delta_r": 0.0, "log10_beta_min": 0.0,
                                "log10_beta_max": 6.0, "points": 25}),
    "basin": (basin, {"grid": 61, "mean_min": -3.0, "mean_max": 3.0, "var_min": 1e-2, "var_max": 10.0,
                      "scale": 5.0, "copies": 5, "max_passes": 200, "settle_tol": 1e-3}),
    "mixture": (mixture, {"n": 20, "mean_a": 0.0, "mean_b": -2.5, "damping": 0.4, "max_passes": 2000,
                          "start_min": -4.0, "start_max": 1.5, "start_grid": 3, "dedup_tol": 1e-4}),
    "aep-vs-ep": (aep_vs_ep, {"models": ["probit", "cauchy"], "ns": [20, 40, 80, 160, 320],
                              "replicates": 10, "passes": 20, "damping": 0.4}),
    "rate-thm1": (rate, {"which": "thm1", "log10_beta_min": 2.0, "log10_beta_max": 6.0, "points": 9}),
    "rate-thm2": (rate, {"which": "thm2", "log10_scale_min": 1.0, "log10_scale_max": 4.0, "points": 7,
                         "n_sites": 10}),
    "rate-thm4": (rate, {"which": "thm4", "model": "probit", "ns": [25, 50, 100, 200, 400],
                         "replicates": 10}),
    "derivative-audit": (derivative_audit, {"rtol": 1e-5, "inject_fault": False}),
}
