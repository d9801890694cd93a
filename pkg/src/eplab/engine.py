"""Sequential EP, parallel EP and averaged EP (aEP) on natural parameters.

States are immutable; every pass returns a new state.  Damping always acts
on natural parameters: ``new = (1 - damping) * old + damping * proposal``.

Invalid cavities are handled per algorithm.  Per-site EP skips the site and
records its index.  aEP has a single shared cavity, so an invalid one aborts
the pass with :class:`InvalidCavityError`.  An exactly flat cavity (all
natural parameters zero) is allowed for 1D problems: it arises for a single
site and for aEP with ``n = 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .gaussian import (
    NaturalParams,
    NaturalParams1D,
    NaturalParamsND,
    density,
    is_density,
    relative_change,
)
from .tilted import SiteMomentsFn, site_update_from_moments


class InvalidCavityError(RuntimeError):
    """The shared aEP cavity is not a proper Gaussian."""


class MomentsFailure(RuntimeError):
    """Tilted moments failed for a site during a pass."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"site {index}: {cause}")
        self.index = index
        self.cause = cause


@dataclass(frozen=True, eq=False)
class EPState:
    site_params: tuple
    global_params: NaturalParams
    skipped: tuple = ()

    @property
    def n(self) -> int:
        return len(self.site_params)

    @classmethod
    def from_sites(cls, site_params: Sequence[NaturalParams], skipped=()) -> "EPState":
        site_params = tuple(site_params)
        return cls(site_params, _sum(site_params), tuple(skipped))


@dataclass(frozen=True, eq=False)
class AEPState:
    global_params: NaturalParams
    n: int
    skipped: tuple = ()


State = Union[EPState, AEPState]


@dataclass(frozen=True)
class RunConfig:
    damping: float = 1.0
    max_passes: int = 200
    tol: float = 1e-9
    cavity_floor: float = 1e-8
    cycle_window: int = 40
    cycle_tol: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")


def _sum(params: Sequence[NaturalParams]) -> NaturalParams:
    total = params[0]
    for p in params[1:]:
        total = total + p
    return total


def _damp(old: NaturalParams, new: NaturalParams, damping: float) -> NaturalParams:
    if damping == 1.0:
        return new
    return old * (1.0 - damping) + new * damping


def _cavity_usable(cavity: NaturalParams, floor: float) -> bool:
    if isinstance(cavity, NaturalParams1D):
        return cavity.is_flat() or is_density(cavity, floor)
    return is_density(cavity)


def _as_cavity(cavity: NaturalParams):
    return cavity if (isinstance(cavity, NaturalParams1D) and cavity.is_flat()) else density(cavity)


def _site_update(i: int, cavity: NaturalParams, moments: SiteMomentsFn) -> NaturalParams:
    try:
        m = moments(i, _as_cavity(cavity))
        return site_update_from_moments(m, cavity)
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise MomentsFailure(i, exc) from exc


def sequential_pass(state: EPState, sites, moments: SiteMomentsFn, cfg: RunConfig = RunConfig()) -> EPState:
    """One sweep of classic EP, updating the global approximation after each site."""
    lam = list(state.site_params)
    total = state.global_params
    skipped = []
    for i in range(len(lam)):
        cavity = total - lam[i]
        if not _cavity_usable(cavity, cfg.cavity_floor):
            skipped.append(i)
            continue
        new = _damp(lam[i], _site_update(i, cavity, moments), cfg.damping)
        total = cavity + new
        lam[i] = new
    return EPState.from_sites(lam, skipped)


def parallel_pass(state: EPState, sites, moments: SiteMomentsFn, cfg: RunConfig = RunConfig(),
                  map_fn: Callable = map) -> EPState:
    """One step of parallel EP: every cavity is formed from the incoming global.

    ``map_fn`` may be an executor's ``map``; the reduction is always in site order.
    """
    total = state.global_params
    cavities = [total - lam for lam in state.site_params]
    usable = [_cavity_usable(c, cfg.cavity_floor) for c in cavities]
    todo = [i for i, ok in enumerate(usable) if ok]
    updates = dict(zip(todo, map_fn(lambda i: _site_update(i, cavities[i], moments), todo)))
    lam = [
        _damp(old, updates[i], cfg.damping) if i in updates else old
        for i, old in enumerate(state.site_params)
    ]
    return EPState.from_sites(lam, [i for i, ok in enumerate(usable) if not ok])


def _aep_moments(state: AEPState, moments: SiteMomentsFn, cfg: RunConfig, map_fn):
    n = state.n
    cavity = state.global_params * ((n - 1) / n)
    if not _cavity_usable(cavity, cfg.cavity_floor):
        raise InvalidCavityError(f"shared cavity {cavity} is not a proper Gaussian")
    # site_update_from_moments(m, 0) is the moment-matched hybrid itself
    zero = type(cavity).zeros(cavity.dim)
    target = _as_cavity(cavity)

    def matched(i):
        try:
            return site_update_from_moments(moments(i, target), zero)
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            raise MomentsFailure(i, exc) from exc

    return _sum(list(map_fn(matched, range(n))))


def aep_pass(state: AEPState, sites, moments: SiteMomentsFn, cfg: RunConfig = RunConfig(),
             map_fn: Callable = map) -> AEPState:
    """averaged-EP step: ``new = sum_i proj(h_i) - (n - 1) * global`` with shared cavity."""
    total = _aep_moments(state, moments, cfg, map_fn)
    proposal = total - state.global_params * (state.n - 1)
    return AEPState(_damp(state.global_params, proposal, cfg.damping), state.n)


def aep_averaged_pass(state: AEPState, sites, moments: SiteMomentsFn, cfg: RunConfig = RunConfig(),
                      map_fn: Callable = map) -> AEPState:
    """The averaging rule ``new = mean_i proj(h_i)``; same fixed points as :func:`aep_pass`."""
    total = _aep_moments(state, moments, cfg, map_fn)
    proposal = total * (1.0 / state.n)
    return AEPState(_damp(state.global_params, proposal, cfg.damping), state.n)


# ---------------------------------------------------------------------------
# initialisation


def initialize(n: int, mode: str = "flat_sites_with_prior", *, prior: Optional[NaturalParams] = None,
               dim: int = 1, given: Optional[State] = None, aep: bool = False) -> State:
    """Starting state for ``n`` sites.

    ``flat_sites_with_prior``: site 0 is the prior and carries ``prior``
    exactly; every other site starts at zero.  ``unit_global``: the global
    approximation is a standard normal split evenly over the sites.
    ``given``: returns ``given`` unchanged.
    """
    if mode == "given":
        if given is None:
            raise ValueError("mode 'given' needs a state")
        return given
    zero = NaturalParams1D(0.0, 0.0) if dim == 1 else NaturalParamsND.zeros(dim)
    if prior is not None:
        zero = type(prior).zeros(prior.dim)
    if mode == "flat_sites_with_prior":
        if prior is None:
            raise ValueError("mode 'flat_sites_with_prior' needs the prior's natural parameters")
        sites = [prior] + [zero] * (n - 1)
    elif mode == "unit_global":
        unit = NaturalParams1D(1.0, 0.0) if dim == 1 else NaturalParamsND(np.eye(dim), np.zeros(dim))
        sites = [unit * (1.0 / n)] * n
    else:
        raise ValueError(f"unknown initialisation mode {mode!r}")
    state = EPState.from_sites(sites)
    return AEPState(state.global_params, n) if aep else state


def to_aep(state: EPState) -> AEPState:
    return AEPState(state.global_params, state.n)


# ---------------------------------------------------------------------------
# driver


@dataclass(frozen=True)
class Status:
    kind: str
    period: int = 0

    def __str__(self):
        return f"cycle({self.period})" if self.kind == "cycle" else self.kind


@dataclass(eq=False)
class RunReport:
    trajectory: list
    status: Status
    passes_used: int
    skip_log: list = field(default_factory=list)
    final_state: Optional[State] = None
    error: Optional[str] = None

    def to_json(self) -> str:
        def enc(p):
            if isinstance(p, NaturalParams1D):
                return {"precision": p.precision, "shift": p.shift}
            return {"precision_matrix": p.precision_matrix.tolist(), "shift": p.shift.tolist()}

        return json.dumps({
            "status": str(self.status),
            "passes_used": self.passes_used,
            "trajectory": [enc(p) for p in self.trajectory],
            "skip_log": [list(s) for s in self.skip_log],
            "error": self.error,
        })


def _is_valid_global(p: NaturalParams) -> bool:
    return p.is_finite() and is_density(p)


def detect_cycle(trajectory: Sequence[NaturalParams], window: int, tol: float) -> int:
    """Smallest lag ``p >= 2`` at which the last state repeats, or 0.

    The states inside one period must stay at least ``sqrt(tol)`` apart;
    otherwise an oscillating approach to a fixed point would pass as a cycle.
    """
    last = trajectory[-1]
    separation = math.sqrt(tol)
    nearest = math.inf
    for lag in range(1, min(window, len(trajectory) - 1) + 1):
        d = relative_change(trajectory[-1 - lag], last)
        if lag >= 2 and d <= tol and nearest > separation:
            return lag
        nearest = min(nearest, d)
    return 0


def run(initial: State, sites, moments: SiteMomentsFn, cfg: RunConfig = RunConfig(),
        pass_fn: Callable = parallel_pass) -> RunReport:
    """Iterate ``pass_fn`` until convergence, a limit cycle, divergence, or ``max_passes``."""
    state = initial
    trajectory = [state.global_params]
    skip_log = []
    for k in range(1, cfg.max_passes + 1):
        try:
            state = pass_fn(state, sites, moments, cfg)
        except (InvalidCavityError, MomentsFailure) as exc:
            return RunReport(trajectory, Status("diverged"), k - 1, skip_log, state, str(exc))
        trajectory.append(state.global_params)
        skip_log.append(tuple(state.skipped))
        if not _is_valid_global(state.global_params):
            return RunReport(trajectory, Status("diverged"), k, skip_log, state)
        if relative_change(trajectory[-2], trajectory[-1]) < cfg.tol:
            return RunReport(trajectory, Status("converged"), k, skip_log, state)
        lag = detect_cycle(trajectory, cfg.cycle_window, cfg.cycle_tol)
        if lag:
            return RunReport(trajectory, Status("cycle", lag), k, skip_log, state)
    return RunReport(trajectory, Status("max_passes"), cfg.max_passes, skip_log, state)
