"""Newton's method as an optimiser, as an inference iteration, and the CGA.

The objective is ``psi = sum_i phi_i``, the negative log of an unnormalised
target.  Points are always 1D numpy vectors, even for scalar problems.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve

from .gaussian import GaussianDensityND, NaturalParamsND
from .sites import SiteModel1D


class SingularHessianError(ArithmeticError):
    pass


class NotPositiveDefiniteError(ArithmeticError):
    pass


class ModeNotFoundError(RuntimeError):
    pass


class SaddlePointError(RuntimeError):
    """The located stationary point has an indefinite Hessian."""


@dataclass(frozen=True)
class ObjectiveND:
    psi: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    dim: int

    @classmethod
    def from_sites(cls, sites: Sequence) -> "ObjectiveND":
        """Sum the negative log-sites; 1D sites act on a length-one vector."""
        sites = list(sites)
        scalar = isinstance(sites[0], SiteModel1D)
        if scalar:
            if not all(isinstance(s, SiteModel1D) for s in sites):
                raise ValueError("cannot mix 1D and ND sites")
            return cls.scalar(
                lambda x: sum(float(s.phi(x)) for s in sites),
                lambda x: sum(float(s.d1(x)) for s in sites),
                lambda x: sum(float(s.d2(x)) for s in sites),
            )
        dim = sites[0].dim
        return cls(
            lambda x: float(sum(s.phi(x) for s in sites)),
            lambda x: np.sum([s.grad(x) for s in sites], axis=0),
            lambda x: np.sum([s.hess(x) for s in sites], axis=0),
            dim,
        )

    @classmethod
    def scalar(cls, f, df, d2f) -> "ObjectiveND":
        """Wrap scalar callables ``f, f', f''`` of a float."""
        return cls(
            lambda x: float(f(float(np.asarray(x).reshape(-1)[0]))),
            lambda x: np.array([float(df(float(np.asarray(x).reshape(-1)[0])))]),
            lambda x: np.array([[float(d2f(float(np.asarray(x).reshape(-1)[0])))]]),
            1,
        )


def _vec(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1)


def newton_step(obj: ObjectiveND, x) -> np.ndarray:
    """``x - H(x)^{-1} g(x)``; raises SingularHessianError if ``H(x)`` cannot be solved."""
    x = _vec(x)
    H, g = np.atleast_2d(obj.hess(x)), _vec(obj.grad(x))
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
        raise SingularHessianError(f"non-finite derivatives at {x}")
    try:
        step = solve(H, g, assume_a="sym")
    except LinAlgError as exc:
        raise SingularHessianError(f"singular Hessian at {x}") from exc
    return x - step


def newton_inference_step(obj: ObjectiveND, g: GaussianDensityND) -> GaussianDensityND:
    """Replace ``g`` by the Gaussian with precision ``H(mu)`` and shift ``H(mu) mu - grad(mu)``.

    Its mean is exactly the Newton step from ``mu``; its fixed point is the CGA.
    """
    mu = _vec(g.mean)
    H = np.atleast_2d(obj.hess(mu))
    try:
        cho_factor(H)
    except LinAlgError as exc:
        raise NotPositiveDefiniteError(f"Hessian at {mu} is not positive definite") from exc
    return GaussianDensityND(NaturalParamsND(H, H @ mu - _vec(obj.grad(mu))))


@dataclass(frozen=True, eq=False)
class ModeResult:
    x_star: np.ndarray
    hess_at_mode: np.ndarray
    converged: bool
    iterations: int
    path: tuple = ()


def _descent_direction(H: np.ndarray, g: np.ndarray):
    try:
        c = cho_factor(H)
    except (LinAlgError, ValueError):
        return -g, False
    d = -cho_solve(c, g)
    return (d, True) if np.all(np.isfinite(d)) else (-g, False)


def find_mode(obj: ObjectiveND, x0, grad_tol: float = 1e-10, max_iter: int = 200,
              min_step: float = 1e-8) -> ModeResult:
    """Newton's method with step halving.

    Steps are halved until ``psi`` decreases.  Once the predicted
    decrease is below rounding level, a step is accepted if it shrinks the
    gradient instead.  When the Hessian is not
    positive definite, or the Newton direction fails to decrease ``psi`` down
    to ``min_step``, the iteration falls back to the gradient direction.
    """
    x = _vec(x0)
    f = obj.psi(x)
    path = [x]
    for it in range(max_iter + 1):
        g = _vec(obj.grad(x))
        if np.linalg.norm(g) <= grad_tol:
            return ModeResult(x, np.atleast_2d(obj.hess(x)), True, it, tuple(path))
        if it == max_iter:
            break
        d, newton = _descent_direction(np.atleast_2d(obj.hess(x)), g)
        gnorm = np.linalg.norm(g)
        moved = False
        for direction in ((d, -g) if newton else (d,)):
            # below this predicted decrease psi cannot resolve progress; judge by the gradient
            flat = -float(g @ direction) < 1e-12 * max(1.0, abs(f))
            t = 1.0
            while t >= min_step:
                cand = x + t * direction
                fc = obj.psi(cand)
                if np.isfinite(fc) and (fc < f or (flat and np.linalg.norm(obj.grad(cand)) < gnorm)):
                    moved = True
                    break
                t *= 0.5
            if moved:
                break
        if not moved or np.array_equal(cand, x):
            break
        x, f = cand, fc
        path.append(x)
    return ModeResult(x, np.atleast_2d(obj.hess(x)), False, it, tuple(path))


def cga(obj: ObjectiveND, x0, **kwargs) -> GaussianDensityND:
    """Canonical Gaussian approximation: mean at the mode, precision the Hessian there."""
    res = find_mode(obj, x0, **kwargs)
    if not res.converged:
        raise ModeNotFoundError(f"mode search from {x0} stopped at {res.x_star} after {res.iterations} iterations")
    H = res.hess_at_mode
    try:
        cho_factor(H)
    except LinAlgError as exc:
        raise SaddlePointError(f"stationary point {res.x_star} is not a local minimum") from exc
    return GaussianDensityND(NaturalParamsND(H, H @ res.x_star))
