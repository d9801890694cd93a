"""Gaussian exponential-family arithmetic in natural-parameter form.

A univariate Gaussian is written ``exp(-0.5 * precision * x**2 + shift * x)``,
so ``mean = shift / precision`` and ``variance = 1 / precision``.  The
multivariate version uses a precision matrix ``Q`` and a shift vector ``r``
with ``mean = Q^{-1} r``.

Natural parameters are plain values with exact componentwise arithmetic and
no sign constraint (EP site approximations routinely carry negative
precision).  Only the ``GaussianDensity*`` wrappers insist on a proper,
normalisable density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


class NotADensityError(ValueError):
    """Raised when natural parameters do not describe a proper Gaussian."""


@dataclass(frozen=True)
class NaturalParams1D:
    precision: float
    shift: float

    def __post_init__(self):
        object.__setattr__(self, "precision", float(self.precision))
        object.__setattr__(self, "shift", float(self.shift))

    dim = 1

    def __add__(self, other: "NaturalParams1D") -> "NaturalParams1D":
        return NaturalParams1D(self.precision + other.precision, self.shift + other.shift)

    def __sub__(self, other: "NaturalParams1D") -> "NaturalParams1D":
        return NaturalParams1D(self.precision - other.precision, self.shift - other.shift)

    def __mul__(self, scale: float) -> "NaturalParams1D":
        return NaturalParams1D(scale * self.precision, scale * self.shift)

    __rmul__ = __mul__

    def as_vector(self) -> np.ndarray:
        return np.array([self.precision, self.shift])

    def is_finite(self) -> bool:
        return math.isfinite(self.precision) and math.isfinite(self.shift)

    def is_flat(self) -> bool:
        return self.precision == 0.0 and self.shift == 0.0

    @classmethod
    def zeros(cls, dim: int = 1) -> "NaturalParams1D":
        return cls(0.0, 0.0)


@dataclass(frozen=True, eq=False)
class NaturalParamsND:
    """Precision matrix ``Q`` and shift vector ``r``.

    ``Q`` is symmetrised on construction, so it is symmetric to rounding.
    """

    precision_matrix: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.precision_matrix, dtype=float))
        r = np.atleast_1d(np.asarray(self.shift, dtype=float)).reshape(-1)
        if Q.shape != (r.size, r.size):
            raise DomainError(f"precision {Q.shape} does not match shift of length {r.size}")
        Q = 0.5 * (Q + Q.T)
        Q.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "precision_matrix", Q)
        object.__setattr__(self, "shift", r)

    @property
    def dim(self) -> int:
        return self.shift.size

    def _check(self, other: "NaturalParamsND"):
        if other.dim != self.dim:
            raise DomainError(f"dimension mismatch: {self.dim} vs {other.dim}")

    def __add__(self, other: "NaturalParamsND") -> "NaturalParamsND":
        self._check(other)
        return NaturalParamsND(self.precision_matrix + other.precision_matrix, self.shift + other.shift)

    def __sub__(self, other: "NaturalParamsND") -> "NaturalParamsND":
        self._check(other)
        return NaturalParamsND(self.precision_matrix - other.precision_matrix, self.shift - other.shift)

    def __mul__(self, scale: float) -> "NaturalParamsND":
        return NaturalParamsND(scale * self.precision_matrix, scale * self.shift)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, NaturalParamsND):
            return NotImplemented
        return bool(np.array_equal(self.precision_matrix, other.precision_matrix)
                    and np.array_equal(self.shift, other.shift))

    __hash__ = None

    def as_vector(self) -> np.ndarray:
        """Upper triangle of ``Q`` followed by ``r``."""
        iu = np.triu_indices(self.dim)
        return np.concatenate([self.precision_matrix[iu], self.shift])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.precision_matrix)) and np.all(np.isfinite(self.shift)))

    def is_flat(self) -> bool:
        return not np.any(self.precision_matrix) and not np.any(self.shift)

    @classmethod
    def zeros(cls, dim: int) -> "NaturalParamsND":
        return cls(np.zeros((dim, dim)), np.zeros(dim))


NaturalParams = Union[NaturalParams1D, NaturalParamsND]


@dataclass(frozen=True)
class GaussianDensity1D:
    params: NaturalParams1D

    def __post_init__(self):
        beta = self.params.precision
        if not (beta > 0.0 and math.isfinite(beta) and math.isfinite(self.params.shift)):
            raise NotADensityError(f"precision must be positive and finite, got {self.params}")

    @property
    def mean(self) -> float:
        return self.params.shift / self.params.precision

    @property
    def variance(self) -> float:
        return 1.0 / self.params.precision

    @property
    def sd(self) -> float:
        return 1.0 / math.sqrt(self.params.precision)


@dataclass(frozen=True, eq=False)
class GaussianDensityND:
    params: NaturalParamsND
    _chol: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if not self.params.is_finite():
            raise NotADensityError("natural parameters are not finite")
        try:
            c = cho_factor(self.params.precision_matrix, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NotADensityError("precision matrix is not positive definite") from exc
        object.__setattr__(self, "_chol", c)

    @property
    def dim(self) -> int:
        return self.params.dim

    @property
    def mean(self) -> np.ndarray:
        return cho_solve(self._chol, self.params.shift)

    @property
    def covariance(self) -> np.ndarray:
        S = cho_solve(self._chol, np.eye(self.dim))
        return 0.5 * (S + S.T)

    def logdet_precision(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol[0]))))


GaussianDensity = Union[GaussianDensity1D, GaussianDensityND]


def density(params: NaturalParams) -> GaussianDensity:
    """Wrap natural parameters as a density, raising NotADensityError if improper."""
    if isinstance(params, NaturalParams1D):
        return GaussianDensity1D(params)
    return GaussianDensityND(params)


def is_density(params: NaturalParams, floor: float = 0.0) -> bool:
    """True if ``params`` is a proper Gaussian (1D: precision above ``floor``)."""
    if isinstance(params, NaturalParams1D):
        return params.is_finite() and params.precision > floor
    try:
        GaussianDensityND(params)
    except NotADensityError:
        return False
    return True


def to_moments(g: GaussianDensity1D) -> tuple[float, float]:
    return g.mean, g.variance


def from_moments(mean: float, variance: float) -> GaussianDensity1D:
    if not variance > 0.0:
        raise DomainError(f"variance must be positive, got {variance}")
    beta = 1.0 / variance
    return GaussianDensity1D(NaturalParams1D(beta, mean * beta))


def from_moments_nd(mean, covariance) -> GaussianDensityND:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(covariance, dtype=float))
    try:
        c = cho_factor(0.5 * (cov + cov.T), lower=True)
    except np.linalg.LinAlgError as exc:
        raise DomainError("covariance is not positive definite") from exc
    Q = cho_solve(c, np.eye(mean.size))
    Q = 0.5 * (Q + Q.T)
    return GaussianDensityND(NaturalParamsND(Q, Q @ mean))


def kl_gaussian(q1: GaussianDensity1D, q2: GaussianDensity1D) -> float:
    """KL(q1 || q2) for univariate Gaussians, in precision form."""
    b1, b2 = q1.params.precision, q2.params.precision
    dm = q1.mean - q2.mean
    x = b2 / b1 - 1.0
    spread = x - math.log1p(x)
    return 0.5 * (b2 * dm * dm + spread)


def kl_gaussian_nd(q1: GaussianDensityND, q2: GaussianDensityND) -> float:
    """KL(q1 || q2) for multivariate Gaussians given by precision matrices."""
    if q1.dim != q2.dim:
        raise DomainError(f"dimension mismatch: {q1.dim} vs {q2.dim}")
    Q2 = q2.params.precision_matrix
    dm = q1.mean - q2.mean
    trace = float(np.trace(cho_solve(q1._chol, Q2)))
    logdet = q2.logdet_precision() - q1.logdet_precision()
    kl = 0.5 * (dm @ Q2 @ dm + trace - q1.dim - logdet)
    return max(kl, 0.0)


def tv_upper_bound(kl: float) -> float:
    """Total-variation bound from Pinsker's inequality, ``KL >= 2 d_TV^2``."""
    if kl < 0:
        raise DomainError(f"KL divergence must be non-negative, got {kl}")
    return math.sqrt(kl / 2.0)


def cavity_subtract(total: NaturalParams, part: NaturalParams) -> NaturalParams:
    return total - part


def relative_change(a: NaturalParams, b: NaturalParams) -> float:
    """Max componentwise change between two parameter sets, relative to their scale."""
    va, vb = a.as_vector(), b.as_vector()
    scale = max(1.0, float(np.max(np.abs(va))), float(np.max(np.abs(vb))))
    return float(np.max(np.abs(va - vb))) / scale
