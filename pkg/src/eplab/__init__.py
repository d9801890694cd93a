"""Expectation propagation, averaged EP and Newton's method on Gaussian natural parameters."""

from .gaussian import (
    DomainError,
    GaussianDensity1D,
    GaussianDensityND,
    NaturalParams1D,
    NaturalParamsND,
    NotADensityError,
    density,
    from_moments,
    from_moments_nd,
    kl_gaussian,
    kl_gaussian_nd,
    tv_upper_bound,
)
from .sites import (
    SiteModel1D,
    SiteModelND,
    cauchy_site,
    compose_linear,
    double_logistic_site,
    gaussian_site,
    gaussian_site_nd,
    generate_regression_data,
    logit_site,
    mixture_site_2d,
    probit_site,
)
from .tilted import QuadratureConfig, make_moments_fn, tilted_moments
from .engine import (
    AEPState,
    EPState,
    RunConfig,
    aep_averaged_pass,
    aep_pass,
    initialize,
    parallel_pass,
    run,
    sequential_pass,
)
from .newton import ObjectiveND, cga, find_mode, newton_inference_step, newton_step

__version__ = "0.1.0"
