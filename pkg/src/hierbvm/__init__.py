"""Gaussian-surrogate Bernstein-von Mises inference for hierarchical models."""

__version__ = "0.1.0"

from ._backend import BACKEND, get_kernels
from .model_core import (
    MCEstimate,
    MomentModel,
    MomentPair,
    NotPositiveDefiniteError,
    ObservationBatch,
    RandomStream,
    exp_family_stats,
    sample_observations,
    surrogate_loglik,
    surrogate_loglik_grad,
)
from .bvm import (
    BvmLimit,
    Lattice,
    PosteriorGrid,
    PriorSpec,
    bvm_limit,
    bvm_precision_avg,
    bvm_precision_index,
    center_Tn,
    gaussian_kl,
    hessian_kl_fd,
    kl_profile,
    l1_distance,
    posterior_grid,
    taylor_remainder_scalar,
)
from .square_integral import SquareIntGenerator, SquareIntModel

__all__ = [
    "BACKEND", "get_kernels", "MCEstimate", "MomentModel", "MomentPair", "NotPositiveDefiniteError",
    "ObservationBatch", "RandomStream", "exp_family_stats", "sample_observations", "surrogate_loglik",
    "surrogate_loglik_grad", "BvmLimit", "Lattice", "PosteriorGrid", "PriorSpec", "bvm_limit",
    "bvm_precision_avg", "bvm_precision_index", "center_Tn", "gaussian_kl", "hessian_kl_fd", "kl_profile",
    "l1_distance", "posterior_grid", "taylor_remainder_scalar", "SquareIntGenerator", "SquareIntModel",
]
