"""Markov chains in random mixing environments: simulation and rate certificates."""

__version__ = "0.1.0"

from erglab.env_process import (
    EnvModel,
    PathWindow,
    WindowBatch,
    WindowError,
    build_iid_env,
    build_markov_env,
    psi_upper,
    rho_env,
    sample_window,
    sample_windows,
)
from erglab.kernel_cocycle import (
    KernelSet,
    Minorization,
    backward_product,
    build_kernel_set,
    dobrushin,
    doeblin_time,
    forward_product,
    minorize,
)
from erglab.equivariant import (
    EquivariantMeasure,
    equivariance_residual,
    equivariant_measure,
    op_distance,
    pathwise_bound,
)

__all__ = [
    "EnvModel",
    "EquivariantMeasure",
    "KernelSet",
    "Minorization",
    "PathWindow",
    "WindowBatch",
    "WindowError",
    "backward_product",
    "build_iid_env",
    "build_kernel_set",
    "build_markov_env",
    "dobrushin",
    "doeblin_time",
    "equivariance_residual",
    "equivariant_measure",
    "forward_product",
    "minorize",
    "op_distance",
    "pathwise_bound",
    "psi_upper",
    "rho_env",
    "sample_window",
    "sample_windows",
]
