"""Ground-truth solvers: Gaussian closed forms and discrete tree Sinkhorn."""

from .discrete import (
    GridMeasure,
    PotentialSet,
    TreeKernelSet,
    TreeSinkhorn,
    build_kernels,
    dense_mipf,
    discrete_kl,
    discrete_tv,
    discretized_gaussian,
    grid_measure_from_density,
    sinkhorn_two_marginal,
    tree_sinkhorn_mp,
    uniform_grid,
    wp_objective_check,
)
from .gaussian import bw2_uvp, gaussian_barycenter_fixed_point, gaussian_w2sq, uvp_between

__all__ = [
    "GridMeasure",
    "PotentialSet",
    "TreeKernelSet",
    "TreeSinkhorn",
    "build_kernels",
    "bw2_uvp",
    "dense_mipf",
    "discrete_kl",
    "discrete_tv",
    "discretized_gaussian",
    "gaussian_barycenter_fixed_point",
    "gaussian_w2sq",
    "grid_measure_from_density",
    "sinkhorn_two_marginal",
    "tree_sinkhorn_mp",
    "uniform_grid",
    "uvp_between",
    "wp_objective_check",
]
