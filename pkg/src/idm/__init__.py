"""Training-free diffusion sampling on embedded manifolds.

The library has four layers: manifold data generation (`manifolds`), the
closed-form empirical score and bandwidth rules (`score`), the sampler
built from the reverse flow and the inertia update (`sampler`), and the
evaluation stack (`metrics`).  `bench` drives the experiments.
"""

from .manifolds import (
    ConfigurationError,
    DataSet,
    DegenerateProjectionError,
    InvalidTangentError,
    ManifoldKind,
    ManifoldSpec,
    circle,
    distance_to_manifold,
    exp_map,
    load_dataset,
    make_embedding,
    make_manifold,
    project_to_manifold,
    sample_manifold,
    save_dataset,
    special_orthogonal,
    sphere,
    split_gaussian_noise,
    tangent_basis,
)
from .metrics import (
    KdeSpec,
    SinkhornConfig,
    SinkhornConvergenceError,
    entropic_cost,
    entropic_self_cost,
    exact_w1_small,
    fit_loglog_slope,
    kde_density,
    kde_vs_exp_sampler_check,
    sinkhorn_divergence,
)
from .sampler import (
    HORIZON_FACTOR,
    InitMode,
    Method,
    OdeDivergenceError,
    PathMode,
    SampleBatch,
    SamplerConfig,
    default_horizon,
    forward_noise,
    idm_sample,
    inertia_update,
    load_batch,
    memorized_sample,
    reverse_ode,
    save_batch,
)
from .score import (
    BandwidthPlan,
    SchedulePoint,
    bandwidth_plan,
    bandwidth_plan_from_sigma,
    empirical_score,
    log_density_hat,
    nw_estimate,
    schedule_at,
    softmax_weights,
)

__version__ = "0.1.0"

__all__ = [
    "BandwidthPlan",
    "ConfigurationError",
    "DataSet",
    "DegenerateProjectionError",
    "HORIZON_FACTOR",
    "InitMode",
    "InvalidTangentError",
    "KdeSpec",
    "ManifoldKind",
    "ManifoldSpec",
    "Method",
    "OdeDivergenceError",
    "PathMode",
    "SampleBatch",
    "SamplerConfig",
    "SchedulePoint",
    "SinkhornConfig",
    "SinkhornConvergenceError",
    "bandwidth_plan",
    "bandwidth_plan_from_sigma",
    "circle",
    "default_horizon",
    "distance_to_manifold",
    "empirical_score",
    "entropic_cost",
    "entropic_self_cost",
    "exact_w1_small",
    "exp_map",
    "fit_loglog_slope",
    "forward_noise",
    "idm_sample",
    "inertia_update",
    "kde_density",
    "kde_vs_exp_sampler_check",
    "load_batch",
    "load_dataset",
    "log_density_hat",
    "make_embedding",
    "make_manifold",
    "memorized_sample",
    "nw_estimate",
    "project_to_manifold",
    "reverse_ode",
    "sample_manifold",
    "save_batch",
    "save_dataset",
    "schedule_at",
    "sinkhorn_divergence",
    "softmax_weights",
    "special_orthogonal",
    "sphere",
    "split_gaussian_noise",
    "tangent_basis",
    "__version__",
]
