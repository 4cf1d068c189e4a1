"""Training-free generative sampling from the empirical score.

Two routes produce a batch from a data set.  The full route draws from the
noised empirical measure at a large horizon T, runs the reverse
probability-flow ODE dZ/ds = Z + grad log p_{T-s}(Z) down to the stopping
time h^2, and finishes with one inertia update.  The short-circuit route
draws directly from the noised empirical measure at t = h^2 and applies the
same finish.  The inertia update is algebraically a kernel regression:

    alpha^{-1} (z + sigma^2 grad log p_{h^2}(z)) = F(z / alpha; sigma')

with F the softmax-weighted data average at bandwidth
sigma' = sigma_{h^2} / alpha_{h^2}; the kernel form is used throughout for
stability, the raw-score form is kept only as a cross-check.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .manifolds import ConfigurationError, DataSet
from .rng import BLOCK, DOMAIN_FORWARD, DOMAIN_GAUSS_INIT, DOMAIN_MEMORIZED, stream
from .score import (
    BandwidthPlan,
    bandwidth_plan,
    empirical_score,
    nw_estimate,
    schedule_at,
)

__all__ = [
    "HORIZON_FACTOR",
    "InitMode",
    "Method",
    "OdeDivergenceError",
    "PathMode",
    "SampleBatch",
    "SamplerConfig",
    "default_horizon",
    "forward_noise",
    "idm_sample",
    "inertia_update",
    "inertia_update_score_form",
    "load_batch",
    "memorized_sample",
    "reverse_ode",
    "save_batch",
]


class OdeDivergenceError(RuntimeError):
    """The reverse ODE state left the finite range."""

    def __init__(self, step: int, t: float):
        super().__init__(f"non-finite ODE state at step {step} (t={t:.6g})")
        self.step = step
        self.t = t


class PathMode(str, Enum):
    FULL_ODE = "full_ode"
    SHORT_CIRCUIT = "short_circuit"


class InitMode(str, Enum):
    EMPIRICAL_PT = "empirical_pt"
    STANDARD_GAUSSIAN = "standard_gaussian"


class Method(str, Enum):
    IDM = "IDM"
    MEMORIZED = "Memorized"
    EARLY_STOPPED = "EarlyStopped"


#: Multiplier k in the default horizon T = k (log n + log D + log diam).
HORIZON_FACTOR = 2.0


def default_horizon(n: int, ambient_dim: int, diameter: float) -> float:
    """Horizon large enough that p_T is within sampling error of N(0, I)."""
    return HORIZON_FACTOR * (np.log(n) + np.log(ambient_dim) + np.log(diameter))


@dataclass(frozen=True)
class SamplerConfig:
    plan: BandwidthPlan
    horizon: float
    ode_steps: int = 200
    init_mode: InitMode = InitMode.EMPIRICAL_PT
    path_mode: PathMode = PathMode.SHORT_CIRCUIT
    step_schedule: str = "geometric"

    def __post_init__(self) -> None:
        if self.horizon <= self.plan.h_squared:
            raise ConfigurationError(
                f"horizon {self.horizon:.6g} must exceed the stopping time "
                f"h^2 = {self.plan.h_squared:.6g}"
            )
        if self.ode_steps < 1:
            raise ConfigurationError(f"ode_steps must be >= 1, got {self.ode_steps}")
        if self.step_schedule != "geometric":
            raise ConfigurationError(
                f"unknown step schedule {self.step_schedule!r}"
            )

    @classmethod
    def from_data(
        cls,
        data: DataSet,
        c0: float = 0.8,
        *,
        ode_steps: int = 200,
        init_mode: InitMode = InitMode.EMPIRICAL_PT,
        path_mode: PathMode = PathMode.SHORT_CIRCUIT,
    ) -> "SamplerConfig":
        plan = bandwidth_plan(c0, data.spec.intrinsic_dim, data.n)
        horizon = default_horizon(data.n, data.spec.ambient_dim, data.spec.diameter)
        return cls(
            plan=plan,
            horizon=horizon,
            ode_steps=ode_steps,
            init_mode=init_mode,
            path_mode=path_mode,
        )


@dataclass(eq=False)
class SampleBatch:
    samples: np.ndarray
    config: SamplerConfig | None
    seed: int
    method: Method
    wall_time_ms: int | None = None


def forward_noise(data: DataSet, t: float, count: int, seed: int) -> SampleBatch:
    """count draws of alpha_t X_U + sigma_t xi, U uniform over the data.

    Sample i depends only on (seed, i): draws are organized in fixed blocks
    of rng.BLOCK samples, each block drawing its indices first and its noise
    second from a dedicated stream.
    """
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    sp = schedule_at(t)
    pts = data.points
    dim = pts.shape[1]
    out = np.empty((count, dim))
    for start in range(0, count, BLOCK):
        gen = stream(seed, DOMAIN_FORWARD, start // BLOCK)
        idx = gen.integers(0, data.n, size=BLOCK)
        xi = gen.standard_normal((BLOCK, dim))
        take = min(BLOCK, count - start)
        out[start : start + take] = sp.alpha * pts[idx[:take]] + sp.sigma * xi[:take]
    return SampleBatch(samples=out, config=None, seed=seed, method=Method.EARLY_STOPPED)


def memorized_sample(data: DataSet, count: int, seed: int) -> SampleBatch:
    """count uniform draws with replacement from the data itself."""
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    out = np.empty((count, data.points.shape[1]))
    for start in range(0, count, BLOCK):
        gen = stream(seed, DOMAIN_MEMORIZED, start // BLOCK)
        idx = gen.integers(0, data.n, size=BLOCK)
        take = min(BLOCK, count - start)
        out[start : start + take] = data.points[idx[:take]]
    return SampleBatch(samples=out, config=None, seed=seed, method=Method.MEMORIZED)


def reverse_ode(
    z0: np.ndarray,
    t_start: float,
    t_end: float,
    data: DataSet | np.ndarray,
    steps: int,
) -> np.ndarray:
    """Integrate the reverse probability-flow ODE from t_start down to t_end.

    In physical time the field is dZ/dt = -(Z + grad log p_t(Z)), stepped by
    classical fourth-order Runge-Kutta on the geometric grid
    t_j = t_start (t_end / t_start)^(j/steps), which concentrates steps near
    the stiff small-t region.  z0 may be one state (D,) or a batch (M, D);
    batch rows evolve independently.
    """
    if not (0.0 < t_end < t_start):
        raise ValueError(f"need 0 < t_end < t_start, got {t_end}, {t_start}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    z = np.atleast_2d(np.asarray(z0, dtype=np.float64)).copy()
    single = np.asarray(z0).ndim == 1
    ratio = t_end / t_start
    grid = t_start * ratio ** (np.arange(steps + 1) / steps)
    grid[-1] = t_end

    def field(t: float, state: np.ndarray) -> np.ndarray:
        return -(state + empirical_score(state, t, data))

    for j in range(steps):
        t0, t1 = grid[j], grid[j + 1]
        dt = t1 - t0
        k1 = field(t0, z)
        k2 = field(t0 + 0.5 * dt, z + (0.5 * dt) * k1)
        k3 = field(t0 + 0.5 * dt, z + (0.5 * dt) * k2)
        k4 = field(t1, z + dt * k3)
        z += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise OdeDivergenceError(step=j, t=float(t1))
    return z[0] if single else z


def inertia_update(z: np.ndarray, h: float, data: DataSet | np.ndarray) -> np.ndarray:
    """One inertia step at bandwidth time h^2, in its kernel-regression form.

    Returns F(z / alpha_{h^2}; sigma_{h^2} / alpha_{h^2}) over the data,
    identical to alpha^{-1}(z + sigma^2 grad log p_{h^2}(z)) in exact
    arithmetic.
    """
    if h <= 0.0:
        raise ValueError(f"h must be > 0, got {h}")
    sp = schedule_at(h * h)
    return nw_estimate(np.asarray(z, dtype=np.float64) / sp.alpha, sp.sigma_over_alpha, data)


def inertia_update_score_form(
    z: np.ndarray, h: float, data: DataSet | np.ndarray
) -> np.ndarray:
    """Raw-score form of the inertia update, kept for the identity cross-check."""
    if h <= 0.0:
        raise ValueError(f"h must be > 0, got {h}")
    t = h * h
    sp = schedule_at(t)
    z = np.asarray(z, dtype=np.float64)
    return (z + sp.sigma * sp.sigma * empirical_score(z, t, data)) / sp.alpha


def idm_sample(
    data: DataSet, config: SamplerConfig, count: int, seed: int
) -> SampleBatch:
    """Generate count samples by the configured route, ending in the inertia update."""
    t0 = time.perf_counter()
    h = config.plan.h
    t_stop = config.plan.h_squared
    if config.path_mode is PathMode.SHORT_CIRCUIT:
        z = forward_noise(data, t_stop, count, seed).samples
    else:
        if config.init_mode is InitMode.EMPIRICAL_PT:
            z = forward_noise(data, config.horizon, count, seed).samples
        else:
            z = _gaussian_init(data.points.shape[1], count, seed)
        z = reverse_ode(z, config.horizon, t_stop, data, config.ode_steps)
    out = inertia_update(z, h, data)
    ms = int(round(1000.0 * (time.perf_counter() - t0)))
    return SampleBatch(
        samples=out, config=config, seed=seed, method=Method.IDM, wall_time_ms=ms
    )


def _gaussian_init(dim: int, count: int, seed: int) -> np.ndarray:
    out = np.empty((count, dim))
    for start in range(0, count, BLOCK):
        gen = stream(seed, DOMAIN_GAUSS_INIT, start // BLOCK)
        xi = gen.standard_normal((BLOCK, dim))
        take = min(BLOCK, count - start)
        out[start : start + take] = xi[:take]
    return out


def _config_to_json(config: SamplerConfig | None) -> dict | None:
    if config is None:
        return None
    return {
        "c0": config.plan.c0,
        "d": config.plan.d,
        "n": config.plan.n,
        "sigma_prime": config.plan.sigma_prime,
        "h": config.plan.h,
        "horizon": config.horizon,
        "ode_steps": config.ode_steps,
        "init_mode": config.init_mode.value,
        "path_mode": config.path_mode.value,
        "step_schedule": config.step_schedule,
    }


def _config_from_json(obj: dict | None) -> SamplerConfig | None:
    if obj is None:
        return None
    plan = BandwidthPlan(
        c0=obj["c0"],
        d=obj["d"],
        n=obj["n"],
        sigma_prime=obj["sigma_prime"],
        h=obj["h"],
    )
    return SamplerConfig(
        plan=plan,
        horizon=obj["horizon"],
        ode_steps=obj["ode_steps"],
        init_mode=InitMode(obj["init_mode"]),
        path_mode=PathMode(obj["path_mode"]),
        step_schedule=obj["step_schedule"],
    )


def save_batch(batch: SampleBatch, path: str | Path) -> None:
    """Write samples as CSV (header x0..x{D-1}) plus a JSON sidecar."""
    path = Path(path)
    dim = batch.samples.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dim)])
        for row in batch.samples:
            writer.writerow([repr(float(v)) for v in row])
    sidecar = {
        "method": batch.method.value,
        "config": _config_to_json(batch.config),
        "seed": batch.seed,
        "wall_time_ms": batch.wall_time_ms,
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_batch(path: str | Path) -> SampleBatch:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        sidecar = json.load(fh)
    samples = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return SampleBatch(
        samples=samples,
        config=_config_from_json(sidecar["config"]),
        seed=sidecar["seed"],
        method=Method(sidecar["method"]),
        wall_time_ms=sidecar["wall_time_ms"],
    )
