"""Experiment orchestration: rate and dimension sweeps, circle demos.

Each experiment cell (one n or D at one seed) is a pure function of the
configuration, so cells can run in a process pool in any order and the
collected records are identical for any worker count.  Per-cell child seeds
are derived from the cell coordinates, never from shared generator state.
"""

from __future__ import annotations

import csv
import json
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr
from threadpoolctl import threadpool_limits

from ..manifolds import (
    ConfigurationError,
    DataSet,
    circle,
    make_manifold,
    sample_manifold,
    save_dataset,
)
from ..metrics import (
    SinkhornConfig,
    entropic_self_cost,
    fit_loglog_slope,
    sinkhorn_divergence,
)
from ..rng import derive_seed
from ..sampler import (
    Method,
    PathMode,
    SampleBatch,
    SamplerConfig,
    forward_noise,
    idm_sample,
    inertia_update,
    memorized_sample,
    save_batch,
)
from ..score import empirical_score

RESULTS_HEADER = (
    "experiment",
    "method",
    "n",
    "D",
    "seed",
    "w1_estimate",
    "sigma_prime",
    "wall_time_ms",
)

# Child-seed address tags, one per independent random ingredient of a cell.
_TAG_EMBED = 11
_TAG_DATA = 12
_TAG_PROXY = 13
_TAG_IDM = 14
_TAG_MEM = 15


class RunFailure(RuntimeError):
    """More than the tolerated fraction of experiment cells failed."""


@dataclass
class ExperimentConfig:
    """Settings shared by the bench experiments; not every field matters to all."""

    experiment: str
    kind: str = "so"
    m_or_d: int = 4
    ambient_dim: int = 50
    n_list: tuple[int, ...] = (256, 512, 1024, 2048, 4096)
    d_list: tuple[int, ...] = (16, 32, 64, 128, 256)
    n_fixed: int = 2048
    c0: float = 0.8
    m_proxy: int = 20_000
    seeds: tuple[int, ...] = (0, 1, 2)
    path_mode: str = "short_circuit"
    ode_steps: int = 200
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    workers: int = 0  # 0 = one per CPU, capped at 8
    out_dir: str = "results"
    # circle-demo and score-field knobs
    demo_n: int = 70
    demo_count: int = 200
    demo_t: float = 0.05
    grid_w: int = 40
    grid_h: int = 40
    grid_lim: float = 1.5
    field_t: float = 0.05

    def __post_init__(self) -> None:
        self.n_list = tuple(int(v) for v in self.n_list)
        self.d_list = tuple(int(v) for v in self.d_list)
        self.seeds = tuple(int(v) for v in self.seeds)
        if self.experiment not in {"rate", "dim", "circle-demo", "score-field"}:
            raise ConfigurationError(f"unknown experiment {self.experiment!r}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if any(n < 2 for n in self.n_list):
            raise ConfigurationError(f"n_list entries must be >= 2, got {self.n_list}")
        if self.experiment == "rate" and len(set(self.n_list)) < 3:
            raise ConfigurationError(
                "rate experiment needs at least 3 distinct n values to fit a slope"
            )
        if self.experiment == "dim" and not self.d_list:
            raise ConfigurationError("dim experiment needs a nonempty d_list")
        if self.experiment in ("circle-demo", "score-field"):
            if self.kind == "so":  # sweep default does not apply to the demos
                self.kind = "circle"
            if self.kind != "circle":
                raise ConfigurationError(
                    f"{self.experiment} supports the circle only, got {self.kind!r}"
                )
        if self.m_proxy < 100:
            raise ConfigurationError(f"m_proxy must be >= 100, got {self.m_proxy}")
        if self.c0 <= 0.0:
            raise ConfigurationError(f"c0 must be > 0, got {self.c0}")
        if self.workers < 0:
            raise ConfigurationError(f"workers must be >= 0, got {self.workers}")
        if self.demo_t <= 0.0:
            raise ConfigurationError(f"demo_t must be > 0, got {self.demo_t}")
        PathMode(self.path_mode)


@dataclass(frozen=True)
class ExperimentRecord:
    """One measurement row of an experiment."""

    experiment: str
    method: str
    n: int
    D: int
    seed: int
    w1_estimate: float
    sigma_prime: float
    wall_time_ms: int


@dataclass
class RunResult:
    records: list[ExperimentRecord]
    summary: dict
    failures: list[str]


def _cell(
    cfg: ExperimentConfig, experiment: str, n: int, ambient: int, seed: int
) -> list[ExperimentRecord]:
    """Sample IDM and Memorized batches for one cell and score both against
    a fresh proxy of the ground truth.  BLAS pools are pinned to one thread
    so results do not depend on how cells are packed onto workers."""
    with threadpool_limits(limits=1):
        spec = make_manifold(
            cfg.kind,
            cfg.m_or_d,
            ambient,
            embed_seed=derive_seed(seed, _TAG_EMBED, n, ambient),
        )
        data = sample_manifold(spec, n, derive_seed(seed, _TAG_DATA, n, ambient))
        proxy = sample_manifold(
            spec, cfg.m_proxy, derive_seed(seed, _TAG_PROXY, n, ambient)
        ).points
        sampler_cfg = SamplerConfig.from_data(
            data,
            cfg.c0,
            path_mode=PathMode(cfg.path_mode),
            ode_steps=cfg.ode_steps,
        )
        proxy_self = entropic_self_cost(proxy, cfg.sinkhorn)
        records = []
        for method in (Method.IDM, Method.MEMORIZED):
            t0 = time.perf_counter()
            if method is Method.IDM:
                batch = idm_sample(
                    data, sampler_cfg, cfg.m_proxy, derive_seed(seed, _TAG_IDM, n, ambient)
                )
            else:
                batch = memorized_sample(
                    data, cfg.m_proxy, derive_seed(seed, _TAG_MEM, n, ambient)
                )
            w1 = sinkhorn_divergence(
                batch.samples, proxy, cfg.sinkhorn, self_b=proxy_self
            )
            ms = int(round(1000.0 * (time.perf_counter() - t0)))
            records.append(
                ExperimentRecord(
                    experiment=experiment,
                    method=method.value,
                    n=n,
                    D=ambient,
                    seed=seed,
                    w1_estimate=w1,
                    sigma_prime=sampler_cfg.plan.sigma_prime,
                    wall_time_ms=ms,
                )
            )
        return records


def _resolve_workers(requested: int) -> int:
    if requested > 0:
        return requested
    return max(1, min(os.cpu_count() or 1, 8))


def _run_cells(cfg: ExperimentConfig, cells: list[tuple]) -> tuple[list, list[str]]:
    """cells: list of (key, args) with args for _cell.  Returns records sorted
    by cell key plus failure descriptions; raises RunFailure above 20%."""
    workers = _resolve_workers(cfg.workers)
    results: dict = {}
    failures: list[str] = []
    if workers == 1:
        for key, args in cells:
            try:
                results[key] = _cell(*args)
            except Exception as exc:  # noqa: BLE001 - cell isolation is the point
                failures.append(f"cell {key}: {exc!r}")
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(key, pool.submit(_cell, *args)) for key, args in cells]
            for key, fut in futures:
                exc = fut.exception()
                if exc is None:
                    results[key] = fut.result()
                else:
                    failures.append(f"cell {key}: {exc!r}")
    if len(failures) > 0.2 * len(cells):
        raise RunFailure(
            f"{len(failures)} of {len(cells)} cells failed: " + "; ".join(failures)
        )
    records = [rec for key in sorted(results) for rec in results[key]]
    return records, failures


def _seed_means(records: list[ExperimentRecord], axis: str) -> dict[str, dict[int, float]]:
    """Mean W1 per (method, n or D), averaged over seeds."""
    acc: dict[str, dict[int, list[float]]] = {}
    for rec in records:
        coord = getattr(rec, axis)
        acc.setdefault(rec.method, {}).setdefault(coord, []).append(rec.w1_estimate)
    return {
        method: {coord: float(np.mean(vals)) for coord, vals in coords.items()}
        for method, coords in acc.items()
    }


def run_rate_experiment(cfg: ExperimentConfig) -> RunResult:
    """W1 against the ground truth as a function of n, for IDM and Memorized."""
    cells = [
        ((n, seed), (cfg, "rate", n, cfg.ambient_dim, seed))
        for n in cfg.n_list
        for seed in cfg.seeds
    ]
    records, failures = _run_cells(cfg, cells)
    means = _seed_means(records, "n")
    fits = {}
    for method, by_n in means.items():
        pairs = sorted(by_n.items())
        if len(pairs) >= 2:
            slope, intercept, r2 = fit_loglog_slope(pairs)
            fits[method] = {"slope": slope, "intercept": intercept, "r_squared": r2}
    summary = {
        "experiment": "rate",
        "kind": cfg.kind,
        "m_or_d": cfg.m_or_d,
        "D": cfg.ambient_dim,
        "m_proxy": cfg.m_proxy,
        "seeds": list(cfg.seeds),
        "path_mode": cfg.path_mode,
        "w1_means": {m: {str(k): v for k, v in sorted(d.items())} for m, d in means.items()},
        "fits": fits,
        "failed_cells": failures,
    }
    return RunResult(records=records, summary=summary, failures=failures)


def run_dimension_experiment(cfg: ExperimentConfig) -> RunResult:
    """W1 against the ground truth as the ambient dimension sweeps, n fixed."""
    cells = [
        ((ambient, seed), (cfg, "dim", cfg.n_fixed, ambient, seed))
        for ambient in cfg.d_list
        for seed in cfg.seeds
    ]
    records, failures = _run_cells(cfg, cells)
    means = _seed_means(records, "D")
    if len(set(cfg.d_list)) == 1:
        warnings.warn(
            "dimension sweep has a single D: flatness is trivially 0",
            RuntimeWarning,
            stacklevel=2,
        )
    flatness = {}
    spearman = {}
    for method, by_d in means.items():
        ordered = [by_d[d] for d in sorted(by_d)]
        med = float(np.median(ordered))
        if len(ordered) == 1:
            flatness[method] = 0.0
        else:
            flatness[method] = (
                float((max(ordered) - min(ordered)) / med) if med > 0 else float("inf")
            )
        if len(ordered) >= 2:
            rho = spearmanr(sorted(by_d), ordered).statistic
            spearman[method] = float(rho) if np.isfinite(rho) else None
    summary = {
        "experiment": "dim",
        "kind": cfg.kind,
        "m_or_d": cfg.m_or_d,
        "n": cfg.n_fixed,
        "m_proxy": cfg.m_proxy,
        "seeds": list(cfg.seeds),
        "path_mode": cfg.path_mode,
        "w1_means": {m: {str(k): v for k, v in sorted(d.items())} for m, d in means.items()},
        "flatness": flatness,
        "spearman_rho": spearman,
        "failed_cells": failures,
    }
    return RunResult(records=records, summary=summary, failures=failures)


@dataclass
class DemoArtifacts:
    data: DataSet
    early: SampleBatch
    updated: SampleBatch
    paths: dict[str, Path]


def run_circle_demo(cfg: ExperimentConfig) -> DemoArtifacts:
    """Training points, early-stopped draws at t, and their inertia updates.

    The update uses the same channel time (h^2 = t), so the three files show
    the raw data, the noised cloud, and the cloud pulled back to the circle.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    spec = circle(2, embed_seed=derive_seed(seed, _TAG_EMBED, cfg.demo_n, 2))
    data = sample_manifold(spec, cfg.demo_n, derive_seed(seed, _TAG_DATA, cfg.demo_n, 2))
    fwd_seed = derive_seed(seed, _TAG_IDM, cfg.demo_n, 2)
    early = forward_noise(data, cfg.demo_t, cfg.demo_count, fwd_seed)
    updated = SampleBatch(
        samples=inertia_update(early.samples, float(np.sqrt(cfg.demo_t)), data),
        config=None,
        seed=fwd_seed,
        method=Method.IDM,
    )
    paths = {
        "training": out / "training.csv",
        "early_stopped": out / "early_stopped.csv",
        "updated": out / "updated.csv",
    }
    save_dataset(data, paths["training"])
    save_batch(early, paths["early_stopped"])
    save_batch(updated, paths["updated"])
    return DemoArtifacts(data=data, early=early, updated=updated, paths=paths)


@dataclass
class FieldArtifacts:
    xs: np.ndarray
    ys: np.ndarray
    scores: np.ndarray
    data: DataSet
    path: Path


def run_score_field(cfg: ExperimentConfig) -> FieldArtifacts:
    """Empirical score on a regular 2-d grid around circle data at field_t."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    spec = circle(2, embed_seed=derive_seed(seed, _TAG_EMBED, cfg.demo_n, 2))
    data = sample_manifold(spec, cfg.demo_n, derive_seed(seed, _TAG_DATA, cfg.demo_n, 2))
    xs = np.linspace(-cfg.grid_lim, cfg.grid_lim, cfg.grid_w)
    ys = np.linspace(-cfg.grid_lim, cfg.grid_lim, cfg.grid_h)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    scores = empirical_score(grid, cfg.field_t, data)
    path = out / "score_field.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "score_x", "score_y"])
        for (x, y), (sx, sy) in zip(grid, scores):
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(sx)), repr(float(sy))])
    return FieldArtifacts(xs=xs, ys=ys, scores=scores, data=data, path=path)


def write_results_csv(records: list[ExperimentRecord], path: str | Path) -> None:
    """Rows in the canonical (method, n, D, seed) order, full-precision floats."""
    ordered = sorted(records, key=lambda r: (r.method, r.n, r.D, r.seed))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER)
        for rec in ordered:
            writer.writerow(
                [
                    rec.experiment,
                    rec.method,
                    rec.n,
                    rec.D,
                    rec.seed,
                    repr(float(rec.w1_estimate)),
                    repr(float(rec.sigma_prime)),
                    rec.wall_time_ms,
                ]
            )


def write_summary_json(summary: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
