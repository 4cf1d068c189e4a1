"""Noise schedule, empirical mixture density and score, kernel regression.

The forward channel is the unit Ornstein-Uhlenbeck process: a data point X
observed at time t is alpha_t X + sigma_t xi with alpha_t = exp(-t),
sigma_t = sqrt(1 - exp(-2t)), xi ~ N(0, I_D).  The density of that channel
started from the empirical measure of a data set is an n-component Gaussian
mixture; its log-density and score have closed forms evaluated here with
max-shifted log-sum-exp, never by numeric differentiation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .manifolds import DataSet

# Pairwise squared distances are evaluated in row chunks of at most this
# many matrix entries, bounding peak memory independently of batch size.
_CHUNK_ENTRIES = 1 << 22


@dataclass(frozen=True)
class SchedulePoint:
    """Forward-channel coefficients at one time: alpha^2 + sigma^2 = 1."""

    t: float
    alpha: float
    sigma: float

    @property
    def sigma_over_alpha(self) -> float:
        # sqrt(e^{2t} - 1) via expm1, exact for small t where sigma/alpha cancels.
        return float(np.sqrt(np.expm1(2.0 * self.t)))


def schedule_at(t: float) -> SchedulePoint:
    """Coefficients (alpha_t, sigma_t) of the forward channel at time t >= 0.

    sigma_t is computed as sqrt(-expm1(-2t)), which keeps full relative
    accuracy down to t = 0 (for t = 1e-10 it matches an extended-precision
    evaluation of sqrt(1 - exp(-2t)) to machine precision).
    """
    t = float(t)
    if not np.isfinite(t) or t < 0.0:
        raise ValueError(f"schedule time must be finite and >= 0, got {t}")
    return SchedulePoint(
        t=t, alpha=float(np.exp(-t)), sigma=float(np.sqrt(-np.expm1(-2.0 * t)))
    )


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Softmax weights over mixture components, kept in log space."""

    log_weights: np.ndarray

    @cached_property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def _as_points(data: DataSet | np.ndarray) -> np.ndarray:
    pts = data.points if isinstance(data, DataSet) else np.asarray(data, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"data must be a 2-d point array, got shape {pts.shape}")
    return pts


def _chunk_rows(n_cols: int) -> int:
    return max(1, _CHUNK_ENTRIES // max(1, n_cols))


def _sqdist(z: np.ndarray, centers: np.ndarray, centers_sq: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances ||z_i - c_j||^2 for one row chunk."""
    d = z @ centers.T
    d *= -2.0
    d += np.sum(z * z, axis=1)[:, None]
    d += centers_sq[None, :]
    return np.maximum(d, 0.0, out=d)


def _softmax_center_mean(
    z: np.ndarray, centers: np.ndarray, sigma: float
) -> np.ndarray:
    """Rows of softmax_i(-||z - c_i||^2 / (2 sigma^2)) averaged over centers."""
    inv = 1.0 / (2.0 * sigma * sigma)
    centers_sq = np.sum(centers * centers, axis=1)
    out = np.empty_like(z)
    step = _chunk_rows(centers.shape[0])
    for start in range(0, z.shape[0], step):
        zc = z[start : start + step]
        logits = _sqdist(zc, centers, centers_sq)
        logits *= -inv
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        denom = logits.sum(axis=1)
        out[start : start + step] = (logits @ centers) / denom[:, None]
    return out


def softmax_weights(
    z: np.ndarray, sigma: float, centers: DataSet | np.ndarray
) -> WeightVector:
    """Softmax weights w_i(z) over centers at Gaussian bandwidth sigma.

    Materializes one weight per center; rows of a batched z get independent
    weight rows.  Weights are invariant to any constant shift of the
    underlying logits, hence to rigid translation of z and centers together.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    pts = _as_points(centers)
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    rows = np.atleast_2d(z)
    logits = _sqdist(rows, pts, np.sum(pts * pts, axis=1))
    logits *= -1.0 / (2.0 * sigma * sigma)
    log_w = logits - logsumexp(logits, axis=1, keepdims=True)
    return WeightVector(log_weights=log_w[0] if single else log_w)


def nw_estimate(
    z: np.ndarray, sigma: float, data: DataSet | np.ndarray
) -> np.ndarray:
    """Kernel-weighted average of the data at bandwidth sigma.

    F(z) = sum_i w_i(z) X_i with w = softmax(-||z - X_i||^2 / (2 sigma^2)).
    Always lies in the convex hull of the data, and moving z by delta moves
    F(z) by at most diam(data)^2 / (4 sigma^2) * |delta|.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    pts = _as_points(data)
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    out = _softmax_center_mean(np.atleast_2d(z), pts, sigma)
    return out[0] if single else out


def log_density_hat(
    x: np.ndarray, t: float, data: DataSet | np.ndarray
) -> np.ndarray | float:
    """Log-density of the forward channel started from the empirical measure.

    log p_t(x) = -D/2 log(2 pi sigma_t^2)
                 + logsumexp_i(-||x - alpha_t X_i||^2 / (2 sigma_t^2)) - log n.

    At t = 0 the density is atomic: returns +inf exactly on a data point and
    -inf elsewhere (sentinels, not errors).
    """
    pts = _as_points(data)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    n, dim = pts.shape
    if t == 0.0:
        hit = np.array(
            [np.any(np.all(row == pts, axis=1)) for row in rows], dtype=bool
        )
        vals = np.where(hit, np.inf, -np.inf)
        return float(vals[0]) if single else vals
    sp = schedule_at(t)
    scaled = sp.alpha * pts
    scaled_sq = np.sum(scaled * scaled, axis=1)
    inv = 1.0 / (2.0 * sp.sigma * sp.sigma)
    lse = np.empty(rows.shape[0])
    step = _chunk_rows(n)
    for start in range(0, rows.shape[0], step):
        logits = _sqdist(rows[start : start + step], scaled, scaled_sq)
        logits *= -inv
        lse[start : start + step] = logsumexp(logits, axis=1)
    vals = lse - 0.5 * dim * np.log(2.0 * np.pi * sp.sigma * sp.sigma) - np.log(n)
    return float(vals[0]) if single else vals


def empirical_score(
    x: np.ndarray, t: float, data: DataSet | np.ndarray
) -> np.ndarray:
    """Gradient of log p_t at x: the exact mixture-score formula.

    grad log p_t(x) = -(x - alpha_t sum_i w_i X_i) / sigma_t^2 with softmax
    weights w_i over the scaled data alpha_t X_i at bandwidth sigma_t.
    """
    if t <= 0.0:
        raise ValueError(f"score requires t > 0, got {t}")
    pts = _as_points(data)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    sp = schedule_at(t)
    mean = _softmax_center_mean(rows, sp.alpha * pts, sp.sigma)
    score = (mean - rows) / (sp.sigma * sp.sigma)
    return score[0] if single else score


@dataclass(frozen=True)
class BandwidthPlan:
    """Kernel bandwidth sigma' and the matching channel time h^2.

    sigma_prime = c0 * n^(-1/(d+4)) and h^2 = log(1 + sigma_prime^2) / 2,
    the exact inversion of sigma_t / alpha_t = sigma_prime at t = h^2.
    """

    c0: float
    d: int
    n: int
    sigma_prime: float
    h: float

    @property
    def h_squared(self) -> float:
        return self.h * self.h


def bandwidth_plan(c0: float, d: int, n: int) -> BandwidthPlan:
    """Reference bandwidth schedule for n samples of a d-dimensional manifold."""
    if c0 <= 0.0:
        raise ValueError(f"c0 must be > 0, got {c0}")
    if d < 1 or n < 1:
        raise ValueError(f"need d >= 1 and n >= 1, got d={d} n={n}")
    sigma_prime = c0 * float(n) ** (-1.0 / (d + 4))
    return _finish_plan(c0, d, n, sigma_prime)


def bandwidth_plan_from_sigma(sigma_prime: float, d: int, n: int) -> BandwidthPlan:
    """Plan pinned at an explicit sigma'; c0 is back-solved for consistency."""
    if sigma_prime <= 0.0:
        raise ValueError(f"sigma_prime must be > 0, got {sigma_prime}")
    c0 = sigma_prime * float(n) ** (1.0 / (d + 4))
    return _finish_plan(c0, d, n, sigma_prime)


def _finish_plan(c0: float, d: int, n: int, sigma_prime: float) -> BandwidthPlan:
    if sigma_prime >= 1.0:
        warnings.warn(
            f"bandwidth sigma'={sigma_prime:.3g} >= 1: too few samples for the "
            "plan to contract",
            RuntimeWarning,
            stacklevel=3,
        )
    h = float(np.sqrt(0.5 * np.log1p(sigma_prime * sigma_prime)))
    return BandwidthPlan(c0=c0, d=d, n=n, sigma_prime=sigma_prime, h=h)


def population_score_circle(
    x: np.ndarray, t: float, quad_points: int = 512
) -> np.ndarray:
    """Score of the forward channel started from the uniform unit circle.

    The mixing integral over theta is evaluated by the periodic trapezoid
    rule (spectrally accurate here), differentiating under the integral:
    grad log p_t(x) = -(x - alpha_t ybar(x)) / sigma_t^2 where ybar is the
    Gaussian-weighted mean of circle points y(theta).
    """
    if quad_points < 64:
        raise ValueError(f"need at least 64 quadrature points, got {quad_points}")
    if t <= 0.0:
        raise ValueError(f"score requires t > 0, got {t}")
    theta = np.linspace(0.0, 2.0 * np.pi, quad_points, endpoint=False)
    nodes = np.column_stack([np.cos(theta), np.sin(theta)])
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    if rows.shape[1] != 2:
        raise ValueError("population circle score is defined on R^2 points")
    sp = schedule_at(t)
    mean = _softmax_center_mean(rows, sp.alpha * nodes, sp.sigma)
    score = (mean - rows) / (sp.sigma * sp.sigma)
    return score[0] if single else score
