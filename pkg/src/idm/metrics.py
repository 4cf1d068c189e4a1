"""Transport distances, manifold kernel density estimates, rate fitting.

The W1 estimator is the debiased entropic divergence
S_eps(a, b) = OT_eps(a, b) - OT_eps(a, a)/2 - OT_eps(b, b)/2 with Euclidean
(exponent-1) ground cost, solved in the log domain with epsilon-scaling:
potentials are warm-started while eps shrinks geometrically from the
largest pairwise cost down to the target blur.  Large problems stream the
kernel through a row-blocked float32 buffer, one exp pass per sweep; small
problems run in float64.  An exact small-instance solver via the linear
assignment problem serves as the oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .manifolds import DataSet, ManifoldKind
from .rng import BLOCK, DOMAIN_EXP_SAMPLER, stream

# Kernel math drops to float32 above this many cost-matrix entries; the
# dual potentials and all reductions across blocks stay float64.
_F32_ENTRIES = 1 << 24
# Row blocking keeps the per-sweep working set cache-resident.
_BLOCK_ROWS = 256
# Chunk bound for kernel-density evaluation, in matrix entries.
_KDE_CHUNK_ENTRIES = 1 << 22
# Active-set truncation: worth the bookkeeping only above this many entries.
_TRUNC_ENTRIES = 1 << 22
# Entries within build*eps of zero reduced cost are kept; the set stays valid
# until the potentials drift by (build - keep)*eps, so every dropped entry
# keeps kernel weight below exp(-keep) ~ 1.5e-8.
_TRUNC_BUILD = 30.0
_TRUNC_KEEP = 18.0
# Adopt truncation only once the kept fraction and its memory are modest.
_TRUNC_FRACTION = 0.12
_TRUNC_BYTES = 1400 << 20
_COL_FLOOR = float(np.exp(-_TRUNC_BUILD))
# Refinement extrapolates from a window of potential snapshots taken this
# many sweeps apart; corrections larger than the cap are distrusted and
# skipped.
_EXTRAP_STRIDE = 8
_EXTRAP_SNAPSHOTS = 6
_EXTRAP_CAP = 0.1


class SinkhornConvergenceError(RuntimeError):
    """The marginal violation failed to clear the tolerance within max_iters."""

    def __init__(self, violation: float, iters: int):
        super().__init__(
            f"Sinkhorn did not converge: violation {violation:.3e} after {iters} sweeps"
        )
        self.violation = violation
        self.iters = iters


class UnsupportedManifoldError(NotImplementedError):
    """The requested operation has no implementation for this manifold kind."""


@dataclass(frozen=True)
class SinkhornConfig:
    """Debiased entropic transport settings (uniform weights, cost exponent 1)."""

    epsilon: float = 1e-3
    scaling: float = 0.9
    max_iters: int = 10_000
    tol: float = 1e-6
    cost: str = "euclidean"

    def __post_init__(self) -> None:
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0.0 < self.scaling < 1.0:
            raise ValueError(f"scaling must be in (0, 1), got {self.scaling}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol <= 0.0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.cost != "euclidean":
            raise ValueError("only the Euclidean (exponent-1) ground cost is supported")


def _check_points(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"{name} must be a nonempty (k, D) array, got {x.shape}")
    return x


def _cost_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean costs; float32 via the Gram identity when large."""
    if x.shape[0] * y.shape[0] <= _F32_ENTRIES:
        return cdist(x, y)
    x32 = np.ascontiguousarray(x, dtype=np.float32)
    y32 = np.ascontiguousarray(y, dtype=np.float32)
    x_sq = np.einsum("ij,ij->i", x32, x32)
    y_sq = np.einsum("ij,ij->i", y32, y32)
    out = np.empty((x32.shape[0], y32.shape[0]), dtype=np.float32)
    for s in range(0, x32.shape[0], _BLOCK_ROWS):
        blk = out[s : s + _BLOCK_ROWS]
        np.matmul(x32[s : s + _BLOCK_ROWS], y32.T, out=blk)
        blk *= -2.0
        blk += x_sq[s : s + _BLOCK_ROWS, None]
        blk += y_sq[None, :]
        np.maximum(blk, 0.0, out=blk)
        np.sqrt(blk, out=blk)
    return out


def _eps_schedule(c_max: float, config: SinkhornConfig) -> list[float]:
    eps_list = []
    eps = c_max
    while eps > config.epsilon:
        eps_list.append(eps)
        eps *= config.scaling
    eps_list.append(config.epsilon)
    return eps_list


def _cross_sweep(
    cost: np.ndarray,
    f: np.ndarray,
    g: np.ndarray,
    eps: float,
    buf: np.ndarray,
) -> float:
    """One exact f-then-g update at eps, reusing a single kernel pass.

    Returns the L-inf row-marginal violation of the incoming potentials,
    max_i a_i |sum_j b_j exp((f_i + g_j - C_ij)/eps) - 1|; the g update uses
    the identity exp((f_new_i + g_j - C_ij)/eps) = E_ij / r_i, so no second
    exp pass over the kernel is needed.
    """
    n, m = cost.shape
    dt = cost.dtype.type
    inv_eps = dt(1.0 / eps)
    f_cast = f.astype(cost.dtype)
    g_cast = g.astype(cost.dtype)
    r = np.empty(n)
    col = np.zeros(m)
    for s in range(0, n, _BLOCK_ROWS):
        rows = min(_BLOCK_ROWS, n - s)
        e = buf[:rows]
        np.subtract(g_cast[None, :], cost[s : s + rows], out=e)
        e += f_cast[s : s + rows, None]
        e *= inv_eps
        np.exp(e, out=e)
        r_blk = e.sum(axis=1, dtype=np.float64) / m
        r[s : s + rows] = r_blk
        w = ((1.0 / n) / r_blk).astype(cost.dtype)
        col += e.T @ w
    if not np.all(np.isfinite(r)) or not np.all(r > 0.0):
        raise SinkhornConvergenceError(float("nan"), 0)
    violation = float(np.max(np.abs(r - 1.0))) / n
    f -= eps * np.log(r)
    g -= eps * np.log(col)
    return violation


def _sym_sweep(cost: np.ndarray, p: np.ndarray, eps: float, buf: np.ndarray) -> float:
    """One averaged symmetric update p <- p - (eps/2) log r at eps."""
    n = cost.shape[0]
    dt = cost.dtype.type
    inv_eps = dt(1.0 / eps)
    p_cast = p.astype(cost.dtype)
    r = np.empty(n)
    for s in range(0, n, _BLOCK_ROWS):
        rows = min(_BLOCK_ROWS, n - s)
        e = buf[:rows]
        np.subtract(p_cast[None, :], cost[s : s + rows], out=e)
        e += p_cast[s : s + rows, None]
        e *= inv_eps
        np.exp(e, out=e)
        r[s : s + rows] = e.sum(axis=1, dtype=np.float64) / n
    if not np.all(np.isfinite(r)) or not np.all(r > 0.0):
        raise SinkhornConvergenceError(float("nan"), 0)
    violation = float(np.max(np.abs(r - 1.0))) / n
    p -= (0.5 * eps) * np.log(r)
    return violation


def _extrapolate(snaps: list[np.ndarray]) -> np.ndarray | None:
    """Least-squares fixed-point jump fitted to a window of snapshots.

    The minimal-polynomial combination of the recent iterates cancels the
    handful of slow kernel modes at once; a single-mode fit stalls when two
    comparable creep rates mix.  Returns None when the fit is untrustworthy.
    """
    u = np.stack(snaps)
    d = np.diff(u, axis=0)
    coeffs, *_ = np.linalg.lstsq(d[:-1].T, -d[-1], rcond=None)
    gamma = np.append(coeffs, 1.0)
    total = float(gamma.sum())
    if not np.isfinite(total) or abs(total) < 1e-12:
        return None
    gamma /= total
    target = gamma @ u[1:]
    peak = float(np.max(np.abs(target - u[-1])))
    if not np.isfinite(peak) or peak == 0.0 or peak > _EXTRAP_CAP:
        return None
    return target


class _ActiveSet:
    """Kernel entries whose reduced cost f_i + g_j - C_ij clears -build eps.

    At small eps almost all kernel weight sits on a few columns per row, so
    sweeps over the stored entries replace full passes over the cost matrix.
    The set is built from a snapshot of the potentials; while ``valid`` holds,
    every dropped entry has reduced cost below -keep eps, hence kernel weight
    below exp(-keep), and the sparse marginals match dense ones to ~1e-8.
    Convergence is still certified on the full kernel in ``_solve``.
    """

    def __init__(self, cost: np.ndarray) -> None:
        self.cost = cost
        self.eps_built = 0.0
        self.f_ref: np.ndarray | None = None

    def estimate_fraction(self, f: np.ndarray, g: np.ndarray, eps: float) -> float:
        n = self.cost.shape[0]
        rows = np.arange(0, n, max(1, n // 128))[:128]
        red = f[rows, None] + g[None, :] - self.cost[rows]
        return float(np.mean(red >= -_TRUNC_BUILD * eps))

    def build(self, f: np.ndarray, g: np.ndarray, eps: float) -> bool:
        n, m = self.cost.shape
        thresh = -_TRUNC_BUILD * eps
        counts = np.empty(n, dtype=np.int64)
        col_parts = []
        val_parts = []
        for s in range(0, n, _BLOCK_ROWS):
            blk = self.cost[s : s + _BLOCK_ROWS]
            red = f[s : s + blk.shape[0], None] + g[None, :] - blk
            mask = red >= thresh
            counts[s : s + blk.shape[0]] = mask.sum(axis=1)
            bi, bj = np.nonzero(mask)
            col_parts.append(bj.astype(np.int32))
            val_parts.append(np.asarray(blk[bi, bj], dtype=np.float64))
        if counts.min() < 1:
            return False
        self.cols = np.concatenate(col_parts)
        self.vals = np.concatenate(val_parts)
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=self.indptr[1:])
        self.row_of = np.repeat(np.arange(n, dtype=np.int32), counts)
        self.eps_built = eps
        self.f_ref = f.copy()
        self.g_ref = g.copy()
        return True

    def valid(self, f: np.ndarray, g: np.ndarray, eps: float) -> bool:
        if self.f_ref is None or eps > self.eps_built:
            return False
        drift = float(np.max(np.abs(f - self.f_ref)))
        drift += float(np.max(np.abs(g - self.g_ref)))
        return drift <= _TRUNC_BUILD * self.eps_built - _TRUNC_KEEP * eps

    def sweep_cross(self, f, g, eps: float) -> float:
        n, m = self.cost.shape
        e = np.exp((f[self.row_of] + g[self.cols] - self.vals) / eps)
        r = np.add.reduceat(e, self.indptr[:-1]) / m
        if not np.all(np.isfinite(r)) or not np.all(r > 0.0):
            raise SinkhornConvergenceError(float("nan"), 0)
        violation = float(np.max(np.abs(r - 1.0))) / n
        w = (1.0 / n) / r
        col = np.bincount(self.cols, weights=e * w[self.row_of], minlength=m)
        if col.min() <= _COL_FLOOR:
            # A column lost every active entry, which a valid set cannot do.
            raise SinkhornConvergenceError(float("nan"), 0)
        f -= eps * np.log(r)
        g -= eps * np.log(col)
        return violation

    def sweep_sym(self, p, eps: float) -> float:
        n = self.cost.shape[0]
        e = np.exp((p[self.row_of] + p[self.cols] - self.vals) / eps)
        r = np.add.reduceat(e, self.indptr[:-1]) / n
        if not np.all(np.isfinite(r)) or not np.all(r > 0.0):
            raise SinkhornConvergenceError(float("nan"), 0)
        violation = float(np.max(np.abs(r - 1.0))) / n
        p -= (0.5 * eps) * np.log(r)
        return violation


def _solve(cost: np.ndarray, config: SinkhornConfig, symmetric: bool) -> float:
    n, m = cost.shape
    buf = np.empty((min(_BLOCK_ROWS, n), m), dtype=cost.dtype)
    eps_list = _eps_schedule(float(cost.max()), config)
    if symmetric:
        p = np.zeros(n)
        f = g = p
        dense = lambda eps: _sym_sweep(cost, p, eps, buf)  # noqa: E731
    else:
        f = np.zeros(n)
        g = np.zeros(m)
        dense = lambda eps: _cross_sweep(cost, f, g, eps, buf)  # noqa: E731
    active = _ActiveSet(cost) if cost.size > _TRUNC_ENTRIES else None
    adopted = False

    def sweep(eps: float) -> float:
        nonlocal adopted
        if adopted and not active.valid(f, g, eps):
            adopted = active.build(f, g, eps)
        if not adopted:
            return dense(eps)
        if symmetric:
            return active.sweep_sym(p, eps)
        return active.sweep_cross(f, g, eps)

    iters = 0
    # Each level sweeps until the marginal violation of its warm start drops
    # below the level target.  One sweep per level is not enough: at small eps
    # the alternating projections stall unless every level hands over a nearly
    # feasible plan, the same scaling phases an auction solver needs.
    level_target = max(0.1 / n, config.tol)
    level_cap = max(1, config.max_iters // 50)
    level = 0
    while level < len(eps_list):
        eps = eps_list[level]
        if active is not None and not adopted:
            frac = active.estimate_fraction(f, g, eps)
            if frac <= _TRUNC_FRACTION and frac * cost.size * 24 <= _TRUNC_BYTES:
                adopted = active.build(f, g, eps)
        for _ in range(level_cap):
            violation = sweep(eps)
            iters += 1
            if violation <= level_target:
                break
            if iters >= config.max_iters:
                raise SinkhornConvergenceError(violation, iters)
        # Dense warm-up sweeps dominate huge solves, and the levels exist
        # only to carry the potentials down; a kernel still too dense to
        # truncate tolerates twice the annealing stride.
        if active is not None and not adopted and level < len(eps_list) - 2:
            level += 2
        else:
            level += 1
    # Refine at the final eps until the incoming potentials' violation clears
    # tol; each sweep measures before it polishes.  Near-degenerate instances
    # creep sublinearly here, the potentials sliding toward the fixed point
    # like c/k, so an extrapolation step periodically jumps out the fitted
    # creep.  Truncated runs only accept convergence the full kernel confirms.
    snaps: list[np.ndarray] = []
    refined = 0
    while True:
        violation = sweep(config.epsilon)
        iters += 1
        refined += 1
        if violation <= config.tol:
            if not adopted:
                break
            violation = dense(config.epsilon)
            iters += 1
            if violation <= config.tol:
                break
        if iters >= config.max_iters:
            raise SinkhornConvergenceError(violation, iters)
        if refined % _EXTRAP_STRIDE == 0:
            snaps.append(np.concatenate([f, g]))
            if len(snaps) == _EXTRAP_SNAPSHOTS:
                jump = _extrapolate(snaps)
                if jump is not None:
                    f[:] = jump[:n]
                    g[:] = jump[n:]
                snaps = []
    if symmetric:
        return 2.0 * float(p.mean())
    return float(f.mean()) + float(g.mean())


def entropic_cost(
    a_points: np.ndarray, b_points: np.ndarray, config: SinkhornConfig | None = None
) -> float:
    """Entropic transport cost OT_eps between uniform empirical measures."""
    config = config or SinkhornConfig()
    a = _check_points(a_points, "a_points")
    b = _check_points(b_points, "b_points")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return _solve(_cost_matrix(a, b), config, symmetric=False)


def entropic_self_cost(
    points: np.ndarray, config: SinkhornConfig | None = None
) -> float:
    """OT_eps of an empirical measure against itself (symmetric iteration)."""
    config = config or SinkhornConfig()
    pts = _check_points(points, "points")
    return _solve(_cost_matrix(pts, pts), config, symmetric=True)


_negative_clamps = 0


def negative_clamp_count() -> int:
    """How many divergence evaluations were clamped up to zero so far."""
    return _negative_clamps


def sinkhorn_divergence(
    a_points: np.ndarray,
    b_points: np.ndarray,
    config: SinkhornConfig | None = None,
    *,
    self_a: float | None = None,
    self_b: float | None = None,
) -> float:
    """Debiased divergence S_eps(a, b); at small eps a W1 estimate.

    ``self_a``/``self_b`` accept precomputed self costs so a shared side can
    be solved once across several divergences.  Tiny negative results from
    near-cancellation are clamped to zero and counted, not raised.
    """
    global _negative_clamps
    config = config or SinkhornConfig()
    cross = entropic_cost(a_points, b_points, config)
    if self_a is None:
        self_a = entropic_self_cost(a_points, config)
    if self_b is None:
        self_b = entropic_self_cost(b_points, config)
    value = cross - 0.5 * (self_a + self_b)
    if value < 0.0:
        _negative_clamps += 1
        return 0.0
    return float(value)


def exact_w1_small(a_points: np.ndarray, b_points: np.ndarray) -> float:
    """Exact W1 between equal-size uniform empirical measures (<= 512 points).

    Solves the linear assignment problem on the Euclidean cost matrix; the
    optimal coupling of two equal-weight atom sets is a permutation.
    """
    a = _check_points(a_points, "a_points")
    b = _check_points(b_points, "b_points")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"equal sizes required, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] > 512:
        raise ValueError(f"exact solver is limited to 512 points, got {a.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


@dataclass(frozen=True)
class KdeSpec:
    """Gaussian kernel density settings on a d-dimensional manifold."""

    sigma: float
    intrinsic_dim: int

    def __post_init__(self) -> None:
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.intrinsic_dim < 1:
            raise ValueError(f"intrinsic_dim must be >= 1, got {self.intrinsic_dim}")


def kde_density(
    x: np.ndarray, data: DataSet | np.ndarray, kde: KdeSpec
) -> np.ndarray | float:
    """Kernel density (1/n) sum_i (2 pi sigma^2)^{-d/2} exp(-||x-X_i||^2 / 2 sigma^2).

    Distances are ambient Euclidean; the normalizer is the intrinsic
    d-dimensional one, so on-manifold values approximate the density with
    respect to the manifold volume measure.
    """
    pts = data.points if isinstance(data, DataSet) else np.asarray(data, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    n = pts.shape[0]
    inv = 1.0 / (2.0 * kde.sigma * kde.sigma)
    norm = (2.0 * np.pi * kde.sigma * kde.sigma) ** (-0.5 * kde.intrinsic_dim) / n
    pts_sq = np.einsum("ij,ij->i", pts, pts)
    out = np.empty(rows.shape[0])
    step = max(1, _KDE_CHUNK_ENTRIES // n)
    for s in range(0, rows.shape[0], step):
        chunk = rows[s : s + step]
        d2 = chunk @ pts.T
        d2 *= -2.0
        d2 += np.einsum("ij,ij->i", chunk, chunk)[:, None]
        d2 += pts_sq[None, :]
        np.maximum(d2, 0.0, out=d2)
        d2 *= -inv
        np.exp(d2, out=d2)
        out[s : s + step] = d2.sum(axis=1)
    out *= norm
    return float(out[0]) if single else out


def kde_vs_exp_sampler_check(
    data: DataSet,
    kde: KdeSpec,
    f: Callable[[np.ndarray], np.ndarray],
    count: int,
    seed: int,
) -> tuple[float, float]:
    """Integrate f against the KDE two ways: quadrature vs exp-map sampling.

    Returns (integral of f * kde over the manifold by dense quadrature,
    Monte-Carlo mean of f at exp_{X_U}(sigma xi) for uniform data index U
    and standard tangent Gaussian xi).  ``f`` must map a (k, D) array to a
    (k,) array.  Only the circle carries a quadrature grid.
    """
    if data.spec.kind is not ManifoldKind.CIRCLE:
        raise UnsupportedManifoldError(
            f"no quadrature grid for manifold kind {data.spec.kind.value!r}"
        )
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    embedding = data.spec.embedding
    grid_size = max(4096, int(math.ceil(64.0 / kde.sigma)))
    theta = np.linspace(0.0, 2.0 * np.pi, grid_size, endpoint=False)
    grid = np.column_stack([np.cos(theta), np.sin(theta)]) @ embedding.T
    density = np.atleast_1d(kde_density(grid, data, kde))
    integral = float(np.sum(density * np.asarray(f(grid))) * (2.0 * np.pi / grid_size))

    native = data.points @ embedding
    total = 0.0
    for start in range(0, count, BLOCK):
        gen = stream(seed, DOMAIN_EXP_SAMPLER, start // BLOCK)
        idx = gen.integers(0, data.n, size=BLOCK)
        xi = gen.standard_normal(BLOCK)
        take = min(BLOCK, count - start)
        base = native[idx[:take]]
        arc = kde.sigma * xi[:take]
        # Great-circle step: tangent direction at (c, s) is (-s, c); the signed
        # arc keeps cos even / sin odd, so one formula covers both directions.
        moved = (
            np.cos(arc)[:, None] * base
            + np.sin(arc)[:, None] * np.column_stack([-base[:, 1], base[:, 0]])
        )
        total += float(np.sum(np.asarray(f(moved @ embedding.T))))
    return integral, total / count


def fit_loglog_slope(pairs) -> tuple[float, float, float]:
    """Least-squares slope, intercept, and r^2 of log y against log x."""
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise ValueError(f"need at least two (x, y) pairs, got shape {arr.shape}")
    if np.any(arr <= 0.0):
        raise ValueError("log-log fit requires strictly positive x and y")
    lx = np.log(arr[:, 0])
    ly = np.log(arr[:, 1])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return float(slope), float(intercept), r_squared
