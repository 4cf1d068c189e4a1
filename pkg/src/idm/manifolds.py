"""Manifold test-beds: uniform samplers, projections, exponential maps.

Supported manifolds are the unit circle, unit spheres S^d, and the rotation
groups SO(m).  Points are represented natively as flat vectors (matrices
stored row-major) and carried into an ambient R^D through a linear embedding
with orthonormal columns, so Euclidean distances between manifold points are
the same in native and ambient coordinates.  All public operations take and
return ambient points.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.linalg

from .rng import BLOCK, DOMAIN_EMBED, DOMAIN_MANIFOLD, DOMAIN_SPLIT, stream


class ConfigurationError(ValueError):
    """A manifold or experiment specification is malformed."""


class DegenerateProjectionError(ValueError):
    """The nearest manifold point is not unique at the query."""


class InvalidTangentError(ValueError):
    """A claimed tangent vector fails the tangency condition at its base."""


class ManifoldKind(str, Enum):
    CIRCLE = "circle"
    SPHERE = "sphere"
    SPECIAL_ORTHOGONAL = "so"


@dataclass(frozen=True, eq=False)
class ManifoldSpec:
    """A manifold plus its linear embedding into R^D.

    ``m_or_d`` is the sphere dimension d for CIRCLE/SPHERE (the circle is
    d = 1) and the matrix size m for SO(m).  ``embedding`` has shape
    (ambient_dim, native_dim) with orthonormal columns and is a pure
    function of ``embed_seed``.
    """

    kind: ManifoldKind
    m_or_d: int
    ambient_dim: int
    embed_seed: int
    embedding: np.ndarray

    @property
    def intrinsic_dim(self) -> int:
        if self.kind is ManifoldKind.SPECIAL_ORTHOGONAL:
            return self.m_or_d * (self.m_or_d - 1) // 2
        return self.m_or_d

    @property
    def native_dim(self) -> int:
        if self.kind is ManifoldKind.SPECIAL_ORTHOGONAL:
            return self.m_or_d * self.m_or_d
        return self.m_or_d + 1

    @property
    def diameter(self) -> float:
        """Euclidean diameter: 2 for circle/sphere, 2*sqrt(m) for SO(m)."""
        if self.kind is ManifoldKind.SPECIAL_ORTHOGONAL:
            return 2.0 * np.sqrt(self.m_or_d)
        return 2.0


@dataclass(eq=False)
class DataSet:
    """n manifold samples in ambient coordinates, with their provenance."""

    points: np.ndarray
    spec: ManifoldSpec
    data_seed: int

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != self.spec.ambient_dim:
            raise ConfigurationError(
                f"points must be (n, {self.spec.ambient_dim}), got {self.points.shape}"
            )

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(eq=False)
class TangentDecomposition:
    """An ambient Gaussian split into tangent and normal parts at a base point."""

    base_point: np.ndarray
    tangent_part: np.ndarray
    normal_part: np.ndarray


def make_embedding(native_dim: int, ambient_dim: int, seed: int) -> np.ndarray:
    """Orthonormal frame (ambient_dim x native_dim) from a seeded Gaussian QR.

    Column signs are fixed so the diagonal of R is nonnegative, making the
    frame both Haar-distributed over subspaces and a pure function of the
    seed.
    """
    if ambient_dim < native_dim:
        raise ConfigurationError(
            f"ambient_dim {ambient_dim} < native_dim {native_dim}"
        )
    gen = stream(seed, DOMAIN_EMBED)
    gauss = gen.standard_normal((ambient_dim, native_dim))
    q, r = np.linalg.qr(gauss)
    signs = np.where(np.diag(r) >= 0.0, 1.0, -1.0)
    return q * signs


def make_manifold(
    kind: ManifoldKind | str,
    m_or_d: int,
    ambient_dim: int | None = None,
    embed_seed: int = 0,
) -> ManifoldSpec:
    kind = ManifoldKind(kind)
    if m_or_d < 1:
        raise ConfigurationError(f"m_or_d must be >= 1, got {m_or_d}")
    if kind is ManifoldKind.CIRCLE and m_or_d != 1:
        raise ConfigurationError("the circle has m_or_d = 1")
    if kind is ManifoldKind.SPECIAL_ORTHOGONAL:
        native = m_or_d * m_or_d
    else:
        native = m_or_d + 1
    if ambient_dim is None:
        ambient_dim = native
    embedding = make_embedding(native, ambient_dim, embed_seed)
    return ManifoldSpec(
        kind=kind,
        m_or_d=m_or_d,
        ambient_dim=ambient_dim,
        embed_seed=embed_seed,
        embedding=embedding,
    )


def circle(ambient_dim: int = 2, embed_seed: int = 0) -> ManifoldSpec:
    return make_manifold(ManifoldKind.CIRCLE, 1, ambient_dim, embed_seed)


def sphere(d: int, ambient_dim: int | None = None, embed_seed: int = 0) -> ManifoldSpec:
    return make_manifold(ManifoldKind.SPHERE, d, ambient_dim, embed_seed)


def special_orthogonal(
    m: int, ambient_dim: int | None = None, embed_seed: int = 0
) -> ManifoldSpec:
    return make_manifold(ManifoldKind.SPECIAL_ORTHOGONAL, m, ambient_dim, embed_seed)


def _sample_native_block(spec: ManifoldSpec, gen: np.random.Generator) -> np.ndarray:
    """One full block of BLOCK native samples, drawn in a fixed order."""
    if spec.kind is ManifoldKind.SPECIAL_ORTHOGONAL:
        m = spec.m_or_d
        gauss = gen.standard_normal((BLOCK, m, m))
        q, r = np.linalg.qr(gauss)
        # Make R's diagonal nonnegative so Q is Haar on O(m), then push the
        # det = -1 half onto SO(m) by negating the first column.
        diag = np.diagonal(r, axis1=-2, axis2=-1)
        q = q * np.where(diag >= 0.0, 1.0, -1.0)[:, None, :]
        neg = np.linalg.det(q) < 0.0
        q[neg, :, 0] *= -1.0
        return q.reshape(BLOCK, m * m)
    gauss = gen.standard_normal((BLOCK, spec.m_or_d + 1))
    norms = np.linalg.norm(gauss, axis=1, keepdims=True)
    return gauss / norms


def sample_manifold(spec: ManifoldSpec, n: int, seed: int) -> DataSet:
    """n independent uniform (Haar for SO(m)) samples, embedded in R^D.

    Sample i is a function of (seed, i) only: draws are organized in fixed
    blocks of ``rng.BLOCK`` samples with one stream per block, so any
    parallel schedule or change of n reproduces the same points.
    """
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    native = np.empty((n, spec.native_dim))
    for start in range(0, n, BLOCK):
        gen = stream(seed, DOMAIN_MANIFOLD, start // BLOCK)
        block = _sample_native_block(spec, gen)
        native[start : start + BLOCK] = block[: n - start]
    return DataSet(points=native @ spec.embedding.T, spec=spec, data_seed=seed)


def _pull_back(x: np.ndarray, spec: ManifoldSpec) -> np.ndarray:
    return x @ spec.embedding


def _project_native(y: np.ndarray, spec: ManifoldSpec) -> np.ndarray:
    """Nearest native manifold point for each row of y (native coordinates)."""
    if spec.kind is not ManifoldKind.SPECIAL_ORTHOGONAL:
        norms = np.linalg.norm(y, axis=1)
        if np.any(norms < 1e-12):
            raise DegenerateProjectionError(
                "projection undefined at the center of the sphere"
            )
        return y / norms[:, None]
    m = spec.m_or_d
    mats = y.reshape(-1, m, m)
    u, s, vt = np.linalg.svd(mats)
    rot = u @ vt
    scale = np.maximum(1.0, s[:, 0])
    # Rank must be at least m-1 for any nearest rotation to be unique.
    if np.any(s[:, -1] + s[:, -2 if m > 1 else -1] < 1e-12 * scale):
        raise DegenerateProjectionError("singular matrix: nearest rotation not unique")
    neg = np.linalg.det(rot) < 0.0
    if np.any(neg):
        # Orientation flip along the smallest singular direction; unique only
        # when the smallest singular value is simple.
        if m > 1 and np.any(neg & (s[:, -2] - s[:, -1] < 1e-12 * scale)):
            raise DegenerateProjectionError(
                "tied smallest singular values: nearest rotation not unique"
            )
        u = u.copy()
        u[neg, :, -1] *= -1.0
        rot = u @ vt
    return rot.reshape(y.shape[0], m * m)


def project_to_manifold(x: np.ndarray, spec: ManifoldSpec) -> np.ndarray:
    """Nearest manifold point in ambient coordinates.

    The off-subspace component of x is pure normal displacement, so the
    projection factors through the pulled-back point E^T x.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    if rows.shape[1] != spec.ambient_dim:
        raise ConfigurationError(
            f"expected points of dimension {spec.ambient_dim}, got {rows.shape[1]}"
        )
    proj = _project_native(_pull_back(rows, spec), spec) @ spec.embedding.T
    return proj[0] if single else proj


def distance_to_manifold(x: np.ndarray, spec: ManifoldSpec) -> np.ndarray | float:
    """Euclidean distance from x to the embedded manifold."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    dist = np.linalg.norm(rows - np.atleast_2d(project_to_manifold(rows, spec)), axis=1)
    return float(dist[0]) if single else dist


_TANGENCY_TOL = 1e-8


def exp_map(base: np.ndarray, tangent: np.ndarray, spec: ManifoldSpec) -> np.ndarray:
    """Riemannian exponential of ``tangent`` at ``base`` (ambient points).

    Circle/sphere: great-circle formula cos(|v|) b + sin(|v|) v/|v|.
    SO(m): B expm(B^T V), requiring B^T V skew-symmetric.
    The geodesic distance from base to the result equals |tangent|.
    """
    base = np.asarray(base, dtype=np.float64)
    tangent = np.asarray(tangent, dtype=np.float64)
    b = _pull_back(base, spec)
    v = _pull_back(tangent, spec)
    scale = max(1.0, float(np.linalg.norm(v)))
    if np.linalg.norm(base - spec.embedding @ b) > _TANGENCY_TOL:
        raise InvalidTangentError("base point lies outside the embedded subspace")
    if np.linalg.norm(tangent - spec.embedding @ v) > _TANGENCY_TOL * scale:
        raise InvalidTangentError("tangent vector lies outside the embedded subspace")
    if spec.kind is not ManifoldKind.SPECIAL_ORTHOGONAL:
        if abs(np.linalg.norm(b) - 1.0) > _TANGENCY_TOL:
            raise InvalidTangentError("base point is not on the sphere")
        if abs(float(b @ v)) > _TANGENCY_TOL * scale:
            raise InvalidTangentError("tangent is not orthogonal to the base point")
        r = np.linalg.norm(v)
        if r < 1e-300:
            out = b
        else:
            out = np.cos(r) * b + np.sin(r) * (v / r)
        return spec.embedding @ out
    m = spec.m_or_d
    bmat = b.reshape(m, m)
    vmat = v.reshape(m, m)
    if np.linalg.norm(bmat.T @ bmat - np.eye(m)) > _TANGENCY_TOL:
        raise InvalidTangentError("base point is not orthogonal")
    a = bmat.T @ vmat
    if np.linalg.norm(a + a.T) > _TANGENCY_TOL * scale:
        raise InvalidTangentError("B^T V is not skew-symmetric")
    out = bmat @ scipy.linalg.expm(a)
    return spec.embedding @ out.reshape(m * m)


def tangent_basis(base: np.ndarray, spec: ManifoldSpec) -> np.ndarray:
    """Orthonormal basis of the tangent space at ``base``, as ambient columns.

    Returns a (ambient_dim x intrinsic_dim) matrix W with orthonormal
    columns spanning the embedded tangent space.
    """
    b = _pull_back(np.asarray(base, dtype=np.float64), spec)
    if spec.kind is not ManifoldKind.SPECIAL_ORTHOGONAL:
        p = spec.native_dim
        q, _ = np.linalg.qr(np.column_stack([b, np.eye(p)]))
        native = q[:, 1 : spec.intrinsic_dim + 1]
    else:
        m = spec.m_or_d
        bmat = b.reshape(m, m)
        native = np.empty((m * m, spec.intrinsic_dim))
        col = 0
        for i in range(m):
            for j in range(i + 1, m):
                skew = np.zeros((m, m))
                skew[i, j] = 1.0 / np.sqrt(2.0)
                skew[j, i] = -1.0 / np.sqrt(2.0)
                native[:, col] = (bmat @ skew).reshape(m * m)
                col += 1
    return spec.embedding @ native


def split_gaussian_noise(
    base: np.ndarray, spec: ManifoldSpec, seed: int
) -> TangentDecomposition:
    """Draw xi ~ N(0, I_D) and split it into tangent and normal parts at base."""
    base = np.asarray(base, dtype=np.float64)
    xi = stream(seed, DOMAIN_SPLIT).standard_normal(spec.ambient_dim)
    w = tangent_basis(base, spec)
    tangent = w @ (w.T @ xi)
    return TangentDecomposition(
        base_point=base, tangent_part=tangent, normal_part=xi - tangent
    )


def spec_to_json(spec: ManifoldSpec) -> dict:
    return {
        "kind": spec.kind.value,
        "m_or_d": spec.m_or_d,
        "D": spec.ambient_dim,
        "embed_seed": spec.embed_seed,
    }


def spec_from_json(obj: dict) -> ManifoldSpec:
    try:
        return make_manifold(
            obj["kind"], obj["m_or_d"], obj["D"], obj["embed_seed"]
        )
    except KeyError as exc:
        raise ConfigurationError(f"manifold JSON missing key {exc}") from exc


def save_dataset(data: DataSet, path: str | Path) -> None:
    """Write points as CSV (header x0..x{D-1}) plus a JSON sidecar."""
    path = Path(path)
    d = data.spec.ambient_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(d)])
        for row in data.points:
            writer.writerow([repr(float(v)) for v in row])
    sidecar = {"spec": spec_to_json(data.spec), "data_seed": data.data_seed}
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path: str | Path) -> DataSet:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        sidecar = json.load(fh)
    points = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return DataSet(
        points=points,
        spec=spec_from_json(sidecar["spec"]),
        data_seed=sidecar["data_seed"],
    )
