"""Point clouds, centroid-relative similarity transforms and neighborhood queries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from scga.errors import DomainError


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points with positive per-point masses (default 1)."""

    points: np.ndarray
    masses: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1 and pts.size == 3:
            pts = pts.reshape(1, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DomainError(f"points must have shape (n, 3), got {pts.shape}")
        if len(pts) < 1:
            raise DomainError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise DomainError("point coordinates must be finite")
        if self.masses is None:
            m = np.ones(len(pts))
        else:
            m = np.asarray(self.masses, dtype=float).reshape(-1)
            if len(m) != len(pts):
                raise DomainError(f"{len(m)} masses for {len(pts)} points")
            if not np.all(np.isfinite(m)) or np.any(m <= 0):
                raise DomainError("masses must be positive and finite")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "masses", _frozen(m))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=int)
        return PointCloud(self.points[idx], self.masses[idx])

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.masses)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)

    def diagonal(self) -> float:
        lo, hi = self.bounding_box()
        return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation, translation and uniform scale, acting about a cloud's centroid.

    A point ``p`` of a cloud with centroid ``c`` maps to
    ``scale * rotation @ (p - c) + c + translation``. Composition of two such
    transforms is again one (see :meth:`then`), because the centroid of the
    transformed cloud is ``c + translation``.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise DomainError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DomainError("transform entries must be finite")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise DomainError("rotation must be a proper orthonormal matrix")
        s = float(self.scale)
        if not np.isfinite(s) or s <= 0:
            raise DomainError(f"scale must be positive and finite, got {s}")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def is_identity(self) -> bool:
        return (
            np.array_equal(self.rotation, np.eye(3))
            and not np.any(self.translation)
            and self.scale == 1.0
        )

    def then(self, other: "RigidTransform") -> "RigidTransform":
        """Transform that applies ``self`` first, then ``other``."""
        R = orthonormalize(other.rotation @ self.rotation)
        return RigidTransform(R, self.translation + other.translation, self.scale * other.scale)

    def matrix(self, center) -> np.ndarray:
        """Homogeneous 4x4 matrix of this transform for a cloud centered at ``center``."""
        c = np.asarray(center, dtype=float)
        A = self.scale * self.rotation
        T = np.eye(4)
        T[:3, :3] = A
        T[:3, 3] = c + self.translation - A @ c
        return T

    def apply_points(self, points: np.ndarray, center) -> np.ndarray:
        c = np.asarray(center, dtype=float)
        return self.scale * (np.asarray(points) - c) @ self.rotation.T + c + self.translation

    def invert_points(self, points: np.ndarray, center) -> np.ndarray:
        """Undo :meth:`apply_points` for the same ``center``."""
        c = np.asarray(center, dtype=float)
        return (np.asarray(points) - c - self.translation) @ self.rotation / self.scale + c


def orthonormalize(R: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Project onto SO(3) via SVD when ``R`` has drifted by more than ``tol``."""
    R = np.asarray(R, dtype=float)
    if np.abs(R.T @ R - np.eye(3)).max() <= tol and abs(np.linalg.det(R) - 1.0) <= tol:
        return R
    U, _, Vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def rotation_angle(R: np.ndarray) -> float:
    """Angle (radians) of a rotation matrix, stable near zero and pi."""
    R = np.asarray(R, dtype=float)
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(np.linalg.norm(axis), np.trace(R) - 1.0))


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def center_of_mass(cloud: PointCloud) -> np.ndarray:
    if len(cloud) == 0:
        raise DomainError("center of mass of an empty cloud")
    m = cloud.masses
    return (m[:, None] * cloud.points).sum(axis=0) / m.sum()


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Scale and rotate ``cloud`` about its center of mass, then translate."""
    if t.is_identity():
        return cloud
    return cloud.with_points(t.apply_points(cloud.points, center_of_mass(cloud)))


def covariance(cloud: PointCloud) -> np.ndarray:
    """Biased (1/M) covariance of the point positions."""
    if len(cloud) < 2:
        raise DomainError("covariance needs at least 2 points")
    centered = cloud.points - cloud.points.mean(axis=0)
    C = centered.T @ centered / len(cloud)
    return 0.5 * (C + C.T)


def principal_axes(c: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decompose a symmetric PSD matrix as ``U @ diag(S) @ V.T``.

    ``S`` is sorted descending and clamped at zero. The eigenvectors follow a
    fixed sign convention: the first non-negligible component of each is positive.
    """
    c = np.asarray(c, dtype=float)
    if c.shape != (3, 3):
        raise DomainError(f"expected a 3x3 matrix, got {c.shape}")
    scale = max(np.abs(c).max(), 1.0)
    if np.abs(c - c.T).max() > 1e-9 * scale:
        raise DomainError("matrix is not symmetric")
    w, U = np.linalg.eigh(0.5 * (c + c.T))
    order = np.argsort(w)[::-1]
    w, U = w[order], U[:, order]
    for k in range(3):
        col = U[:, k]
        lead = np.flatnonzero(np.abs(col) > 1e-12)[0]
        if col[lead] < 0:
            U[:, k] = -col
    S = np.where(w < 0, 0.0, w)
    return U, S, U.copy()


class SpatialIndex:
    """k-d tree over a cloud for radius and nearest-neighbor queries."""

    def __init__(self, cloud: PointCloud):
        self.cloud = cloud
        self._tree = cKDTree(cloud.points)

    def __len__(self) -> int:
        return len(self.cloud)

    def radius(self, q, radius: float) -> np.ndarray:
        return radius_neighbors(self, q, radius)

    def radius_all(self, radius: float) -> list[np.ndarray]:
        """Neighbor indices (self included) for every indexed point."""
        if not radius > 0:
            raise DomainError(f"radius must be positive, got {radius}")
        pts = self.cloud.points
        r2 = radius * radius
        out = []
        for i, cand in enumerate(self._tree.query_ball_point(pts, radius * (1 + 1e-9))):
            cand = np.asarray(cand, dtype=int)
            d2 = ((pts[cand] - pts[i]) ** 2).sum(axis=1)
            out.append(np.sort(cand[d2 <= r2]))
        return out

    def nearest(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dist, idx = self._tree.query(np.asarray(queries, dtype=float), k=1)
        return dist, idx


def radius_neighbors(index: SpatialIndex, q, radius: float) -> np.ndarray:
    """Sorted indices ``i`` with ``||r_i - q|| <= radius``."""
    if not radius > 0:
        raise DomainError(f"radius must be positive, got {radius}")
    q = np.asarray(q, dtype=float).reshape(3)
    # pad the tree query, then filter exactly so boundary ties match a plain scan
    cand = np.asarray(index._tree.query_ball_point(q, radius * (1 + 1e-9)), dtype=int)
    d2 = ((index.cloud.points[cand] - q) ** 2).sum(axis=1)
    return np.sort(cand[d2 <= radius * radius])
