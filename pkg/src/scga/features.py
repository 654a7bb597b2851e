"""Local shape descriptors: surface-variation curvature and RBF shape similarity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from scga.errors import DomainError
from scga.pointcloud import PointCloud, SpatialIndex, covariance, principal_axes

MIN_NEIGHBORS = 4

PLAIN = "plain"
CURVATURE_WEIGHTED = "curvature-weighted"
G_MODES = (PLAIN, CURVATURE_WEIGHTED)


@dataclass(frozen=True, eq=False)
class CurvatureField:
    """Per-point curvature values of one cloud at a given neighborhood radius.

    ``sparse_count`` is the number of points that had fewer than
    ``MIN_NEIGHBORS`` neighbors and were assigned curvature 0.
    """

    values: np.ndarray
    radius: float
    sparse_count: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DomainError("curvature values must be finite and non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)


def neighborhood_radius(cloud: PointCloud) -> float:
    """Square root of the largest covariance eigenvalue of ``cloud``."""
    if len(cloud) < 2:
        raise DomainError("neighborhood radius needs at least 2 points")
    _, S, _ = principal_axes(covariance(cloud))
    if S[0] <= 0:
        raise DomainError("degenerate cloud: all points coincide")
    return float(np.sqrt(S[0]))


def local_covariances(cloud: PointCloud, neighbors: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Covariance of each neighborhood, stacked as (n, 3, 3), plus neighbor counts."""
    n = len(cloud)
    counts = np.array([len(nb) for nb in neighbors])
    rows = np.repeat(np.arange(n), counts)
    cols = np.concatenate(neighbors) if n else np.empty(0, dtype=int)
    A = sparse.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(n, n))
    # shift to the cloud mean to keep the raw second moments well conditioned
    P = cloud.points - cloud.points.mean(axis=0)
    outer = (P[:, :, None] * P[:, None, :]).reshape(n, 9)
    safe = np.maximum(counts, 1)[:, None]
    mean = A @ P / safe
    second = (A @ outer / safe).reshape(n, 3, 3)
    cov = second - mean[:, :, None] * mean[:, None, :]
    return 0.5 * (cov + cov.transpose(0, 2, 1)), counts


def estimate_curvature(cloud: PointCloud, index: SpatialIndex, radius: float) -> CurvatureField:
    """Surface variation ``l0 / (l0 + l1 + l2)`` of each point's radius neighborhood.

    Values lie in [0, 1/3]. Points with fewer than ``MIN_NEIGHBORS`` neighbors
    (self included) get 0 and are counted in ``sparse_count``.
    """
    if not radius > 0:
        raise DomainError(f"radius must be positive, got {radius}")
    neighbors = index.radius_all(radius)
    cov, counts = local_covariances(cloud, neighbors)
    lam = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    total = lam.sum(axis=1)
    dense = (counts >= MIN_NEIGHBORS) & (total > 0)
    values = np.zeros(len(cloud))
    values[dense] = lam[dense, 0] / total[dense]
    return CurvatureField(values, float(radius), int(np.sum(counts < MIN_NEIGHBORS)))


def similarity(a_x, a_y, sigma: float):
    """RBF shape similarity ``exp(-|a_x - a_y|^2 / sigma^2)``; broadcasts."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    diff = np.subtract(a_x, a_y)
    return np.exp(-(diff * diff) / (sigma * sigma))


def shape_weight(a_x, a_y, sigma: float, mode: str = PLAIN):
    """Attraction weight of a reference/template pair from their curvatures.

    ``plain`` weighs every local shape equally (the similarity itself);
    ``curvature-weighted`` multiplies by both curvatures so that planar
    regions pull less than curved ones.
    """
    if np.any(np.less(a_x, 0)) or np.any(np.less(a_y, 0)):
        raise DomainError("curvatures must be non-negative")
    s = similarity(a_x, a_y, sigma)
    if mode == PLAIN:
        return s
    if mode == CURVATURE_WEIGHTED:
        return np.multiply(np.multiply(a_x, a_y), s)
    raise DomainError(f"unknown shape weight mode {mode!r}")


def auto_sigma(curv: CurvatureField) -> float:
    """Spread of the reference curvature values, used when sigma is 'auto'."""
    sd = float(np.std(curv.values))
    if sd > 0:
        return sd
    # constant curvature: any positive spread gives equal weights
    return max(float(np.mean(curv.values)), 1e-3)
