"""Shape-constrained gravitational registration.

The template is a rigid body attracted by the reference. Every template/reference
pair pulls with a strength that grows with the pair's curvature similarity and
with their distance; the net pull translates the template, the per-point pulls
are turned into a rotation with Kabsch, and a covariance-eigenvalue ratio
fixes the scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from scga.errors import DegenerateConfigurationError, DomainError
from scga.features import (
    G_MODES,
    PLAIN,
    CurvatureField,
    auto_sigma,
    estimate_curvature,
    neighborhood_radius,
    shape_weight,
)
from scga.pointcloud import (
    PointCloud,
    RigidTransform,
    SpatialIndex,
    apply_transform,
    center_of_mass,
    covariance,
    orthonormalize,
    principal_axes,
    rotation_angle,
)

log = logging.getLogger(__name__)

ScaleMode = Literal["off", "sqrt-ratio", "literal-ratio"]
SCALE_MODES = ("off", "sqrt-ratio", "literal-ratio")


@dataclass(frozen=True)
class RegistrationConfig:
    """Tunables of the shape-constrained registration loop.

    ``max_step_fraction`` sets the force unit: at the peak constant ``G1`` the
    most strongly attracted template point is offset by this fraction of its
    distance to its attractor.
    """

    p: float = 1.0
    sigma: float | str = "auto"
    g_mode: str = PLAIN
    G1: float = 10000.0
    E: int = 400
    time_step: float = 1.0
    scale_mode: str = "sqrt-ratio"
    pyramid_levels: int = 1
    convergence_tol: float | None = None
    deterministic: bool = False
    seed: int = 0
    momentum: bool = False
    max_step_fraction: float = 1.0

    def __post_init__(self):
        if not self.p >= 1:
            raise DomainError(f"p must be >= 1, got {self.p}")
        if isinstance(self.sigma, str):
            if self.sigma != "auto":
                raise DomainError(f"sigma must be positive or 'auto', got {self.sigma!r}")
        elif not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if self.g_mode not in G_MODES:
            raise DomainError(f"g_mode must be one of {G_MODES}, got {self.g_mode!r}")
        if not self.G1 > 0:
            raise DomainError("G1 must be positive")
        if int(self.E) != self.E or self.E < 0:
            raise DomainError("E must be a non-negative integer")
        if not self.time_step > 0:
            raise DomainError("time_step must be positive")
        if self.scale_mode not in SCALE_MODES:
            raise DomainError(f"scale_mode must be one of {SCALE_MODES}, got {self.scale_mode!r}")
        if int(self.pyramid_levels) != self.pyramid_levels or self.pyramid_levels < 1:
            raise DomainError("pyramid_levels must be an integer >= 1")
        if self.convergence_tol is not None and self.convergence_tol < 0:
            raise DomainError("convergence_tol must be >= 0")
        if not 0 < self.max_step_fraction <= 1:
            raise DomainError("max_step_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class IterationRecord:
    t: int
    G: float
    displacement_norm: float
    rotation_delta_deg: float
    scale: float
    rmse: float = math.nan
    objective: float = math.nan


@dataclass
class IterationTrace:
    records: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    stop_reason: str = "budget"

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


@dataclass(frozen=True, eq=False)
class RegistrationState:
    """Current template pose; ``template`` always equals ``accumulated`` applied to ``original``."""

    original: PointCloud
    template: PointCloud
    iteration: int = 0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accumulated: RigidTransform = field(default_factory=RigidTransform)
    pending_scale: float = 1.0

    @classmethod
    def start(cls, template: PointCloud) -> "RegistrationState":
        return cls(original=template, template=template)


@dataclass(frozen=True, eq=False)
class ShapeContext:
    """Curvature-derived pair weights of one pyramid level (template rows, reference columns)."""

    curv_x: CurvatureField
    curv_y: CurvatureField
    sigma: float
    weights: np.ndarray


def distance_kernel(dist, p: float):
    """Monotone distance factor ``dist ** p`` of the attraction law."""
    if not p >= 1:
        raise DomainError(f"p must be >= 1, got {p}")
    return np.power(dist, p)


def pair_weights(curv_y: CurvatureField, curv_x: CurvatureField, sigma: float, mode: str) -> np.ndarray:
    return shape_weight(curv_y.values[:, None], curv_x.values[None, :], sigma, mode)


def _row_sums(coef: np.ndarray, X: np.ndarray, deterministic: bool) -> np.ndarray:
    if deterministic:
        # numpy's pairwise reduction has a fixed order; BLAS may not
        return np.stack([np.sum(coef * X[:, k], axis=1) for k in range(3)], axis=1)
    return coef @ X


def _attraction(Y: np.ndarray, X: np.ndarray, weights: np.ndarray, p: float, deterministic: bool):
    """Stiffness ``k_i`` and pull ``sum_j c_ij (x_j - y_i)`` with ``c_ij = g_ij d_ij^(p-1)``."""
    if p == 1:
        coef = weights
    else:
        diff2 = ((Y[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
        coef = weights * np.power(diff2, 0.5 * (p - 1))
    k = coef.sum(axis=1)
    pull = _row_sums(coef, X, deterministic) - k[:, None] * Y
    return k, pull


def total_force(
    template: PointCloud,
    curv_y: CurvatureField,
    reference: PointCloud,
    curv_x: CurvatureField,
    cfg: RegistrationConfig,
    G: float,
    weights: np.ndarray | None = None,
    sigma: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point shape-weighted attraction on the template and their sum.

    ``f_i = -G * sum_j g_ij * d_ij**p * n_ij`` with ``n_ij`` the unit vector from
    reference point j to template point i, so forces point toward the
    reference. Coincident pairs contribute nothing.
    """
    if len(curv_y) != len(template) or len(curv_x) != len(reference):
        raise DomainError("curvature fields must align with their clouds")
    if not G > 0:
        raise DomainError("G must be positive")
    if weights is None:
        if sigma is None:
            sigma = auto_sigma(curv_x) if cfg.sigma == "auto" else float(cfg.sigma)
        weights = pair_weights(curv_y, curv_x, sigma, cfg.g_mode)
    origin = reference.points.mean(axis=0)
    _, pull = _attraction(
        template.points - origin, reference.points - origin, weights, cfg.p, cfg.deterministic
    )
    forces = G * pull
    return forces, forces.sum(axis=0)


def displacement(net_force, total_mass: float, velocity, time_step: float) -> np.ndarray:
    """Rigid-body displacement over one time step under a constant net force."""
    if not total_mass > 0:
        raise DomainError("total mass must be positive")
    if not time_step > 0:
        raise DomainError("time step must be positive")
    return (np.asarray(net_force, dtype=float) / total_mass * time_step + np.asarray(velocity, dtype=float)) * time_step


def kabsch_rotation(before: np.ndarray, after: np.ndarray) -> np.ndarray:
    """Proper rotation ``R`` minimizing ``sum ||after_i - R before_i||^2``.

    Both inputs are mean-centered (M, 3) arrays with matching rows.
    """
    P = np.asarray(before, dtype=float)
    Q = np.asarray(after, dtype=float)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise DomainError("before/after must be matching (M, 3) arrays")
    if len(P) < 3:
        raise DomainError("Kabsch needs at least 3 points")
    tol = 1e-9 * max(1.0, float(np.abs(P).max()), float(np.abs(Q).max()))
    if np.abs(P.mean(axis=0)).max() > tol or np.abs(Q.mean(axis=0)).max() > tol:
        raise DomainError("Kabsch inputs must be mean-centered")
    H = P.T @ Q
    U, S, Vt = np.linalg.svd(H)
    if not S[0] > 0 or S[1] <= 1e-12 * S[0]:
        raise DegenerateConfigurationError(f"cross-covariance is rank deficient (singular values {S})")
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    return V @ np.diag([1.0, 1.0, d]) @ U.T


def _largest_eigenvalue(cloud: PointCloud) -> float:
    return float(principal_axes(covariance(cloud))[1][0])


def estimate_scale(reference: PointCloud, template: PointCloud, mode: str = "sqrt-ratio") -> float:
    """Scale that matches the template's principal spread to the reference's.

    ``literal-ratio`` returns the raw eigenvalue ratio ``eX / eY``;
    ``sqrt-ratio`` its square root, which is the length ratio.
    """
    eX = _largest_eigenvalue(reference)
    eY = _largest_eigenvalue(template)
    if not eY > 0:
        raise DomainError("template covariance is degenerate")
    if not eX > 0:
        raise DomainError("reference covariance is degenerate")
    if mode == "literal-ratio":
        return eX / eY
    if mode == "sqrt-ratio":
        return math.sqrt(eX / eY)
    raise DomainError(f"unknown scale mode {mode!r}")


def gravitational_schedule(t: int, G1: float = 10000.0, E: int = 400) -> float:
    """Gravitational constant for the update after iteration ``t``.

    Rises along a logistic curve from ``0.1 G1`` to ``G1`` around ``t = E/2``.
    """
    x = -(t - E / 2.0)
    # 1/(1+exp(x)) without overflow for large |x|
    if x >= 0:
        z = math.exp(-x)
        sig = z / (1.0 + z)
    else:
        sig = 1.0 / (1.0 + math.exp(x))
    return 0.1 * G1 + 0.9 * G1 * sig


def pyramid_schedule(level: int, levels: int, base_radius: float, base_sigma: float) -> tuple[float, float]:
    """Neighborhood radius and sigma at a pyramid level: both halve per level."""
    if not 0 <= level < levels:
        raise DomainError(f"level {level} outside [0, {levels})")
    f = 2.0 ** -level
    return base_radius * f, base_sigma * f


def level_bounds(E: int, levels: int) -> list[tuple[int, int]]:
    """Split ``E`` iterations into ``levels`` contiguous, near-equal ranges."""
    edges = [round(E * k / levels) for k in range(levels + 1)]
    return [(edges[k], edges[k + 1]) for k in range(levels)]


def step(
    state: RegistrationState,
    reference: PointCloud,
    shapes: ShapeContext,
    cfg: RegistrationConfig,
) -> tuple[RegistrationState, IterationRecord]:
    """One attraction/rotation/scale update of the template."""
    if state.iteration >= cfg.E:
        raise DomainError("iteration budget exhausted")
    t = state.iteration
    G = gravitational_schedule(t, cfg.G1, cfg.E)
    Y = state.template.points
    m = state.template.masses
    origin = reference.points.mean(axis=0)
    k, pull = _attraction(Y - origin, reference.points - origin, shapes.weights, cfg.p, cfg.deterministic)
    forces = G * pull

    # force unit: the stiffest point moves max_step_fraction of its pull at G = G1
    k_max = float(np.max(k / m))
    dt = cfg.time_step
    if k_max > 0:
        unit = cfg.G1 * k_max / cfg.max_step_fraction
        forces = forces / unit
    else:
        forces = np.zeros_like(forces)
    d = displacement(forces.sum(axis=0), float(m.sum()), state.velocity, dt)

    moved = Y + forces / m[:, None] * dt * dt
    before = Y - Y.mean(axis=0)
    after = moved - moved.mean(axis=0)
    try:
        R = kabsch_rotation(before, after)
    except DegenerateConfigurationError as exc:
        raise DegenerateConfigurationError(f"iteration {t}: {exc}") from exc
    c = state.pending_scale
    inc = RigidTransform(orthonormalize(R), d, c)
    accumulated = state.accumulated.then(inc)
    template = apply_transform(state.original, accumulated)
    velocity = d / dt if cfg.momentum else np.zeros(3)
    new_state = replace(
        state,
        template=template,
        iteration=t + 1,
        velocity=velocity,
        accumulated=accumulated,
        pending_scale=1.0,
    )
    rec = IterationRecord(
        t=t,
        G=G,
        displacement_norm=float(np.linalg.norm(d)),
        rotation_delta_deg=math.degrees(rotation_angle(inc.rotation)),
        scale=c,
    )
    return new_state, rec


def step_motion(rec: IterationRecord, extent: float) -> float:
    """Largest point motion implied by one update of a body of radius ``extent``."""
    return (
        rec.displacement_norm
        + math.radians(rec.rotation_delta_deg) * extent
        + abs(rec.scale - 1.0) * extent
    )


def rmse_to_target(cloud: PointCloud, target: np.ndarray, inliers=None) -> float:
    P = cloud.points
    T = np.asarray(target, dtype=float)
    if inliers is not None:
        idx = np.asarray(inliers, dtype=int)
        P, T = P[idx], T[idx]
    if len(P) == 0:
        raise DomainError("empty inlier set")
    return float(np.sqrt(np.mean(np.sum((P - T) ** 2, axis=1))))


def check_nondegenerate(cloud: PointCloud, name: str) -> None:
    if len(cloud) < 3:
        raise DomainError(f"{name} needs at least 3 points")
    if _largest_eigenvalue(cloud) <= 0:
        raise DomainError(f"{name} is degenerate: all points coincide")


def register(
    reference: PointCloud,
    template: PointCloud,
    cfg: RegistrationConfig | None = None,
    target: np.ndarray | None = None,
    inliers=None,
) -> tuple[RigidTransform, IterationTrace]:
    """Register ``template`` onto ``reference``.

    Returns the accumulated transform (acting about the template's center of
    mass) and the per-iteration trace. ``target`` holds the ground-truth
    positions of the template points; when given, the trace carries RMSE
    over ``inliers`` (all points by default).
    """
    cfg = cfg or RegistrationConfig()
    check_nondegenerate(reference, "reference")
    check_nondegenerate(template, "template")
    trace = IterationTrace()
    state = RegistrationState.start(template)
    if cfg.E == 0:
        trace.converged = True
        trace.stop_reason = "empty budget"
        return state.accumulated, trace

    tol = cfg.convergence_tol
    if tol is None:
        tol = 1e-6 * reference.diagonal()
    index_x = SpatialIndex(reference)
    index_y = SpatialIndex(template)
    base_rx = neighborhood_radius(reference)
    base_ry = neighborhood_radius(template)
    base_sigma = None

    for level, (start, stop) in enumerate(level_bounds(cfg.E, cfg.pyramid_levels)):
        if start == stop:
            continue
        c = 1.0 if cfg.scale_mode == "off" else estimate_scale(reference, state.template, cfg.scale_mode)
        rx, _ = pyramid_schedule(level, cfg.pyramid_levels, base_rx, 1.0)
        ry, _ = pyramid_schedule(level, cfg.pyramid_levels, base_ry, 1.0)
        curv_x = estimate_curvature(reference, index_x, rx)
        curv_y = estimate_curvature(template, index_y, ry)
        if base_sigma is None:
            base_sigma = auto_sigma(curv_x) if cfg.sigma == "auto" else float(cfg.sigma)
        _, sigma = pyramid_schedule(level, cfg.pyramid_levels, base_rx, base_sigma)
        log.debug(
            "level %d: radii %.4g/%.4g sigma %.4g scale %.6g sparse %d/%d",
            level, rx, ry, sigma, c, curv_x.sparse_count, curv_y.sparse_count,
        )
        shapes = ShapeContext(curv_x, curv_y, sigma, pair_weights(curv_y, curv_x, sigma, cfg.g_mode))
        state = replace(state, iteration=start, pending_scale=c, velocity=np.zeros(3))
        extent = math.sqrt(max(_largest_eigenvalue(state.template), 0.0)) * 3.0
        while state.iteration < stop:
            state, rec = step(state, reference, shapes, cfg)
            if target is not None:
                rec = replace(rec, rmse=rmse_to_target(state.template, target, inliers))
            trace.records.append(rec)
            if rec.scale == 1.0 and step_motion(rec, extent) < tol:
                trace.converged = True
                break
    trace.stop_reason = "converged" if trace.converged else "budget"
    return state.accumulated, trace
