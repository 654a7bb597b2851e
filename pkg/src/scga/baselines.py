"""Comparison registrars: the classic gravitational approach (GA) and point-to-point ICP.

Both return the same ``(RigidTransform, IterationTrace)`` pair as
:func:`scga.engine.register`, so results are directly comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import partial

import numpy as np
from scipy.spatial.distance import cdist

from scga.engine import (
    IterationRecord,
    IterationTrace,
    RegistrationConfig,
    check_nondegenerate,
    kabsch_rotation,
    register,
    rmse_to_target,
)
from scga.errors import DegenerateConfigurationError, DomainError
from scga.pointcloud import (
    PointCloud,
    RigidTransform,
    SpatialIndex,
    apply_transform,
    center_of_mass,
    orthonormalize,
    rotation_angle,
)


@dataclass(frozen=True)
class GAConfig:
    """Parameters of the classic gravitational approach.

    Lengths are measured in units of the reference bounding-box diagonal and
    the reference carries unit total mass (each of its N points weighs 1/N);
    ``G`` and ``time_step`` are expressed in those units. ``epsilon`` is the
    softening length as a fraction of the diagonal.
    """

    G: float = 1e-3
    epsilon: float = 0.01
    eta: float = 0.5
    E: int = 400
    time_step: float = 1.0
    estimate_scale: bool = False
    convergence_tol: float | None = None
    deterministic: bool = False

    def __post_init__(self):
        if not self.G > 0:
            raise DomainError("G must be positive")
        if not self.epsilon >= 0:
            raise DomainError("epsilon must be non-negative")
        if not self.eta >= 0:
            raise DomainError("eta must be non-negative")
        if int(self.E) != self.E or self.E < 0:
            raise DomainError("E must be a non-negative integer")
        if not self.time_step > 0:
            raise DomainError("time_step must be positive")


def ga_force(
    template: PointCloud,
    reference: PointCloud,
    cfg: GAConfig,
    velocities=None,
    deterministic: bool = False,
) -> np.ndarray:
    """Softened gravitational force on every template point, with friction.

    ``f_i = -G m_i sum_j m_j (y_i - x_j) / (|y_i - x_j|^2 + eps^2)^(3/2) - eta v_i``

    Plain physical units: masses and ``cfg.epsilon`` are used as given. With
    ``epsilon=0`` coincident pairs contribute zero force.
    """
    Y = template.points
    X = reference.points
    origin = X.mean(axis=0)
    Y, X = Y - origin, X - origin
    diff2 = cdist(Y, X, "sqeuclidean")
    soft = diff2 + cfg.epsilon**2
    denom = soft * np.sqrt(soft)
    if cfg.epsilon > 0:
        w = reference.masses[None, :] / denom
    else:
        # an unsoftened coincident pair has no direction; it contributes nothing
        with np.errstate(divide="ignore"):
            w = np.where(denom > 0, reference.masses[None, :] / denom, 0.0)
    if deterministic:
        pull = np.stack([np.sum(w * X[:, k], axis=1) for k in range(3)], axis=1)
    else:
        pull = w @ X
    pull -= w.sum(axis=1)[:, None] * Y
    f = cfg.G * template.masses[:, None] * pull
    if velocities is not None and cfg.eta:
        f -= cfg.eta * np.asarray(velocities, dtype=float)
    return f


def ga_register(
    reference: PointCloud,
    template: PointCloud,
    cfg: GAConfig | None = None,
    target: np.ndarray | None = None,
    inliers=None,
) -> tuple[RigidTransform, IterationTrace]:
    """Move the template as a damped rigid body in the reference's gravity field.

    Each iteration: per-point forces give per-point moved positions; their
    mean displacement translates the body, Kabsch between old and moved
    positions rotates it and, if enabled, the ratio of their spreads scales it.
    """
    cfg = cfg or GAConfig()
    check_nondegenerate(reference, "reference")
    check_nondegenerate(template, "template")
    trace = IterationTrace()
    T = RigidTransform()
    if cfg.E == 0:
        trace.converged, trace.stop_reason = True, "empty budget"
        return T, trace

    # work in diagonal units with a unit-mass reference
    D = reference.diagonal()
    origin = center_of_mass(reference)
    ref_n = PointCloud((reference.points - origin) / D, np.full(len(reference), 1.0 / len(reference)))
    tmpl0 = template.with_points((template.points - origin) / D)
    tol = 1e-6 if cfg.convergence_tol is None else cfg.convergence_tol / D
    dt = cfg.time_step
    m = tmpl0.masses
    cur = tmpl0
    v = np.zeros((len(tmpl0), 3))
    for t in range(cfg.E):
        Y = cur.points
        f = ga_force(cur, ref_n, cfg, v, cfg.deterministic)
        moved = Y + (f / m[:, None] * dt + v) * dt
        mu = center_of_mass(cur)
        d = center_of_mass(cur.with_points(moved)) - mu
        before = Y - Y.mean(axis=0)
        after = moved - moved.mean(axis=0)
        try:
            R = kabsch_rotation(before, after)
        except DegenerateConfigurationError as exc:
            raise DegenerateConfigurationError(f"iteration {t}: {exc}") from exc
        c = 1.0
        if cfg.estimate_scale:
            c = math.sqrt(np.sum(after**2) / np.sum(before**2))
        inc = RigidTransform(orthonormalize(R), d * D, c)
        T = T.then(inc)
        nxt = apply_transform(tmpl0, RigidTransform(T.rotation, T.translation / D, T.scale))
        v = (nxt.points - Y) / dt
        cur = nxt
        rec = IterationRecord(
            t=t,
            G=cfg.G,
            displacement_norm=float(np.linalg.norm(d) * D),
            rotation_delta_deg=math.degrees(rotation_angle(inc.rotation)),
            scale=c,
        )
        if target is not None:
            rec = replace(rec, rmse=rmse_to_target(apply_transform(template, T), target, inliers))
        trace.records.append(rec)
        if float(np.abs(nxt.points - Y).max()) < tol:
            trace.converged = True
            break
    trace.stop_reason = "converged" if trace.converged else "budget"
    return T, trace


def icp_register(
    reference: PointCloud,
    template: PointCloud,
    max_iterations: int = 100,
    tol: float = 1e-10,
    target: np.ndarray | None = None,
    inliers=None,
) -> tuple[RigidTransform, IterationTrace]:
    """Point-to-point ICP: nearest-neighbor correspondences, then Kabsch.

    Stops when the mean squared correspondence distance improves by less
    than ``tol`` (relative to its previous value). The trace's ``objective``
    column holds that distance at each iteration's correspondence step.
    """
    check_nondegenerate(reference, "reference")
    check_nondegenerate(template, "template")
    if max_iterations < 0:
        raise DomainError("max_iterations must be non-negative")
    index = SpatialIndex(reference)
    trace = IterationTrace()
    T = RigidTransform()
    cur = template
    prev = math.inf
    for t in range(max_iterations):
        dist, idx = index.nearest(cur.points)
        mse = float(np.mean(dist**2))
        matched = reference.points[idx]
        if len(np.unique(idx)) < 3:
            raise DegenerateConfigurationError("fewer than 3 distinct correspondences")
        Y = cur.points
        mu_y = Y.mean(axis=0)
        mu_x = matched.mean(axis=0)
        try:
            R = kabsch_rotation(Y - mu_y, matched - mu_x)
        except DegenerateConfigurationError as exc:
            raise DegenerateConfigurationError(f"ICP iteration {t}: {exc}") from exc
        # absolute update y -> R y + (mu_x - R mu_y), re-expressed about the center of mass
        com = center_of_mass(cur)
        shift = R @ com + (mu_x - R @ mu_y) - com
        inc = RigidTransform(orthonormalize(R), shift, 1.0)
        T = T.then(inc)
        cur = apply_transform(template, T)
        rec = IterationRecord(
            t=t,
            G=math.nan,
            displacement_norm=float(np.linalg.norm(shift)),
            rotation_delta_deg=math.degrees(rotation_angle(inc.rotation)),
            scale=1.0,
            objective=mse,
        )
        if target is not None:
            rec = replace(rec, rmse=rmse_to_target(cur, target, inliers))
        trace.records.append(rec)
        if prev - mse < tol * max(prev, 1e-300) and t > 0:
            trace.converged = True
            break
        prev = mse
    trace.stop_reason = "converged" if trace.converged else "budget"
    return T, trace


def default_registrars(with_scale: bool = False, deterministic: bool = True) -> dict:
    """Registrars used by the benchmark, keyed by algorithm name.

    Scale estimation is enabled only when the scenarios actually vary scale.
    """
    scga_cfg = RegistrationConfig(
        scale_mode="sqrt-ratio" if with_scale else "off", deterministic=deterministic
    )
    ga_cfg = GAConfig(estimate_scale=with_scale, deterministic=deterministic)
    return {
        "scga": partial(register, cfg=scga_cfg),
        "ga": partial(ga_register, cfg=ga_cfg),
        "icp": icp_register,
    }
