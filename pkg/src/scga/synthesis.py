"""Synthetic registration scenarios, ground truth bookkeeping and the RMSE protocol."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from scga.errors import DomainError
from scga.pointcloud import PointCloud, RigidTransform, apply_transform, center_of_mass, covariance

SHAPES = ("sphere-blob", "two-lobe", "humanoid-proxy", "plane-patch", "file")
NOISE_TYPES = ("gaussian", "uniform")


# ---------------------------------------------------------------------------
# procedural shapes


def _ellipsoid_surface(rng, n, center, axes):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + v * np.asarray(axes)


def _inside_ellipsoid(P, center, axes):
    return np.sum(((P - np.asarray(center)) / np.asarray(axes)) ** 2, axis=1) < 1.0


def _ellipsoid_area(axes):
    # Knud Thomsen's approximation
    a, b, c = axes
    q = 1.6075
    return 4 * math.pi * ((a**q * b**q + a**q * c**q + b**q * c**q) / 3) ** (1 / q)


def _union_of_ellipsoids(rng, n, parts):
    """Sample ``n`` points on the outer surface of a union of ellipsoids.

    Points of one part that fall inside another are rejected, so the
    result looks like a single closed surface.
    """
    areas = np.array([_ellipsoid_area(ax) for _, ax in parts])
    chunks = []
    need = n
    while need > 0:
        # oversample, then trim
        batch = []
        for (c, ax), w in zip(parts, areas / areas.sum()):
            k = max(int(math.ceil(2 * need * w)), 1)
            P = _ellipsoid_surface(rng, k, c, ax)
            keep = np.ones(len(P), dtype=bool)
            for c2, ax2 in parts:
                if c2 is c and ax2 is ax:
                    continue
                keep &= ~_inside_ellipsoid(P, c2, ax2)
            batch.append(P[keep])
        batch = np.concatenate(batch)
        batch = batch[rng.permutation(len(batch))][:need]
        chunks.append(batch)
        need -= len(batch)
    return np.concatenate(chunks)


def sphere_blob(n: int, rng) -> np.ndarray:
    return _ellipsoid_surface(rng, n, (0, 0, 0), (1.0, 1.0, 1.0))


TWO_LOBE_PARTS = [
    ((0.0, 0.0, 0.0), (1.0, 0.8, 0.65)),  # heavy body
    ((0.45, 0.2, 0.85), (0.35, 0.3, 0.38)),  # light head, off-axis
    ((-0.85, -0.25, 0.45), (0.18, 0.15, 0.3)),  # tail stub
]

HUMANOID_PARTS = [
    ((0.0, 0.0, 0.0), (0.35, 0.2, 0.6)),  # torso
    ((0.0, 0.0, 0.85), (0.2, 0.2, 0.24)),  # head
    ((-0.55, 0.0, 0.25), (0.3, 0.09, 0.09)),  # left arm, horizontal
    ((0.42, 0.0, 0.75), (0.09, 0.09, 0.32)),  # right arm, raised
    ((-0.15, 0.0, -0.95), (0.1, 0.1, 0.45)),  # legs
    ((0.17, 0.05, -0.95), (0.1, 0.1, 0.45)),
]


def two_lobe(n: int, rng) -> np.ndarray:
    """Bunny-like proxy: a heavy body with a small off-axis head and a tail."""
    return _union_of_ellipsoids(rng, n, TWO_LOBE_PARTS)


def humanoid_proxy(n: int, rng) -> np.ndarray:
    return _union_of_ellipsoids(rng, n, HUMANOID_PARTS)


def plane_patch(n: int, rng) -> np.ndarray:
    xy = rng.uniform(-1.0, 1.0, size=(n, 2))
    return np.column_stack([xy, np.zeros(n)])


def block(n: int, rng, size=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Points on the surface of an axis-aligned box centered at the origin."""
    size = np.asarray(size, dtype=float)
    faces = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]] * 2)
    face = rng.choice(6, size=n, p=faces / faces.sum())
    P = rng.uniform(-0.5, 0.5, size=(n, 3))
    axis = face % 3
    P[np.arange(n), axis] = np.where(face < 3, -0.5, 0.5)
    return P * size


_GENERATORS: dict[str, Callable] = {
    "sphere-blob": sphere_blob,
    "two-lobe": two_lobe,
    "humanoid-proxy": humanoid_proxy,
    "plane-patch": plane_patch,
}


def make_shape(name: str, n: int, rng) -> PointCloud:
    if name not in _GENERATORS:
        raise DomainError(f"unknown shape {name!r}; expected one of {sorted(_GENERATORS)}")
    if n < 10:
        raise DomainError("point_count must be at least 10")
    return PointCloud(_GENERATORS[name](n, rng))


# ---------------------------------------------------------------------------
# transforms and ground truth


@dataclass(frozen=True)
class TransformRanges:
    """Per-axis rotation bounds (degrees), translation bound (fraction of the
    cloud diagonal) and scale bounds. Each bound is a ``(lo, hi)`` pair; equal
    ends give a fixed value."""

    rotation_deg: tuple = ((-50.0, 50.0), (-50.0, 50.0), (-50.0, 50.0))
    translation: tuple = (-0.2, 0.2)
    scale: tuple = (1.0, 1.0)

    @classmethod
    def none(cls) -> "TransformRanges":
        return cls(((0.0, 0.0),) * 3, (0.0, 0.0), (1.0, 1.0))

    @property
    def has_scale(self) -> bool:
        return tuple(self.scale) != (1.0, 1.0)


def euler_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    """``Rz(az) @ Ry(ay) @ Rx(ax)``, angles in radians."""
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def _uniform(rng, bounds):
    lo, hi = float(bounds[0]), float(bounds[1])
    if lo > hi:
        raise DomainError(f"invalid range ({lo}, {hi})")
    return lo if lo == hi else float(rng.uniform(lo, hi))


def random_rigid_transform(rng, ranges: TransformRanges, length: float = 1.0) -> RigidTransform:
    """Random transform within ``ranges``; translation bounds are multiples of ``length``."""
    angles = [math.radians(_uniform(rng, b)) for b in ranges.rotation_deg]
    t = np.array([_uniform(rng, ranges.translation) * length for _ in range(3)])
    s = _uniform(rng, ranges.scale)
    if s <= 0:
        raise DomainError("scale range must be positive")
    return RigidTransform(euler_matrix(*angles), t, s)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Known pose of a synthetic template.

    ``true_transform`` maps the clean base shape onto the template, acting
    about ``center`` (the base shape's center of mass). ``source_indices``
    gives, for every template point, its index in the base shape, or -1 for
    an outlier.
    """

    true_transform: RigidTransform
    center: np.ndarray
    source_indices: np.ndarray

    @classmethod
    def trivial(cls, cloud: PointCloud) -> "GroundTruth":
        return cls(RigidTransform(), center_of_mass(cloud), np.arange(len(cloud)))

    @property
    def inlier_indices(self) -> np.ndarray:
        return np.flatnonzero(self.source_indices >= 0)

    def appended(self, count: int) -> "GroundTruth":
        src = np.concatenate([self.source_indices, -np.ones(count, dtype=int)])
        return GroundTruth(self.true_transform, self.center, src)

    def kept(self, keep: np.ndarray) -> "GroundTruth":
        return GroundTruth(self.true_transform, self.center, self.source_indices[keep])

    def targets(self, template: PointCloud) -> np.ndarray:
        """Positions of the template points with the true transform undone."""
        return self.true_transform.invert_points(template.points, self.center)

    def to_json(self) -> dict:
        t = self.true_transform
        return {
            "rotation": [float(v) for v in t.rotation.reshape(-1)],
            "translation": [float(v) for v in t.translation],
            "scale": float(t.scale),
            "center": [float(v) for v in self.center],
            "source_indices": [int(v) for v in self.source_indices],
            "inlier_indices": [int(v) for v in self.inlier_indices],
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        t = RigidTransform(np.reshape(d["rotation"], (3, 3)), d["translation"], d["scale"])
        return cls(t, np.asarray(d["center"], dtype=float), np.asarray(d["source_indices"], dtype=int))


# ---------------------------------------------------------------------------
# corruptions


def _check_fraction(fraction):
    if not 0 <= fraction <= 1:
        raise DomainError(f"fraction must lie in [0, 1], got {fraction}")


def _append(cloud: PointCloud, extra: np.ndarray, truth: GroundTruth | None):
    truth = truth or GroundTruth.trivial(cloud)
    if len(extra) == 0:
        return cloud, truth
    pts = np.vstack([cloud.points, extra])
    masses = np.concatenate([cloud.masses, np.ones(len(extra))])
    return PointCloud(pts, masses), truth.appended(len(extra))


def outlier_box(cloud: PointCloud, expand: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = cloud.bounding_box()
    pad = 0.5 * expand * (hi - lo)
    return lo - pad, hi + pad


def add_uniform_outliers(cloud: PointCloud, fraction: float, rng, truth: GroundTruth | None = None):
    """Append ``round(fraction * N)`` points uniform in the bounding box grown by 10%."""
    _check_fraction(fraction)
    k = int(round(fraction * len(cloud)))
    lo, hi = outlier_box(cloud)
    return _append(cloud, rng.uniform(lo, hi, size=(k, 3)), truth)


def add_gaussian_outliers(cloud: PointCloud, fraction: float, rng, truth: GroundTruth | None = None):
    """Append ``round(fraction * N)`` points drawn from N(cloud mean, cloud covariance)."""
    _check_fraction(fraction)
    k = int(round(fraction * len(cloud)))
    if k == 0:
        return _append(cloud, np.empty((0, 3)), truth)
    mean = cloud.points.mean(axis=0)
    cov = covariance(cloud)
    return _append(cloud, rng.multivariate_normal(mean, cov, size=k, method="eigh"), truth)


def add_structured_outlier(
    cloud: PointCloud, shape: PointCloud, mass_ratio: float, rng, truth: GroundTruth | None = None
):
    """Append ``shape`` resampled to ``round(mass_ratio * N)`` points, set one
    bounding-box width beside the cloud along x."""
    if not mass_ratio > 0:
        raise DomainError("mass_ratio must be positive")
    k = int(round(mass_ratio * len(cloud)))
    if k == 0:
        return _append(cloud, np.empty((0, 3)), truth)
    idx = rng.choice(len(shape), size=k, replace=k > len(shape))
    P = shape.points[idx]
    lo, hi = cloud.bounding_box()
    slo, shi = P.min(axis=0), P.max(axis=0)
    offset = 0.5 * (lo + hi) - 0.5 * (slo + shi) + np.array([hi[0] - lo[0], 0.0, 0.0])
    return _append(cloud, P + offset, truth)


def delete_region(cloud: PointCloud, fraction: float, seed_point_index: int, truth: GroundTruth | None = None):
    """Remove the ``round(fraction * N)`` points nearest the seed point (a contiguous hole)."""
    if not 0 <= fraction < 1:
        raise DomainError(f"fraction must lie in [0, 1), got {fraction}")
    n = len(cloud)
    if not 0 <= seed_point_index < n:
        raise DomainError(f"seed index {seed_point_index} out of range")
    truth = truth or GroundTruth.trivial(cloud)
    k = int(round(fraction * n))
    d2 = np.sum((cloud.points - cloud.points[seed_point_index]) ** 2, axis=1)
    order = np.lexsort((np.arange(n), d2))
    keep = np.sort(order[k:])
    return cloud.subset(keep), truth.kept(keep)


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class Corruption:
    """One corruption step. ``kind`` is none, gaussian, uniform, structured or
    delete. ``delete`` removes a region from the template by default, or from
    the reference when ``target == 'reference'``."""

    kind: str = "none"
    fraction: float = 0.0
    mass_ratio: float = 0.0
    target: str = "template"


@dataclass(frozen=True)
class ScenarioSpec:
    shape: str = "two-lobe"
    point_count: int = 500
    ranges: TransformRanges = field(default_factory=TransformRanges)
    corruptions: tuple = ()
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise DomainError(f"unknown shape {self.shape!r}")
        if self.shape == "file" and not self.path:
            raise DomainError("shape 'file' needs a path")
        if self.point_count < 10:
            raise DomainError("point_count must be at least 10")
        for c in self.corruptions:
            if c.kind in ("gaussian", "uniform", "delete"):
                _check_fraction(c.fraction)
            elif c.kind == "structured":
                if not c.mass_ratio > 0:
                    raise DomainError("structured outlier needs mass_ratio > 0")
            elif c.kind != "none":
                raise DomainError(f"unknown corruption {c.kind!r}")


@dataclass(frozen=True, eq=False)
class Scenario:
    reference: PointCloud
    template: PointCloud
    truth: GroundTruth
    reference_sources: np.ndarray | None = None

    @property
    def targets(self) -> np.ndarray:
        return self.truth.targets(self.template)

    @property
    def inliers(self) -> np.ndarray:
        """Template points whose true counterpart is present in the reference."""
        src = self.truth.source_indices
        if self.reference_sources is None:
            return np.flatnonzero(src >= 0)
        return np.flatnonzero((src >= 0) & np.isin(src, self.reference_sources))


def structured_block(cloud: PointCloud, n: int, rng) -> PointCloud:
    lo, hi = cloud.bounding_box()
    return PointCloud(block(n, rng, size=0.6 * (hi - lo)))


def build_scenario(base: PointCloud, spec: ScenarioSpec, rng, transform: RigidTransform | None = None) -> Scenario:
    """Reference = (possibly partial) ``base``; template = transformed, corrupted base."""
    ref_keep = np.arange(len(base))
    reference = base
    template_base = base
    truth = GroundTruth.trivial(base)
    for c in spec.corruptions:
        if c.kind == "delete":
            seed_idx = int(rng.integers(len(base)))
            if c.target == "reference":
                reference, rtruth = delete_region(base, c.fraction, seed_idx)
                ref_keep = rtruth.source_indices
            else:
                template_base, truth = delete_region(template_base, c.fraction, seed_idx, truth)
    if transform is None:
        transform = random_rigid_transform(rng, spec.ranges, base.diagonal())
    center = center_of_mass(base)
    truth = GroundTruth(transform, center, truth.source_indices)
    template = template_base.with_points(transform.apply_points(template_base.points, center))
    for c in spec.corruptions:
        if c.kind == "uniform":
            template, truth = add_uniform_outliers(template, c.fraction, rng, truth)
        elif c.kind == "gaussian":
            template, truth = add_gaussian_outliers(template, c.fraction, rng, truth)
        elif c.kind == "structured":
            k = max(int(round(c.mass_ratio * len(template))), 1)
            shape = structured_block(template, k, rng)
            template, truth = add_structured_outlier(template, shape, c.mass_ratio, rng, truth)
    return Scenario(reference, template, truth, reference_sources=ref_keep)


def make_scenario(spec: ScenarioSpec) -> Scenario:
    rng = np.random.default_rng(spec.seed)
    if spec.shape == "file":
        from scga.io import parse_point_file

        base = parse_point_file(spec.path)
    else:
        base = make_shape(spec.shape, spec.point_count, rng)
    return build_scenario(base, spec, rng)


# ---------------------------------------------------------------------------
# metrics and protocol


def rmse(registered: PointCloud, target, inliers=None) -> float:
    """Root-mean-square distance between corresponding points over ``inliers``."""
    P = registered.points if isinstance(registered, PointCloud) else np.asarray(registered, dtype=float)
    T = target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=float)
    if P.shape != T.shape:
        raise DomainError(f"registered {P.shape} and target {T.shape} do not correspond")
    if inliers is not None:
        idx = np.asarray(inliers, dtype=int)
        P, T = P[idx], T[idx]
    if len(P) == 0:
        raise DomainError("empty inlier set")
    return float(np.sqrt(np.mean(np.sum((P - T) ** 2, axis=1))))


@dataclass(frozen=True)
class ProtocolSpec:
    noise_types: tuple = NOISE_TYPES
    fractions: tuple = (0.05, 0.1, 0.2, 0.4, 0.5)
    trials: int = 50
    algorithms: tuple = ("scga", "ga", "icp")
    shape: str = "two-lobe"
    point_count: int = 400
    ranges: TransformRanges = field(default_factory=TransformRanges)
    seed: int = 0
    deterministic: bool = True


@dataclass(frozen=True)
class ResultRow:
    noise_type: str
    fraction: float
    trial: int
    algorithm: str
    rmse: float
    iterations: int
    runtime_ms: float | None
    error: str = ""


RESULT_COLUMNS = ("noise_type", "fraction", "trial", "algorithm", "rmse", "iterations", "runtime_ms")


def trial_rng(seed: int, *keys: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _run_trial(spec: ProtocolSpec, registrars: dict, trial: int) -> list[ResultRow]:
    base_rng = trial_rng(spec.seed, trial)
    base = make_shape(spec.shape, spec.point_count, base_rng)
    transform = random_rigid_transform(base_rng, spec.ranges, base.diagonal())
    rows = []
    for ni, noise in enumerate(spec.noise_types):
        for fi, frac in enumerate(spec.fractions):
            corruption = () if noise == "none" or frac == 0 else (Corruption(noise, frac),)
            sspec = ScenarioSpec(spec.shape, spec.point_count, spec.ranges, corruption, spec.seed)
            scen = build_scenario(base, sspec, trial_rng(spec.seed, trial, ni + 1, fi + 1), transform)
            targets, inliers = scen.targets, scen.inliers
            for alg in spec.algorithms:
                t0 = time.perf_counter()
                err = ""
                try:
                    T, trace = registrars[alg](scen.reference, scen.template)
                    value = rmse(apply_transform(scen.template, T), targets, inliers)
                    iters = len(trace)
                except (DomainError, np.linalg.LinAlgError) as exc:
                    value, iters, err = math.nan, -1, str(exc)
                ms = None if spec.deterministic else 1000.0 * (time.perf_counter() - t0)
                rows.append(ResultRow(noise, float(frac), trial, alg, value, iters, ms, err))
    return rows


def _row_order(spec: ProtocolSpec):
    noise = {n: i for i, n in enumerate(spec.noise_types)}
    frac = {f: i for i, f in enumerate(map(float, spec.fractions))}
    alg = {a: i for i, a in enumerate(spec.algorithms)}
    return lambda r: (noise[r.noise_type], frac[r.fraction], r.trial, alg[r.algorithm])


def run_protocol(
    spec: ProtocolSpec, registrars: dict | None = None, progress: Callable | None = None, workers: int = 1
) -> list[ResultRow]:
    """Sweep noise types x fractions x trials x algorithms and record RMSE.

    Each trial's base shape and true transform come from ``(seed, trial)``
    and are shared by every noise cell; outliers come from
    ``(seed, trial, cell)``. A registrar error marks that row as failed
    (rmse NaN) without stopping the sweep. Trials may run on ``workers``
    threads; rows come back in (noise, fraction, trial, algorithm) order
    regardless.
    """
    from scga.baselines import default_registrars

    if spec.trials < 1:
        raise DomainError("trials must be >= 1")
    if workers < 1:
        raise DomainError("workers must be >= 1")
    registrars = registrars or default_registrars(with_scale=spec.ranges.has_scale, deterministic=spec.deterministic)
    unknown = [a for a in spec.algorithms if a not in registrars]
    if unknown:
        raise DomainError(f"unknown algorithm(s): {', '.join(unknown)}")
    rows = []
    if workers == 1:
        for trial in range(spec.trials):
            batch = _run_trial(spec, registrars, trial)
            rows.extend(batch)
            if progress:
                for r in batch:
                    progress(r)
    else:
        with ThreadPoolExecutor(workers) as pool:
            for batch in pool.map(lambda t: _run_trial(spec, registrars, t), range(spec.trials)):
                rows.extend(batch)
                if progress:
                    for r in batch:
                        progress(r)
    rows.sort(key=_row_order(spec))
    return rows


def summarize(rows: list[ResultRow]) -> list[dict]:
    """Mean and standard deviation of RMSE per (noise, fraction, algorithm) cell."""
    cells: dict[tuple, list[float]] = {}
    fails: dict[tuple, int] = {}
    for r in rows:
        key = (r.noise_type, r.fraction, r.algorithm)
        cells.setdefault(key, [])
        fails.setdefault(key, 0)
        if math.isnan(r.rmse):
            fails[key] += 1
        else:
            cells[key].append(r.rmse)
    out = []
    for key, vals in cells.items():
        v = np.array(vals)
        out.append(
            {
                "noise_type": key[0],
                "fraction": key[1],
                "algorithm": key[2],
                "mean": float(v.mean()) if len(v) else math.nan,
                "std": float(v.std()) if len(v) else math.nan,
                "n": len(v),
                "failures": fails[key],
            }
        )
    return out
