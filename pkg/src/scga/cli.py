"""Command-line interface: ``scga {register,synth,bench,curvature}``.

Exit status 0 on success, 2 on usage errors (bad flags, unreadable or
malformed input), 1 when the geometry is too degenerate to register.
Every error prints one line to stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from scga.baselines import GAConfig, ga_register, icp_register
from scga.engine import RegistrationConfig, register
from scga.errors import DegenerateConfigurationError, DomainError, ParseError
from scga.features import G_MODES, estimate_curvature, neighborhood_radius
from scga.io import (
    TransformRecord,
    parse_point_file,
    results_csv,
    trace_csv,
    write_point_file,
    write_text,
)
from scga.pointcloud import PointCloud, RigidTransform, SpatialIndex, apply_transform, center_of_mass
from scga.synthesis import (
    NOISE_TYPES,
    SHAPES,
    Corruption,
    GroundTruth,
    ProtocolSpec,
    Scenario,
    ScenarioSpec,
    TransformRanges,
    build_scenario,
    euler_matrix,
    make_shape,
    run_protocol,
    summarize,
)

PROG = "scga"
ALGORITHMS = ("scga", "ga", "icp")
# names from the comparison literature that this tool deliberately does not ship
UNSUPPORTED = ("cpd", "rpm", "tps-rpm", "gmmreg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _sigma(text):
    if text == "auto":
        return text
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"sigma must be positive or 'auto', got {text}")
    return v


def _fraction(text):
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"fraction must lie in [0, 1], got {text}")
    return v


def _threads() -> int:
    raw = os.environ.get("SCGA_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SCGA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SCGA_THREADS must be a positive integer, got {raw!r}")
    return n


def _read(path) -> PointCloud:
    if not os.path.isfile(path):
        raise UsageError(f"{path}: no such file")
    try:
        return parse_point_file(path)
    except (ParseError, DomainError) as exc:
        raise UsageError(str(exc)) from None


def _emit(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        write_text(path, text)


# ---------------------------------------------------------------------------
# register


def _load_truth(path, template):
    if not os.path.isfile(path):
        raise UsageError(f"{path}: no such file")
    try:
        with open(path) as fh:
            d = json.load(fh)
        truth = GroundTruth.from_json(d)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{path}: bad ground truth: {exc}") from None
    if len(truth.source_indices) != len(template):
        raise UsageError(f"{path}: ground truth covers {len(truth.source_indices)} points, template has {len(template)}")
    sources = d.get("reference_sources")
    scen = Scenario(template, template, truth, None if sources is None else np.asarray(sources, dtype=int))
    return scen.targets, scen.inliers


def _registrar(args):
    if args.algorithm == "scga":
        cfg = RegistrationConfig(
            p=args.p,
            sigma=args.sigma,
            g_mode=args.g_mode,
            G1=args.g1,
            E=args.iterations,
            scale_mode=args.scale,
            pyramid_levels=args.pyramid,
            convergence_tol=args.tol,
            deterministic=args.deterministic,
            seed=args.seed,
        )
        return (lambda x, y, **kw: register(x, y, cfg, **kw)), cfg.__dict__
    if args.algorithm == "ga":
        cfg = GAConfig(
            E=args.iterations,
            estimate_scale=args.scale != "off",
            convergence_tol=args.tol,
            deterministic=args.deterministic,
        )
        return (lambda x, y, **kw: ga_register(x, y, cfg, **kw)), cfg.__dict__
    opts = {"max_iterations": args.iterations}
    if args.tol is not None:
        opts["tol"] = args.tol
    return (lambda x, y, **kw: icp_register(x, y, **opts, **kw)), opts


def cmd_register(args) -> int:
    try:
        run, echo = _registrar(args)
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    reference = _read(args.reference)
    template = _read(args.template)
    extra = {}
    if args.truth:
        extra["target"], extra["inliers"] = _load_truth(args.truth, template)
    try:
        T, trace = run(reference, template, **extra)
    except DomainError as exc:
        print(f"{PROG}: degenerate configuration: {exc}", file=sys.stderr)
        return 1
    last = trace.records[-1].displacement_norm if len(trace) else 0.0
    meta = {
        "algorithm": args.algorithm,
        "iterations": len(trace),
        "final_displacement_norm": float(last),
        "converged": bool(trace.converged),
        "stop_reason": trace.stop_reason,
        "config": {k: v for k, v in sorted(echo.items())},
    }
    record = TransformRecord.from_transform(T, center_of_mass(template), meta)
    _emit(args.out, record.dumps())
    if args.trace:
        write_text(args.trace, trace_csv(trace))
    if args.registered:
        write_point_file(apply_transform(template, T), args.registered)
    return 0


# ---------------------------------------------------------------------------
# synth


def _synth_transform(args):
    fixed = [args.rot_x, args.rot_y, args.rot_z, args.translate]
    if any(v is not None for v in fixed):
        ax, ay, az = (math.radians(v or 0.0) for v in fixed[:3])
        t = np.zeros(3) if args.translate is None else np.asarray(args.translate, dtype=float)
        return RigidTransform(euler_matrix(ax, ay, az), t, args.scale)
    return None


def cmd_synth(args) -> int:
    rot = args.max_rotation
    ranges = TransformRanges(
        rotation_deg=((-rot, rot),) * 3,
        translation=(-args.max_translation, args.max_translation),
        scale=(args.scale, args.scale),
    )
    corruptions = []
    if args.delete:
        corruptions.append(Corruption("delete", fraction=args.delete, target=args.delete_from))
    if args.gaussian:
        corruptions.append(Corruption("gaussian", fraction=args.gaussian))
    if args.uniform:
        corruptions.append(Corruption("uniform", fraction=args.uniform))
    if args.structured:
        corruptions.append(Corruption("structured", mass_ratio=args.structured))
    try:
        if args.delete and not 0 < args.delete < 1:
            raise DomainError("--delete must lie in (0, 1)")
        if args.structured is not None and not args.structured >= 0:
            raise DomainError("--structured must be non-negative")
        if not args.scale > 0:
            raise DomainError("--scale must be positive")
        shape = "file" if args.input else args.shape
        spec = ScenarioSpec(shape, args.points, ranges, tuple(corruptions), args.seed, args.input)
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    rng = np.random.default_rng(args.seed)
    base = _read(args.input) if args.input else make_shape(spec.shape, spec.point_count, rng)
    try:
        scen = build_scenario(base, spec, rng, _synth_transform(args))
    except DegenerateConfigurationError as exc:
        print(f"{PROG}: degenerate configuration: {exc}", file=sys.stderr)
        return 1
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    write_point_file(scen.reference, args.out_reference)
    write_point_file(scen.template, args.out_template)
    if args.out_truth:
        truth = scen.truth.to_json()
        truth["reference_sources"] = [int(i) for i in scen.reference_sources]
        truth["seed"] = args.seed
        write_text(args.out_truth, json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------------------
# bench

PROTOCOLS = {
    # outlier sweep: both noise types over the fractions of the robustness figure
    "fig7": dict(noise_types=NOISE_TYPES, fractions=(0.05, 0.1, 0.2, 0.4, 0.5)),
    "clean": dict(noise_types=("none",), fractions=(0.0,)),
}


def cmd_bench(args) -> int:
    algorithms = tuple(a.strip().lower() for a in args.algorithms.split(",") if a.strip())
    if not algorithms:
        raise UsageError("--algorithms is empty")
    for a in algorithms:
        if a in UNSUPPORTED:
            raise UsageError(f"algorithm {a!r} is not implemented (available: {', '.join(ALGORITHMS)})")
        if a not in ALGORITHMS:
            raise UsageError(f"unknown algorithm {a!r} (available: {', '.join(ALGORITHMS)})")
    proto = dict(PROTOCOLS[args.protocol])
    if args.fractions:
        try:
            proto["fractions"] = tuple(_fraction(f) for f in args.fractions.split(","))
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"--fractions: {exc}") from None
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if not (args.max_rotation >= 0 and args.max_translation >= 0):
        raise UsageError("--max-rotation and --max-translation must be non-negative")
    try:
        spec = ProtocolSpec(
            trials=args.trials,
            algorithms=algorithms,
            shape=args.shape,
            point_count=args.points,
            seed=args.seed,
            deterministic=args.deterministic,
            ranges=TransformRanges(
                rotation_deg=((-args.max_rotation, args.max_rotation),) * 3,
                translation=(-args.max_translation, args.max_translation),
            ),
            **proto,
        )
        if args.shape not in SHAPES or args.shape == "file":
            raise DomainError(f"--shape must be one of {', '.join(s for s in SHAPES if s != 'file')}")
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    rows = run_protocol(spec, workers=_threads())
    write_text(args.out, results_csv(rows))
    for cell in summarize(rows):
        print(
            f"{cell['noise_type']:>8} {cell['fraction']:5.2f} {cell['algorithm']:>5} "
            f"rmse {cell['mean']:.6g} +- {cell['std']:.6g} (n={cell['n']}, failures={cell['failures']})"
        )
    return 0


# ---------------------------------------------------------------------------
# curvature


def cmd_curvature(args) -> int:
    cloud = _read(args.input)
    radius = None
    if args.radius != "auto":
        try:
            radius = float(args.radius)
        except ValueError:
            radius = math.nan
        if not radius > 0:
            raise UsageError(f"--radius must be positive or 'auto', got {args.radius}")
    try:
        if radius is None:
            radius = neighborhood_radius(cloud)
        field = estimate_curvature(cloud, SpatialIndex(cloud), radius)
    except DomainError as exc:
        print(f"{PROG}: degenerate configuration: {exc}", file=sys.stderr)
        return 1
    lines = ["index,x,y,z,curvature\n"]
    for i, ((x, y, z), a) in enumerate(zip(cloud.points, field.values)):
        lines.append(f"{i},{x:.9f},{y:.9f},{z:.9f},{a:.12f}\n")
    _emit(args.out, "".join(lines))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog=PROG, description="Shape-constrained gravitational point-cloud registration.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("register", help="register a template cloud onto a reference cloud")
    r.add_argument("--reference", required=True)
    r.add_argument("--template", required=True)
    r.add_argument("--algorithm", choices=ALGORITHMS, default="scga")
    r.add_argument("--out", help="transform JSON (default: stdout)")
    r.add_argument("--trace", help="per-iteration CSV")
    r.add_argument("--registered", help="write the registered template here")
    r.add_argument("--truth", help="ground-truth JSON from 'synth'; fills the trace's rmse column")
    r.add_argument("--p", type=float, default=1.0)
    r.add_argument("--sigma", type=_sigma, default="auto")
    r.add_argument("--g-mode", choices=G_MODES, default="plain")
    r.add_argument("--iterations", type=_positive_int, default=400)
    r.add_argument("--g1", type=float, default=10000.0)
    r.add_argument("--scale", choices=("off", "sqrt-ratio", "literal-ratio"), default="sqrt-ratio")
    r.add_argument("--pyramid", type=int, default=1)
    r.add_argument("--tol", type=float)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--deterministic", action="store_true")
    r.set_defaults(func=cmd_register)

    s = sub.add_parser("synth", help="generate a reference/template pair with ground truth")
    s.add_argument("--shape", choices=[x for x in SHAPES if x != "file"], default="two-lobe")
    s.add_argument("--input", help="use this point file as the base shape")
    s.add_argument("--points", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rot-x", type=float, help="fixed rotation about x in degrees")
    s.add_argument("--rot-y", type=float)
    s.add_argument("--rot-z", type=float)
    s.add_argument("--translate", type=float, nargs=3, metavar=("DX", "DY", "DZ"))
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--max-rotation", type=float, default=50.0, help="random rotation bound per axis (degrees)")
    s.add_argument("--max-translation", type=float, default=0.2, help="random translation bound (fraction of diagonal)")
    s.add_argument("--gaussian", type=_fraction, default=0.0)
    s.add_argument("--uniform", type=_fraction, default=0.0)
    s.add_argument("--structured", type=float, help="block outlier mass ratio")
    s.add_argument("--delete", type=float, default=0.0)
    s.add_argument("--delete-from", choices=("template", "reference"), default="template")
    s.add_argument("--out-reference", required=True)
    s.add_argument("--out-template", required=True)
    s.add_argument("--out-truth")
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("bench", help="run the outlier robustness protocol")
    b.add_argument("--protocol", choices=sorted(PROTOCOLS), default="fig7")
    b.add_argument("--trials", type=int, default=50)
    b.add_argument("--algorithms", default="scga,ga,icp")
    b.add_argument("--fractions", help="comma-separated override of the protocol fractions")
    b.add_argument("--shape", default="two-lobe")
    b.add_argument("--points", type=int, default=400)
    b.add_argument("--max-rotation", type=float, default=50.0, help="random rotation bound per axis (degrees)")
    b.add_argument("--max-translation", type=float, default=0.2, help="random translation bound (fraction of diagonal)")
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--deterministic", action="store_true")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("curvature", help="per-point surface variation")
    c.add_argument("--input", required=True)
    c.add_argument("--radius", default="auto")
    c.add_argument("--out", help="CSV path (default: stdout)")
    c.set_defaults(func=cmd_curvature)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        msg = " ".join(str(exc).split())
        print(f"{PROG}: error: {msg}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"{PROG}: error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
