"""Point-file, transform-record, trace and results serialization.

Point files are ASCII PLY or whitespace-separated XYZ text. Every writer
produces a deterministic byte stream for identical inputs.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from scga.errors import DomainError, ParseError
from scga.pointcloud import PointCloud, RigidTransform

FORMATS = ("ply-ascii", "xyz")
TRACE_COLUMNS = ("iteration", "G", "displacement_norm", "rotation_delta_deg", "scale", "rmse")
PLY_TYPES = {
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double",
    "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64",
}


def guess_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        return "ply-ascii"
    if ext in (".xyz", ".txt", ".pts", ".asc"):
        return "xyz"
    raise DomainError(f"{path}: cannot infer point format from extension {ext!r}")


def _parse_xyz(lines, path) -> np.ndarray:
    rows = []
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 3:
            raise ParseError(f"expected 3 coordinates, got {len(tokens)}", path, no)
        try:
            rows.append([float(t) for t in tokens[:3]])
        except ValueError:
            raise ParseError(f"non-numeric coordinate in {line!r}", path, no) from None
    return np.array(rows, dtype=float).reshape(-1, 3)


def _parse_ply(lines, path) -> np.ndarray:
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path, 1)
    # elements in header order: [name, count, [(type, property name)]]
    elements = []
    fmt_seen = False
    body = None
    for no, raw in enumerate(lines[1:], 2):
        tokens = raw.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) != 3:
                raise ParseError("malformed format line", path, no)
            if tokens[1] != "ascii":
                raise ParseError(f"unsupported PLY format {tokens[1]!r} (only ascii)", path, no)
            if tokens[2] != "1.0":
                raise ParseError(f"unsupported PLY version {tokens[2]!r}", path, no)
            fmt_seen = True
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", path, no)
            try:
                count = int(tokens[2])
            except ValueError:
                raise ParseError(f"bad element count {tokens[2]!r}", path, no) from None
            if count < 0:
                raise ParseError("negative element count", path, no)
            elements.append([tokens[1], count, []])
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", path, no)
            if len(tokens) >= 2 and tokens[1] == "list":
                if len(tokens) != 5:
                    raise ParseError("malformed list property", path, no)
                elements[-1][2].append(("list", tokens[4]))
            elif len(tokens) == 3 and tokens[1] in PLY_TYPES:
                elements[-1][2].append((tokens[1], tokens[2]))
            else:
                raise ParseError(f"malformed property line {raw.strip()!r}", path, no)
        elif key == "end_header":
            body = no
            break
        else:
            raise ParseError(f"unknown header keyword {key!r}", path, no)
    if body is None:
        raise ParseError("missing end_header", path, len(lines))
    if not fmt_seen:
        raise ParseError("missing format line", path, body)

    points = None
    line_no = body
    data = iter(enumerate(lines[body:], body + 1))
    for name, count, props in elements:
        if name == "vertex":
            names = [p[1] for p in props]
            missing = [c for c in "xyz" if c not in names]
            if missing:
                raise ParseError(f"vertex element lacks properties {missing}", path, body)
            if any(p[0] == "list" for p in props):
                raise ParseError("list properties on vertex are not supported", path, body)
            cols = [names.index(c) for c in "xyz"]
        rows = []
        got = 0
        while got < count:
            try:
                line_no, raw = next(data)
            except StopIteration:
                raise ParseError(f"expected {count} {name} rows, file ended after {got}", path, line_no) from None
            tokens = raw.split()
            if not tokens:
                continue
            got += 1
            if name != "vertex":
                continue
            if len(tokens) < len(props):
                raise ParseError(f"expected {len(props)} values, got {len(tokens)}", path, line_no)
            try:
                rows.append([float(tokens[c]) for c in cols])
            except ValueError:
                raise ParseError(f"non-numeric vertex value in {raw.strip()!r}", path, line_no) from None
        if name == "vertex":
            points = np.array(rows, dtype=float).reshape(-1, 3)
    if points is None:
        raise ParseError("no vertex element", path, body)
    return points


def parse_point_file(path, format: str | None = None) -> PointCloud:
    """Read an ASCII PLY or XYZ file into a unit-mass cloud.

    Malformed content raises ``ParseError`` naming the line; a file with no
    points raises ``DomainError``.
    """
    fmt = format or guess_format(path)
    if fmt not in FORMATS:
        raise DomainError(f"unknown point format {fmt!r}")
    with open(path, "rb") as fh:
        # binary PLY payloads never get parsed: the header's format line rejects them first
        text = fh.read().decode("utf-8", errors="replace")
    lines = text.splitlines()
    points = _parse_ply(lines, path) if fmt == "ply-ascii" else _parse_xyz(lines, path)
    if len(points) == 0:
        raise DomainError(f"{path}: no points")
    if not np.all(np.isfinite(points)):
        raise DomainError(f"{path}: non-finite coordinates")
    return PointCloud(points)


def format_points(cloud: PointCloud, format: str) -> str:
    body = "".join(f"{x:.9f} {y:.9f} {z:.9f}\n" for x, y, z in np.asarray(cloud.points))
    if format == "xyz":
        return body
    if format == "ply-ascii":
        header = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(cloud)}\n"
            "property double x\nproperty double y\nproperty double z\nend_header\n"
        )
        return header + body
    raise DomainError(f"unknown point format {format!r}")


def write_point_file(cloud: PointCloud, path, format: str | None = None) -> None:
    """Write ``cloud`` with 9 decimals; the same cloud always yields the same bytes."""
    if not path:
        raise DomainError("empty output path")
    text = format_points(cloud, format or guess_format(path))
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


@dataclass
class TransformRecord:
    """Serializable registration result.

    The transform acts about ``center`` (the template's center of mass):
    ``p -> scale * R (p - center) + center + translation``.
    """

    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    center: np.ndarray
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_transform(cls, t: RigidTransform, center, metadata=None) -> "TransformRecord":
        return cls(t.rotation, t.translation, t.scale, np.asarray(center, dtype=float), dict(metadata or {}))

    def transform(self) -> RigidTransform:
        return RigidTransform(self.rotation, self.translation, self.scale)

    def to_dict(self) -> dict:
        R = np.asarray(self.rotation, dtype=float)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise DomainError("rotation block is not orthonormal")
        return {
            "rotation": [float(v) for v in R.reshape(-1)],
            "translation": [float(v) for v in self.translation],
            "scale": float(self.scale),
            "center": [float(v) for v in self.center],
            "matrix": [float(v) for v in self.transform().matrix(self.center).reshape(-1)],
            "metadata": self.metadata,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TransformRecord":
        d = json.loads(text)
        try:
            return cls(
                np.reshape(np.asarray(d["rotation"], dtype=float), (3, 3)),
                np.asarray(d["translation"], dtype=float),
                float(d["scale"]),
                np.asarray(d["center"], dtype=float),
                d.get("metadata", {}),
            )
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad transform record: {exc}") from exc


def _num(v) -> str:
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace.records:
        w.writerow([r.t, _num(r.G), _num(r.displacement_norm), _num(r.rotation_delta_deg), _num(r.scale), _num(r.rmse)])
    return buf.getvalue()


def results_csv(rows) -> str:
    from scga.synthesis import RESULT_COLUMNS

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([r.noise_type, repr(r.fraction), r.trial, r.algorithm, _num(r.rmse), r.iterations, _num(r.runtime_ms)])
    return buf.getvalue()


def read_results_csv(text: str) -> list[dict]:
    out = []
    for d in csv.DictReader(io.StringIO(text)):
        d["fraction"] = float(d["fraction"])
        d["trial"] = int(d["trial"])
        d["rmse"] = float(d["rmse"])
        d["iterations"] = int(d["iterations"])
        d["runtime_ms"] = float(d["runtime_ms"]) if d["runtime_ms"] else None
        out.append(d)
    return out


def write_text(path, text: str) -> None:
    if not path:
        raise DomainError("empty output path")
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
