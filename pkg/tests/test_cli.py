import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from scga.cli import main
from scga.io import TRACE_COLUMNS, parse_point_file, write_point_file
from scga.pointcloud import PointCloud, rotation_angle
from scga.synthesis import RESULT_COLUMNS, make_shape


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def lobe_file(tmp_path):
    p = tmp_path / "lobe.ply"
    write_point_file(make_shape("two-lobe", 150, np.random.default_rng(3)), p)
    return p


def synth(tmp_path, capsys, *extra, tag="s"):
    ref, tmpl, truth = (tmp_path / f"{tag}_{n}" for n in ("ref.ply", "tmpl.ply", "truth.json"))
    code, _, err = run(
        ["synth", "--out-reference", ref, "--out-template", tmpl, "--out-truth", truth, *extra], capsys
    )
    assert code == 0, err
    return ref, tmpl, truth


# -- register --------------------------------------------------------------------


def test_register_same_file_is_identity(lobe_file, tmp_path, capsys):
    code, out, err = run(["register", "--reference", lobe_file, "--template", lobe_file, "--iterations", 60], capsys)
    assert code == 0, err
    d = json.loads(out)
    assert rotation_angle(np.reshape(d["rotation"], (3, 3))) < 1e-3
    assert np.linalg.norm(d["translation"]) < 1e-3
    assert d["metadata"]["algorithm"] == "scga"
    assert d["metadata"]["iterations"] == 60 or d["metadata"]["converged"]


def test_register_zero_iterations(lobe_file, tmp_path, capsys):
    trace = tmp_path / "t.csv"
    code, out, _ = run(
        ["register", "--reference", lobe_file, "--template", lobe_file, "--iterations", 0, "--trace", trace], capsys
    )
    assert code == 0
    d = json.loads(out)
    assert np.array_equal(np.reshape(d["rotation"], (3, 3)), np.eye(3))
    assert d["translation"] == [0.0, 0.0, 0.0] and d["scale"] == 1.0
    assert trace.read_text() == ",".join(TRACE_COLUMNS) + "\n"


@pytest.mark.parametrize("algorithm", ["scga", "ga", "icp"])
def test_register_outputs(algorithm, tmp_path, capsys):
    ref, tmpl, truth = synth(tmp_path, capsys, "--points", 150, "--rot-x", 10, tag=algorithm)
    out, trace, reg = tmp_path / "T.json", tmp_path / "trace.csv", tmp_path / "reg.xyz"
    code, _, err = run(
        [
            "register", "--reference", ref, "--template", tmpl, "--algorithm", algorithm,
            "--out", out, "--trace", trace, "--registered", reg, "--truth", truth,
            "--iterations", 40, "--deterministic",
        ],
        capsys,
    )
    assert code == 0, err
    meta = json.loads(out.read_text())["metadata"]
    assert meta["algorithm"] == algorithm
    rows = list(csv.DictReader(io.StringIO(trace.read_text())))
    assert tuple(rows[0]) == TRACE_COLUMNS
    assert len(rows) == meta["iterations"]
    assert all(math.isfinite(float(r["rmse"])) for r in rows)
    assert len(parse_point_file(reg)) == 150


def test_register_deterministic_bytes(tmp_path, capsys):
    ref, tmpl, _ = synth(tmp_path, capsys, "--points", 120, "--uniform", 0.1)
    outs = []
    for k in range(2):
        o, t = tmp_path / f"T{k}.json", tmp_path / f"tr{k}.csv"
        argv = ["register", "--reference", ref, "--template", tmpl, "--out", o, "--trace", t]
        assert run(argv + ["--iterations", 30, "--deterministic", "--seed", 5], capsys)[0] == 0
        outs.append((o.read_bytes(), t.read_bytes()))
    assert outs[0] == outs[1]


# -- synth ---------------------------------------------------------------------------


def test_synth_delete_count(tmp_path, capsys):
    ref, tmpl, truth = synth(tmp_path, capsys, "--points", 1000, "--delete", 0.18)
    assert len(parse_point_file(ref)) == 1000
    assert len(parse_point_file(tmpl)) == 820
    assert len(json.loads(truth.read_text())["inlier_indices"]) == 820


def test_synth_fixed_rotation_about_x(tmp_path, capsys):
    ref, tmpl, truth = synth(tmp_path, capsys, "--shape", "two-lobe", "--points", 500, "--rot-x", 50)
    d = json.loads(truth.read_text())
    R = np.reshape(d["rotation"], (3, 3))
    assert math.isclose(math.degrees(rotation_angle(R)), 50.0, abs_tol=1e-9)
    assert np.allclose(R[:, 0], [1, 0, 0])
    assert d["translation"] == [0.0, 0.0, 0.0]
    assert len(parse_point_file(tmpl)) == 500


def test_synth_fixed_seed_identical_files(tmp_path, capsys):
    a = synth(tmp_path, capsys, "--seed", 7, "--gaussian", 0.2, "--structured", 0.5, tag="a")
    b = synth(tmp_path, capsys, "--seed", 7, "--gaussian", 0.2, "--structured", 0.5, tag="b")
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()


def test_synth_from_input_file(lobe_file, tmp_path, capsys):
    ref, tmpl, _ = synth(tmp_path, capsys, "--input", lobe_file, "--uniform", 0.2)
    assert len(parse_point_file(ref)) == 150 and len(parse_point_file(tmpl)) == 180


@pytest.mark.parametrize("bad", [["--delete", "1.0"], ["--uniform", "2"], ["--scale", "0"], ["--shape", "cube"]])
def test_synth_invalid_spec_is_usage_error(bad, tmp_path, capsys):
    code, _, err = run(["synth", "--out-reference", tmp_path / "r.ply", "--out-template", tmp_path / "t.ply", *bad], capsys)
    assert code == 2
    assert err.startswith("scga: error:") and err.count("\n") == 1


# -- bench ---------------------------------------------------------------------------


def bench(tmp_path, capsys, name, *extra):
    out = tmp_path / name
    code, stdout, err = run(["bench", "--out", out, "--points", 80, *extra], capsys)
    assert code == 0, err
    return out, stdout


def test_bench_row_count_and_summary(tmp_path, capsys):
    out, stdout = bench(tmp_path, capsys, "r.csv", "--trials", 2, "--algorithms", "icp,ga", "--fractions", "0.1,0.5", "--deterministic")
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(RESULT_COLUMNS)
    assert len(lines) - 1 == 2 * 2 * 2 * 2
    assert len(stdout.splitlines()) == 2 * 2 * 2
    assert "+-" in stdout


def test_bench_clean_icp_is_near_zero(tmp_path, capsys):
    out, _ = bench(tmp_path, capsys, "c.csv", "--protocol", "clean", "--trials", 1, "--algorithms", "icp", "--max-rotation", 10)
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 1
    assert float(rows[0]["rmse"]) < 1e-6


def test_bench_deterministic_bytes(tmp_path, capsys):
    args = ("--trials", 1, "--algorithms", "icp,scga", "--fractions", "0.2", "--deterministic", "--seed", 3)
    a, _ = bench(tmp_path, capsys, "a.csv", *args)
    b, _ = bench(tmp_path, capsys, "b.csv", *args)
    assert a.read_bytes() == b.read_bytes()


def test_bench_threads_give_same_bytes(tmp_path, capsys, monkeypatch):
    args = ("--trials", 2, "--algorithms", "icp", "--fractions", "0.2", "--deterministic")
    a, _ = bench(tmp_path, capsys, "a.csv", *args)
    monkeypatch.setenv("SCGA_THREADS", "2")
    b, _ = bench(tmp_path, capsys, "b.csv", *args)
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("value", ["0", "two", "-3"])
def test_bad_thread_count_is_usage_error(value, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SCGA_THREADS", value)
    code, _, err = run(["bench", "--out", tmp_path / "x.csv", "--trials", 1, "--algorithms", "icp"], capsys)
    assert code == 2 and "SCGA_THREADS" in err


def test_bench_negative_pose_bound(tmp_path, capsys):
    code, _, err = run(["bench", "--out", tmp_path / "x.csv", "--max-rotation", "-5"], capsys)
    assert code == 2 and err.count("\n") == 1


@pytest.mark.parametrize("algs", ["cpd", "icp,rpm", "foo", ""])
def test_bench_unknown_algorithm(algs, tmp_path, capsys):
    code, _, err = run(["bench", "--out", tmp_path / "x.csv", "--algorithms", algs], capsys)
    assert code == 2 and err.count("\n") == 1
    assert not (tmp_path / "x.csv").exists()


# -- curvature ------------------------------------------------------------------------


def curvature_rows(tmp_path, capsys, shape, n=400):
    p = tmp_path / f"{shape}.xyz"
    write_point_file(make_shape(shape, n, np.random.default_rng(0)), p)
    code, out, err = run(["curvature", "--input", p], capsys)
    assert code == 0, err
    rows = list(csv.DictReader(io.StringIO(out)))
    assert list(rows[0]) == ["index", "x", "y", "z", "curvature"]
    return np.array([float(r["curvature"]) for r in rows])


def test_curvature_plane(tmp_path, capsys):
    a = curvature_rows(tmp_path, capsys, "plane-patch")
    assert len(a) == 400
    assert np.abs(a).max() < 1e-9


def test_curvature_sphere(tmp_path, capsys):
    a = curvature_rows(tmp_path, capsys, "sphere-blob", 1000)
    assert len(a) == 1000
    assert a.min() > 0 and a.std() / a.mean() < 0.2


def test_curvature_explicit_radius_and_file_output(lobe_file, tmp_path, capsys):
    out = tmp_path / "k.csv"
    code, _, _ = run(["curvature", "--input", lobe_file, "--radius", "0.3", "--out", out], capsys)
    assert code == 0 and len(out.read_text().splitlines()) == 151


def test_curvature_degenerate_cloud(tmp_path, capsys):
    p = tmp_path / "same.xyz"
    p.write_text("1 1 1\n1 1 1\n1 1 1\n")
    code, _, err = run(["curvature", "--input", p], capsys)
    assert code == 1
    assert err.startswith("scga: degenerate configuration:") and err.count("\n") == 1


# -- error paths ------------------------------------------------------------------------


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["register", "--reference", "nope.ply", "--template", "nope.ply"],
        ["register", "--template", "x.ply"],
        ["curvature", "--input", "missing.xyz"],
        ["curvature", "--input", "{lobe}", "--radius", "-1"],
        ["register", "--reference", "{lobe}", "--template", "{lobe}", "--sigma", "0"],
        ["register", "--reference", "{lobe}", "--template", "{lobe}", "--g-mode", "cubic"],
        ["register", "--reference", "{lobe}", "--template", "{lobe}", "--iterations", "-4"],
        ["register", "--reference", "{lobe}", "--template", "{lobe}", "--p", "nan"],
        ["register", "--reference", "{lobe}", "--template", "{lobe}", "--out", "/nonexistent/dir/T.json"],
    ],
)
def test_usage_errors_exit_2_with_one_line(argv, lobe_file, capsys):
    code, _, err = run([a.replace("{lobe}", str(lobe_file)) for a in argv], capsys)
    assert code == 2
    assert err.startswith("scga: error:") and err.count("\n") == 1


def test_malformed_input_names_line(tmp_path, capsys):
    p = tmp_path / "bad.xyz"
    p.write_text("0 0 0\n1 abc 0\n")
    code, _, err = run(["curvature", "--input", p], capsys)
    assert code == 2 and ":2:" in err


def test_collinear_input_is_degenerate(tmp_path, capsys):
    p = tmp_path / "line.xyz"
    write_point_file(PointCloud(np.outer(np.linspace(0, 1, 30), [1.0, 2.0, 3.0])), p)
    code, _, err = run(["register", "--reference", p, "--template", p, "--algorithm", "icp"], capsys)
    assert code == 1
    assert err.startswith("scga: degenerate configuration:") and err.count("\n") == 1


def test_console_script_entry_point(lobe_file):
    r = subprocess.run(
        [sys.executable, "-m", "scga.cli", "curvature", "--input", str(lobe_file)], capture_output=True, text=True
    )
    assert r.returncode == 0 and len(r.stdout.splitlines()) == 151
    r = subprocess.run([sys.executable, "-m", "scga.cli", "bench", "--out", "x", "--algorithms", "cpd"], capture_output=True, text=True)
    assert r.returncode == 2 and "not implemented" in r.stderr
