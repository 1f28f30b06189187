import csv
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from trisplm.cli import main, parse_lambda_grid
from trisplm.mesh import load_mesh, quality, save_mesh
from trisplm.plm import FitResult, default_lambda_grid
from trisplm.simbench import SimConfig, generate_example1, horseshoe_domain, square_mesh


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(np.asarray(rows).tolist())
    return path


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def square_file(tmp_path):
    path = tmp_path / "square.mesh"
    save_mesh(square_mesh(2), path)
    return path


@pytest.fixture
def poly_data(tmp_path, rng):
    X = rng.uniform(0.02, 0.98, (150, 2))
    Z = rng.normal(size=(150, 2))
    Y = Z @ [-1.0, 1.0] + 1 + X[:, 0] * X[:, 1] ** 2 - X[:, 0] ** 3
    return write_table(tmp_path / "data.csv", ["x1", "x2", "z1", "z2", "y"], np.column_stack([X, Z, Y]))


def test_mesh_refine(tmp_path, capsys):
    src = tmp_path / "tri1.mesh"
    src.write_text("3 1\n0 0\n1 0\n0 1\n0 1 2\n")
    out = tmp_path / "out.mesh"
    assert main(["mesh", "--refine", "2", str(src), str(out)]) == 0
    assert load_mesh(out).n_triangles == 16


def test_mesh_quality_matches_module(square_file, capsys):
    assert main(["mesh", "--quality", str(square_file)]) == 0
    q = quality(load_mesh(square_file))
    line = capsys.readouterr().out.strip()
    fields = dict(kv.split("=") for kv in line.split())
    assert int(fields["N"]) == q.triangle_count == 8
    assert float(fields["mesh_size"]) == q.mesh_size
    assert float(fields["shape_param"]) == q.shape_param


def test_invalid_mesh_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.mesh"
    bad.write_text("4 2\n0 0\n1 0\n0 1\n1 1\n0 1 2\n0 1 3\n")
    assert main(["mesh", "--quality", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "0" in err and "1" in err and "triangle" in err


def test_usage_errors(capsys):
    assert main(["mesh", "--bogus", "x"]) == 64
    assert main(["fit", "missing.csv", "missing.mesh"]) == 64
    assert main([]) == 64


def test_help_exits_zero():
    exe = shutil.which("trisplm")
    cmd = [exe] if exe else [sys.executable, "-m", "trisplm.cli"]
    done = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert done.returncode == 0
    assert "simulate" in done.stdout
    bad = subprocess.run(cmd + ["--no-such-flag"], capture_output=True, text=True)
    assert bad.returncode == 64


def test_lambda_grid_flag():
    lo, hi, count = parse_lambda_grid("-6:7:10")
    np.testing.assert_array_equal(default_lambda_grid(lo, hi, count), default_lambda_grid())
    with pytest.raises(Exception):
        parse_lambda_grid("1:2")


def test_fit_noiseless(tmp_path, square_file, poly_data, capsys):
    out = tmp_path / "fit.json"
    fitted = tmp_path / "fitted.csv"
    argv = ["fit", str(poly_data), str(square_file), "--lambda-grid", "-6:7:10", "--out", str(out), "--fitted", str(fitted)]
    assert main(argv) == 0
    first = capsys.readouterr().out.splitlines()[0]
    sigma2 = float(dict(kv.split("=") for kv in first.split())["sigma2_hat"])
    assert sigma2 < 1e-8
    fit = FitResult.load(out)
    np.testing.assert_allclose(fit.beta_hat, [-1.0, 1.0], atol=1e-4)
    np.testing.assert_array_equal([lam for lam, _ in fit.gcv_trace], default_lambda_grid())

    # predicting at the training points reproduces the fitted-values file
    rows = read_table(poly_data)
    points = tmp_path / "points.csv"
    write_table(points, ["x1", "x2", "z1", "z2"], [[r["x1"], r["x2"], r["z1"], r["z2"]] for r in rows])
    pred_path = tmp_path / "pred.csv"
    assert main(["predict", str(out), str(square_file), str(points), "--out", str(pred_path)]) == 0
    pred = read_table(pred_path)
    ref = read_table(fitted)
    got = np.array([float(p["y_hat"]) for p in pred])
    want = np.array([float(r["y_hat"]) for r in ref])
    np.testing.assert_allclose(got, want, atol=1e-10)
    assert all(p["status"] == "inside" for p in pred)


def test_fit_example1_interval(tmp_path, capsys):
    domain = horseshoe_domain()
    mesh_path = tmp_path / "hs.mesh"
    save_mesh(domain.mesh, mesh_path)
    data = generate_example1(SimConfig(), np.random.default_rng(1), domain)
    path = write_table(tmp_path / "ex1.csv", ["x1", "x2", "z1", "z2", "y"], np.column_stack([data.X, data.Z, data.Y]))
    out = tmp_path / "fit.json"
    assert main(["fit", str(path), str(mesh_path), "--out", str(out)]) == 0
    fit = FitResult.load(out)
    assert fit.ci_lower[0] <= -1.0 <= fit.ci_upper[0]
    assert "z1" in capsys.readouterr().out


def test_fit_outside_points(tmp_path, square_file, capsys):
    rows = [[0.5, 0.5, 1.0], [1.5, 0.2, 2.0], [0.2, 0.3, 0.0], [0.1, -2.0, 1.0]]
    path = write_table(tmp_path / "d.csv", ["x1", "x2", "y"], rows)
    assert main(["fit", str(path), str(square_file)]) == 3
    assert "indices: 1, 3" in capsys.readouterr().err


def test_predict_flags_outside_points(tmp_path, square_file, poly_data, capsys):
    out = tmp_path / "fit.json"
    assert main(["fit", str(poly_data), str(square_file), "--out", str(out)]) == 0
    grid = write_table(tmp_path / "grid.csv", ["x1", "x2"], [[0.25, 0.25], [0.5, 0.75], [2.0, 2.0]])
    pred_path = tmp_path / "pred.csv"
    assert main(["predict", str(out), str(square_file), str(grid), "--out", str(pred_path)]) == 0
    pred = read_table(pred_path)
    assert list(pred[0]) == ["index", "x1", "x2", "g_hat", "y_hat", "status"]
    assert [p["status"] for p in pred] == ["inside", "inside", "outside"]
    assert pred[2]["g_hat"] == ""
    assert float(pred[0]["g_hat"]) == pytest.approx(1 + 0.25**3 - 0.25**3, abs=1e-4)


def test_simulate_smoke_and_determinism(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    start = time.perf_counter()
    assert main(["simulate", "--example", "1", "--rho", "0.0", "--replicates", "2", "--seed", "1", "--out", str(a)]) == 0
    assert time.perf_counter() - start < 60
    assert main(["simulate", "--example", "1", "--rho", "0.0", "--replicates", "2", "--seed", "1", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert "rmse_beta1" in a.read_text()


def test_simulate_seed_from_environment(tmp_path, monkeypatch):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    base = ["simulate", "--example", "2", "--rho", "0.7", "--replicates", "1", "--mesh", "square8"]
    monkeypatch.setenv("TRISPLM_SEED", "5")
    assert main(base + ["--out", str(a)]) == 0
    monkeypatch.delenv("TRISPLM_SEED")
    assert main(base + ["--seed", "5", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_simulate_rejects_bad_config(capsys):
    assert main(["simulate", "--example", "1", "--rho", "2.0", "--replicates", "1"]) == 64
    assert main(["simulate", "--example", "1", "--rho", "0", "--degree", "1"]) == 64


def test_housing_command(tmp_path, capsys):
    rng = np.random.default_rng(4)
    lon, lat = rng.uniform(-121.9, -120.1, 200), rng.uniform(36.1, 37.9, 200)
    income = rng.uniform(1, 9, 200)
    value = np.exp(11 + 0.1 * income + np.sin(lon + 121) + 0.05 * rng.normal(size=200))
    rows = np.column_stack([lon, lat, value, income, rng.uniform(2, 40, 200), rng.uniform(100, 300, 200),
                            rng.uniform(80, 250, 200), rng.uniform(300, 900, 200)])
    data = write_table(tmp_path / "cadata.csv", ["longitude", "latitude", "medianHouseValue", "medianIncome",
                                                 "housingMedianAge", "totalBedrooms", "households", "population"], rows)
    base = square_mesh(2)
    mesh_path = tmp_path / "region.mesh"
    from trisplm.mesh import make_triangulation

    save_mesh(make_triangulation(base.vertices * 2 + [-122.0, 36.0], base.triangles), mesh_path)
    assert main(["housing", str(data), str(mesh_path), "--cv", "5", "--seed", "2"]) == 0
    out = capsys.readouterr().out
    assert "records=200 dropped=0 outside_mesh=0" in out
    assert "MedInc" in out
    plm = [ln for ln in out.splitlines() if ln.startswith("plm,")][0].split(",")
    ols = [ln for ln in out.splitlines() if ln.startswith("ols,")][0].split(",")
    assert len(plm) == 7
    assert float(plm[-1]) < float(ols[-1])
    assert main(["housing", str(data), str(mesh_path), "--cv", "30"]) == 64
