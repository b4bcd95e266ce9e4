import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from cmfg import cli_io
from cmfg.cli_io import ScenarioConfig, load_config

ROOT = Path(__file__).resolve().parents[1]
SCEN = ROOT / "scenarios"


def small_baseline(**over):
    obj = json.loads((SCEN / "linear_baseline.json").read_text())
    obj["grid"] = {"L": 6.0, "nx": 59}
    obj["horizon"] = {"T": 1.0, "nt": 50, "c3": 0.05}
    obj.update(over)
    return obj


def write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return p


def bundle_bytes(out: Path) -> dict:
    files = {}
    for f in sorted(out.iterdir()):
        data = f.read_bytes()
        if f.name == "manifest.json":
            man = json.loads(data)
            man.pop("wall_time_s")
            data = json.dumps(man, sort_keys=True).encode()
        files[f.name] = data
    return files


@pytest.mark.parametrize("path", sorted(SCEN.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_round_trip(path):
    cfg = load_config(path)
    again = ScenarioConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert again == cfg


@pytest.mark.parametrize("mutation", [
    {"eps": -1.0}, {"r": 0}, {"sigma": "x"}, {"run": "Dance"}, {"grid": {"L": 5.0, "nx": 2}},
    {"bogus": 1}, {"solver": {"damping": 1.5}}, {"solver": {"speed": 1}}, {"model": {"kind": "Quadratic"}},
    {"m0": {"family": "uniform", "a": 0.5, "b": 1.5, "mass": 2.0}}, {"horizon": {"T": 1.0}},
])
def test_invalid_configs_exit_2_without_outputs(tmp_path, mutation, capsys):
    cfg = write(tmp_path, small_baseline(**mutation))
    out = tmp_path / "out"
    assert cli_io.run(cfg, out) == 2
    assert not out.exists()
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2


def test_malformed_json(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{ not json")
    out = tmp_path / "out"
    assert cli_io.main(["run", str(p), "--out", str(out)]) == 2
    assert not out.exists()
    assert "malformed JSON" in json.loads(capsys.readouterr().err)["message"]


def test_validate_only(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli_io.main(["run", str(SCEN / "linear_baseline.json"), "--out", str(out), "--validate-only"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["smooth_H"]["ok"] and printed["uniqueness_regime"] == "linear"
    assert sorted(p.name for p in out.iterdir()) == ["assumptions.json", "manifest.json"]


def test_baseline_bundle_passes(tmp_path):
    out = tmp_path / "out"
    assert cli_io.run(SCEN / "linear_baseline.json", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["checks"] and all(c["pass"] for c in report["checks"])
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["seed"] == 0 and man["config"]["name"] == "linear_baseline"
    for name, digest in man["files"].items():
        import hashlib

        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    Q = np.loadtxt(out / "Q_path.csv", delimiter=",", skiprows=1)
    assert Q[:, 1].max() <= 0.5


def test_report_recomputable_from_files(tmp_path):
    out = tmp_path / "out"
    assert cli_io.run(write(tmp_path, small_baseline(output={"every": 1})), out) == 0
    report = json.loads((out / "report.json").read_text())
    val = np.loadtxt(out / "value.csv", delimiter=",", skiprows=1)
    check = next(c for c in report["checks"] if c["name"] == "u_max <= H(0,0,0)/r + c1")
    assert check["lhs"] == val[:, 2].max()
    traj = np.loadtxt(out / "trajectory.csv", delimiter=",", skiprows=1)
    masses = traj[:, 2].reshape(-1, 59)
    eta_check = next(c for c in report["checks"] if c["name"].startswith("eta nonincreasing"))
    assert eta_check["lhs"] == pytest.approx(max(np.diff(masses.sum(axis=1)).max(), 0.0), abs=1e-16)


def test_rerun_is_byte_identical(tmp_path):
    cfg = write(tmp_path, small_baseline())
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli_io.run(cfg, a) == 0 and cli_io.run(cfg, b) == 0
    assert bundle_bytes(a) == bundle_bytes(b)


def test_nonconvergence_exit_3_keeps_manifest(tmp_path, capsys):
    cfg = write(tmp_path, small_baseline(solver={"max_iter": 1, "tol": 1e-14}))
    out = tmp_path / "out"
    assert cli_io.run(cfg, out) == 3
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "nonconvergence" and len(man["error"]["residual_history"]) == 1
    assert json.loads(capsys.readouterr().err)["exit_code"] == 3


def test_io_failure_exit_4_keeps_manifest(tmp_path):
    out = tmp_path / "out"
    (out / "trajectory.csv").mkdir(parents=True)
    assert cli_io.run(write(tmp_path, small_baseline()), out) == 4
    assert json.loads((out / "manifest.json").read_text())["status"] == "io_error"


def test_plotscript_and_seed_flag(tmp_path):
    obj = json.loads((SCEN / "mc_survival.json").read_text())
    obj["options"]["n_paths"] = 2000
    cfg = write(tmp_path, obj)
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert cli_io.main(["run", str(cfg), "--out", str(a), "--seed", "5", "--emit-plotscript"]) == 0
    assert cli_io.main(["run", str(cfg), "--out", str(b), "--seed", "5"]) == 0
    assert cli_io.main(["run", str(cfg), "--out", str(c), "--seed", "6"]) == 0
    assert (a / "mc.csv").read_bytes() == (b / "mc.csv").read_bytes()
    assert (a / "mc.csv").read_bytes() != (c / "mc.csv").read_bytes()
    assert json.loads((a / "manifest.json").read_text())["seed"] == 5
    script = (a / "plot.gp").read_text()
    assert "mc.csv" in script


def test_csv_initial_measure_relative_path(tmp_path):
    x = np.linspace(0.5, 1.5, 11)
    np.savetxt(tmp_path / "m0.csv", np.column_stack([x, np.full(11, 1 / 11)]), delimiter=",")
    cfg = write(tmp_path, small_baseline(m0={"family": "csv", "path": "m0.csv"}))
    loaded = load_config(cfg)
    assert loaded.build_m0(loaded.build_grid()).total == pytest.approx(1.0)


def test_module_entry_point(tmp_path):
    out = tmp_path / "out"
    res = subprocess.run([sys.executable, "-m", "cmfg", "run", str(SCEN / "heat_validate.json"), "--out", str(out)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads((out / "fp_validate.json").read_text())
