from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from hopfrough.cli import PRESETS, main, resolve_problem, ConfigError


def run(tmp_path, *argv, config=None):
    args = list(argv) + ["--out", str(tmp_path / "out")]
    if config is not None:
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        args += ["--config", str(path)]
    return main(args)


def read(tmp_path, name):
    return list(csv.DictReader(open(tmp_path / "out" / name)))


def test_algebra_check_default(tmp_path):
    assert run(tmp_path, "algebra-check") == 0
    rows = read(tmp_path, "axioms.csv")
    assert {r["status"] for r in rows} == {"PASS"}
    counts = read(tmp_path, "basis_counts.csv")
    mkw = [int(r["count"]) for r in counts if r["kind"] == "MKW"]
    assert mkw == [1, 1, 2, 5, 14]


@pytest.mark.parametrize("what", ["coproduct", "product", "graft"])
def test_algebra_check_flags_corruption(tmp_path, what):
    cfg = {"algebras": [{"kind": "BCK", "d": 2, "N": 3, "corrupt": what}]}
    assert run(tmp_path, "algebra-check", config=cfg) == 4
    assert "FAIL" in {r["status"] for r in read(tmp_path, "axioms.csv")}


def test_lift_writes_characters(tmp_path):
    cfg = {"algebra": {"kind": "BCK", "d": 2, "N": 2}, "gamma": 0.45,
           "driver": {"kind": "brownian", "steps": 16}, "T": 1.0, "grid": 2, "triples": 20}
    assert run(tmp_path, "lift", config=cfg) == 0
    checks = {r["check"]: r for r in read(tmp_path, "checks.csv")}
    assert checks["chen"]["status"] == "PASS" and checks["character"]["status"] == "PASS"
    resolved = json.loads((tmp_path / "out" / "resolved_config.json").read_text())
    assert resolved["seed"] == 0 and resolved["solver"]["n_cells"] == 64


def test_integrate_area(tmp_path):
    cfg = {"algebra": {"kind": "Shuffle", "d": 2, "N": 2}, "driver": {"kind": "area", "area": 0.5},
           "T": 1.0, "letter": 2, "path": "driver", "solver": {"n_cells": 8}}
    assert run(tmp_path, "integrate", config=cfg) == 0
    rows = read(tmp_path, "integral.csv")
    last = [r for r in rows if r["t"] == "1.0"]
    # ∫ x^1 dX^2 against the area lift is the word-12 coefficient a·t
    assert float(last[0]["value"]) == pytest.approx(0.5)


def test_solve_preset_and_summary(tmp_path):
    assert run(tmp_path, "solve", "--preset", "pure-area") == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["oracle_gap"] < 1e-4 and summary["max_rho"] < 1
    assert read(tmp_path, "history.csv")


def test_ult_preset(tmp_path):
    assert run(tmp_path, "ult", "--preset", "zero-perturbation") == 0
    assert {float(r["distance"]) for r in read(tmp_path, "stability.csv")} == {0.0}


def test_ult_violation_exit_code(tmp_path):
    cfg = {"preset": "driver-perturbation", "factor": 1.0001}
    assert run(tmp_path, "ult", config=cfg) == 4


def test_config_errors(tmp_path):
    assert run(tmp_path, "solve") == 2
    assert run(tmp_path, "solve", "--preset", "nope") == 2
    assert run(tmp_path, "solve", config={"preset": "exponential", "T": "one"}) == 2
    assert run(tmp_path, "solve", config={"preset": "exponential", "schema_version": 7}) == 2
    assert run(tmp_path, "solve", config={"preset": "exponential", "solver": {"bogus": 1}}) == 2
    assert run(tmp_path, "solve", config={"preset": "exponential", "fields": [{"kind": "tanh"}]}) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["solve", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_nonconvergence_exit_code(tmp_path):
    cfg = {"preset": "exponential", "solver": {"max_iter": 2, "n_cells": 8}}
    assert run(tmp_path, "solve", config=cfg) == 3


def test_resolved_config_fills_defaults():
    resolved = resolve_problem({"preset": "exponential"})
    assert resolved["schema_version"] == 1 and resolved["gamma"] == 1.0
    assert resolved["solver"]["rrs_tol"] == 1e-5 and resolved["solver"]["max_iter"] == 60
    with pytest.raises(ConfigError):
        resolve_problem({"algebra": {"kind": "Lie", "d": 1, "N": 1}})
    assert set(PRESETS) >= {"exponential", "pure-area", "zero-field", "z0-perturbation", "driver-perturbation"}


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "hopfrough", "solve", "--preset", "zero-field", "--out",
                          str(tmp_path / "o")], capture_output=True, text=True, env={"HOPFROUGH_LOG": "debug",
                                                                                    "PATH": ""})
    assert out.returncode == 0, out.stderr
    assert "Z(1.0) = [1.0]" in out.stdout


@pytest.mark.parametrize("argv", [
    ["solve", "--preset", "zero-field"],
    ["lift", "--preset", "pure-area", "--seed", "3"],
    ["ult", "--preset", "zero-perturbation"],
    ["algebra-check"],
])
def test_resolved_config_reproduces_outputs(tmp_path, argv):
    first = tmp_path / "first"
    assert main(argv + ["--out", str(first)]) == 0
    second = tmp_path / "second"
    resolved = first / "resolved_config.json"
    assert main([argv[0], "--config", str(resolved), "--out", str(second)]) == 0
    for path in first.iterdir():
        assert path.read_bytes() == (second / path.name).read_bytes(), path.name


def test_driver_from_csv_samples(tmp_path):
    samples = tmp_path / "path.csv"
    samples.write_text("t,x1\n0.0,0.0\n0.5,0.5\n1.0,1.0\n")
    cfg = {"algebra": {"kind": "Shuffle", "d": 1, "N": 1}, "driver": {"kind": "signature", "file": str(samples)},
           "fields": [{"kind": "identity"}], "z0": [1.0], "T": 1.0, "solver": {"n_cells": 32, "rrs_tol": 1e-5}}
    assert run(tmp_path, "solve", config=cfg) == 0
    final = [r for r in read(tmp_path, "solution.csv") if r["t"] == "1.0"]
    assert float(final[0]["value"]) == pytest.approx(2.71828, abs=2e-3)
    residuals = read(tmp_path, "residuals.csv")
    assert float(residuals[0]["fixed_point"]) < 1e-8
    samples.write_text("t,y\n0.0,0.0\n")
    assert run(tmp_path, "solve", config=cfg) == 2


def test_seed_must_be_integer(tmp_path):
    assert run(tmp_path, "solve", config={"preset": "zero-field", "seed": "x"}) == 2
