"""Command-line front end: algebra checks, lifts, integrals, RDE solves and stability runs."""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from . import hopf_core as hc
from .controlled_path import ControlledPathError, compose_smooth, make_field, transported_path
from .controls import ControlError, holder_control, pvar_control
from .integration import (
    IntegrationError,
    NonConvergenceError,
    export_integral_csv,
    integral_controlled,
    remainder_identity_defect,
)
from .rde import (
    RdeProblem,
    SolverError,
    base_residual,
    fixed_point_residual,
    linear_expansion_oracle,
    perturb_driver,
    perturb_fields,
    perturb_initial,
    solve_global,
    solve_local,
    ult_experiment,
    write_history_csv,
    write_solution_csv,
    write_stability_csv,
)
from .rough_path import (
    RoughPathError,
    branched_lift,
    character_defect,
    chen_defect,
    jump_lift,
    pure_area_lift,
    signature_lift,
)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_PROPERTY = 0, 2, 3, 4
AXIOM_TOL = 1e-12

log = logging.getLogger("hopfrough")


class ConfigError(ValueError):
    pass


# -- presets and defaults -----------------------------------------------------

ACCEPTANCE_ALGEBRAS = [
    {"kind": "Shuffle", "d": 1, "N": 4},
    {"kind": "Shuffle", "d": 2, "N": 4},
    {"kind": "BCK", "d": 1, "N": 4},
    {"kind": "BCK", "d": 2, "N": 4},
    {"kind": "MKW", "d": 1, "N": 4},
]

AREA_FIELDS = [
    {"kind": "linear", "params": {"A": [[0.3, 0.5], [-0.2, 0.1]]}},
    {"kind": "linear", "params": {"A": [[0.1, -0.4], [0.5, 0.2]]}},
]

PRESETS: dict[str, dict] = {
    "exponential": {
        "algebra": {"kind": "Shuffle", "d": 1, "N": 1},
        "driver": {"kind": "linear", "direction": [1.0]},
        "fields": [{"kind": "identity"}],
        "z0": [1.0],
        "T": 1.0,
        "solver": {"n_cells": 128, "rrs_tol": 1e-5},
    },
    "exponential-global": {
        "algebra": {"kind": "Shuffle", "d": 1, "N": 1},
        "driver": {"kind": "linear", "direction": [1.0]},
        "fields": [{"kind": "identity"}],
        "z0": [1.0],
        "T": 2.0,
        "mode": "global",
        "solver": {"n_cells": 128, "rrs_tol": 1e-5, "delta": 0.51},
    },
    "pure-area": {
        "algebra": {"kind": "Shuffle", "d": 2, "N": 2},
        "driver": {"kind": "area", "area": 0.5},
        "fields": AREA_FIELDS,
        "z0": [1.0, 0.5],
        "T": 1.0,
        "solver": {"n_cells": 64, "rrs_tol": 1e-6},
    },
    "zero-field": {
        "algebra": {"kind": "Shuffle", "d": 1, "N": 1},
        "driver": {"kind": "linear", "direction": [1.0]},
        "fields": [{"kind": "zero"}],
        "z0": [1.0],
        "T": 1.0,
    },
    "z0-perturbation": {
        "base": "exponential",
        "horizon": 0.5,
        "perturbations": [{"channel": "z0", "direction": [1.0]}],
    },
    "driver-perturbation": {
        "base": "pure-area",
        "horizon": 0.5,
        "perturbations": [{"channel": "X", "param": "area", "delta": 1.0}],
    },
    "zero-perturbation": {
        "base": "exponential",
        "horizon": 0.5,
        "perturbations": [{"channel": "z0", "direction": [0.0]}],
    },
}

SOLVER_DEFAULTS = {
    "n_cells": 64, "tol": 1e-10, "max_iter": 60, "delta": 0.5, "rrs_tol": 1e-6,
    "max_depth": 18, "max_splits": 4, "freeze_below": 1e-5,
}


def _require(cfg: dict, key: str, kinds, where: str):
    if key not in cfg:
        raise ConfigError(f"{where}: missing key {key!r}")
    value = cfg[key]
    if not isinstance(value, kinds) or isinstance(value, bool):
        raise ConfigError(f"{where}: {key!r} has the wrong type ({type(value).__name__})")
    return value


def _number(x: Any, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {x!r}")
    return float(x)


def _unknown(cfg: dict, allowed: set[str], where: str) -> None:
    extra = sorted(set(cfg) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")


def resolve_algebra(cfg: dict) -> dict:
    _unknown(cfg, {"kind", "d", "N"}, "algebra")
    kind = _require(cfg, "kind", str, "algebra")
    if kind not in hc.KINDS:
        raise ConfigError(f"algebra: kind must be one of {list(hc.KINDS)}")
    return {"kind": kind, "d": int(_require(cfg, "d", int, "algebra")), "N": int(_require(cfg, "N", int, "algebra"))}


def resolve_problem(cfg: dict) -> dict:
    """Fill defaults of a problem config; the result is what gets echoed."""
    cfg = copy.deepcopy(cfg)
    if "preset" in cfg:
        name = cfg.pop("preset")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        merged = copy.deepcopy(PRESETS[name])
        for key, value in cfg.items():
            if key == "solver":
                merged.setdefault("solver", {}).update(value)
            else:
                merged[key] = value
        cfg = merged
    _unknown(cfg, {"schema_version", "algebra", "gamma", "driver", "control", "fields", "z0", "T", "solver",
                   "mode", "oracle"}, "problem")
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version} is not supported (expected {SCHEMA_VERSION})")
    algebra = resolve_algebra(_require(cfg, "algebra", dict, "problem"))
    gamma = _number(cfg.get("gamma", 1.0 / algebra["N"]), "gamma")
    driver = _require(cfg, "driver", dict, "problem")
    fields = _require(cfg, "fields", list, "problem")
    for k, f in enumerate(fields):
        if not isinstance(f, dict) or "kind" not in f:
            raise ConfigError(f"fields[{k}] must be an object with a 'kind'")
        _unknown(f, {"kind", "params"}, f"fields[{k}]")
    z0 = [_number(x, "z0") for x in _require(cfg, "z0", list, "problem")]
    T = _number(_require(cfg, "T", (int, float), "problem"), "T")
    solver = dict(SOLVER_DEFAULTS)
    extra = cfg.get("solver", {})
    _unknown(extra, set(SOLVER_DEFAULTS), "solver")
    solver.update(extra)
    mode = cfg.get("mode", "local")
    if mode not in ("local", "global"):
        raise ConfigError("mode must be 'local' or 'global'")
    return {
        "schema_version": SCHEMA_VERSION, "algebra": algebra, "gamma": gamma, "driver": driver,
        "control": cfg.get("control"), "fields": [{"kind": f["kind"], "params": f.get("params", {})} for f in fields],
        "z0": z0, "T": T, "solver": solver, "mode": mode, "oracle": cfg.get("oracle", "auto"),
    }


# -- builders -----------------------------------------------------------------


def build_control(spec: dict | None, T: float, driver_samples=None, gamma: float = 1.0):
    if spec is None:
        return None
    kind = spec.get("kind")
    if kind == "holder":
        return holder_control(_number(spec.get("T", T), "control.T"))
    if kind == "pvar":
        if driver_samples is None:
            raise ConfigError("pvar control needs a sampled driver")
        times, values = driver_samples
        return pvar_control(times, values, _number(spec.get("p", 1.0 / gamma), "control.p"), T=T)
    raise ConfigError(f"control kind must be 'holder' or 'pvar', got {kind!r}")


def read_samples(path: str, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Path samples from a CSV with columns t, x1, ..., xd."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read path samples: {exc}") from exc
    columns = ["t"] + [f"x{c}" for c in range(1, d + 1)]
    if not rows or any(c not in rows[0] for c in columns):
        raise ConfigError(f"{path}: expected columns {columns}")
    try:
        table = np.array([[float(r[c]) for c in columns] for r in rows])
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return table[:, 0], table[:, 1:]


def _samples(driver: dict, T: float, rng: np.random.Generator, d: int):
    kind = driver["kind"]
    if kind == "linear":
        direction = np.asarray(driver.get("direction", [1.0] * d), dtype=float)
        return np.array([0.0, T]), np.stack([np.zeros(d), T * direction])
    if kind in ("signature", "jump"):
        if "file" in driver:
            return read_samples(driver["file"], d)
        return np.asarray(driver["times"], dtype=float), np.asarray(driver["values"], dtype=float)
    if kind == "brownian":
        steps = int(driver.get("steps", 64))
        scale = _number(driver.get("scale", 1.0), "driver.scale")
        incs = rng.normal(scale=scale * np.sqrt(T / steps), size=(steps, d))
        return np.linspace(0.0, T, steps + 1), np.vstack([np.zeros(d), np.cumsum(incs, axis=0)])
    return None


def build_driver(problem: dict, seed: int = 0, overrides: dict | None = None):
    """Rough path from a resolved problem; ``overrides`` patches driver parameters."""
    alg_cfg = problem["algebra"]
    driver = dict(problem["driver"])
    driver.update(overrides or {})
    kind = driver.get("kind")
    T = problem["T"]
    gamma = problem["gamma"]
    rng = np.random.default_rng(seed)
    try:
        algebra = cached_algebra(alg_cfg["kind"], alg_cfg["d"], alg_cfg["N"])
        words = algebra if alg_cfg["kind"] == "Shuffle" else cached_algebra("Shuffle", alg_cfg["d"], alg_cfg["N"])
        if kind == "area":
            X = pure_area_lift(_number(driver.get("area", 1.0), "driver.area"), words, gamma, horizon=T)
        elif kind in ("linear", "signature", "brownian", "jump"):
            samples = _samples(driver, T, rng, alg_cfg["d"])
            control = build_control(problem.get("control"), T, samples, gamma)
            times, values = samples
            if kind == "jump":
                X = jump_lift(times, values, words, gamma, control)
            else:
                X = signature_lift(times, values, words, gamma, control or holder_control(T))
        else:
            raise ConfigError(f"driver kind must be linear, signature, brownian, jump or area; got {kind!r}")
        if alg_cfg["kind"] == "BCK":
            X = branched_lift(X, algebra)
        elif alg_cfg["kind"] == "MKW":
            raise ConfigError("drivers on the MKW algebra are not supported")
    except (RoughPathError, ControlError, hc.AlgebraError, KeyError) as exc:
        raise ConfigError(f"driver: {exc}") from exc
    return X


_ALGEBRAS: dict[tuple, hc.Algebra] = {}


def cached_algebra(kind: str, d: int, N: int) -> hc.Algebra:
    key = (kind, d, N)
    if key not in _ALGEBRAS:
        _ALGEBRAS[key] = hc.build_algebra(kind, d, N)
    return _ALGEBRAS[key]


def build_fields(problem: dict, specs: list | None = None):
    e = len(problem["z0"])
    try:
        return [make_field(f["kind"], e, f.get("params", {})) for f in (specs or problem["fields"])]
    except ControlledPathError as exc:
        raise ConfigError(f"fields: {exc}") from exc


def build_problem(problem: dict, seed: int = 0, driver_overrides: dict | None = None) -> RdeProblem:
    X = build_driver(problem, seed, driver_overrides)
    s = problem["solver"]
    try:
        return RdeProblem(
            X, build_fields(problem), np.asarray(problem["z0"]), problem["T"],
            n_cells=int(s["n_cells"]), tol=float(s["tol"]), max_iter=int(s["max_iter"]), delta=float(s["delta"]),
            rrs_tol=float(s["rrs_tol"]), max_depth=int(s["max_depth"]), max_splits=int(s["max_splits"]),
            freeze_below=float(s["freeze_below"]),
        )
    except SolverError as exc:
        raise ConfigError(str(exc)) from exc


# -- output helpers -----------------------------------------------------------


def _atomic_write(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_json(path: Path, doc: dict) -> None:
    def write(tmp):
        with open(tmp, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _atomic_write(path, write)


def _write_rows(path: Path, header: list[str], rows) -> None:
    def write(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    _atomic_write(path, write)


def _fmt(x: float) -> str:
    return repr(float(x))


# -- commands -----------------------------------------------------------------


def _corrupt(alg: hc.Algebra, what: str) -> hc.Algebra:
    if what == "coproduct":
        rows = np.array(alg.coproduct, copy=True)
        target = np.flatnonzero((rows[:, 1] != 0) & (rows[:, 2] != 0))
        rows[target[-1], 3] *= 2.0
        return dataclasses.replace(alg, coproduct=rows)
    if what == "product":
        rows = np.array(alg.product, copy=True)
        target = np.flatnonzero((rows[:, 0] != 0) & (rows[:, 1] != 0))
        rows[target[0], 3] *= 2.0
        return dataclasses.replace(alg, product=rows)
    if what == "graft":
        graft = np.array(alg.graft, copy=True)
        live = np.flatnonzero(graft[0] >= 0)
        graft[0, live[-1]], graft[0, live[-2]] = graft[0, live[-2]], graft[0, live[-1]]
        return dataclasses.replace(alg, graft=graft)
    raise ConfigError(f"corrupt must be coproduct, product or graft; got {what!r}")


REQUIRED_AXIOMS = ("coassociativity", "counit", "compatibility", "cocycle", "graft_isometry", "associativity")


def cmd_algebra_check(cfg: dict, out: Path, args) -> int:
    _unknown(cfg, {"schema_version", "algebras"}, "algebra-check")
    specs = cfg.get("algebras", ACCEPTANCE_ALGEBRAS)
    resolved = []
    rows, counts = [], []
    failed = False
    for spec in specs:
        corrupt = spec.get("corrupt")
        base = resolve_algebra({k: v for k, v in spec.items() if k != "corrupt"})
        resolved.append(dict(base, **({"corrupt": corrupt} if corrupt else {})))
        try:
            alg = hc.build_algebra(base["kind"], base["d"], base["N"])
        except hc.AlgebraError as exc:
            raise ConfigError(str(exc)) from exc
        if corrupt:
            alg = _corrupt(alg, corrupt)
        report = hc.axiom_report(alg)
        report["associativity"] = hc.associativity_defect(alg)
        for name in sorted(report):
            value = report[name]
            if name in REQUIRED_AXIOMS:
                ok = value <= AXIOM_TOL
            elif name == "coproduct_norm":
                ok = value <= 1 + AXIOM_TOL
            else:
                ok = True
            failed |= not ok
            rows.append([base["kind"], base["d"], base["N"], name, _fmt(value), "PASS" if ok else "FAIL"])
            if not ok:
                log.error("%s d=%d N=%d: axiom %s fails with defect %.3e", base["kind"], base["d"], base["N"],
                          name, value)
        for degree, n in enumerate(alg.dims()):
            counts.append([base["kind"], base["d"], base["N"], degree, n])
        print(f"{base['kind']} d={base['d']} N={base['N']}: basis counts {alg.dims()}")
    _write_rows(out / "axioms.csv", ["kind", "d", "N", "axiom", "defect", "status"], rows)
    _write_rows(out / "basis_counts.csv", ["kind", "d", "N", "degree", "count"], counts)
    _write_json(out / "resolved_config.json", {"schema_version": SCHEMA_VERSION, "algebras": resolved})
    return EXIT_PROPERTY if failed else EXIT_OK


def cmd_lift(cfg: dict, out: Path, args) -> int:
    extra = {k: cfg[k] for k in ("triples", "grid") if k in cfg}
    problem_like = {k: v for k, v in cfg.items() if k not in extra}
    problem_like.setdefault("fields", [])
    problem_like.setdefault("z0", [])
    problem = resolve_problem(problem_like)
    X = build_driver(problem, args.seed)
    T = problem["T"]
    n_grid = int(extra.get("grid", 8))
    grid = np.linspace(0.0, T, n_grid + 1)
    pairs = [(float(grid[a]), float(grid[b])) for a in range(len(grid)) for b in range(a, len(grid))]
    rows = []
    for s, t in pairs:
        Xst = X(s, t)
        for k in range(X.algebra.dim):
            rows.append([_fmt(s), _fmt(t), X.algebra.label(k), _fmt(Xst[k])])
    _write_rows(out / "characters.csv", ["s", "t", "basis", "value"], rows)
    n_triples = int(extra.get("triples", 200))
    rng = np.random.default_rng(args.seed)
    trip = np.sort(rng.uniform(0.0, T, size=(n_triples, 3)), axis=1)
    chen = max(chen_defect(X, *row) for row in trip)
    char = max(character_defect(X, s, t) for s, _, t in trip)
    ok = chen <= AXIOM_TOL and char <= AXIOM_TOL
    _write_rows(out / "checks.csv", ["check", "value", "status"], [
        ["chen", _fmt(chen), "PASS" if chen <= AXIOM_TOL else "FAIL"],
        ["character", _fmt(char), "PASS" if char <= AXIOM_TOL else "FAIL"],
    ])
    resolved = dict(problem, grid=n_grid, triples=n_triples, seed=args.seed)
    _write_json(out / "resolved_config.json", resolved)
    return EXIT_OK if ok else EXIT_PROPERTY


def cmd_integrate(cfg: dict, out: Path, args) -> int:
    keys = ("letter", "path", "field")
    extra = {k: cfg[k] for k in keys if k in cfg}
    problem_like = {k: v for k, v in cfg.items() if k not in extra}
    problem_like.setdefault("fields", [])
    problem_like.setdefault("z0", [])
    problem = resolve_problem(problem_like)
    if args.tol is not None:
        problem["solver"]["rrs_tol"] = args.tol
    if args.max_depth is not None:
        problem["solver"]["max_depth"] = args.max_depth
    X = build_driver(problem, args.seed)
    alg = X.algebra
    letter = int(extra.get("letter", 1))
    path_kind = extra.get("path", "driver")
    times = np.linspace(0.0, problem["T"], int(problem["solver"]["n_cells"]) + 1)
    times = np.array(sorted(set(times.tolist()) | {b for b in X.control.breakpoints if 0 < b < problem["T"]}))
    if path_kind == "driver":
        e = alg.d
        z0 = np.zeros((e, alg.dim))
        if alg.N >= 2:
            for c in range(e):
                z0[c, alg.graft[c, 0]] = 1.0
    elif path_kind == "initial":
        z0 = np.zeros((len(problem["z0"]), alg.dim))
        z0[:, 0] = problem["z0"]
    else:
        raise ConfigError("path must be 'driver' or 'initial'")
    Z = transported_path(X, z0, times)
    if "field" in extra:
        Z = compose_smooth(build_fields(problem | {"z0": [0.0] * Z.e}, [extra["field"]])[0], Z)
    s = problem["solver"]
    result = integral_controlled(Z, X, letter, tol=float(s["rrs_tol"]), max_depth=int(s["max_depth"]))
    sewn = result.result
    rows = [(times[0], t, v, sewn.depth, sewn.last_delta) for t, v in zip(times, result.increments)]
    _atomic_write(out / "integral.csv", lambda tmp: export_integral_csv(rows, tmp))
    defect = remainder_identity_defect(Z, X, result)
    _write_rows(out / "checks.csv", ["check", "value", "status"],
                [["remainder_identity", _fmt(defect), "PASS" if defect <= 1e-10 else "FAIL"]])
    _write_json(out / "resolved_config.json", dict(problem, letter=letter, path=path_kind, seed=args.seed,
                                                   **({"field": extra["field"]} if "field" in extra else {})))
    print(f"integral over [0, {problem['T']}] = {result.increments[-1].tolist()} (depth {sewn.depth})")
    return EXIT_OK if defect <= 1e-10 else EXIT_PROPERTY


def _apply_flags(problem: dict, args) -> dict:
    if args.tol is not None:
        problem["solver"]["rrs_tol"] = args.tol
    if args.max_depth is not None:
        problem["solver"]["max_depth"] = args.max_depth
    return problem


def cmd_solve(cfg: dict, out: Path, args) -> int:
    problem = _apply_flags(resolve_problem(cfg), args)
    rde = build_problem(problem, args.seed)
    if problem["mode"] == "global":
        sol = solve_global(rde)
        path, cells = sol.path, sol.cells
    else:
        local = solve_local(rde)
        path, cells = local.path, [local]
    write = lambda name, fn: _atomic_write(out / name, fn)
    write("solution.csv", lambda tmp: write_solution_csv(tmp, path.times, path.base_path))
    write("history.csv", lambda tmp: write_history_csv(tmp, cells))
    residuals = [[_fmt(c.start), _fmt(c.end), c.depth, _fmt(fixed_point_residual(c, rde)),
                  _fmt(base_residual(c.path, rde, c.depth))] for c in cells]
    _write_rows(out / "residuals.csv", ["cell_start", "cell_end", "depth", "fixed_point", "base"], residuals)
    summary = {"final_time": float(path.times[-1]), "final_value": [float(v) for v in path.base_path[-1]],
               "cells": len(cells), "depths": [c.depth for c in cells],
               "max_rho": max((max(c.rhos) for c in cells if c.rhos), default=0.0)}
    oracle = problem["oracle"]
    linear = all(f["kind"] in ("linear", "zero", "identity") for f in problem["fields"])
    if oracle == "auto" and linear and rde.X.algebra.kind == "Shuffle":
        mats = [np.atleast_2d(make_field(f["kind"], rde.e, f["params"]).derivative(1, np.zeros(rde.e)))
                for f in problem["fields"]]
        ref = linear_expansion_oracle(rde.X, mats, rde.z0, float(path.times[-1]))
        summary["oracle_value"] = [float(v) for v in ref]
        summary["oracle_gap"] = float(np.max(np.abs(ref - path.base_path[-1])))
    _write_json(out / "summary.json", summary)
    _write_json(out / "resolved_config.json", dict(problem, seed=args.seed))
    print(f"Z({path.times[-1]}) = {summary['final_value']}")
    return EXIT_OK


def resolve_ult(cfg: dict) -> dict:
    cfg = copy.deepcopy(cfg)
    if "preset" in cfg:
        name = cfg.pop("preset")
        if name not in PRESETS or "perturbations" not in PRESETS[name]:
            raise ConfigError(f"unknown stability preset {name!r}")
        merged = copy.deepcopy(PRESETS[name])
        merged.update(cfg)
        cfg = merged
    _unknown(cfg, {"schema_version", "base", "problem", "horizon", "perturbations", "scales", "factor"}, "ult")
    if "base" in cfg:
        problem = resolve_problem({"preset": cfg["base"]})
    else:
        problem = resolve_problem(_require(cfg, "problem", dict, "ult"))
    perts = _require(cfg, "perturbations", list, "ult")
    for k, p in enumerate(perts):
        if p.get("channel") not in ("z0", "phi", "X"):
            raise ConfigError(f"perturbations[{k}]: channel must be z0, phi or X")
    return {
        "schema_version": SCHEMA_VERSION, "problem": problem,
        "horizon": _number(cfg.get("horizon", problem["T"]), "horizon"),
        "perturbations": perts,
        "scales": [_number(s, "scales") for s in cfg.get("scales", [1.0, 0.5, 0.25, 0.125, 0.0625])],
        "factor": _number(cfg.get("factor", 1.5), "factor"),
    }


def cmd_ult(cfg: dict, out: Path, args) -> int:
    resolved = resolve_ult(cfg)
    problem = _apply_flags(resolved["problem"], args)
    base = build_problem(problem, args.seed)
    reports = []
    ok = True
    for pert in resolved["perturbations"]:
        channel = pert["channel"]
        if channel == "z0":
            fn = perturb_initial(pert.get("direction", [1.0] * base.e))
        elif channel == "phi":
            fn = perturb_fields(build_fields(problem, pert.get("fields")))
        else:
            key = pert.get("param", "area")
            step = _number(pert.get("delta", 1.0), "delta")
            origin = problem["driver"].get(key)
            if origin is None:
                raise ConfigError(f"driver has no parameter {key!r} to perturb")
            fn = perturb_driver(lambda lam, key=key, origin=origin, step=step: build_driver(
                problem, args.seed, {key: (np.asarray(origin) + lam * step).tolist()}))
        rep = ult_experiment(base, fn, channel, resolved["scales"], resolved["horizon"])
        reports.append(rep)
        zero = all(d == 0.0 for d in rep.distances)
        good = zero or rep.within(resolved["factor"])
        ok &= good
        print(f"{channel}: ratios {[round(r, 6) for r in rep.ratios]} spread {rep.spread():.4f}")
    _atomic_write(out / "stability.csv", lambda tmp: write_stability_csv(tmp, reports))
    _write_json(out / "resolved_config.json", dict(resolved, problem=problem, seed=args.seed))
    return EXIT_OK if ok else EXIT_PROPERTY


COMMANDS = {
    "algebra-check": cmd_algebra_check,
    "lift": cmd_lift,
    "integrate": cmd_integrate,
    "solve": cmd_solve,
    "ult": cmd_ult,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hopfrough", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--preset", help="built-in configuration name")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seed", type=int, default=None, help="random seed (default: config value or 0)")
        p.add_argument("--tol", type=float, default=None, help="refinement tolerance for rough integrals")
        p.add_argument("--max-depth", type=int, default=None, help="maximum dyadic refinement depth")
    return parser


def load_config(args) -> dict:
    cfg: dict = {}
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    if args.preset:
        cfg = dict(cfg, preset=args.preset)
    return cfg


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("HOPFROUGH_LOG", "warn").upper()
    level = {"WARN": "WARNING"}.get(level, level)
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        seed = cfg.pop("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        args.seed = seed if args.seed is None else args.seed
        if args.command in ("solve", "integrate", "lift") and not cfg:
            raise ConfigError("a --config or --preset is required")
        return COMMANDS[args.command](cfg, args.out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, NonConvergenceError) as exc:
        print(f"nonconvergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (IntegrationError, ControlledPathError, RoughPathError, ControlError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
