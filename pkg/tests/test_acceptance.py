"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import filecmp
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import expm

sys.path.insert(0, str(Path(__file__).parent))

from hopfrough import hopf_core as hc
from hopfrough.controlled_path import constant_path, estimate_suite, make_field
from hopfrough.controls import holder_control, pvar_control, sum_control
from hopfrough.integration import (
    AlmostIncrement,
    delta_xi_check,
    integral_controlled,
    remainder_identity_defect,
    rrs_integral,
)
from hopfrough.rde import (
    RdeProblem,
    formal_distance,
    linear_expansion_oracle,
    perturb_driver,
    perturb_fields,
    perturb_initial,
    solve_global,
    solve_local,
    ult_experiment,
)
from hopfrough.rough_path import (
    branched_lift,
    character_defect,
    chen_defect,
    jump_lift,
    pure_area_lift,
    signature_lift,
)
from conftest import ACCEPTANCE_LINES, AREA_A1, AREA_A2, algebra, random_controlled, random_driver


def report(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number:02d} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_01_hopf_axioms():
    start = time.perf_counter()
    worst = {}
    specs = [("Shuffle", d, N) for d in (1, 2) for N in range(1, 5)]
    specs += [("BCK", d, N) for d in (1, 2) for N in range(1, 5)]
    specs += [("MKW", 1, N) for N in range(1, 5)]
    for kind, d, N in specs:
        rep = hc.axiom_report(hc.build_algebra(kind, d, N))
        for name in ("coassociativity", "counit", "compatibility", "cocycle", "graft_isometry"):
            worst[name] = max(worst.get(name, 0.0), rep[name])
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-12 and elapsed < 30.0
    report(1, "Hopf axiom suite", ok, f"{len(specs)} algebras, max defect {max(worst.values()):.1e}, {elapsed:.1f}s")


def test_02_basis_counts():
    got = {
        "BCK": hc.build_algebra("BCK", 1, 4).dims(),
        "MKW": hc.build_algebra("MKW", 1, 4).dims(),
        "Shuffle": hc.build_algebra("Shuffle", 2, 4).dims(),
    }
    want = {"BCK": [1, 1, 2, 4, 9], "MKW": [1, 1, 2, 5, 14], "Shuffle": [1, 2, 4, 8, 16]}
    report(2, "basis counts", got == want, str(got))


def test_03_chen_and_character():
    rng = np.random.default_rng(3)
    words = algebra("Shuffle", 2, 3)
    times = np.linspace(0.0, 1.0, 9)
    lifts = {
        "signature": signature_lift(times, np.cumsum(rng.normal(size=(9, 2)), axis=0), words, 1 / 3),
        "pure-area": pure_area_lift(0.7, algebra("Shuffle", 2, 2), 0.5),
        "jump": jump_lift(times, rng.normal(size=(9, 2)), words, 1 / 3),
        "arborified": branched_lift(signature_lift(times, rng.normal(size=(9, 2)), words, 1 / 3),
                                    algebra("BCK", 2, 3)),
    }
    triples = np.sort(rng.uniform(0.0, 1.0, size=(1000, 3)), axis=1)
    worst = 0.0
    for X in lifts.values():
        for s, u, t in triples:
            worst = max(worst, chen_defect(X, s, u, t), character_defect(X, s, t))
    report(3, "Chen and character", worst <= 1e-12, f"4 lifts x 1000 triples, max defect {worst:.1e}")


def test_04_arborification():
    defects = hc.arborification_defects(algebra("Shuffle", 2, 3), algebra("BCK", 2, 3))
    worst = max(defects.values())
    report(4, "arborification morphism", worst <= 1e-12, f"max defect {worst:.1e}")


def test_05_young_oracles():
    alg = algebra("Shuffle", 1, 1)
    X = signature_lift([0.0, 1.0], [[0.0], [1.0]], alg, 1.0)
    letter = alg.index[(1,)]
    smooth = AlmostIncrement(lambda s, t: (s * X.batch(s, t)[..., letter])[..., None], 1)
    young = rrs_integral(smooth, X.control, 0.0, 1.0, tol=2e-7, max_depth=24).value[0]

    J = jump_lift([0.0, 0.5, 1.0], [[0.0], [1.0], [1.0]], alg, 1.0)
    omega = sum_control(J.control, holder_control(1.0))
    jumpy = AlmostIncrement(lambda s, t: (s * J.batch(s, t)[..., letter])[..., None], 1)
    jump = rrs_integral(jumpy, omega, 0.0, 1.0, tol=2e-7, max_depth=24).value[0]
    ok = abs(young - 0.5) <= 1e-6 and abs(jump - 0.5) <= 1e-6
    report(5, "Young oracles", ok, f"smooth error {abs(young - 0.5):.1e}, jump error {abs(jump - 0.5):.1e}")


def test_06_estimate_suite():
    rng = np.random.default_rng(6)
    paths = 0
    failures = []
    worst_ratio = 0.0
    for k in range(104):
        kind = ("Shuffle", "BCK")[k % 2]
        smooth = (None, "sin", "exp", "quadratic")[(k // 2) % 4]
        X = random_driver(rng, kind, N=2 + (k % 3 == 0))
        Z = random_controlled(rng, X, smooth=smooth)
        rep = estimate_suite(Z, X, tol=1e-10)
        failures += rep.failures()
        for i in (1, 2):
            dx = delta_xi_check(Z, X, i, max_triples=300, seed=k)
            worst_ratio = max(worst_ratio, dx.max_ratio)
            if dx.max_ratio > 1.0 + 1e-10 or dx.identity_defect > 1e-10:
                failures.append(f"delta-xi letter {i}: ratio {dx.max_ratio}, identity {dx.identity_defect}")
        paths += 1
    report(6, "estimate suite", not failures,
           f"{paths} paths, {len(failures)} violations, worst delta-xi ratio {worst_ratio:.3f}")


def test_07_remainder_identity():
    rng = np.random.default_rng(7)
    worst = 0.0
    count = 0
    for k in range(20):
        X = random_driver(rng, ("Shuffle", "BCK")[k % 2], N=2)
        Z = random_controlled(rng, X, smooth=(None, "sin", "exp")[k % 3])
        integral = integral_controlled(Z, X, 1 + k % 2, tol=1e-6)
        worst = max(worst, remainder_identity_defect(Z, X, integral))
        count += 1
    report(7, "remainder identity", worst <= 1e-10, f"{count} integrals, max defect {worst:.1e}")


ACCEPTED: list = []


def test_08_exponential_rde():
    start = time.perf_counter()
    alg = algebra("Shuffle", 1, 1)
    X = signature_lift([0.0, 2.0], [[0.0], [2.0]], alg, 1.0)
    identity = [make_field("identity", 1)]
    local = solve_local(RdeProblem(X, identity, [1.0], 1.0, n_cells=128, rrs_tol=1e-5))
    chained = solve_global(RdeProblem(X, identity, [1.0], 2.0, n_cells=128, rrs_tol=1e-5, delta=0.51))
    elapsed = time.perf_counter() - start
    ACCEPTED.extend([local, *chained.cells])
    e1 = abs(local.path.base_path[-1, 0] - np.e)
    e2 = abs(chained.final_value[0] - np.e**2)
    ok = e1 <= 1e-4 and e2 <= 1e-3 and elapsed < 10.0
    report(8, "exponential RDE", ok, f"|Z_1-e| {e1:.1e}, |Z_2-e^2| {e2:.1e} over {len(chained.cells)} cells, "
                                     f"{elapsed:.1f}s")


def area_problem(**kw):
    X = pure_area_lift(0.5, algebra("Shuffle", 2, 2), 0.5)
    fields = [make_field("linear", 2, {"A": AREA_A1}), make_field("linear", 2, {"A": AREA_A2})]
    return RdeProblem(X, fields, [1.0, 0.5], 1.0, **{"n_cells": 64, "rrs_tol": 1e-6, **kw})


def test_09_level_two_rde():
    problem = area_problem()
    sol = solve_local(problem)
    ACCEPTED.append(sol)
    oracle = linear_expansion_oracle(problem.X, [AREA_A1, AREA_A2], problem.z0, 1.0, steps=2**10)
    gap = float(np.max(np.abs(sol.path.base_path[-1] - oracle)))
    closed = expm(0.5 * (AREA_A2 @ AREA_A1 - AREA_A1 @ AREA_A2)) @ problem.z0
    report(9, "level-2 RDE", gap <= 1e-4,
           f"gap to expansion oracle {gap:.1e}, oracle vs closed form {np.max(np.abs(oracle - closed)):.1e}")


def test_10_contraction_and_uniqueness():
    problem = area_problem(n_cells=32)
    first = solve_local(problem)
    start = constant_path(problem.X.algebra, first.path.times, [3.0, -2.0])
    second = solve_local(problem, initial=start, depth=first.depth)
    solves = ACCEPTED + [first, second]
    rhos = [r for s in solves for r in s.rhos]
    gap = formal_distance(first.path, problem.X, second.path, problem.X)
    ok = all(s.rhos for s in solves) and max(rhos) < 1.0 and gap <= 5 * problem.tol
    report(10, "Picard contraction", ok, f"{len(solves)} solves, max rho {max(rhos):.3f}, uniqueness gap {gap:.1e}")


def test_11_ult_stability():
    problem = area_problem(n_cells=32)
    alg = problem.X.algebra
    channels = {
        "z0": perturb_initial([1.0, 0.0]),
        "phi": perturb_fields([make_field("linear", 2, {"A": 0.2 * AREA_A2}),
                               make_field("linear", 2, {"A": 0.2 * AREA_A1})]),
        "X": perturb_driver(lambda lam: pure_area_lift(0.5 + lam, alg, 0.5)),
    }
    spreads = {}
    for name, pert in channels.items():
        spreads[name] = ult_experiment(problem, pert, name, horizon=0.5).spread()
    zero = ult_experiment(problem, perturb_initial([0.0, 0.0]), "zero", horizon=0.5).distances
    ok = all(s <= 1.5 for s in spreads.values()) and all(d == 0.0 for d in zero)
    detail = ", ".join(f"{k} spread {v:.3f}" for k, v in spreads.items())
    report(11, "ULT stability", ok, f"{detail}, zero-perturbation max {max(zero):.1e}")


def cli(args, out):
    env = dict(os.environ, HOPFROUGH_LOG="warning")
    return subprocess.run([sys.executable, "-m", "hopfrough", *args, "--out", str(out)],
                          capture_output=True, text=True, env=env)


def test_12_determinism(tmp_path):
    runs = [
        ["solve", "--preset", "pure-area"],
        ["lift", "--preset", "exponential", "--seed", "11"],
        ["ult", "--preset", "z0-perturbation"],
        ["algebra-check"],
    ]
    brownian = tmp_path / "brownian.json"
    brownian.write_text('{"algebra": {"kind": "BCK", "d": 2, "N": 2}, "gamma": 0.45, "T": 1.0,'
                        ' "driver": {"kind": "brownian", "steps": 32}, "grid": 4, "triples": 50}')
    runs.append(["lift", "--config", str(brownian), "--seed", "5"])
    mismatched = []
    for k, args in enumerate(runs):
        first, second = tmp_path / f"a{k}", tmp_path / f"b{k}"
        codes = [cli(args, first).returncode, cli(args, second).returncode]
        cmp = filecmp.dircmp(first, second)
        names = sorted(p.name for p in first.iterdir())
        same = not cmp.left_only and not cmp.right_only and all(
            (first / n).read_bytes() == (second / n).read_bytes() for n in names)
        if codes != [0, 0] or not same:
            mismatched.append(" ".join(args))
    report(12, "determinism", not mismatched, f"{len(runs)} commands run twice, mismatches {mismatched or 'none'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
