from __future__ import annotations

import csv

import numpy as np
import pytest
from scipy.linalg import expm

from hopfrough.controlled_path import constant_path, make_field
from hopfrough.rde import (
    RdeProblem,
    SolverError,
    base_residual,
    concatenate,
    fixed_point_residual,
    formal_distance,
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
from hopfrough.rough_path import jump_lift, pure_area_lift, signature_lift
from conftest import AREA_A1, AREA_A2, algebra


def line(T=1.0, slope=1.0):
    return signature_lift([0.0, T], [[0.0], [slope * T]], algebra("Shuffle", 1, 1), 1.0)


def area_problem(area=0.5, **kw):
    X = pure_area_lift(area, algebra("Shuffle", 2, 2), 0.5)
    fields = [make_field("linear", 2, {"A": AREA_A1}), make_field("linear", 2, {"A": AREA_A2})]
    return RdeProblem(X, fields, [1.0, 0.5], 1.0, **{"n_cells": 32, "rrs_tol": 1e-6, **kw})


def test_zero_field_keeps_the_initial_value():
    sol = solve_local(RdeProblem(line(), [make_field("zero", 1)], [1.5], 1.0, n_cells=8))
    assert np.all(sol.path.base_path == 1.5)
    assert sol.iterations <= 2


def test_constant_field_is_exact():
    X = signature_lift([0, 0.5, 1.0], [[0.0], [0.8], [0.3]], algebra("Shuffle", 1, 2), 0.5)
    sol = solve_local(RdeProblem(X, [make_field("constant", 1, {"c": [2.0]})], [1.0], 1.0, n_cells=8))
    want = 1.0 + 2.0 * np.array([X(0.0, t)[1] for t in sol.path.times])
    assert np.allclose(sol.path.base_path[:, 0], want, atol=1e-12)


def test_exponential_local_solve():
    sol = solve_local(RdeProblem(line(), [make_field("identity", 1)], [1.0], 1.0, n_cells=32, rrs_tol=1e-5))
    assert abs(sol.path.base_path[-1, 0] - np.e) < 2e-3
    assert sol.rhos and max(sol.rhos) < 1.0


def test_pure_area_matches_expansion_and_commutator():
    problem = area_problem()
    sol = solve_local(problem)
    oracle = linear_expansion_oracle(problem.X, [AREA_A1, AREA_A2], problem.z0, 1.0)
    assert np.max(np.abs(sol.path.base_path[-1] - oracle)) < 1e-4
    # a pure area a(t-s) on the word 12 drives exp(a [A2, A1]) z0
    exact = expm(0.5 * (AREA_A2 @ AREA_A1 - AREA_A1 @ AREA_A2)) @ problem.z0
    assert np.max(np.abs(oracle - exact)) < 1e-5
    assert max(sol.rhos) < 1.0


def test_uniqueness_probe():
    problem = area_problem()
    first = solve_local(problem)
    start = constant_path(problem.X.algebra, first.path.times, [3.0, -2.0])
    second = solve_local(problem, initial=start, depth=first.depth)
    assert formal_distance(first.path, problem.X, second.path, problem.X) <= 5 * problem.tol
    assert fixed_point_residual(first, problem) <= 10 * problem.tol


def test_base_residual_small():
    problem = area_problem()
    sol = solve_local(problem)
    assert base_residual(sol.path, problem, sol.depth) < 1e-9


def test_jump_driver_gives_truncated_exponential():
    X = jump_lift([0.0, 0.3, 1.0], [[0.0], [0.5], [0.5]], algebra("Shuffle", 1, 2), 0.5)
    sol = solve_global(RdeProblem(X, [make_field("identity", 1)], [1.0], 1.0, n_cells=16))
    assert sol.final_value[0] == pytest.approx(1.625, abs=1e-12)
    before = sol.path.times < 0.3
    assert np.all(sol.base_path[before, 0] == 1.0)


def test_global_chaining_over_several_cells():
    problem = RdeProblem(line(2.0), [make_field("identity", 1)], [1.0], 2.0, n_cells=32, rrs_tol=1e-5,
                         delta=0.51)
    sol = solve_global(problem)
    assert len(sol.cells) >= 4
    assert sol.partition[0] == 0.0 and sol.partition[-1] == 2.0
    assert np.all(np.diff(sol.path.times) > 0)
    assert abs(sol.final_value[0] - np.e**2) < 2e-2


def test_concatenate_keeps_earlier_value():
    alg = algebra("Shuffle", 1, 1)
    a = constant_path(alg, [0.0, 0.5], [1.0])
    b = constant_path(alg, [0.5, 1.0], [2.0])
    joined = concatenate([a, b])
    assert list(joined.times) == [0.0, 0.5, 1.0]
    assert list(joined.base_path[:, 0]) == [1.0, 1.0, 2.0]


def test_problem_validation():
    X = line()
    with pytest.raises(SolverError):
        RdeProblem(X, [make_field("identity", 1)] * 2, [1.0], 1.0)
    with pytest.raises(SolverError):
        RdeProblem(X, [make_field("identity", 2)], [1.0], 1.0)
    with pytest.raises(SolverError):
        RdeProblem(X, [make_field("identity", 1)], [1.0], 2.0)


def test_iteration_budget_is_enforced():
    problem = RdeProblem(line(), [make_field("identity", 1)], [1.0], 1.0, n_cells=8, max_iter=3)
    with pytest.raises(SolverError) as info:
        solve_local(problem)
    assert len(info.value.differences) == 3


def test_ult_channels_scale_linearly():
    problem = area_problem()
    alg = problem.X.algebra
    reports = [
        ult_experiment(problem, perturb_initial([1.0, 0.0]), "z0", horizon=0.5),
        ult_experiment(problem, perturb_fields([make_field("linear", 2, {"A": 0.2 * AREA_A2}),
                                                make_field("linear", 2, {"A": 0.2 * AREA_A1})]), "phi",
                       horizon=0.5),
        ult_experiment(problem, perturb_driver(lambda lam: pure_area_lift(0.5 + lam, alg, 0.5)), "X",
                       horizon=0.5),
    ]
    for rep in reports:
        assert rep.within(1.5), (rep.channel, rep.ratios)
        assert rep.coefficient > 0


def test_zero_perturbation_is_exactly_zero():
    rep = ult_experiment(area_problem(), perturb_initial([0.0, 0.0]), "z0", horizon=0.5)
    assert rep.distances == [0.0] * 5


def test_writers(tmp_path):
    problem = area_problem(n_cells=8)
    sol = solve_local(problem)
    write_solution_csv(tmp_path / "s.csv", sol.path.times, sol.path.base_path)
    write_history_csv(tmp_path / "h.csv", [sol])
    rep = ult_experiment(problem, perturb_initial([1.0, 0.0]), "z0", scales=(1.0, 0.5))
    write_stability_csv(tmp_path / "u.csv", [rep])
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 2 * len(sol.path.times)
    hist = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert len(hist) == sol.iterations and hist[0]["rho"] == ""
    stab = list(csv.DictReader(open(tmp_path / "u.csv")))
    assert [r["scale"] for r in stab] == ["1.0", "0.5"]
