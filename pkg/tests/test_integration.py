from __future__ import annotations

import csv

import numpy as np
import pytest

from hopfrough.controlled_path import ControlledPath, compose_smooth, make_field, transported_path
from hopfrough.controls import holder_control, pvar_control, sum_control
from hopfrough.integration import (
    AlmostIncrement,
    IntegrationError,
    NonConvergenceError,
    anchor_partition,
    delta_xi_check,
    export_integral_csv,
    graft_transpose,
    integral_controlled,
    level_sums,
    remainder_identity_defect,
    rrs_integral,
    sew,
    sewing_error_check,
    xi,
)
from hopfrough.rough_path import jump_lift, pure_area_lift, signature_lift
from conftest import algebra, random_controlled, random_driver


def scalar(fn):
    return AlmostIncrement(lambda s, t: fn(s, t)[..., None], 1)


def test_young_integral_of_identity():
    res = rrs_integral(scalar(lambda s, t: s * (t - s)), holder_control(1.0), 0.0, 1.0, tol=2e-7, max_depth=24)
    assert abs(res.value[0] - 0.5) <= 1e-6


def test_young_integral_of_square():
    res = rrs_integral(scalar(lambda s, t: s * s * (t - s)), holder_control(2.0), 0.0, 2.0, tol=1e-6, max_depth=24)
    assert res.value[0] == pytest.approx(8 / 3, abs=2e-5)


def test_jump_integral_picks_left_value():
    step = lambda u: (u >= 0.5).astype(float)
    omega = sum_control(pvar_control([0, 0.5, 1], [[0], [1], [1]], 1.0), holder_control(1.0))
    res = rrs_integral(scalar(lambda s, t: s * (step(t) - step(s))), omega, 0.0, 1.0, tol=2e-7, max_depth=24)
    assert 0.5 in res.cells
    assert abs(res.value[0] - 0.5) <= 1e-6


def test_additive_increment_needs_no_refinement():
    res = rrs_integral(scalar(lambda s, t: 3.0 * (t - s)), holder_control(1.0), 0.0, 1.0)
    assert res.depth == 0 and res.value[0] == pytest.approx(3.0)
    assert res.increment(0.0, 1.0)[0] == pytest.approx(3.0)


def test_level_sums_add_up():
    cells = np.array([0.0, 0.25, 1.0])
    f = lambda s, t: (s * (t - s))[..., None]
    fine = level_sums(f, cells, 3, 1, chunk=5)
    assert fine.shape == (2, 1)
    grid = np.concatenate([np.linspace(0, 0.25, 9)[:-1], np.linspace(0.25, 1, 9)])
    assert fine.sum() == pytest.approx(np.sum(grid[:-1] * np.diff(grid)))


def test_frozen_depth_and_nonconvergence():
    f = lambda s, t: (s * (t - s))[..., None]
    frozen = sew(f, [0.0, 1.0], 1, depth=4)
    assert frozen.depth == 4 and frozen.value[0] == pytest.approx(0.5 - 1 / 32)
    with pytest.raises(NonConvergenceError) as info:
        sew(f, [0.0, 1.0], 1, tol=1e-12, max_depth=5)
    assert info.value.depth == 5
    with pytest.raises(IntegrationError):
        rrs_integral(scalar(lambda s, t: t - s), holder_control(1.0), 1.0, 0.5)


def test_anchor_partition_contains_jumps():
    omega = sum_control(holder_control(1.0), pvar_control([0, 0.3, 1.0], [[0], [4], [4]], 1.0))
    cells = anchor_partition(omega, 0.0, 1.0)
    assert cells[0] == 0.0 and cells[-1] == 1.0 and 0.3 in cells


def letter_path(X, letter, times):
    alg = X.algebra
    z0 = np.zeros((1, alg.dim))
    z0[0, alg.index[(letter,)]] = 1.0
    return transported_path(X, z0, times)


def test_iterated_integral_matches_signature(rng):
    alg = algebra("Shuffle", 2, 2)
    times = np.linspace(0, 1, 5)
    X = signature_lift(times, np.cumsum(rng.normal(size=(5, 2)), axis=0), alg, 0.5)
    Z = letter_path(X, 1, np.linspace(0, 1, 17))
    out = integral_controlled(Z, X, 2, tol=1e-9, max_depth=20)
    assert out.increments[-1, 0] == pytest.approx(X(0.0, 1.0)[alg.index[(1, 2)]], abs=1e-7)
    # the integral path carries x^1 then letter 2 grafted on top of letter 1
    assert out.path.values[-1, 0, alg.index[(1, 2)]] == 1.0


def test_pure_area_integral_is_exact():
    alg = algebra("Shuffle", 2, 2)
    X = pure_area_lift(0.5, alg, 0.5)
    Z = letter_path(X, 1, np.linspace(0, 1, 9))
    out = integral_controlled(Z, X, 2)
    assert np.allclose(out.increments[:, 0], 0.5 * Z.times, atol=1e-14)
    assert remainder_identity_defect(Z, X, out) <= 1e-12


def test_jump_driver_integral():
    alg = algebra("Shuffle", 1, 2)
    X = jump_lift([0.0, 0.5, 1.0], [[0.0], [1.0], [1.0]], alg, 0.5)
    Z = letter_path(X, 1, [0.0, 0.5, 1.0])
    out = integral_controlled(Z, X, 1)
    # ∫ x dx over a unit jump from 0 is the level-two coefficient 1/2
    assert out.increments[-1, 0] == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("kind", ["Shuffle", "BCK"])
def test_delta_xi_identity_and_bound(rng, kind):
    for smooth in (None, "sin"):
        X = random_driver(rng, kind, N=2)
        Z = random_controlled(rng, X, smooth=smooth)
        for i in (1, 2):
            rep = delta_xi_check(Z, X, i)
            assert rep.identity_defect <= 1e-12
            assert rep.max_ratio <= 1.0 + 1e-10
            assert rep.triples > 0


@pytest.mark.parametrize("kind", ["Shuffle", "BCK"])
def test_remainder_identity(rng, kind):
    X = random_driver(rng, kind, N=2)
    Z = random_controlled(rng, X, smooth="exp")
    out = integral_controlled(Z, X, 1, tol=1e-6)
    assert remainder_identity_defect(Z, X, out) <= 1e-10
    rep = sewing_error_check(Z, X, out)
    assert np.isfinite(rep.max_ratio) and rep.pairs == len(Z.times) * (len(Z.times) - 1) // 2


def test_xi_reads_grafted_value(rng):
    X = random_driver(rng)
    Z = random_controlled(rng, X)
    alg = X.algebra
    s, t = Z.times[2], Z.times[5]
    want = X(s, t) @ alg.apply_graft(1, Z.at(s)).T
    assert np.allclose(xi(Z, X, 1, s, t), want)
    fn = rng.normal(size=alg.dim)
    x = rng.normal(size=alg.dim)
    assert graft_transpose(alg, 2, fn) @ x == pytest.approx(fn @ alg.apply_graft(2, x))
    with pytest.raises(IntegrationError):
        xi(Z, X, 3, s, t)


def test_integral_of_composed_path_on_smooth_driver():
    # φ(x) = sin(x) along x_t = t gives ∫ sin(t) dt = 1 - cos(1); the grid error is second order
    alg = algebra("Shuffle", 1, 2)
    X = signature_lift([0.0, 1.0], [[0.0], [1.0]], alg, 0.5)
    errors = []
    for n in (16, 32, 64):
        Z = compose_smooth(make_field("sin", 1), letter_path(X, 1, np.linspace(0, 1, n + 1)))
        out = integral_controlled(Z, X, 1, tol=1e-10, max_depth=24)
        errors.append(abs(out.increments[-1, 0] - (1 - np.cos(1.0))))
    assert errors[-1] < 1e-5
    assert 3.5 < errors[0] / errors[1] < 4.5 and 3.5 < errors[1] / errors[2] < 4.5


def test_export_integral_csv(tmp_path):
    path = tmp_path / "int.csv"
    export_integral_csv([(0.0, 1.0, np.array([0.5, 0.25]), 3, 1e-9)], path)
    rows = list(csv.DictReader(open(path)))
    assert [r["value"] for r in rows] == ["0.5", "0.25"]
    assert rows[0]["depth"] == "3"


def test_integral_path_is_orthogonal_to_other_grafts(rng):
    X = random_driver(rng, "BCK", N=2)
    Z = random_controlled(rng, X, smooth="sin")
    out = integral_controlled(Z, X, 1, tol=1e-6)
    alg = X.algebra
    other = alg.apply_graft(2, np.eye(alg.dim))
    assert not np.any(np.einsum("ted,kd->tek", out.path.values, other))
