"""Sewing of almost-increments by refined Riemann sums, and rough integrals of controlled paths."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .controls import Control, jump_set, partition_small
from .controlled_path import (
    ControlledPath,
    element_norm,
    remainder_norm,
    remainder_table,
    crp_norm,
    sup_norm,
)
from .rough_path import RoughPath, rp_norm

DEFAULT_TOL = 1e-8
DEFAULT_MAX_DEPTH = 18
DEFAULT_CHUNK = 1 << 18


class IntegrationError(ValueError):
    pass


class NonConvergenceError(IntegrationError):
    """Refinement reached ``max_depth`` while successive sums still moved by ≥ tol."""

    def __init__(self, message: str, last: np.ndarray, previous: np.ndarray, depth: int, delta: float):
        super().__init__(message)
        self.last = last
        self.previous = previous
        self.depth = depth
        self.delta = delta


@dataclass
class AlmostIncrement:
    """Two-parameter map Ξ with values in ℝ^e, evaluated on arrays of pairs."""

    batch: Callable[[np.ndarray, np.ndarray], np.ndarray]
    e: int
    meta: dict = field(default_factory=dict)

    def __call__(self, s: float, t: float) -> np.ndarray:
        return self.batch(np.array([float(s)]), np.array([float(t)]))[0]


@dataclass
class IntegralResult:
    """Sewn increments over the cells of an anchor partition.

    ``cells`` are the anchor points; ``cell_values[k]`` is the limit over
    ``[cells[k], cells[k+1]]``. ``depth`` is the coarsest dyadic level whose
    sums already agree with the next level within ``tol``.
    """

    cells: np.ndarray
    cell_values: np.ndarray
    depth: int
    last_delta: float
    tol: float
    previous: np.ndarray | None = None

    @property
    def value(self) -> np.ndarray:
        return self.cell_values.sum(axis=0)

    @property
    def cumulative(self) -> np.ndarray:
        out = np.zeros((len(self.cells), self.cell_values.shape[1]))
        out[1:] = np.cumsum(self.cell_values, axis=0)
        return out

    def increment(self, s: float, t: float) -> np.ndarray:
        """IΞ_st for anchor points s ≤ t."""
        cum = self.cumulative
        i, j = _anchor_index(self.cells, s), _anchor_index(self.cells, t)
        if i > j:
            raise IntegrationError(f"increment needs s ≤ t, got {s} > {t}")
        return cum[j] - cum[i]


def _anchor_index(cells: np.ndarray, t: float) -> int:
    k = int(np.searchsorted(cells, t))
    for j in (k, k - 1):
        if 0 <= j < len(cells) and abs(cells[j] - t) <= 1e-12 * max(1.0, abs(t)):
            return j
    raise IntegrationError(f"{t} is not an anchor point")


def level_sums(xi: Callable[[np.ndarray, np.ndarray], np.ndarray], cells: np.ndarray, level: int,
               e: int, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Riemann sums of Ξ over each anchor cell split into 2^level equal pieces."""
    left, right = cells[:-1], cells[1:]
    width = right - left
    n = 1 << level
    total = len(left) * n
    out = np.zeros((len(left), e))
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        cell, sub = np.divmod(idx, n)
        u = left[cell] + width[cell] * (sub / n)
        v = np.where(sub + 1 == n, right[cell], left[cell] + width[cell] * ((sub + 1) / n))
        vals = np.asarray(xi(u, v), dtype=float).reshape(len(idx), e)
        for c in range(e):
            out[:, c] += np.bincount(cell, weights=vals[:, c], minlength=len(left))
    return out


def sew(xi: Callable[[np.ndarray, np.ndarray], np.ndarray], cells: Sequence[float], e: int, *,
        tol: float = DEFAULT_TOL, max_depth: int = DEFAULT_MAX_DEPTH, depth: int | None = None,
        chunk: int = DEFAULT_CHUNK) -> IntegralResult:
    """Dyadic refinement of every anchor cell until the partial sums settle.

    The stopping rule compares the running sums at every anchor point between
    consecutive levels. With ``depth`` given, that single level is returned
    without a convergence test.
    """
    cells = np.asarray(sorted(set(float(c) for c in cells)), dtype=float)
    if len(cells) < 2:
        return IntegralResult(cells, np.zeros((0, e)), 0, 0.0, tol)
    if depth is not None:
        sums = level_sums(xi, cells, depth, e, chunk)
        return IntegralResult(cells, sums, depth, float("nan"), tol)
    if not tol > 0:
        raise IntegrationError("tol must be positive")
    previous = level_sums(xi, cells, 0, e, chunk)
    delta = float("inf")
    older = previous
    for level in range(1, max_depth + 1):
        current = level_sums(xi, cells, level, e, chunk)
        delta = float(np.max(np.abs(np.cumsum(current - previous, axis=0)), initial=0.0))
        if delta < tol:
            return IntegralResult(cells, current, level - 1, delta, tol, previous)
        older, previous = previous, current
    raise NonConvergenceError(
        f"Riemann sums still moved by {delta:.3e} ≥ tol={tol:.1e} at depth {max_depth}",
        previous.sum(axis=0), older.sum(axis=0), max_depth, delta,
    )


def anchor_partition(omega: Control, s: float, t: float, eps: float | None = None,
                     extra: Sequence[float] = ()) -> np.ndarray:
    """Control-adapted cells of [s, t] with detected jump times on the boundaries."""
    if eps is None:
        eps = max(omega(s, t) / 8.0, 1e-12)
    points = {float(s), float(t)}
    points |= {p for p in partition_small(omega, eps) if s < p < t}
    points |= {p for p in jump_set(omega, eps) if s < p < t}
    points |= {float(p) for p in extra if s < p < t}
    return np.array(sorted(points))


def rrs_integral(xi: AlmostIncrement, omega: Control, s: float, t: float, *, tol: float = DEFAULT_TOL,
                 max_depth: int = DEFAULT_MAX_DEPTH, eps: float | None = None,
                 extra: Sequence[float] = (), chunk: int = DEFAULT_CHUNK) -> IntegralResult:
    """RRS limit of the Riemann sums of Ξ over [s, t]."""
    if s > t:
        raise IntegrationError(f"integration bounds out of order: {s} > {t}")
    cells = anchor_partition(omega, s, t, eps, extra) if t > s else np.array([float(s)])
    return sew(xi.batch, cells, xi.e, tol=tol, max_depth=max_depth, chunk=chunk)


# -- almost-increments of controlled paths -------------------------------------


def _check_letter(X: RoughPath, i: int) -> None:
    if not 1 <= i <= X.algebra.d:
        raise IntegrationError(f"letter {i} outside 1..{X.algebra.d}")


def graft_transpose(alg, i: int, xi: np.ndarray) -> np.ndarray:
    """ᵗL_i on functionals: ``<ᵗL_i ξ, x> = <ξ, L_i x>``."""
    target = alg.graft[i - 1]
    out = np.zeros(xi.shape)
    mask = target >= 0
    out[..., mask] = xi[..., target[mask]]
    return out


def xi(Z: ControlledPath, X: RoughPath, i: int, s: float, t: float) -> np.ndarray:
    """Ξ^i_st = <X_st, L_i(Z_s)> for a grid time s."""
    _check_letter(X, i)
    alg = Z.algebra
    grafted = alg.apply_graft(i, Z.at(s))
    return grafted @ X(s, t)


def xi_dual(Z: ControlledPath, X: RoughPath, i: int, s: float, t: float) -> np.ndarray:
    """The same value computed as <ᵗL_i X_st, Z_s>."""
    _check_letter(X, i)
    return Z.at(s) @ graft_transpose(Z.algebra, i, X(s, t))


@dataclass
class DeltaXiReport:
    identity_defect: float
    max_ratio: float
    bound_scale: float
    triples: int

    @property
    def passed(self) -> bool:
        return self.identity_defect <= 1e-12 * max(1.0, self.bound_scale) and self.max_ratio <= 1 + 1e-10


def _triples(n: int, limit: int | None, seed: int) -> np.ndarray:
    all_triples = np.array(list(itertools.combinations(range(n), 3)), dtype=int).reshape(-1, 3)
    if limit is not None and len(all_triples) > limit:
        pick = np.random.default_rng(seed).choice(len(all_triples), size=limit, replace=False)
        all_triples = all_triples[np.sort(pick)]
    return all_triples


def delta_xi_check(Z: ControlledPath, X: RoughPath, i: int, *, max_triples: int | None = 2000,
                   seed: int = 0) -> DeltaXiReport:
    """Check Ξ_su + Ξ_ut - Ξ_st = <X_ut, L_i(R_su)> and its size bound on grid triples."""
    _check_letter(X, i)
    alg = Z.algebra
    N, gamma = alg.N, X.gamma
    tri = _triples(len(Z.times), max_triples, seed)
    if len(tri) == 0:
        return DeltaXiReport(0.0, 0.0, 0.0, 0)
    s, u, t = (Z.times[tri[:, k]] for k in range(3))
    Zs, Zu = Z.values[tri[:, 0]], Z.values[tri[:, 1]]
    X_st, X_su, X_ut = X.batch(s, t), X.batch(s, u), X.batch(u, t)

    def pair(chars, vals):
        return np.einsum("pd,ped->pe", chars, alg.apply_graft(i, vals))

    delta = pair(X_su, Zs) + pair(X_ut, Zu) - pair(X_st, Zs)
    _, _, R_su = remainder_table(Z, X, tri[:, 0], tri[:, 1])
    identity = np.einsum("pd,ped->pe", graft_transpose(alg, i, X_ut), R_su)
    defect = float(np.max(np.abs(delta - identity)))

    x_norm = rp_norm(X, Z.times)
    z_norm = crp_norm(Z, X)
    w_su, w_ut = X.control.batch(s, u), X.control.batch(u, t)
    series = sum(w_ut ** (j * gamma) * w_su ** ((N + 1 - j) * gamma) for j in range(1, N + 1))
    scale = alg.graft_norm(i) * x_norm * z_norm
    size = np.max(np.abs(delta), axis=-1)
    bound = scale * series
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, size / bound, np.where(size > 1e-12, np.inf, 0.0))
    return DeltaXiReport(defect, float(np.max(ratio)), float(np.max(np.abs(delta), initial=0.0)), len(tri))


def interpolated_increment(Z: ControlledPath, X: RoughPath, i: int) -> AlmostIncrement:
    """Ξ^i for Z extended inside grid cells.

    Between grid times t_k < u < t_{k+1} the path is
    Y_u = T_{t_k u} Z_{t_k} + θ(u) R_{t_k t_{k+1}} with θ = ω(t_k, u) / ω(t_k, t_{k+1}),
    which matches Z at both ends and freezes at the left limit across a jump
    sitting at the right end.
    """
    _check_letter(X, i)
    alg = Z.algebra
    times = Z.times
    last = len(times) - 1
    if last >= 1:
        _, _, cell_R = remainder_table(Z, X, np.arange(last), np.arange(1, last + 1))
        cell_w = X.control.batch(times[:-1], times[1:])
    else:
        cell_R = np.zeros((0,) + Z.values.shape[1:])
        cell_w = np.zeros(0)

    def batch(s: np.ndarray, t: np.ndarray) -> np.ndarray:
        k = np.clip(np.searchsorted(times, s, side="right") - 1, 0, max(last - 1, 0))
        t_k = times[k]
        Y = alg.transport(X.batch(t_k, s)[:, None, :], Z.values[k])
        if last >= 1:
            w = cell_w[k]
            theta = np.where(w > 0, X.control.batch(t_k, s) / np.where(w > 0, w, 1.0), 0.0)
            Y = Y + theta[:, None, None] * cell_R[k]
        return np.einsum("pd,ped->pe", graft_transpose(alg, i, X.batch(s, t)), Y)

    return AlmostIncrement(batch, Z.e, {"letter": i, "kind": "controlled"})


@dataclass
class ControlledIntegral:
    """The controlled path ∫Z dX^i with its sewing diagnostics."""

    path: ControlledPath
    increments: np.ndarray
    result: IntegralResult
    letter: int

    @property
    def depth(self) -> int:
        return self.result.depth

    @property
    def last_delta(self) -> float:
        return self.result.last_delta


def grid_anchor(Z: ControlledPath, X: RoughPath) -> np.ndarray:
    lo, hi = Z.times[0], Z.times[-1]
    extra = [b for b in X.control.breakpoints if lo < b < hi]
    return np.array(sorted(set(Z.times.tolist()) | set(extra)))


def integral_controlled(Z: ControlledPath, X: RoughPath, i: int, *, tol: float = DEFAULT_TOL,
                        max_depth: int = DEFAULT_MAX_DEPTH, depth: int | None = None,
                        chunk: int = DEFAULT_CHUNK) -> ControlledIntegral:
    """∫_0^t Z dX^i := L_i(Z_t) + (∫_0^t Z_r dX^i_r)·1 on the grid of Z.

    Only the degrees ≤ N - 1 of Z enter, since L_i kills the top degree.
    The anchor partition is the grid of Z plus the breakpoints of the control.
    """
    _check_letter(X, i)
    alg = Z.algebra
    Zt = Z.truncated() if not Z.is_truncated else Z
    anchor = grid_anchor(Zt, X)
    result = sew(interpolated_increment(Zt, X, i).batch, anchor, Zt.e,
                 tol=tol, max_depth=max_depth, depth=depth, chunk=chunk)
    cum = result.cumulative
    on_grid = np.searchsorted(anchor, Zt.times)
    integral = cum[on_grid]
    values = alg.apply_graft(i, Zt.values)
    values[:, :, 0] += integral
    return ControlledIntegral(ControlledPath(alg, Zt.times, values), integral, result, i)


def remainder_identity_defect(Z: ControlledPath, X: RoughPath, integral: ControlledIntegral) -> float:
    """max over grid pairs of |R(∫Z dX^i) - r·1 - L_i(R(Z))| with r = IΞ - Ξ."""
    alg = Z.algebra
    i = integral.letter
    Zt = Z.truncated() if not Z.is_truncated else Z
    a, b, R_int = remainder_table(integral.path, X)
    _, _, R_Z = remainder_table(Zt, X, a, b)
    X_ab = X.batch(Zt.times[a], Zt.times[b])
    xi_ab = np.einsum("pd,ped->pe", X_ab, alg.apply_graft(i, Zt.values[a]))
    r = integral.increments[b] - integral.increments[a] - xi_ab
    rhs = alg.apply_graft(i, R_Z)
    rhs[:, :, 0] += r
    return float(np.max(np.abs(R_int - rhs), initial=0.0))


@dataclass
class SewingReport:
    max_ratio: float
    pairs: int
    scale: float

    @property
    def calibrated_constant(self) -> float:
        return self.max_ratio


def sewing_error_check(Z: ControlledPath, X: RoughPath, integral: ControlledIntegral) -> SewingReport:
    """Ratios ‖IΞ_st - Ξ_st‖ / (N ‖L_i‖ ‖X‖ ‖Z‖ ω(s,t)^{(N+1)γ}) over grid pairs."""
    alg = Z.algebra
    i = integral.letter
    Zt = Z.truncated() if not Z.is_truncated else Z
    a, b = np.triu_indices(len(Zt.times), k=1)
    X_ab = X.batch(Zt.times[a], Zt.times[b])
    xi_ab = np.einsum("pd,ped->pe", X_ab, alg.apply_graft(i, Zt.values[a]))
    gap = np.max(np.abs(integral.increments[b] - integral.increments[a] - xi_ab), axis=-1)
    scale = alg.N * alg.graft_norm(i) * rp_norm(X, Zt.times) * crp_norm(Zt, X)
    w = X.control.batch(Zt.times[a], Zt.times[b]) ** ((alg.N + 1) * X.gamma)
    bound = scale * w
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, gap / bound, np.where(gap > 1e-12, np.inf, 0.0))
    return SewingReport(float(np.max(ratio, initial=0.0)), len(a), scale)


def export_integral_csv(rows: Sequence[tuple[float, float, np.ndarray, int, float]], path) -> None:
    """Rows of (s, t, value vector, depth, last_delta)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "t", "component", "value", "depth", "last_delta"])
        for s, t, value, depth, delta in rows:
            for c, v in enumerate(np.atleast_1d(value)):
                writer.writerow([repr(float(s)), repr(float(t)), c, repr(float(v)), depth, repr(float(delta))])
