"""Picard iteration for rough differential equations driven by truncated rough paths."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .controlled_path import (
    ControlledPath,
    SmoothVectorField,
    compose_smooth,
    constant_path,
    crp_norm,
    element_norm,
    remainder_norm,
    remainder_table,
    sum_field,
)
from .controls import partition_small
from .integration import DEFAULT_MAX_DEPTH, IntegrationError, NonConvergenceError, integral_controlled
from .rough_path import RoughPath

log = logging.getLogger("hopfrough.rde")


class SolverError(RuntimeError):
    """Picard iteration failed; carries the history of successive differences."""

    def __init__(self, message: str, differences: Sequence[float] = (), rhos: Sequence[float] = (),
                 cell: tuple[float, float] | None = None):
        super().__init__(message)
        self.differences = list(differences)
        self.rhos = list(rhos)
        self.cell = cell


@dataclass
class RdeProblem:
    """dZ = Σ_i φ_i(Z) dX^i with Z_0 = z0, lifted to controlled paths."""

    X: RoughPath
    fields: list[SmoothVectorField]
    z0: np.ndarray
    T: float
    n_cells: int = 64
    tol: float = 1e-10
    max_iter: int = 60
    delta: float = 0.5
    rrs_tol: float = 1e-6
    max_depth: int = DEFAULT_MAX_DEPTH
    max_splits: int = 4
    freeze_below: float = 1e-5

    def __post_init__(self) -> None:
        self.z0 = np.atleast_1d(np.asarray(self.z0, dtype=float))
        alg = self.X.algebra
        if len(self.fields) != alg.d:
            raise SolverError(f"{len(self.fields)} vector fields given, the driver has d={alg.d}")
        for phi in self.fields:
            if (phi.e, phi.m) != (len(self.z0), len(self.z0)):
                raise SolverError(f"field {phi.name!r} maps ℝ^{phi.e} → ℝ^{phi.m}, state has e={len(self.z0)}")
            if phi.max_order < alg.N:
                raise SolverError(f"field {phi.name!r} lacks derivatives of order {alg.N}")
        if not 0 < self.T <= self.X.T + 1e-12:
            raise SolverError(f"horizon {self.T} outside (0, {self.X.T}]")

    @property
    def e(self) -> int:
        return len(self.z0)


def local_grid(problem: RdeProblem, start: float, end: float, n_cells: int | None = None) -> np.ndarray:
    n = problem.n_cells if n_cells is None else n_cells
    pts = set(np.linspace(start, end, n + 1).tolist())
    pts |= {float(b) for b in problem.X.control.breakpoints if start < b < end}
    return np.array(sorted(pts))


@dataclass
class PicardImage:
    path: ControlledPath
    levels: list[int]
    deltas: list[float]


def picard_map(Z: ControlledPath, problem: RdeProblem, z_start: np.ndarray | None = None,
               depth: int | None = None) -> PicardImage:
    """M(Z) = z_start·1 + Σ_i ∫ φ_i(Z) dX^i on the grid of Z.

    Without ``depth`` each integral refines until successive sums settle
    within ``problem.rrs_tol``; ``levels`` reports the level actually used.
    """
    z_start = problem.z0 if z_start is None else np.asarray(z_start, dtype=float)
    alg = Z.algebra
    values = np.zeros(Z.values.shape)
    values[:, :, 0] = z_start
    levels, deltas = [], []
    for i, phi in enumerate(problem.fields, start=1):
        image = compose_smooth(phi, Z)
        if not np.any(image.values):
            levels.append(0 if depth is None else depth)
            deltas.append(0.0)
            continue
        integral = integral_controlled(image, problem.X, i, tol=problem.rrs_tol,
                                       max_depth=problem.max_depth, depth=depth)
        values += integral.path.values
        levels.append(depth if depth is not None else integral.result.depth + 1)
        deltas.append(integral.last_delta)
    return PicardImage(ControlledPath(alg, Z.times, values), levels, deltas)


@dataclass
class LocalSolution:
    path: ControlledPath
    differences: list[float]
    rhos: list[float]
    depth: int
    iterations: int
    start: float
    end: float

    @property
    def final_rho(self) -> float:
        return self.rhos[-1] if self.rhos else 0.0


def solve_local(problem: RdeProblem, start: float = 0.0, end: float | None = None,
                z_start: np.ndarray | None = None, *, depth: int | None = None,
                initial: ControlledPath | None = None, n_cells: int | None = None) -> LocalSolution:
    """Picard iteration on [start, end] from the constant path z_start·1.

    While the iterates still move by more than ``freeze_below`` each
    integral refines until its sums settle; the largest level seen is then
    frozen so that the remaining iterations apply one fixed contraction. The
    ratios of successive differences measured under the frozen map must stay
    below 1.
    """
    end = problem.T if end is None else end
    z_start = problem.z0 if z_start is None else np.asarray(z_start, dtype=float)
    X = problem.X
    alg = X.algebra
    grid = local_grid(problem, start, end, n_cells) if initial is None else initial.times
    Z = constant_path(alg, grid, z_start) if initial is None else initial
    frozen = depth is not None
    level = depth if frozen else 0
    differences: list[float] = []
    rhos: list[float] = []
    frozen_at = 0 if frozen else None
    for k in range(1, problem.max_iter + 1):
        try:
            image = picard_map(Z, problem, z_start, depth=level if frozen else None)
        except NonConvergenceError as exc:
            raise SolverError(f"integration did not converge on [{start}, {end}]: {exc}",
                              differences, rhos, (start, end)) from exc
        diff = crp_norm(image.path - Z, X)
        if not frozen:
            needed = max(image.levels, default=0)
            if needed <= level and k > 1 and diff < problem.freeze_below:
                frozen, frozen_at = True, k
                if needed < level:
                    image = picard_map(Z, problem, z_start, depth=level)
                    diff = crp_norm(image.path - Z, X)
            level = max(level, needed)
        differences.append(diff)
        if frozen and frozen_at is not None and len(differences) >= 2 and k > frozen_at:
            prev = differences[-2]
            rhos.append(diff / prev if prev > 0 else 0.0)
        Z = image.path
        if not np.all(np.isfinite(Z.values)) or element_norm(alg, Z.values).max() > 1e12:
            raise SolverError(f"iterates blew up on [{start}, {end}]; shrink the horizon",
                              differences, rhos, (start, end))
        if diff < problem.tol and (frozen or diff == 0.0):
            break
        if len(rhos) >= 3 and all(r >= 1.0 for r in rhos[-3:]):
            raise SolverError(f"Picard iteration is not contracting on [{start}, {end}]",
                              differences, rhos, (start, end))
    else:
        raise SolverError(f"no convergence in {problem.max_iter} Picard iterations on [{start}, {end}]",
                          differences, rhos, (start, end))
    tail = [r for r in rhos[-3:] if r > 0]
    if any(r >= 1.0 for r in tail):
        raise SolverError(f"measured contraction ratio {max(tail):.3f} ≥ 1 on [{start}, {end}]",
                          differences, rhos, (start, end))
    return LocalSolution(Z, differences, rhos, level, len(differences), float(start), float(end))


@dataclass
class GlobalSolution:
    path: ControlledPath
    cells: list[LocalSolution]
    partition: list[float]

    @property
    def base_path(self) -> np.ndarray:
        return self.path.base_path

    @property
    def final_value(self) -> np.ndarray:
        return self.path.base_path[-1]


def _solve_cell(problem: RdeProblem, a: float, b: float, z: np.ndarray, depth: int | None,
                splits: int) -> list[LocalSolution]:
    try:
        return [solve_local(problem, a, b, z, depth=depth)]
    except SolverError as exc:
        if splits <= 0:
            raise
        log.info("local solve on [%s, %s] failed (%s); halving", a, b, exc)
        mid = 0.5 * (a + b)
        first = _solve_cell(problem, a, mid, z, depth, splits - 1)
        second = _solve_cell(problem, mid, b, first[-1].path.base_path[-1], depth, splits - 1)
        return first + second


def solve_global(problem: RdeProblem, depth: int | None = None) -> GlobalSolution:
    """Chain local solves over a partition whose cells carry ω(t_j, t_{j+1}-) < δ."""
    X = problem.X
    partition = [p for p in partition_small(X.control, problem.delta) if p <= problem.T + 1e-12]
    if partition[-1] < problem.T - 1e-12:
        partition.append(problem.T)
    z = problem.z0
    cells: list[LocalSolution] = []
    for a, b in zip(partition[:-1], partition[1:]):
        try:
            pieces = _solve_cell(problem, a, b, z, depth, problem.max_splits)
        except SolverError as exc:
            exc.cell = exc.cell or (a, b)
            raise
        cells.extend(pieces)
        z = pieces[-1].path.base_path[-1]
    path = concatenate([c.path for c in cells])
    reach = float(np.max(np.abs(path.base_path)))
    if reach > 1e6:
        log.warning("solution reaches |z| = %.3e; the fields may not be bounded along the trajectory", reach)
    return GlobalSolution(path, cells, [c.start for c in cells] + [cells[-1].end])


def concatenate(paths: Sequence[ControlledPath]) -> ControlledPath:
    """Join paths whose grids meet end to start; the earlier path wins at junctions."""
    times = [paths[0].times]
    values = [paths[0].values]
    for p in paths[1:]:
        times.append(p.times[1:])
        values.append(p.values[1:])
    return ControlledPath(paths[0].algebra, np.concatenate(times), np.concatenate(values))


def base_residual(solution: ControlledPath, problem: RdeProblem, depth: int) -> float:
    """max_t |Z_t - z0 - Σ_i ∫_0^t φ_i(Z) dX^i| on the grid, with integrals at the given level."""
    total = np.zeros(solution.base_path.shape)
    for i, phi in enumerate(problem.fields, start=1):
        image = compose_smooth(phi, solution)
        if np.any(image.values):
            total += integral_controlled(image, problem.X, i, depth=depth).increments
    return float(np.max(np.abs(solution.base_path - solution.base_path[0] - total)))


def fixed_point_residual(solution: LocalSolution, problem: RdeProblem) -> float:
    image = picard_map(solution.path, problem, solution.path.base_path[0], depth=solution.depth)
    return crp_norm(image.path - solution.path, problem.X)


# -- stability ----------------------------------------------------------------


def formal_distance(Z: ControlledPath, X: RoughPath, Zt: ControlledPath, Xt: RoughPath) -> float:
    """‖Z_0 - Z̃_0‖ + ‖R_X(Z) - R_X̃(Z̃)‖ with the control and γ of X."""
    Z._same_grid(Zt)
    if Xt.algebra is not X.algebra or abs(Xt.gamma - X.gamma) > 0:
        raise SolverError("formal distance needs a common algebra and γ")
    a, b, R = remainder_table(Z, X)
    _, _, Rt = remainder_table(Zt, Xt, a, b)
    omega = X.control.batch(Z.times[a], Z.times[b])
    scale = max(float(np.max(np.abs(Z.values))), float(np.max(np.abs(Zt.values))))
    head = float(element_norm(Z.algebra, Z.values[0] - Zt.values[0]))
    return head + remainder_norm(Z.algebra, X.gamma, R - Rt, omega, scale=scale)


@dataclass
class StabilityReport:
    channel: str
    scales: list[float]
    distances: list[float]
    depth: int
    horizon: float

    @property
    def ratios(self) -> list[float]:
        return [d / s for d, s in zip(self.distances, self.scales)]

    @property
    def coefficient(self) -> float:
        """Least-squares slope of distance against scale through the origin."""
        s = np.asarray(self.scales)
        d = np.asarray(self.distances)
        return float(np.dot(s, d) / np.dot(s, s))

    def spread(self) -> float:
        """max ratio / min ratio relative to the smallest scale's ratio."""
        r = np.asarray(self.ratios)
        ref = r[np.argmin(self.scales)]
        if ref == 0.0:
            return 0.0 if np.all(r == 0.0) else float("inf")
        return float(max(np.max(r) / ref, ref / np.min(r)))

    def within(self, factor: float) -> bool:
        return self.spread() <= factor


Perturbation = Callable[[RdeProblem, float], RdeProblem]


def perturb_initial(direction: Sequence[float]) -> Perturbation:
    v = np.asarray(direction, dtype=float)
    return lambda p, lam: replace(p, z0=p.z0 + lam * v)


def perturb_fields(directions: Sequence[SmoothVectorField]) -> Perturbation:
    return lambda p, lam: replace(p, fields=[sum_field(f, g, lam) for f, g in zip(p.fields, directions)])


def perturb_driver(factory: Callable[[float], RoughPath]) -> Perturbation:
    """``factory(λ)`` returns the perturbed driver; ``factory(0)`` should be the base driver."""
    return lambda p, lam: replace(p, X=factory(lam))


def ult_experiment(problem: RdeProblem, perturbation: Perturbation, channel: str,
                   scales: Sequence[float] = (1.0, 0.5, 0.25, 0.125, 0.0625),
                   horizon: float | None = None) -> StabilityReport:
    """Distances between the base solution and solutions of perturbed problems on [0, horizon]."""
    horizon = problem.T if horizon is None else horizon
    pilot = solve_local(problem, 0.0, horizon)
    # re-solve at the frozen level so every problem runs the identical iteration
    base = solve_local(problem, 0.0, horizon, depth=pilot.depth)
    distances = []
    for lam in scales:
        other = perturbation(problem, lam)
        sol = solve_local(other, 0.0, horizon, depth=base.depth)
        distances.append(formal_distance(base.path, problem.X, sol.path, other.X))
    return StabilityReport(channel, [float(s) for s in scales], distances, base.depth, float(horizon))


# -- oracles and output -------------------------------------------------------


def linear_expansion_oracle(X: RoughPath, matrices: Sequence[np.ndarray], z0: Sequence[float], T: float,
                            steps: int = 1024) -> np.ndarray:
    """Compose I + Σ A_i X^i + Σ A_j A_i X^{ij} over ``steps`` equal subintervals.

    Reads the word coefficients of a shuffle-algebra rough path; word ij
    means letter i first. Below level two the missing coefficients are
    filled with x^i x^j / 2, exact for paths linear on each subinterval.
    """
    alg = X.algebra
    if alg.kind != "Shuffle":
        raise SolverError("the expansion oracle reads shuffle coefficients")
    A = [np.asarray(m, dtype=float) for m in matrices]
    z = np.asarray(z0, dtype=float)
    grid = np.linspace(0.0, T, steps + 1)
    chars = X.batch(grid[:-1], grid[1:])
    eye = np.eye(len(z))
    for row in chars:
        step = eye.copy()
        x = [row[alg.index[(i + 1,)]] for i in range(alg.d)]
        for i in range(alg.d):
            step += A[i] * x[i]
            for j in range(alg.d):
                xij = row[alg.index[(i + 1, j + 1)]] if alg.N >= 2 else 0.5 * x[i] * x[j]
                step += A[j] @ A[i] * xij
        z = step @ z
    return z


def write_solution_csv(path, times: np.ndarray, base: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "component", "value"])
        for t, row in zip(times, base):
            for c, v in enumerate(row):
                writer.writerow([repr(float(t)), c, repr(float(v))])


def write_history_csv(path, cells: Sequence[LocalSolution]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_start", "cell_end", "iteration", "difference", "rho", "depth"])
        for cell in cells:
            offset = len(cell.differences) - len(cell.rhos)
            for k, diff in enumerate(cell.differences):
                rho = cell.rhos[k - offset] if k >= offset else ""
                writer.writerow([repr(cell.start), repr(cell.end), k + 1, repr(float(diff)),
                                 repr(float(rho)) if rho != "" else "", cell.depth])


def write_stability_csv(path, reports: Sequence[StabilityReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "scale", "distance", "ratio", "coefficient", "depth", "horizon"])
        for rep in reports:
            for s, d, r in zip(rep.scales, rep.distances, rep.ratios):
                writer.writerow([rep.channel, repr(s), repr(float(d)), repr(float(r)),
                                 repr(rep.coefficient), rep.depth, repr(rep.horizon)])
