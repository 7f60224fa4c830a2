"""Controlled rough paths, their remainders and norms, and images under smooth maps."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .hopf_core import Algebra, parse_basis_string
from .rough_path import RoughPath, rp_norm


class ControlledPathError(ValueError):
    pass


def element_norm(alg: Algebra, values: np.ndarray) -> np.ndarray | float:
    """Norm on H^e: the max over components of the graded element norm."""
    return np.max(alg.norm(values), axis=-1)


@dataclass(frozen=True, eq=False)
class ControlledPath:
    """Grid samples of a path in H^e.

    ``values`` has shape ``(len(times), e, dim)``. Paths built by composition
    with smooth maps carry no degree-N data; integral paths may.
    """

    algebra: Algebra
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        times = np.array(self.times, dtype=float)
        values = np.array(self.values, dtype=float)
        if values.ndim == 2:
            values = values[:, None, :]
        if values.ndim != 3 or values.shape[0] != len(times) or values.shape[2] != self.algebra.dim:
            raise ControlledPathError(
                f"values must have shape (len(times), e, {self.algebra.dim}), got {values.shape}"
            )
        if len(times) == 0 or np.any(np.diff(times) <= 0):
            raise ControlledPathError("times must be non-empty and strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ControlledPathError("controlled path has non-finite coefficients")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def e(self) -> int:
        return self.values.shape[1]

    @property
    def base_path(self) -> np.ndarray:
        """Z_t = <1*, Z_t>, shape ``(len(times), e)``."""
        return self.values[:, :, 0]

    @property
    def is_truncated(self) -> bool:
        """True when the degree-N components vanish."""
        top = self.algebra.degree_indices(self.algebra.N)
        return not np.any(self.values[:, :, top])

    def index(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t))
        for j in (k, k - 1):
            if 0 <= j < len(self.times) and abs(self.times[j] - t) <= 1e-12 * max(1.0, abs(t)):
                return j
        raise ControlledPathError(f"time {t} is not a grid time")

    def at(self, t: float) -> np.ndarray:
        return self.values[self.index(t)]

    def restrict(self, upper: float) -> "ControlledPath":
        keep = self.times <= upper + 1e-12
        return ControlledPath(self.algebra, self.times[keep], self.values[keep])

    def _same_grid(self, other: "ControlledPath") -> None:
        if other.algebra is not self.algebra or other.values.shape != self.values.shape:
            raise ControlledPathError("controlled paths live on different algebras or shapes")
        if not np.array_equal(other.times, self.times):
            raise ControlledPathError("controlled paths live on different grids")

    def __add__(self, other: "ControlledPath") -> "ControlledPath":
        self._same_grid(other)
        return ControlledPath(self.algebra, self.times, self.values + other.values)

    def __sub__(self, other: "ControlledPath") -> "ControlledPath":
        self._same_grid(other)
        return ControlledPath(self.algebra, self.times, self.values - other.values)

    def __mul__(self, scalar: float) -> "ControlledPath":
        return ControlledPath(self.algebra, self.times, float(scalar) * self.values)

    __rmul__ = __mul__

    def truncated(self) -> "ControlledPath":
        return ControlledPath(self.algebra, self.times, self.algebra.truncate(self.values, self.algebra.N - 1))


def constant_path(alg: Algebra, times: Sequence[float], z0: Sequence[float]) -> ControlledPath:
    """The path t ↦ z0·1."""
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    values = np.zeros((len(times), len(z0), alg.dim))
    values[:, :, 0] = z0
    return ControlledPath(alg, np.asarray(times, dtype=float), values)


def transported_path(X: RoughPath, z0: np.ndarray, times: Sequence[float]) -> ControlledPath:
    """Z_t = T_{t0,t} Z_{t0}, a controlled path with zero remainder."""
    alg = X.algebra
    times = np.asarray(times, dtype=float)
    z0 = np.asarray(z0, dtype=float)
    if z0.ndim == 1:
        z0 = z0[None, :]
    chars = X.batch(np.full(len(times), times[0]), times)
    values = alg.transport(chars[:, None, :], z0[None, :, :])
    return ControlledPath(alg, times, values)


# -- remainders and norms -----------------------------------------------------


def pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.triu_indices(n, k=1)
    return a, b


def remainder_table(Z: ControlledPath, X: RoughPath, a: np.ndarray | None = None,
                    b: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Remainders on grid index pairs ``a < b``; returns ``(a, b, R)`` with R of shape (P, e, dim)."""
    if a is None or b is None:
        a, b = pair_indices(len(Z.times))
    chars = X.batch(Z.times[a], Z.times[b])
    moved = Z.algebra.transport(chars[:, None, :], Z.values[a])
    return a, b, Z.values[b] - moved


def remainder(Z: ControlledPath, X: RoughPath, s: float, t: float) -> np.ndarray:
    """R_st = Z_t - T_st Z_s componentwise, for grid times s ≤ t."""
    if s > t:
        raise ControlledPathError(f"remainder needs s ≤ t, got {s} > {t}")
    i, j = Z.index(s), Z.index(t)
    moved = Z.algebra.transport(X(Z.times[i], Z.times[j]), Z.values[i])
    return Z.values[j] - moved


def remainder_norm(alg: Algebra, gamma: float, R: np.ndarray, omega: np.ndarray, *,
                   zero_tol: float = 1e-12, scale: float = 1.0) -> float:
    """sup_j sup_pairs ‖π_j R_st‖ ω(s,t)^{-(N-j)γ} for a table of remainders.

    Pairs where ω vanishes must carry no remainder below degree N, up to
    ``zero_tol`` relative to ``scale``.
    """
    zero_tol = zero_tol * max(1.0, scale)
    N = alg.N
    best = 0.0
    if R.size == 0:
        return best
    dead = omega <= 0.0
    for j in range(N + 1):
        ix = alg.degree_indices(j)
        if ix.size == 0:
            continue
        part = np.max(np.max(np.abs(R[..., ix]) / alg.norm_weights[ix], axis=-1), axis=-1)
        if j == N:
            best = max(best, float(np.max(part)))
            continue
        if np.any(part[dead] > zero_tol):
            worst = float(np.max(part[dead]))
            raise ControlledPathError(
                f"degree-{j} remainder {worst:.3e} is nonzero on a pair where the control vanishes"
            )
        live = ~dead
        if live.any():
            best = max(best, float(np.max(part[live] / omega[live] ** ((N - j) * gamma))))
    return best


def crp_remainder_norm(Z: ControlledPath, X: RoughPath) -> float:
    a, b, R = remainder_table(Z, X)
    omega = X.control.batch(Z.times[a], Z.times[b])
    return remainder_norm(Z.algebra, X.gamma, R, omega, scale=sup_norm(Z))


def crp_norm(Z: ControlledPath, X: RoughPath) -> float:
    """‖Z_0‖ + ‖R(Z)‖ with suprema taken over the grid of Z."""
    return float(element_norm(Z.algebra, Z.values[0])) + crp_remainder_norm(Z, X)


def sup_norm(Z: ControlledPath) -> float:
    return float(np.max(element_norm(Z.algebra, Z.values)))


# -- a priori estimates -------------------------------------------------------


@dataclass
class EstimateCheck:
    name: str
    max_violation: float
    min_slack: float
    worst_pair: tuple[float, float] | None
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_violation <= 0.0


@dataclass
class EstimateReport:
    checks: list[EstimateCheck]
    norms: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[str]:
        return [f"{c.name} violated by {c.max_violation:.3e} at {c.worst_pair}" for c in self.checks if not c.passed]


def _check(name: str, lhs: np.ndarray, rhs: np.ndarray, pairs: Sequence[tuple[float, float]] | None,
           tol: float) -> EstimateCheck:
    lhs = np.atleast_1d(np.asarray(lhs, dtype=float))
    rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
    gap = lhs - rhs
    k = int(np.argmax(gap))
    worst_pair = None if pairs is None else tuple(pairs[k])
    return EstimateCheck(name, float(max(gap[k] - tol, 0.0)), float(np.min(rhs - lhs)), worst_pair, len(gap))


def growth_factor(X: RoughPath, start: float, end: float) -> float:
    """K(T) = max(1, ω(0, T))^γ."""
    return max(1.0, X.control(start, end)) ** X.gamma


def degree_two_constant(N: int, K: float, x: float) -> float:
    """C(T, x) = K^{N-1} (N(N+1) x (x+1) K^N + 1)."""
    return K ** (N - 1) * (N * (N + 1) * x * (x + 1) * K ** N + 1)


def estimate_suite(Z: ControlledPath, X: RoughPath, tol: float = 1e-10) -> EstimateReport:
    """Evaluate both sides of the a priori bounds on every grid pair of Z."""
    alg = Z.algebra
    N, gamma = alg.N, X.gamma
    t0, T = float(Z.times[0]), float(Z.times[-1])
    a, b, R = remainder_table(Z, X)
    omega = X.control.batch(Z.times[a], Z.times[b])
    r_norm = remainder_norm(alg, gamma, R, omega, scale=sup_norm(Z))
    z_norm = float(element_norm(alg, Z.values[0])) + r_norm
    z_sup = sup_norm(Z)
    x_norm = rp_norm(X, Z.times)
    K = growth_factor(X, t0, T)
    pairs = list(zip(Z.times[a].tolist(), Z.times[b].tolist()))
    base = Z.base_path
    incr = np.max(np.abs(base[b] - base[a]), axis=-1)

    checks = []
    zc = max(1.0, X.control(t0, T)) ** ((N - 1) * gamma) * (N * x_norm * z_sup + z_norm) * omega ** gamma
    checks.append(_check("z_control", incr, zc, pairs, tol))
    checks.append(_check("sup_bound", [z_sup], [(N + 1) * K ** N * (1 + x_norm) * z_norm], None, tol))
    fz = degree_two_constant(N, K, x_norm) * omega ** gamma * z_norm
    checks.append(_check("increment_bound", incr, fz, pairs, tol))
    for i in range(1, alg.d + 1):
        grafted = remainder_norm(alg, gamma, alg.apply_graft(i, R), omega, scale=sup_norm(Z))
        bound = X.control(t0, T) ** gamma * alg.graft_norm(i) * r_norm
        checks.append(_check(f"graft_remainder_{i}", [grafted], [bound], None, tol))
    norms = {"crp": z_norm, "remainder": r_norm, "sup": z_sup, "rough_path": x_norm, "K": K}
    return EstimateReport(checks, norms, tol)


# -- smooth vector fields -----------------------------------------------------


def _fd_step(order: int, step: float) -> float:
    return step * 10.0 ** (order - 1)


@dataclass(eq=False)
class SmoothVectorField:
    """A smooth map ℝ^e → ℝ^m with derivative tensors.

    ``derivative(n, z)`` takes points of shape ``(..., e)`` and returns
    arrays of shape ``(..., m, e, ..., e)`` with n trailing axes.
    """

    e: int
    m: int
    value_fn: Callable[[np.ndarray], np.ndarray]
    derivative_fn: Callable[[int, np.ndarray], np.ndarray] | None = None
    max_order: int = 8
    name: str = "custom"
    params: dict = field(default_factory=dict)
    fd_step: float = 1e-5

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(self.value_fn(np.asarray(z, dtype=float)), dtype=float)

    def derivative(self, n: int, z: np.ndarray) -> np.ndarray:
        if n < 0 or n > self.max_order:
            raise ControlledPathError(f"field {self.name!r} has no derivative of order {n}")
        z = np.asarray(z, dtype=float)
        if n == 0:
            return self(z)
        if self.derivative_fn is not None:
            return np.asarray(self.derivative_fn(n, z), dtype=float)
        return self._finite_difference(n, z, _fd_step(n, self.fd_step))

    def _finite_difference(self, n: int, z: np.ndarray, h: float) -> np.ndarray:
        if n == 0:
            return self(z)
        slices = []
        for a in range(self.e):
            shift = np.zeros(self.e)
            shift[a] = h
            up = self._finite_difference(n - 1, z + shift, h)
            down = self._finite_difference(n - 1, z - shift, h)
            slices.append((up - down) / (2 * h))
        tensor = np.stack(slices, axis=-1)
        return symmetrize(tensor, n)


def symmetrize(tensor: np.ndarray, n: int) -> np.ndarray:
    if n < 2:
        return tensor
    lead = tensor.ndim - n
    perms = list(itertools.permutations(range(lead, tensor.ndim)))
    total = sum(np.transpose(tensor, tuple(range(lead)) + p) for p in perms)
    return total / len(perms)


def _diagonal_tensor(values: np.ndarray, n: int, e: int) -> np.ndarray:
    """Tensor with ``out[..., c, c, ..., c] = values[..., c]`` and zeros elsewhere."""
    out = np.zeros(values.shape[:-1] + (e,) * (n + 1))
    for c in range(e):
        out[(Ellipsis,) + (c,) * (n + 1)] = values[..., c]
    return out


def componentwise_field(e: int, derivs: Callable[[int, np.ndarray], np.ndarray], name: str,
                        params: dict | None = None) -> SmoothVectorField:
    """z ↦ (f(z_1), ..., f(z_e)) given ``derivs(n, x) = f^{(n)}(x)``."""
    return SmoothVectorField(
        e, e, lambda z: derivs(0, z),
        lambda n, z: _diagonal_tensor(derivs(n, z), n, e),
        name=name, params=params or {},
    )


def linear_field(matrix: Sequence[Sequence[float]], offset: Sequence[float] | None = None,
                 name: str = "linear") -> SmoothVectorField:
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    m, e = A.shape
    b = np.zeros(m) if offset is None else np.asarray(offset, dtype=float)

    def deriv(n: int, z: np.ndarray) -> np.ndarray:
        lead = z.shape[:-1]
        if n == 1:
            return np.broadcast_to(A, lead + A.shape).copy()
        return np.zeros(lead + (m,) + (e,) * n)

    return SmoothVectorField(e, m, lambda z: z @ A.T + b, deriv, name=name,
                             params={"A": A.tolist(), "b": b.tolist()})


def constant_field(c: Sequence[float], e: int | None = None) -> SmoothVectorField:
    c = np.atleast_1d(np.asarray(c, dtype=float))
    e = len(c) if e is None else e
    field_ = linear_field(np.zeros((len(c), e)), c, name="constant")
    field_.params = {"c": c.tolist()}
    return field_


def _exp_derivs(scale: float) -> Callable[[int, np.ndarray], np.ndarray]:
    return lambda n, x: scale ** n * np.exp(scale * x)


def _sin_derivs(scale: float) -> Callable[[int, np.ndarray], np.ndarray]:
    shifts = (np.sin, np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x))
    return lambda n, x: scale ** n * shifts[n % 4](scale * x)


def _quadratic_derivs(scale: float) -> Callable[[int, np.ndarray], np.ndarray]:
    def f(n: int, x: np.ndarray) -> np.ndarray:
        if n == 0:
            return scale * x * x
        if n == 1:
            return 2 * scale * x
        if n == 2:
            return np.full_like(x, 2 * scale)
        return np.zeros_like(x)
    return f


FIELD_REGISTRY = ("zero", "identity", "constant", "linear", "quadratic", "sin", "exp")


def make_field(kind: str, e: int, params: dict | None = None) -> SmoothVectorField:
    """Build a vector field on ℝ^e from a registry key and parameter payload."""
    params = dict(params or {})
    if kind == "zero":
        return constant_field(np.zeros(e))
    if kind == "identity":
        return linear_field(np.eye(e), name="identity")
    if kind == "constant":
        return constant_field(params.get("c", [0.0] * e), e)
    if kind == "linear":
        A = np.asarray(params.get("A", np.eye(e)), dtype=float)
        if A.shape != (e, e):
            raise ControlledPathError(f"linear field needs an {e}x{e} matrix, got shape {A.shape}")
        return linear_field(A, params.get("b"))
    scale = float(params.get("scale", 1.0))
    if kind == "quadratic":
        return componentwise_field(e, _quadratic_derivs(scale), "quadratic", {"scale": scale})
    if kind == "sin":
        return componentwise_field(e, _sin_derivs(scale), "sin", {"scale": scale})
    if kind == "exp":
        return componentwise_field(e, _exp_derivs(scale), "exp", {"scale": scale})
    raise ControlledPathError(f"unknown vector field {kind!r}; choose from {', '.join(FIELD_REGISTRY)}")


def finite_difference_field(func: Callable[[np.ndarray], np.ndarray], e: int, m: int | None = None,
                            step: float = 1e-5, max_order: int = 3) -> SmoothVectorField:
    """Vector field whose derivatives come from central differences, for fixtures."""
    return SmoothVectorField(e, e if m is None else m, func, None, max_order=max_order,
                             name="finite-difference", fd_step=step)


def sum_field(first: SmoothVectorField, second: SmoothVectorField, weight: float = 1.0) -> SmoothVectorField:
    """first + weight·second."""
    if (first.e, first.m) != (second.e, second.m):
        raise ControlledPathError("fields must share their dimensions")
    return SmoothVectorField(
        first.e, first.m,
        lambda z: first(z) + weight * second(z),
        lambda n, z: first.derivative(n, z) + weight * second.derivative(n, z),
        max_order=min(first.max_order, second.max_order),
        name=f"{first.name}+{weight}*{second.name}",
        params={"first": first.params, "second": second.params, "weight": weight},
    )


def tensor_norm(tensor: np.ndarray, n: int) -> np.ndarray:
    """Norm of an n-linear map ℝ^e → ℝ^m for sup norms on both sides."""
    flat = np.abs(tensor).reshape(tensor.shape[: tensor.ndim - n] + (-1,))
    return np.max(flat.sum(axis=-1), axis=-1)


def seminorm(phi: SmoothVectorField, points: np.ndarray, order: int) -> float:
    """Σ_{j ≤ order} sup over the points of ‖D^j φ‖."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return float(sum(np.max(tensor_norm(phi.derivative(j, points), j)) for j in range(order + 1)))


def hull_points(*paths: ControlledPath, per_axis: int = 9) -> np.ndarray:
    """Trajectory samples plus a lattice on their bounding box."""
    traj = np.concatenate([p.base_path for p in paths], axis=0)
    lo, hi = traj.min(axis=0), traj.max(axis=0)
    axes = [np.linspace(l, h, per_axis) for l, h in zip(lo, hi)]
    lattice = np.array(list(itertools.product(*axes)))
    return np.concatenate([traj, lattice], axis=0)


# -- composition with smooth maps ---------------------------------------------


def _reduced_multiply(alg: Algebra, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return alg.multiply(a, b) - a[..., :1] * b - b[..., :1] * a


def compose_smooth(phi: SmoothVectorField, Z: ControlledPath) -> ControlledPath:
    """The controlled path φ(Z).

    On h of positive degree the value is Σ_n D^nφ(Z_s)/n! paired with the
    iterated reduced coproduct of h against Z_s^{⊗n}; on 1* it is φ(Z_s).
    The result keeps degrees ≤ N - 1.
    """
    alg = Z.algebra
    N = alg.N
    if phi.e != Z.e:
        raise ControlledPathError(f"field acts on ℝ^{phi.e}, path has e={Z.e}")
    if phi.max_order < N:
        raise ControlledPathError(f"field {phi.name!r} provides derivatives up to {phi.max_order}, need {N}")
    base = Z.base_path
    n_t, e = base.shape
    out = np.zeros((n_t, phi.m, alg.dim))
    parts = Z.values
    for n in range(1, N + 1):
        D = phi.derivative(n, base).reshape(n_t, phi.m, e ** n)
        out += np.einsum("tmk,tkd->tmd", D, parts) / math.factorial(n)
        if n < N:
            parts = _reduced_multiply(alg, parts[:, :, None, :], Z.values[:, None, :, :]).reshape(n_t, -1, alg.dim)
    out[:, :, 0] = phi(base)
    return ControlledPath(alg, Z.times, alg.truncate(out, N - 1))


@dataclass
class LipschitzReport:
    bound: float
    empirical: float
    constant: float
    calibrated_constant: float
    seminorm: float
    norms: dict[str, float]

    @property
    def holds(self) -> bool:
        return self.empirical <= self.bound * (1 + 1e-12)


def lipschitz_bound(phi: SmoothVectorField, Z: ControlledPath, Zp: ControlledPath, X: RoughPath,
                    constant: float = 1.0) -> LipschitzReport:
    """Compare ‖φ(Z') - φ(Z)‖ / ‖Z' - Z‖ with the bound C K^{N²} ‖φ‖ Σ ‖X‖^i ‖Z‖^j ‖Z'‖^k."""
    alg = Z.algebra
    N = alg.N
    Z._same_grid(Zp)
    t0, T = float(Z.times[0]), float(Z.times[-1])
    K = growth_factor(X, t0, T)
    x_norm = rp_norm(X, Z.times)
    z_norm, zp_norm = crp_norm(Z, X), crp_norm(Zp, X)
    semi = seminorm(phi, hull_points(Z, Zp), N)
    powers = np.arange(2 * N)
    poly = float(np.sum(x_norm ** powers) * np.sum(z_norm ** powers) * np.sum(zp_norm ** powers))
    shape = K ** (N * N) * semi * poly
    gap = crp_norm(Zp - Z, X)
    image_gap = crp_norm(compose_smooth(phi, Zp) - compose_smooth(phi, Z), X)
    empirical = 0.0 if gap == 0.0 else image_gap / gap
    calibrated = empirical / shape if shape > 0 else 0.0
    norms = {"K": K, "rough_path": x_norm, "Z": z_norm, "Z'": zp_norm, "difference": gap}
    return LipschitzReport(constant * shape, empirical, constant, calibrated, semi, norms)


# -- CSV ----------------------------------------------------------------------


def export_csv(Z: ControlledPath, path) -> None:
    alg = Z.algebra
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "component", "basis", "coeff"])
        for k, t in enumerate(Z.times):
            for c in range(Z.e):
                for b in np.flatnonzero(Z.values[k, c]):
                    writer.writerow([repr(float(t)), c, alg.label(int(b)), repr(float(Z.values[k, c, b]))])


def import_csv(alg: Algebra, path, e: int | None = None) -> ControlledPath:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append((float(row["t"]), int(row["component"]), row["basis"], float(row["coeff"])))
    if not rows:
        raise ControlledPathError(f"{path} holds no coefficients")
    times = sorted({r[0] for r in rows})
    slot = {t: k for k, t in enumerate(times)}
    width = (max(r[1] for r in rows) + 1) if e is None else e
    values = np.zeros((len(times), width, alg.dim))
    for t, c, label, coeff in rows:
        key = parse_basis_string(alg.kind, label, alg.d)
        if key not in alg.index:
            raise ControlledPathError(f"basis element {label!r} is not in the algebra")
        values[slot[t], c, alg.index[key]] = coeff
    return ControlledPath(alg, np.array(times), values)
