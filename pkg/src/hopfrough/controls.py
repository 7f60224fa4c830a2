"""Controls on the simplex {0 ≤ s ≤ t ≤ T}: Hölder, p-variation and powers."""

from __future__ import annotations

import bisect
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ControlError(ValueError):
    pass


@dataclass(eq=False)
class Control:
    """Evaluator ω(s, t) with metadata.

    ``continuous`` means one-sided limits equal the values themselves, which
    lets grid procedures evaluate ω(s+, t-) directly.
    """

    T: float
    func: Callable[[float, float], float]
    kind: str = "Custom"
    right_continuous: bool = True
    continuous: bool = False
    params: dict = field(default_factory=dict)
    breakpoints: tuple[float, ...] = ()
    batch_func: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __call__(self, s: float, t: float) -> float:
        if s > t:
            raise ControlError(f"control evaluated with s={s} > t={t}")
        s = min(max(s, 0.0), self.T)
        t = min(max(t, 0.0), self.T)
        return float(self.func(s, t))

    def batch(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.T)
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.T)
        if self.batch_func is not None:
            return np.asarray(self.batch_func(s, t), dtype=float)
        s, t = np.broadcast_arrays(s, t)
        return np.array([self.func(a, b) for a, b in zip(s.ravel(), t.ravel())]).reshape(s.shape)

    def inner(self, s: float, t: float, eta: float | None = None) -> float:
        """ω(s+, t-) approximated by shrinking the interval by ``eta``."""
        if self.continuous:
            return self(s, t)
        if eta is None:
            eta = self.default_eta()
        if t - s <= 2 * eta:
            return 0.0
        return self(s + eta, t - eta)

    def default_eta(self) -> float:
        if len(self.breakpoints) > 1:
            gaps = np.diff(self.breakpoints)
            gaps = gaps[gaps > 0]
            if gaps.size:
                return float(min(gaps.min(), self.T) * 1e-6)
        return self.T * 1e-9


def holder_control(T: float) -> Control:
    if not T > 0:
        raise ControlError(f"horizon must be positive, got {T}")
    return Control(T, lambda s, t: t - s, kind="Holder", continuous=True, params={"T": T},
                   batch_func=lambda s, t: t - s)


class _PVarTable:
    """Rows of the p-variation dynamic program, one per starting sample."""

    def __init__(self, values: np.ndarray, p: float):
        self.values = values
        self.p = p
        self._rows: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def row(self, a: int) -> np.ndarray:
        cached = self._rows.get(a)
        if cached is not None:
            return cached
        pts = self.values[a:]
        m = len(pts)
        V = np.zeros(m)
        for j in range(1, m):
            dist = np.linalg.norm(pts[j] - pts[:j], axis=1) ** self.p
            V[j] = np.max(V[:j] + dist)
        with self._lock:
            self._rows.setdefault(a, V)
        return self._rows[a]

    def value(self, a: int, b: int) -> float:
        if b <= a:
            return 0.0
        return float(self.row(a)[b - a])


def pvar_control(times: Sequence[float], values: np.ndarray, p: float, T: float | None = None) -> Control:
    """p-variation control of the right-continuous step path through the samples.

    The path equals ``values[k]`` on ``[times[k], times[k+1])``, so ω(s, t)
    only sees the value at s and the samples in (s, t].
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if len(times) != len(values) or len(times) == 0:
        raise ControlError("times and values must be non-empty and of equal length")
    if np.any(np.diff(times) <= 0):
        raise ControlError("sample times must be strictly increasing")
    if p < 1:
        raise ControlError(f"p must be at least 1, got {p}")
    horizon = float(times[-1]) if T is None else float(T)
    table = _PVarTable(values, float(p))
    tlist = times.tolist()

    def func(s: float, t: float) -> float:
        a = max(bisect.bisect_right(tlist, s) - 1, 0)
        b = max(bisect.bisect_right(tlist, t) - 1, 0)
        return table.value(a, b)

    def batch(s: np.ndarray, t: np.ndarray) -> np.ndarray:
        a = np.maximum(np.searchsorted(times, s, side="right") - 1, 0)
        b = np.maximum(np.searchsorted(times, t, side="right") - 1, 0)
        a, b = np.broadcast_arrays(a, b)
        out = np.zeros(a.shape)
        for start in np.unique(a):
            sel = (a == start) & (b > start)
            if sel.any():
                out[sel] = table.row(int(start))[b[sel] - start]
        return out

    return Control(
        horizon, func, kind="PVar", right_continuous=True, continuous=False,
        params={"p": float(p)}, breakpoints=tuple(tlist), batch_func=batch,
    )


def pvar_bruteforce(values: np.ndarray, p: float) -> float:
    """Maximum of Σ|y_{k+1} - y_k|^p over all sub-sequences keeping both ends."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    m = len(values)
    best = 0.0
    inner = range(1, m - 1)
    for r in range(0, m - 1):
        for chosen in itertools.combinations(inner, r):
            idx = (0,) + chosen + (m - 1,)
            total = sum(np.linalg.norm(values[idx[k + 1]] - values[idx[k]]) ** p for k in range(len(idx) - 1))
            best = max(best, total)
    return float(best)


def power_control(omega: Control, exponent: float) -> Control:
    """ω^exponent for exponent > 1, again a control."""
    if not exponent > 1:
        raise ControlError(f"exponent must exceed 1, got {exponent}")
    base = omega.func
    return Control(
        omega.T, lambda s, t: base(s, t) ** exponent, kind=f"Power({omega.kind})",
        right_continuous=omega.right_continuous, continuous=omega.continuous,
        params={**omega.params, "exponent": exponent}, breakpoints=omega.breakpoints,
        batch_func=lambda s, t: omega.batch(s, t) ** exponent,
    )


def sum_control(first: Control, second: Control) -> Control:
    """Pointwise sum of two controls on the same horizon, again a control."""
    if abs(first.T - second.T) > 1e-12:
        raise ControlError("controls must share the horizon")
    return Control(
        first.T, lambda s, t: first.func(s, t) + second.func(s, t), kind=f"Sum({first.kind},{second.kind})",
        right_continuous=first.right_continuous and second.right_continuous,
        continuous=first.continuous and second.continuous,
        breakpoints=tuple(sorted(set(first.breakpoints) | set(second.breakpoints))),
        batch_func=lambda s, t: first.batch(s, t) + second.batch(s, t),
    )


def uniform_grid(T: float, n: int) -> np.ndarray:
    return np.linspace(0.0, T, n + 1)


def jump_set(omega: Control, delta: float, grid: Sequence[float] | None = None) -> list[float]:
    """Grid approximation of {s : ω(s-, s+) ≥ δ}.

    Grid points whose window (s-h, s+h) carries mass δ are grouped in runs;
    each run is reported at the point whose left window (s-h, s] carries the
    mass, which lands exactly on a jump sitting at a grid point.
    """
    if not delta > 0:
        raise ControlError("delta must be positive")
    if grid is None:
        inside = [b for b in omega.breakpoints if 0.0 <= b <= omega.T]
        grid = np.union1d(uniform_grid(omega.T, 1024), inside)
    grid = np.asarray(grid, dtype=float)
    if len(grid) < 2:
        return []
    h = float(np.min(np.diff(grid)))
    hits = [k for k, s in enumerate(grid) if omega(max(s - h, 0.0), min(s + h, omega.T)) >= delta]
    out: list[float] = []
    run: list[int] = []
    for k in hits + [None]:
        if run and (k is None or k != run[-1] + 1):
            left = [j for j in run if omega(max(grid[j] - h, 0.0), grid[j]) >= delta]
            out.append(float(grid[left[0]] if left else grid[run[len(run) // 2]]))
            run = []
        if k is not None:
            run.append(k)
    return out


def partition_small(omega: Control, eps: float, grid: Sequence[float] | None = None) -> list[float]:
    """Greedy partition of [0, T] whose cells satisfy ω(s+, t-) < eps.

    The grid is refined with the detected jump times so that every large jump
    sits on a cell boundary.
    """
    if not eps > 0:
        raise ControlError("eps must be positive")
    T = omega.T
    base = uniform_grid(T, 1024) if grid is None else np.asarray(grid, dtype=float)
    points = set(float(x) for x in base) | set(jump_set(omega, eps, base)) | {0.0, T}
    points |= {float(b) for b in omega.breakpoints if 0.0 <= b <= T}
    pts = sorted(points)
    if omega.inner(0.0, T) < eps:
        return [0.0, T]
    out = [0.0]
    k = 0
    while k < len(pts) - 1:
        s = pts[k]
        j = k + 1
        if omega.inner(s, pts[j]) >= eps:
            raise ControlError(
                f"cell [{s}, {pts[j]}] has ω(s+, t-) = {omega.inner(s, pts[j])} ≥ {eps}; refine the grid"
            )
        while j + 1 < len(pts) and omega.inner(s, pts[j + 1]) < eps:
            j += 1
        out.append(pts[j])
        k = j
    return out


def superadditivity_defect(omega: Control, grid: Sequence[float]) -> float:
    """max of ω(s,u) + ω(u,t) - ω(s,t) over ordered grid triples (≤ 0 when superadditive)."""
    g = list(grid)
    worst = -np.inf
    for a in range(len(g)):
        for b in range(a, len(g)):
            for c in range(b, len(g)):
                worst = max(worst, omega(g[a], g[b]) + omega(g[b], g[c]) - omega(g[a], g[c]))
    return float(worst)


def monotonicity_defect(omega: Control, grid: Sequence[float]) -> float:
    """max of ω(s', t') - ω(s, t) over nested grid intervals [s', t'] ⊆ [s, t]."""
    g = list(grid)
    worst = -np.inf
    for a, b, c, e in itertools.combinations_with_replacement(range(len(g)), 4):
        worst = max(worst, omega(g[b], g[c]) - omega(g[a], g[e]))
    return float(worst)


def right_continuity_defect(omega: Control, grid: Sequence[float], h: float = 1e-9) -> float:
    """max |ω(s, t + h) - ω(s, t)| over grid pairs, a one-sided limit spot check."""
    g = list(grid)
    worst = 0.0
    for a in range(len(g)):
        for b in range(a, len(g)):
            t = g[b]
            if t + h <= omega.T:
                worst = max(worst, abs(omega(g[a], t + h) - omega(g[a], t)))
    return float(worst)
