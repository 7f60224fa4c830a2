"""Truncated rough paths: two-parameter families of truncated characters."""

from __future__ import annotations

import bisect
import csv
import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .controls import Control, holder_control, pvar_control
from .hopf_core import Algebra, AlgebraError, arborification_matrix


class RoughPathError(ValueError):
    pass


def truncation_for(gamma: float) -> int:
    """Largest integer N with N·γ ≤ 1."""
    if not 0 < gamma <= 1:
        raise RoughPathError(f"gamma must lie in (0, 1], got {gamma}")
    return int(math.floor(1.0 / gamma + 1e-12))


def exp_star(alg: Algebra, x: np.ndarray) -> np.ndarray:
    """Convolution exponential Σ x^{⋆n}/n!, exact after N terms for x in Ker ε."""
    out = alg.unit_vector()
    term = alg.unit_vector()
    for n in range(1, alg.N + 1):
        term = alg.convolve(term, x) / n
        out = out + term
    return out


def level_one(alg: Algebra, increment: Sequence[float]) -> np.ndarray:
    """Functional equal to the increment on H_1 = span{L_i(1)} and zero elsewhere."""
    v = np.zeros(alg.dim)
    for i, value in enumerate(increment, start=1):
        v[alg.graft[i - 1, 0]] = value
    return v


def level_one_batch(alg: Algebra, increments: np.ndarray) -> np.ndarray:
    out = np.zeros(increments.shape[:-1] + (alg.dim,))
    out[..., alg.graft[:, 0]] = increments
    return out


def character_defect_vec(alg: Algebra, xi: np.ndarray) -> float:
    """max |<xy, ξ> - <x, ξ><y, ξ>| over basis pairs with |x| + |y| ≤ N, plus |ξ(1) - 1|."""
    i, j, k, c = alg._pr_i, alg._pr_j, alg._pr_k, alg._pr_c
    pair = i * alg.dim + j
    lhs = np.bincount(pair, weights=c * xi[k], minlength=alg.dim * alg.dim)
    live = np.zeros(alg.dim * alg.dim, dtype=bool)
    live[pair] = True
    rhs = np.outer(xi, xi).ravel()
    worst = np.max(np.abs(lhs - rhs)[live], initial=0.0)
    return float(max(worst, abs(xi[0] - 1.0)))


class RoughPath:
    """An N-truncated rough path adapted to a control.

    Subclasses implement ``_compute(s, t)``; results are cached per pair.
    """

    kind = "Custom"

    def __init__(self, algebra: Algebra, gamma: float, control: Control):
        N = truncation_for(gamma)
        if N != algebra.N:
            raise RoughPathError(f"gamma={gamma} needs N={N}, algebra has N={algebra.N}")
        self.algebra = algebra
        self.gamma = float(gamma)
        self.control = control
        self.T = control.T
        self._cache: dict[tuple[float, float], np.ndarray] = {}
        self._lock = threading.Lock()

    def __call__(self, s: float, t: float) -> np.ndarray:
        if s > t:
            raise RoughPathError(f"rough path evaluated with s={s} > t={t}")
        key = (float(s), float(t))
        hit = self._cache.get(key)
        if hit is None:
            hit = self._compute(*key)
            hit.setflags(write=False)
            with self._lock:
                hit = self._cache.setdefault(key, hit)
        return hit

    def _compute(self, s: float, t: float) -> np.ndarray:
        raise NotImplementedError

    def batch(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Characters for arrays of pairs, shape ``s.shape + (dim,)``."""
        s, t = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
        out = np.empty(s.shape + (self.algebra.dim,))
        flat_s, flat_t = s.ravel(), t.ravel()
        flat = out.reshape(-1, self.algebra.dim)
        for k in range(flat_s.size):
            flat[k] = self(flat_s[k], flat_t[k])
        return out

    def path_increment(self, s: float, t: float) -> np.ndarray:
        X = self(s, t)
        return np.array([X[self.algebra.graft[i, 0]] for i in range(self.algebra.d)])

    def describe(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma, "algebra": self.algebra.kind,
                "d": self.algebra.d, "N": self.algebra.N}


class PiecewiseRoughPath(RoughPath):
    """Ordered product of per-piece characters, shared by smooth and jump lifts."""

    def __init__(self, algebra: Algebra, gamma: float, control: Control,
                 times: np.ndarray, values: np.ndarray):
        super().__init__(algebra, gamma, control)
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[1] != algebra.d:
            raise RoughPathError(f"path has dimension {values.shape[1]}, algebra has d={algebra.d}")
        if len(times) != len(values) or len(times) < 1:
            raise RoughPathError("times and values must be non-empty and of equal length")
        if np.any(np.diff(times) <= 0):
            raise RoughPathError("sample times must be strictly increasing")
        self.times = times
        self.values = values
        self._tlist = times.tolist()


class SignatureRoughPath(PiecewiseRoughPath):
    """Signature of the piecewise-linear interpolation of the samples."""

    kind = "signature"

    def value_at(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.values[:, c]) for c in range(self.values.shape[1])])

    def _compute(self, s: float, t: float) -> np.ndarray:
        alg = self.algebra
        if t <= s:
            return alg.unit_vector()
        cuts = [s] + [x for x in self._tlist if s < x < t] + [t]
        out = alg.unit_vector()
        for a, b in zip(cuts[:-1], cuts[1:]):
            inc = self.value_at(b) - self.value_at(a)
            out = alg.convolve(out, exp_star(alg, level_one(alg, inc)))
        return out

    def batch(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        s, t = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
        alg = self.algebra
        times = self.times
        last = len(times) - 2
        seg_s = np.clip(np.searchsorted(times, s, side="right") - 1, 0, max(last, 0))
        seg_t = np.clip(np.searchsorted(times, t, side="left") - 1, 0, max(last, 0))
        fs, ft = s.ravel(), t.ravel()
        gs, gt = seg_s.ravel(), seg_t.ravel()
        out = np.empty((fs.size, alg.dim))
        if last < 0:
            out[:] = alg.unit_vector()
            return out.reshape(s.shape + (alg.dim,))
        slopes = np.diff(self.values, axis=0) / np.diff(times)[:, None]
        same = gs >= gt
        if same.any():
            inc = slopes[gs[same]] * (ft[same] - fs[same])[:, None]
            out[same] = exp_star(alg, level_one_batch(alg, inc))
        for a, b in set(zip(gs[~same].tolist(), gt[~same].tolist())):
            sel = (~same) & (gs == a) & (gt == b)
            head = exp_star(alg, level_one_batch(alg, slopes[a] * (times[a + 1] - fs[sel])[:, None]))
            tail = exp_star(alg, level_one_batch(alg, slopes[b] * (ft[sel] - times[b])[:, None]))
            middle = self(float(times[a + 1]), float(times[b]))
            out[sel] = alg.convolve(alg.convolve(head, middle), tail)
        return out.reshape(s.shape + (alg.dim,))


class JumpRoughPath(PiecewiseRoughPath):
    """Right-continuous step path; each jump contributes the exponential of its size."""

    kind = "jump"

    def __init__(self, algebra, gamma, control, times, values):
        super().__init__(algebra, gamma, control, times, values)
        self._factors = [exp_star(algebra, level_one(algebra, self.values[k] - self.values[k - 1]))
                         for k in range(1, len(self.times))]

    def jump_times(self) -> list[float]:
        return self._tlist[1:]

    def value_at(self, t: float) -> np.ndarray:
        k = max(bisect.bisect_right(self._tlist, t) - 1, 0)
        return self.values[k]

    def _compute(self, s: float, t: float) -> np.ndarray:
        out = self.algebra.unit_vector()
        lo = bisect.bisect_right(self._tlist, s)
        hi = bisect.bisect_right(self._tlist, t)
        for k in range(max(lo, 1), hi):
            out = self.algebra.convolve(out, self._factors[k - 1])
        return out

    def batch(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        s, t = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
        lo = np.maximum(np.searchsorted(self.times, s, side="right"), 1)
        hi = np.searchsorted(self.times, t, side="right")
        out = np.empty(s.shape + (self.algebra.dim,))
        out[...] = self.algebra.unit_vector()
        for a, b in set(zip(lo.ravel().tolist(), hi.ravel().tolist())):
            if b > a:
                sel = (lo == a) & (hi == b)
                out[sel] = self(float(self.times[a - 1]) if a > 0 else 0.0, float(self.times[b - 1]))
        return out


class AreaRoughPath(RoughPath):
    """Zero path carrying area a(t - s) on the two mixed words of length two."""

    kind = "pure_area"

    def __init__(self, algebra: Algebra, gamma: float, control: Control, area: float):
        if algebra.kind != "Shuffle" or algebra.d != 2 or algebra.N != 2:
            raise RoughPathError("pure area lift needs the Shuffle algebra with d = 2, N = 2")
        super().__init__(algebra, gamma, control)
        self.area = float(area)
        self._i12 = algebra.index[(1, 2)]
        self._i21 = algebra.index[(2, 1)]

    def value_at(self, t: float) -> np.ndarray:
        return np.zeros(2)

    def _compute(self, s: float, t: float) -> np.ndarray:
        out = self.algebra.unit_vector()
        out[self._i12] = self.area * (t - s)
        out[self._i21] = -self.area * (t - s)
        return out

    def batch(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        s, t = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
        out = np.zeros(s.shape + (self.algebra.dim,))
        out[..., 0] = 1.0
        out[..., self._i12] = self.area * (t - s)
        out[..., self._i21] = -self.area * (t - s)
        return out


class PulledBackRoughPath(RoughPath):
    """Rough path on forests obtained as ξ ∘ 𝔞 from a rough path on words."""

    kind = "branched"

    def __init__(self, base: RoughPath, forests: Algebra):
        super().__init__(forests, base.gamma, base.control)
        self.base = base
        self.matrix = arborification_matrix(base.algebra, forests)

    def value_at(self, t: float) -> np.ndarray:
        return self.base.value_at(t)

    def _compute(self, s: float, t: float) -> np.ndarray:
        return self.base(s, t) @ self.matrix

    def batch(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        return self.base.batch(s, t) @ self.matrix


# ---------------------------------------------------------------------------
# Constructors


def signature_lift(times, values, algebra: Algebra, gamma: float, control: Control | None = None) -> SignatureRoughPath:
    if algebra.kind != "Shuffle":
        raise RoughPathError("signature lift lives on the Shuffle algebra")
    times = np.asarray(times, dtype=float)
    control = control or holder_control(float(times[-1]))
    return SignatureRoughPath(algebra, gamma, control, times, values)


def pure_area_lift(area: float, algebra: Algebra, gamma: float, control: Control | None = None,
                   horizon: float = 1.0) -> AreaRoughPath:
    if not 1.0 / 3.0 < gamma <= 0.5:
        raise RoughPathError("pure area lift needs gamma in (1/3, 1/2]")
    return AreaRoughPath(algebra, gamma, control or holder_control(horizon), area)


def jump_lift(times, values, algebra: Algebra, gamma: float, control: Control | None = None) -> JumpRoughPath:
    """Lift of a step path; the default control is its 1/γ-variation."""
    times = np.asarray(times, dtype=float)
    if control is None:
        control = pvar_control(times, values, 1.0 / gamma)
    elif control.kind == "PVar":
        if not np.allclose(control.breakpoints, times):
            raise RoughPathError("control samples do not match the path samples")
    return JumpRoughPath(algebra, gamma, control, times, values)


def branched_lift(X: RoughPath, forests: Algebra) -> PulledBackRoughPath:
    try:
        return PulledBackRoughPath(X, forests)
    except AlgebraError as exc:
        raise RoughPathError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Diagnostics


def character_defect(X: RoughPath, s: float, t: float) -> float:
    return character_defect_vec(X.algebra, X(s, t))


def chen_defect(X: RoughPath, s: float, u: float, t: float) -> float:
    lhs = X(s, t)
    rhs = X.algebra.convolve(X(s, u), X(u, t))
    return float(np.max(np.abs(lhs - rhs)))


def grid_pairs(grid: Iterable[float]) -> list[tuple[float, float]]:
    g = sorted(set(float(x) for x in grid))
    return [(g[a], g[b]) for a in range(len(g)) for b in range(a + 1, len(g))]


def rp_norm(X: RoughPath, grid: Iterable[float]) -> float:
    """Grid lower bound for sup_j sup_{s<t} ‖π_j X_st‖ ω(s, t)^{-jγ}."""
    pairs = grid_pairs(grid)
    if not pairs:
        raise RoughPathError("rough path norm needs at least two grid points")
    alg = X.algebra
    best = float(alg.dual_norm(alg.project(X(0.0, 0.0), 0)))
    for s, t in pairs:
        w = X.control(s, t)
        Xst = X(s, t)
        for j in range(alg.N + 1):
            ix = alg.degree_indices(j)
            mass = float(np.sum(np.abs(Xst[ix]) * alg.norm_weights[ix]))
            if mass == 0.0:
                continue
            if w <= 0.0:
                if j > 0 and mass > 1e-14:
                    raise RoughPathError(f"level {j} of X({s}, {t}) is nonzero where ω vanishes")
                continue
            best = max(best, mass / w ** (j * X.gamma))
    return best


def adaptedness_defect(X: RoughPath, grid: Iterable[float], norm: float | None = None) -> float:
    """max of |<x, X_st>| - ‖X‖ ‖x‖ ω^{|x|γ} over basis x and grid pairs (≤ 0 when adapted)."""
    alg = X.algebra
    norm = rp_norm(X, grid) if norm is None else norm
    elem_norms = 1.0 / alg.norm_weights
    worst = -np.inf
    for s, t in grid_pairs(grid):
        w = X.control(s, t)
        bound = norm * elem_norms * w ** (alg.degrees * X.gamma)
        worst = max(worst, float(np.max(np.abs(X(s, t)) - bound)))
    return worst


def export_characters(X: RoughPath, pairs: Sequence[tuple[float, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "t", "basis", "value"])
        for s, t in pairs:
            Xst = X(s, t)
            for k in range(X.algebra.dim):
                writer.writerow([repr(float(s)), repr(float(t)), X.algebra.label(k), repr(float(Xst[k]))])
