"""Truncated connected graded Hopf algebras on words, rooted forests and planar forests.

Basis elements are plain nested tuples so they hash and compare cheaply:

* ``Shuffle``: a word is a tuple of letters ``(1, 2, 2)``.
* ``BCK``: a tree is ``(decoration, children)`` where ``children`` is a
  canonically sorted tuple of trees; a forest is a sorted tuple of trees.
* ``MKW``: same shape, but children and forest order are kept as given.

Elements of the algebra, and functionals on it through the orthonormal
monomial pairing, are dense coefficient vectors indexed by the basis.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

KINDS = ("Shuffle", "BCK", "MKW")
DEFAULT_BASIS_CAP = 20000
FORMAT_VERSION = 1


class AlgebraError(ValueError):
    """Raised for invalid algebra parameters or mismatched operands."""


# ---------------------------------------------------------------------------
# Trees and forests


def tree_size(tree: tuple) -> int:
    return 1 + sum(tree_size(c) for c in tree[1])


def forest_size(forest: Sequence[tuple]) -> int:
    return sum(tree_size(t) for t in forest)


def tree_key(tree: tuple) -> tuple:
    """Total order on trees: size, then children recursively, then decoration."""
    return (tree_size(tree), tuple(tree_key(c) for c in tree[1]), tree[0])


def canonical_tree(dec: int, children: Iterable[tuple]) -> tuple:
    return (dec, tuple(sorted(children, key=tree_key)))


def canonical_forest(trees: Iterable[tuple]) -> tuple:
    return tuple(sorted(trees, key=tree_key))


def element_degree(kind: str, elem: tuple) -> int:
    return len(elem) if kind == "Shuffle" else forest_size(elem)


def _tree_str(tree: tuple) -> str:
    return "[" + str(tree[0]) + "".join(_tree_str(c) for c in tree[1]) + "]"


def basis_string(kind: str, elem: tuple, d: int) -> str:
    """Canonical text form: ``"12"`` for words, ``"[1[2]][1]"`` for forests."""
    if kind == "Shuffle":
        sep = "" if d < 10 else ","
        return sep.join(str(a) for a in elem)
    return "".join(_tree_str(t) for t in elem)


def parse_basis_string(kind: str, text: str, d: int) -> tuple:
    if kind == "Shuffle":
        if not text:
            return ()
        parts = text.split(",") if d >= 10 else list(text)
        return tuple(int(p) for p in parts)
    pos = 0

    def parse_tree() -> tuple:
        nonlocal pos
        assert text[pos] == "["
        pos += 1
        start = pos
        while text[pos].isdigit():
            pos += 1
        dec = int(text[start:pos])
        children = []
        while text[pos] == "[":
            children.append(parse_tree())
        assert text[pos] == "]"
        pos += 1
        return (dec, tuple(children))

    trees = []
    while pos < len(text):
        trees.append(parse_tree())
    if kind == "BCK":
        return canonical_forest(_canonize_deep(t) for t in trees)
    return tuple(trees)


def _canonize_deep(tree: tuple) -> tuple:
    return canonical_tree(tree[0], (_canonize_deep(c) for c in tree[1]))


# ---------------------------------------------------------------------------
# Basis enumeration


def _enumerate_words(d: int, N: int) -> list[list[tuple]]:
    return [list(itertools.product(range(1, d + 1), repeat=n)) for n in range(N + 1)]


def _enumerate_rooted(d: int, N: int, planar: bool) -> list[list[tuple]]:
    trees: list[list[tuple]] = [[] for _ in range(N + 1)]
    forests: list[list[tuple]] = [[] for _ in range(N + 1)]
    forests[0] = [()]
    for n in range(1, N + 1):
        trees[n] = [
            (dec, f) for dec in range(1, d + 1) for f in forests[n - 1]
        ]
        if planar:
            # ordered sequences: first tree of size k followed by a forest of size n - k
            forests[n] = [
                (t,) + rest
                for k in range(1, n + 1)
                for t in trees[k]
                for rest in forests[n - k]
            ]
        else:
            forests[n] = _multisets_of_trees(trees, n)
    for n in range(N + 1):
        forests[n] = sorted(set(forests[n]), key=lambda f: tuple(tree_key(t) for t in f))
    return forests


def _multisets_of_trees(trees: list[list[tuple]], n: int) -> list[tuple]:
    pool = [t for k in range(1, n + 1) for t in sorted(trees[k], key=tree_key)]
    sizes = [tree_size(t) for t in pool]
    out: list[tuple] = []

    def rec(start: int, remaining: int, acc: list[tuple]) -> None:
        if remaining == 0:
            out.append(tuple(acc))
            return
        for idx in range(start, len(pool)):
            if sizes[idx] <= remaining:
                acc.append(pool[idx])
                rec(idx, remaining - sizes[idx], acc)
                acc.pop()

    rec(0, n, [])
    return out


def count_basis(kind: str, d: int, N: int) -> list[int]:
    """Per-degree basis sizes without building structure tables."""
    if kind == "Shuffle":
        return [d**n for n in range(N + 1)]
    return [len(level) for level in _enumerate_rooted(d, N, planar=(kind == "MKW"))]


# ---------------------------------------------------------------------------
# Structure maps on basis elements


def _shuffles(u: tuple, v: tuple) -> dict[tuple, int]:
    out: dict[tuple, int] = defaultdict(int)
    n = len(u) + len(v)
    for positions in itertools.combinations(range(n), len(u)):
        word = [0] * n
        pos_set = set(positions)
        iu = iv = 0
        for k in range(n):
            if k in pos_set:
                word[k] = u[iu]
                iu += 1
            else:
                word[k] = v[iv]
                iv += 1
        out[tuple(word)] += 1
    return out


def _tree_cuts(tree: tuple, planar: bool) -> list[tuple[tuple, tuple | None]]:
    """All splittings of one tree into (pruned trees, trunk).

    The trunk is a root-containing subtree, or ``None`` when the whole tree
    is pruned. Pruned trees are listed in left-to-right order.
    """
    out: list[tuple[tuple, tuple | None]] = [((tree,), None)]
    per_child = [_tree_cuts(c, planar) for c in tree[1]]
    for combo in itertools.product(*per_child):
        pruned: list[tuple] = []
        kept: list[tuple] = []
        for p, r in combo:
            pruned.extend(p)
            if r is not None:
                kept.append(r)
        trunk = (tree[0], tuple(kept)) if planar else canonical_tree(tree[0], kept)
        out.append((tuple(pruned), trunk))
    return out


def _forest_coproduct(forest: tuple, planar: bool) -> dict[tuple[tuple, tuple], int]:
    out: dict[tuple[tuple, tuple], int] = defaultdict(int)
    per_tree = [_tree_cuts(t, planar) for t in forest]
    for combo in itertools.product(*per_tree):
        pruned: list[tuple] = []
        trunk: list[tuple] = []
        for p, r in combo:
            pruned.extend(p)
            if r is not None:
                trunk.append(r)
        if planar:
            key = (tuple(pruned), tuple(trunk))
        else:
            key = (canonical_forest(pruned), canonical_forest(trunk))
        out[key] += 1
    return out


def _structure(kind: str, a: tuple, b: tuple) -> dict[tuple, int]:
    if kind == "Shuffle":
        return _shuffles(a, b)
    if kind == "BCK":
        return {canonical_forest(a + b): 1}
    return {a + b: 1}


def _costructure(kind: str, x: tuple) -> dict[tuple[tuple, tuple], int]:
    if kind == "Shuffle":
        return {(x[:k], x[k:]): 1 for k in range(len(x) + 1)}
    return _forest_coproduct(x, planar=(kind == "MKW"))


def _graft(kind: str, i: int, x: tuple) -> tuple:
    if kind == "Shuffle":
        return x + (i,)
    if kind == "BCK":
        return (canonical_tree(i, x),)
    return ((i, x),)


# ---------------------------------------------------------------------------
# Algebra descriptor


@dataclass(eq=False)
class Algebra:
    """An N-truncated graded connected Hopf algebra with tabulated structure maps.

    ``product`` rows are ``(i, j, k, c)`` meaning ``b_i b_j`` contains ``c b_k``;
    ``coproduct`` rows are ``(k, i, j, c)`` meaning ``Δ b_k`` contains
    ``c b_i ⊗ b_j``. ``graft[i - 1][k]`` is the index of ``L_i(b_k)`` or -1.
    """

    kind: str
    d: int
    N: int
    basis: list[tuple]
    degrees: np.ndarray
    product: np.ndarray
    coproduct: np.ndarray
    graft: np.ndarray
    norm_weights: np.ndarray
    index: dict[tuple, int] = field(repr=False, default_factory=dict)

    def __post_init__(self) -> None:
        if not self.index:
            self.index = {b: k for k, b in enumerate(self.basis)}
        for arr in (self.degrees, self.product, self.coproduct, self.graft, self.norm_weights):
            arr.setflags(write=False)
        cp = self.coproduct
        self._cp_k = cp[:, 0].astype(np.intp)
        self._cp_i = cp[:, 1].astype(np.intp)
        self._cp_j = cp[:, 2].astype(np.intp)
        self._cp_c = cp[:, 3].copy()
        pr = self.product
        self._pr_i = pr[:, 0].astype(np.intp)
        self._pr_j = pr[:, 1].astype(np.intp)
        self._pr_k = pr[:, 2].astype(np.intp)
        self._pr_c = pr[:, 3].copy()
        self._by_degree = [np.flatnonzero(self.degrees == n) for n in range(self.N + 1)]
        self._selectors: dict[str, sparse.csr_matrix] = {}

    @property
    def dim(self) -> int:
        return len(self.basis)

    def dims(self) -> list[int]:
        return [len(ix) for ix in self._by_degree]

    def degree_indices(self, n: int) -> np.ndarray:
        return self._by_degree[n]

    def label(self, k: int) -> str:
        return basis_string(self.kind, self.basis[k], self.d)

    def unit_vector(self) -> np.ndarray:
        v = np.zeros(self.dim)
        v[0] = 1.0
        return v

    def basis_vector(self, k: int) -> np.ndarray:
        v = np.zeros(self.dim)
        v[k] = 1.0
        return v

    def vector_of(self, elem: tuple) -> np.ndarray:
        return self.basis_vector(self.index[elem])

    # -- structure maps on coefficient vectors --------------------------------

    def _scatter(self, weights: np.ndarray, target: np.ndarray, name: str) -> np.ndarray:
        if weights.ndim == 1:
            return np.bincount(target, weights=weights, minlength=self.dim)
        sel = self._selectors.get(name)
        if sel is None:
            sel = sparse.csr_matrix(
                (np.ones(len(target)), (target, np.arange(len(target)))), shape=(self.dim, len(target))
            )
            self._selectors[name] = sel
        flat = weights.reshape(-1, weights.shape[-1])
        return np.asarray((sel @ flat.T).T).reshape(weights.shape[:-1] + (self.dim,))

    def multiply(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Truncated product of coefficient vectors (last axis is the basis, others broadcast)."""
        w = self._pr_c * a[..., self._pr_i] * b[..., self._pr_j]
        return self._scatter(w, self._pr_k, "product")

    def convolve(self, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
        """Convolution of functionals, the transpose of the coproduct."""
        w = self._cp_c * xi[..., self._cp_i] * eta[..., self._cp_j]
        return self._scatter(w, self._cp_k, "convolve")

    def coproduct_matrix(self, x: np.ndarray) -> np.ndarray:
        """Δx as a dense ``dim x dim`` array of tensor coefficients."""
        out = np.zeros((self.dim, self.dim))
        np.add.at(out, (self._cp_i, self._cp_j), self._cp_c * x[self._cp_k])
        return out

    def product_transpose(self, h: np.ndarray) -> np.ndarray:
        """Transpose of the product: ``out[i, j] = <h, b_i b_j>``."""
        out = np.zeros((self.dim, self.dim))
        np.add.at(out, (self._pr_i, self._pr_j), self._pr_c * h[self._pr_k])
        return out

    def transport(self, xi: np.ndarray, z: np.ndarray) -> np.ndarray:
        """``T z`` defined by ``<h, T z> = <xi ⋆ h, z>`` for every functional h."""
        w = self._cp_c * xi[..., self._cp_i] * z[..., self._cp_k]
        return self._scatter(w, self._cp_j, "transport")

    def apply_graft(self, i: int, x: np.ndarray) -> np.ndarray:
        if not 1 <= i <= self.d:
            raise AlgebraError(f"letter {i} outside 1..{self.d}")
        target = self.graft[i - 1]
        mask = target >= 0
        out = np.zeros(x.shape)
        out[..., target[mask]] = x[..., mask]
        return out

    def project(self, x: np.ndarray, n: int) -> np.ndarray:
        out = np.zeros(x.shape)
        ix = self._by_degree[n]
        out[..., ix] = x[..., ix]
        return out

    def truncate(self, x: np.ndarray, top: int) -> np.ndarray:
        """Keep homogeneous components of degree ≤ top."""
        out = np.array(x, dtype=float, copy=True)
        out[..., self.degrees > top] = 0.0
        return out

    # -- norms ----------------------------------------------------------------
    # Functionals carry the weighted ℓ1 norm Σ v_b |ξ_b|; elements carry its
    # dual, the weighted sup norm max |x_b| / v_b. Both are graded.

    def norm(self, x: np.ndarray) -> float | np.ndarray:
        """Norm of an algebra element: weighted sup over the basis."""
        return np.max(np.abs(x) / self.norm_weights, axis=-1)

    def dual_norm(self, xi: np.ndarray) -> float | np.ndarray:
        """Operator norm of a functional, i.e. weighted ℓ1 over the basis."""
        return np.sum(np.abs(xi) * self.norm_weights, axis=-1)

    def op_norm_coproduct(self) -> float:
        """Exact norm of Δ, equal to the norm of convolution on functionals.

        The ℓ1 unit ball of functionals is the hull of signed basis vectors,
        so the maximum over basis pairs is attained.
        """
        return float(np.max(_pair_mass(self) / np.outer(self.norm_weights, self.norm_weights)))

    def graft_norm(self, i: int) -> float:
        """Operator norm of L_i for the element norm."""
        target = self.graft[i - 1]
        mask = target >= 0
        if not mask.any():
            return 0.0
        return float(np.max(self.norm_weights[mask] / self.norm_weights[target[mask]]))

    # -- masks for the orthogonal decomposition -------------------------------

    def graft_image_mask(self, i: int) -> np.ndarray:
        mask = np.zeros(self.dim, dtype=bool)
        for k in range(self.dim):
            b = self.basis[k]
            if self.kind == "Shuffle":
                mask[k] = len(b) > 0 and b[-1] == i
            else:
                mask[k] = len(b) == 1 and b[0][0] == i
        return mask


def build_algebra(
    kind: str,
    d: int,
    N: int,
    *,
    basis_cap: int = DEFAULT_BASIS_CAP,
    degree_base: float = 1.0,
) -> Algebra:
    """Enumerate the basis and tabulate product, coproduct, grafting and norm weights.

    Norm weights are 1 on the unit and ``a * degree_base**degree`` elsewhere,
    with ``a`` the smallest power of two for which convolution of every pair
    of basis functionals is submultiplicative. A purely geometric weight
    cancels in each coproduct term, hence the extra factor.
    """
    if kind not in KINDS:
        raise AlgebraError(f"unknown algebra kind {kind!r}; expected one of {KINDS}")
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise AlgebraError(f"d must be a positive integer, got {d!r}")
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise AlgebraError(f"N must be a positive integer, got {N!r}")
    sizes = count_basis(kind, d, N)
    if sum(sizes) > basis_cap:
        raise AlgebraError(f"basis size {sum(sizes)} exceeds cap {basis_cap}")

    levels = _enumerate_words(d, N) if kind == "Shuffle" else _enumerate_rooted(d, N, kind == "MKW")
    basis = [b for level in levels for b in level]
    index = {b: k for k, b in enumerate(basis)}
    degrees = np.array([element_degree(kind, b) for b in basis], dtype=np.int64)

    prod_rows: list[tuple[int, int, int, float]] = []
    for i, a in enumerate(basis):
        for j, b in enumerate(basis):
            if degrees[i] + degrees[j] > N:
                continue
            for elem, c in _structure(kind, a, b).items():
                prod_rows.append((i, j, index[elem], float(c)))

    cop_rows: list[tuple[int, int, int, float]] = []
    for k, x in enumerate(basis):
        for (left, right), c in _costructure(kind, x).items():
            cop_rows.append((k, index[left], index[right], float(c)))

    graft = np.full((d, len(basis)), -1, dtype=np.int64)
    for i in range(1, d + 1):
        for k, x in enumerate(basis):
            if degrees[k] < N:
                graft[i - 1, k] = index[_graft(kind, i, x)]

    product = np.array(prod_rows, dtype=float).reshape(-1, 4)
    coproduct = np.array(cop_rows, dtype=float).reshape(-1, 4)
    weights = _calibrate_weights(coproduct, degrees, float(degree_base))
    return Algebra(kind, int(d), int(N), basis, degrees, product, coproduct, graft, weights, index)


def _pair_mass(alg_or_rows, weights: np.ndarray | None = None, dim: int | None = None) -> np.ndarray:
    """``M[i, j] = Σ_k |c_kij| v_k`` over coproduct rows."""
    if isinstance(alg_or_rows, Algebra):
        rows, weights, dim = alg_or_rows.coproduct, alg_or_rows.norm_weights, alg_or_rows.dim
    else:
        rows = alg_or_rows
    k = rows[:, 0].astype(np.intp)
    i = rows[:, 1].astype(np.intp)
    j = rows[:, 2].astype(np.intp)
    out = np.zeros((dim, dim))
    np.add.at(out, (i, j), np.abs(rows[:, 3]) * weights[k])
    return out


def _calibrate_weights(coproduct: np.ndarray, degrees: np.ndarray, base: float) -> np.ndarray:
    dim = len(degrees)
    geometric = base ** degrees.astype(float)
    factor = 1.0
    while True:
        weights = np.where(degrees == 0, 1.0, factor * geometric)
        ratio = _pair_mass(coproduct, weights, dim) / np.outer(weights, weights)
        if np.max(ratio) <= 1.0 + 1e-12:
            return weights
        factor *= 2.0


# ---------------------------------------------------------------------------
# Elements


@dataclass(frozen=True, eq=False)
class HopfElement:
    """Coefficient vector over the basis of an algebra.

    The same object stands for a functional through the orthonormal pairing.
    """

    algebra: Algebra
    vec: np.ndarray

    @classmethod
    def from_dict(cls, algebra: Algebra, coeffs: dict) -> "HopfElement":
        v = np.zeros(algebra.dim)
        for key, c in coeffs.items():
            if isinstance(key, str):
                key = parse_basis_string(algebra.kind, key, algebra.d)
            v[algebra.index[key]] += c
        return cls(algebra, v)

    @classmethod
    def unit(cls, algebra: Algebra) -> "HopfElement":
        return cls(algebra, algebra.unit_vector())

    @classmethod
    def basis(cls, algebra: Algebra, key) -> "HopfElement":
        return cls.from_dict(algebra, {key: 1.0})

    @property
    def coeffs(self) -> dict[tuple, float]:
        return {self.algebra.basis[k]: float(self.vec[k]) for k in np.flatnonzero(self.vec)}

    def labelled(self) -> dict[str, float]:
        return {self.algebra.label(k): float(self.vec[k]) for k in np.flatnonzero(self.vec)}

    def _check(self, other: "HopfElement") -> None:
        if other.algebra is not self.algebra:
            raise AlgebraError("operands belong to different algebras")

    def __add__(self, other: "HopfElement") -> "HopfElement":
        self._check(other)
        return HopfElement(self.algebra, self.vec + other.vec)

    def __sub__(self, other: "HopfElement") -> "HopfElement":
        self._check(other)
        return HopfElement(self.algebra, self.vec - other.vec)

    def __neg__(self) -> "HopfElement":
        return HopfElement(self.algebra, -self.vec)

    def __mul__(self, scalar: float) -> "HopfElement":
        return HopfElement(self.algebra, self.vec * float(scalar))

    __rmul__ = __mul__

    def allclose(self, other: "HopfElement", atol: float = 1e-12) -> bool:
        self._check(other)
        return bool(np.max(np.abs(self.vec - other.vec), initial=0.0) <= atol)


@dataclass(frozen=True, eq=False)
class TensorElement:
    """Element of the tensor square, stored as a dense coefficient matrix."""

    algebra: Algebra
    mat: np.ndarray

    @property
    def coeffs(self) -> dict[tuple[tuple, tuple], float]:
        basis = self.algebra.basis
        rows, cols = np.nonzero(self.mat)
        return {(basis[i], basis[j]): float(self.mat[i, j]) for i, j in zip(rows, cols)}


def product(a: HopfElement, b: HopfElement) -> HopfElement:
    a._check(b)
    return HopfElement(a.algebra, a.algebra.multiply(a.vec, b.vec))


def coproduct(x: HopfElement) -> TensorElement:
    return TensorElement(x.algebra, x.algebra.coproduct_matrix(x.vec))


def convolution(xi: HopfElement, eta: HopfElement) -> HopfElement:
    xi._check(eta)
    return HopfElement(xi.algebra, xi.algebra.convolve(xi.vec, eta.vec))


def counit(algebra: Algebra) -> HopfElement:
    """The counit, i.e. the functional dual to the unit; it is the unit for ⋆."""
    return HopfElement.unit(algebra)


def cocycle_L(i: int, x: HopfElement) -> HopfElement:
    return HopfElement(x.algebra, x.algebra.apply_graft(i, x.vec))


def pairing(x: HopfElement, y: HopfElement) -> float:
    x._check(y)
    return float(np.dot(x.vec, y.vec))


def graded_norm(x: HopfElement) -> float:
    return float(x.algebra.norm(x.vec))


def dual_norm(xi: HopfElement) -> float:
    return float(xi.algebra.dual_norm(xi.vec))


def reduced_coproduct_iter(h: HopfElement, n: int) -> dict[tuple[int, ...], float]:
    """n-fold iterated reduced coproduct on functionals, keyed by basis indices.

    ``n = 1`` is the identity; each further step splits the leftmost slot by
    ``Δ*(g) - 1*⊗g - g⊗1*`` where Δ* is the transpose of the product.
    """
    if n < 1:
        raise AlgebraError("n must be at least 1")
    alg = h.algebra
    split: dict[int, list[tuple[int, int, float]]] = defaultdict(list)
    for i, j, k, c in zip(alg._pr_i, alg._pr_j, alg._pr_k, alg._pr_c):
        if i != 0 and j != 0:
            split[int(k)].append((int(i), int(j), float(c)))
    current: dict[tuple[int, ...], float] = {(int(k),): float(h.vec[k]) for k in np.flatnonzero(h.vec)}
    for _ in range(n - 1):
        nxt: dict[tuple[int, ...], float] = defaultdict(float)
        for key, c in current.items():
            head, rest = key[0], key[1:]
            if head == 0:
                # Δ*(1*) = 1*⊗1*, minus both unit terms
                nxt[(0, 0) + rest] -= c
                continue
            for i, j, coef in split.get(head, ()):
                nxt[(i, j) + rest] += c * coef
        current = {k: v for k, v in nxt.items() if v != 0.0}
    return dict(current)


def reduced_pairing(alg: Algebra, h: np.ndarray, parts: Sequence[np.ndarray]) -> float | np.ndarray:
    """``<Δ*_red^{(n-1)} h, z_1 ⊗ ... ⊗ z_n>`` evaluated through products.

    Dualising the leftmost-slot recursion gives nested reduced products
    ``m(a, b) = ab - ε(a) b - ε(b) a``.
    """
    acc = parts[0]
    for z in parts[1:]:
        eps_a = acc[..., :1]
        eps_b = z[..., :1]
        acc = alg.multiply(acc, z) - eps_a * z - eps_b * acc
    return np.sum(h * acc, axis=-1)


@dataclass(frozen=True)
class Decomposition:
    scalar: float
    grafted: list[HopfElement]
    forest: HopfElement

    def recompose(self) -> HopfElement:
        alg = self.forest.algebra
        total = self.forest.vec + self.scalar * alg.unit_vector()
        for part in self.grafted:
            total = total + part.vec
        return HopfElement(alg, total)


def decompose(x: HopfElement) -> Decomposition:
    """Split x into its unit part, the images of each L_i, and the rest of Ker ε."""
    alg = x.algebra
    rest = x.vec.copy()
    rest[0] = 0.0
    grafted = []
    for i in range(1, alg.d + 1):
        mask = alg.graft_image_mask(i)
        grafted.append(HopfElement(alg, np.where(mask, x.vec, 0.0)))
        rest[mask] = 0.0
    return Decomposition(float(x.vec[0]), grafted, HopfElement(alg, rest))


# ---------------------------------------------------------------------------
# Arborification


def linear_extensions(forest: tuple) -> dict[tuple, int]:
    """Words read off the vertices of a forest, children before parents.

    Every vertex is distinct, so isomorphic subtrees contribute multiplicity.
    """
    out: dict[tuple, int] = defaultdict(int)

    def rec(roots: tuple, suffix: tuple) -> None:
        if not roots:
            out[suffix] += 1
            return
        for k, tree in enumerate(roots):
            rec(roots[:k] + roots[k + 1:] + tree[1], (tree[0],) + suffix)

    rec(tuple(forest), ())
    return dict(out)


def arborification_matrix(shuffle: Algebra, forests: Algebra) -> np.ndarray:
    """Matrix ``A[w, f]`` with ``𝔞(f) = Σ_w A[w, f] w``."""
    if shuffle.kind != "Shuffle" or forests.kind not in ("BCK", "MKW"):
        raise AlgebraError("arborification maps rooted forests to words")
    if shuffle.d != forests.d or shuffle.N != forests.N:
        raise AlgebraError("arborification needs equal d and N")
    A = np.zeros((shuffle.dim, forests.dim))
    for f_idx, f in enumerate(forests.basis):
        for word, c in linear_extensions(f).items():
            A[shuffle.index[word], f_idx] += c
    return A


def arborify(xi: HopfElement, forests: Algebra) -> HopfElement:
    """Pull a functional on words back to rooted forests: ``ξ ∘ 𝔞``."""
    A = arborification_matrix(xi.algebra, forests)
    return HopfElement(forests, xi.vec @ A)


# ---------------------------------------------------------------------------
# Axiom checks (each returns the largest absolute defect)


def _tensor3(alg: Algebra, left: bool, k: int) -> dict[tuple[int, int, int], float]:
    out: dict[tuple[int, int, int], float] = defaultdict(float)
    rows = alg.coproduct[alg.coproduct[:, 0] == k]
    for _, i, j, c in rows:
        i, j = int(i), int(j)
        split_idx = i if left else j
        for _, a, b, c2 in alg.coproduct[alg.coproduct[:, 0] == split_idx]:
            key = (int(a), int(b), j) if left else (i, int(a), int(b))
            out[key] += c * c2
    return out


def coassociativity_defect(alg: Algebra) -> float:
    worst = 0.0
    for k in range(alg.dim):
        lhs = _tensor3(alg, True, k)
        rhs = _tensor3(alg, False, k)
        for key in set(lhs) | set(rhs):
            worst = max(worst, abs(lhs.get(key, 0.0) - rhs.get(key, 0.0)))
    return worst


def counit_defect(alg: Algebra) -> float:
    worst = 0.0
    for k in range(alg.dim):
        D = alg.coproduct_matrix(alg.basis_vector(k))
        e = alg.basis_vector(k)
        worst = max(worst, np.max(np.abs(D[0, :] - e)), np.max(np.abs(D[:, 0] - e)))
    return float(worst)


def compatibility_defect(alg: Algebra, top: int | None = None) -> float:
    """Largest entry of Δ(ab) - (μ⊗μ)τ(Δa⊗Δb) over basis pairs with |a|+|b| ≤ top."""
    top = alg.N if top is None else top
    worst = 0.0
    eye = np.eye(alg.dim)
    for i in range(alg.dim):
        for j in range(alg.dim):
            if alg.degrees[i] + alg.degrees[j] > top:
                continue
            lhs = alg.coproduct_matrix(alg.multiply(eye[i], eye[j]))
            Da = alg.coproduct_matrix(eye[i])
            Db = alg.coproduct_matrix(eye[j])
            rhs = np.zeros_like(lhs)
            ai, aj = np.nonzero(Da)
            bi, bj = np.nonzero(Db)
            for p, q in zip(ai, aj):
                for r, s in zip(bi, bj):
                    c = Da[p, q] * Db[r, s]
                    left = alg.multiply(eye[p], eye[r])
                    right = alg.multiply(eye[q], eye[s])
                    rhs += c * np.outer(left, right)
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def cocycle_defect(alg: Algebra) -> float:
    """Δ L_i(x) - (Id⊗L_i)Δx - L_i(x)⊗1 on basis elements of degree ≤ N-1."""
    worst = 0.0
    for i in range(1, alg.d + 1):
        for k in np.flatnonzero(alg.degrees < alg.N):
            x = alg.basis_vector(k)
            Lx = alg.apply_graft(i, x)
            lhs = alg.coproduct_matrix(Lx)
            rhs = alg.apply_graft(i, alg.coproduct_matrix(x))
            rhs[:, 0] += Lx
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def graft_isometry_defect(alg: Algebra) -> float:
    """Largest deviation from <L_i x, L_j y> = δ_ij <x, y> over basis pairs."""
    images = [np.stack([alg.apply_graft(i, alg.basis_vector(k)) for k in range(alg.dim)])
              for i in range(1, alg.d + 1)]
    live = (alg.degrees < alg.N).astype(float)
    worst = 0.0
    for a in range(alg.d):
        for b in range(alg.d):
            gram = images[a] @ images[b].T
            expected = np.diag(live) if a == b else np.zeros_like(gram)
            worst = max(worst, float(np.max(np.abs(gram - expected))))
    return worst


def _product_table(alg: Algebra) -> np.ndarray:
    """``table[i, j] = b_i b_j`` as coefficient vectors."""
    table = np.zeros((alg.dim,) * 3)
    np.add.at(table, (alg._pr_i, alg._pr_j, alg._pr_k), alg._pr_c)
    return table


def commutativity_defect(alg: Algebra) -> float:
    table = _product_table(alg)
    return float(np.max(np.abs(table - table.transpose(1, 0, 2)), initial=0.0))


def associativity_defect(alg: Algebra) -> float:
    n = alg.dim
    table = _product_table(alg)
    left = sparse.csr_matrix(table.reshape(n * n, n))
    # (b_i b_j) b_k indexed by rows (i, j) and columns (k, out)
    lhs = (left @ sparse.csr_matrix(table.reshape(n, n * n))).tocoo()
    # b_i (b_j b_k) indexed by rows (j, k) and columns (i, out)
    rhs = (left @ sparse.csr_matrix(table.transpose(1, 0, 2).reshape(n, n * n))).tocoo()
    j, k = np.divmod(rhs.row, n)
    i, o = np.divmod(rhs.col, n)
    moved = sparse.coo_matrix((rhs.data, (i * n + j, k * n + o)), shape=(n * n, n * n))
    diff = (lhs.tocsr() - moved.tocsr()).tocoo()
    return float(np.max(np.abs(diff.data), initial=0.0))


def axiom_report(alg: Algebra) -> dict[str, float]:
    """Defects for the Hopf axioms used downstream; commutativity is reported too."""
    return {
        "coassociativity": coassociativity_defect(alg),
        "counit": counit_defect(alg),
        "compatibility": compatibility_defect(alg),
        "cocycle": cocycle_defect(alg),
        "graft_isometry": graft_isometry_defect(alg),
        "commutativity": commutativity_defect(alg),
        "coproduct_norm": alg.op_norm_coproduct(),
    }


def arborification_defects(shuffle: Algebra, forests: Algebra) -> dict[str, float]:
    """Algebra and coalgebra morphism defects of 𝔞 on basis pairs of total degree ≤ N."""
    A = arborification_matrix(shuffle, forests)
    eye = np.eye(forests.dim)
    alg_def = 0.0
    for i in range(forests.dim):
        for j in range(forests.dim):
            if forests.degrees[i] + forests.degrees[j] > forests.N:
                continue
            lhs = A @ forests.multiply(eye[i], eye[j])
            rhs = shuffle.multiply(A[:, i], A[:, j])
            alg_def = max(alg_def, float(np.max(np.abs(lhs - rhs))))
    coalg_def = 0.0
    for k in range(forests.dim):
        lhs = A @ forests.coproduct_matrix(eye[k]) @ A.T
        rhs = shuffle.coproduct_matrix(A[:, k])
        coalg_def = max(coalg_def, float(np.max(np.abs(lhs - rhs))))
    return {"algebra": alg_def, "coalgebra": coalg_def}


# ---------------------------------------------------------------------------
# Serialisation


def dump_algebra(alg: Algebra) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": alg.kind,
        "d": alg.d,
        "N": alg.N,
        "basis": [alg.label(k) for k in range(alg.dim)],
        "product": [[int(i), int(j), int(k), float(c)] for i, j, k, c in alg.product],
        "coproduct": [[int(k), int(i), int(j), float(c)] for k, i, j, c in alg.coproduct],
        "norm_weights": [float(w) for w in alg.norm_weights],
    }


def load_algebra(doc: dict | str) -> Algebra:
    if isinstance(doc, str):
        doc = json.loads(doc)
    if doc.get("format_version") != FORMAT_VERSION:
        raise AlgebraError(f"unsupported format version {doc.get('format_version')!r}")
    kind, d, N = doc["kind"], int(doc["d"]), int(doc["N"])
    basis = [parse_basis_string(kind, s, d) for s in doc["basis"]]
    index = {b: k for k, b in enumerate(basis)}
    degrees = np.array([element_degree(kind, b) for b in basis], dtype=np.int64)
    graft = np.full((d, len(basis)), -1, dtype=np.int64)
    for i in range(1, d + 1):
        for k, x in enumerate(basis):
            if degrees[k] < N:
                graft[i - 1, k] = index[_graft(kind, i, x)]
    return Algebra(
        kind, d, N, basis, degrees,
        np.array(doc["product"], dtype=float).reshape(-1, 4),
        np.array(doc["coproduct"], dtype=float).reshape(-1, 4),
        graft,
        np.array(doc["norm_weights"], dtype=float),
        index,
    )
