from __future__ import annotations

from functools import lru_cache

import numpy as np
import pytest

from hopfrough.hopf_core import build_algebra


@lru_cache(maxsize=None)
def algebra(kind: str, d: int, N: int):
    return build_algebra(kind, d, N)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


AREA_A1 = np.array([[0.3, 0.5], [-0.2, 0.1]])
AREA_A2 = np.array([[0.1, -0.4], [0.5, 0.2]])


def random_driver(rng, kind: str = "Shuffle", d: int = 2, N: int = 2, samples: int = 5, T: float = 1.0):
    from hopfrough.rough_path import branched_lift, signature_lift

    words = algebra("Shuffle", d, N)
    times = np.linspace(0.0, T, samples)
    X = signature_lift(times, np.cumsum(rng.normal(scale=0.6, size=(samples, d)), axis=0), words, 1.0 / N)
    return X if kind == "Shuffle" else branched_lift(X, algebra(kind, d, N))


def random_controlled(rng, X, e: int = 2, n_times: int = 9, smooth: str | None = None):
    """A transported path, optionally pushed through a smooth field."""
    from hopfrough.controlled_path import compose_smooth, make_field, transported_path

    alg = X.algebra
    z0 = np.zeros((e, alg.dim))
    z0[:, : alg.dim - len(alg.degree_indices(alg.N))] = rng.normal(size=(e, alg.dim - len(alg.degree_indices(alg.N))))
    Z = transported_path(X, z0, np.linspace(0.0, X.T, n_times))
    if smooth is not None:
        Z = compose_smooth(make_field(smooth, e, {"scale": 0.7}), Z)
    return Z


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
