import numpy as np
import pytest

from mrtlmm.data import DesignBundle

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_bundle(rng, n=4, T=3, p=2, q=2, diagonal=False, ragged=True) -> DesignBundle:
    """Small random mixed-model design; Z shares columns with X like the GM models."""
    X, Z, y = [], [], []
    for _ in range(n):
        ni = int(rng.integers(1, T + 1)) if ragged else T
        x = np.column_stack([np.ones(ni), rng.normal(size=(ni, p - 1))])
        z = np.column_stack([np.ones(ni), rng.normal(size=(ni, q - 1))]) if q > 1 else np.ones((ni, 1))
        X.append(x)
        Z.append(z)
        y.append(rng.normal(size=ni) * 2 + 1)
    if sum(len(v) for v in y) <= p + 1:
        return random_bundle(rng, n, T, p, q, diagonal, ragged)
    names = ["(Intercept)"] + [f"x{j}" for j in range(1, p)]
    rnames = ["(Intercept)"] + [f"z{j}" for j in range(1, q)]
    return DesignBundle(tuple(X), tuple(Z), tuple(y), tuple(names), tuple(rnames), diagonal_G=diagonal)


def one_way_bundle(y: np.ndarray) -> DesignBundle:
    """Balanced one-way random-intercept design; ``y`` has shape (a, T)."""
    a, T = y.shape
    ones = np.ones((T, 1))
    return DesignBundle(
        tuple(ones for _ in range(a)),
        tuple(ones for _ in range(a)),
        tuple(y),
        ("(Intercept)",),
        ("(Intercept)",),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
