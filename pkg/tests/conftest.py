from __future__ import annotations

import numpy as np
import pytest

from eelearn import Economy, linear

# Three linear agents, two goods; equilibrium at uniform prices.
WORKED_ENDOWMENTS = np.array([[0.45, 0.05], [0.45, 0.05], [0.1, 0.9]])
WORKED_THETAS = np.array([[0.1, 1.0], [0.2, 1.0], [1.0, 0.1]])
WORKED_EQ_ALLOCATION = np.array([[0.0, 0.5], [0.0, 0.5], [1.0, 0.0]])
WORKED_EQ_PRICES = np.array([0.5, 0.5])
WORKED_ALT_ALLOCATION = np.array([[0.35, 0.49], [0.35, 0.49], [0.3, 0.02]])


def make_worked_economy(sigma: float = 0.1) -> Economy:
    return Economy(WORKED_ENDOWMENTS, tuple(linear(th) for th in WORKED_THETAS), sigma)


@pytest.fixture
def worked() -> Economy:
    return make_worked_economy()


def random_economy(rng: np.random.Generator, n: int, m: int, family: str, rho: float = 0.5,
                   f: float = 0.3, sigma: float = 0.1) -> Economy:
    from eelearn import amdahl, ces

    E = rng.dirichlet(np.ones(n), size=m).T
    us = []
    for _ in range(n):
        th = rng.uniform(0.1, 1.0, size=m)
        if family == "linear":
            us.append(linear(th))
        elif family == "ces":
            us.append(ces(th, rho))
        else:
            us.append(amdahl(th, f))
    return Economy(E, tuple(us), sigma)
