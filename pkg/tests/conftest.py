import numpy as np
import pytest
from hypothesis import strategies as st

from qndfeedback.kraus import toy_rotation_family


@pytest.fixture
def toy2():
    return toy_rotation_family(2, (0.3, 1.1))


@pytest.fixture
def toy3():
    return toy_rotation_family(3)


def random_density(rng: np.random.Generator, d: int, rank: int | None = None) -> np.ndarray:
    k = rank or d
    g = rng.normal(size=(d, k)) + 1j * rng.normal(size=(d, k))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


@st.composite
def densities(draw, d=None, max_dim=4):
    dim = d or draw(st.integers(2, max_dim))
    seed = draw(st.integers(0, 2**32 - 1))
    rank = draw(st.integers(1, dim))
    return random_density(np.random.default_rng(seed), dim, rank)
