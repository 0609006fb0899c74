"""Shared fixtures for the lab test suite."""

import numpy as np
import pytest

from src.models import GridConfig, ModelSpec
from src.steady import make_grid, solve_steady_quadratic


@pytest.fixture(scope="session")
def base_model() -> ModelSpec:
    """Admissible power-law model (2, 2, 3, 3, 4), uncoupled, quadratic kernel with lambda = 1."""
    return ModelSpec(a1=2, a2=2, b1=3, b2=3, gamma=4)


@pytest.fixture(scope="session")
def coupled_model(base_model) -> ModelSpec:
    return base_model.with_eps(0.05)


@pytest.fixture(scope="session")
def grid(base_model):
    return make_grid(base_model, GridConfig(n=256))


@pytest.fixture(scope="session")
def steady(base_model, grid):
    return solve_steady_quadratic(base_model, grid)


@pytest.fixture(scope="session")
def coupled_steady(coupled_model, grid):
    return solve_steady_quadratic(coupled_model, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
