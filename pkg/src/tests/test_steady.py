"""Tests for the steady-state solvers and the analytic profile."""

import numpy as np
import pytest

from src.errors import ConfigurationError, DomainError
from src.grid import DensityPair, Grid1D, gaussian_density, l1_distance, moments
from src.models import GridConfig, KernelSpec, KernelType, SteadyParams, SteadySolver
from src.steady import (
    barenblatt_constant,
    barenblatt_radius,
    barenblatt_state,
    el_residual,
    epsilon_sweep,
    inverse_curvature_integral,
    make_grid,
    solve_steady,
    solve_steady_general,
    solve_steady_quadratic,
)

C_TILDE = 0.655185
RADIUS = 1.144714


def test_barenblatt_closed_form():
    """For a = 2 the height constant is (9 lam / 32)^(1/3)."""
    assert barenblatt_constant(1.0, 2.0) == pytest.approx((9.0 / 32.0) ** (1.0 / 3.0), rel=1e-12)
    assert barenblatt_constant() == pytest.approx(C_TILDE, abs=1e-6)
    assert barenblatt_radius() == pytest.approx(RADIUS, abs=1e-6)


def test_quadratic_solver_reproduces_barenblatt(base_model):
    """n = 512: constants, support radius and second moment within 1e-3."""
    grid = make_grid(base_model, GridConfig(n=512))
    state = solve_steady_quadratic(base_model, grid)
    for c in state.C_tilde:
        assert c == pytest.approx(C_TILDE, rel=1e-3)
    assert state.support1 == pytest.approx(RADIUS, rel=1e-3)
    assert state.support2 == pytest.approx(RADIUS, rel=1e-3)
    _, _, _, _, m21, m22 = moments(state.pair)
    assert m21 == pytest.approx(2 * C_TILDE / 5, rel=1e-3)
    assert m22 == pytest.approx(2 * C_TILDE / 5, rel=1e-3)
    assert state.residual <= 1e-8
    assert state.evenness() <= 1e-8


def test_analytic_state_is_close_to_discrete_one(base_model, grid, steady):
    analytic = barenblatt_state(base_model, grid)
    assert l1_distance(analytic.pair.rho1, steady.pair.rho1, grid) <= 5e-3


def test_coupled_steady_state(coupled_model, coupled_steady):
    """eps = 0.05: unit masses, even profiles, identical species for symmetric parameters."""
    state = coupled_steady
    assert state.residual <= 1e-8
    assert state.evenness() <= 1e-8
    mass1, mass2 = state.pair.masses
    assert mass1 == pytest.approx(1.0, abs=1e-10)
    assert mass2 == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(state.pair.rho1, state.pair.rho2, atol=1e-8)
    assert max(el_residual(state, coupled_model)) <= 1e-8
    assert state.K0_estimate >= 0


def test_general_solver_agrees_with_quadratic_solver(base_model, grid, steady):
    general = solve_steady_general(base_model, grid)
    distance = l1_distance(general.pair.rho1, steady.pair.rho1, grid) + l1_distance(
        general.pair.rho2, steady.pair.rho2, grid
    )
    assert distance <= 1e-8
    assert general.solver == "general"


def test_general_solver_is_independent_of_initialization(base_model, grid, steady):
    """An off-center, unequal start converges to the same minimizer."""
    start = DensityPair(grid, gaussian_density(grid, 0.4, 0.3), gaussian_density(grid, -0.2, 0.6))
    general = solve_steady_general(base_model, grid, tol=1e-11, init=start)
    distance = l1_distance(general.pair.rho1, steady.pair.rho1, grid) + l1_distance(
        general.pair.rho2, steady.pair.rho2, grid
    )
    assert distance <= 2e-10


def test_regularized_kernel_uses_general_solver(base_model):
    model = base_model.model_copy(
        update={"kernel": KernelSpec(type=KernelType.REGULARIZED_QUADRATIC, lam=1.0, mu=0.5)}
    )
    grid = make_grid(model, GridConfig(n=256))
    with pytest.raises(ConfigurationError):
        solve_steady_quadratic(model, grid)
    state = solve_steady(model, grid, SteadyParams(solver=SteadySolver.AUTO))
    assert state.solver == "general"
    assert state.residual <= 1e-8
    # The stronger attraction concentrates the profile
    assert state.support1 < RADIUS


def test_domain_too_small_is_reported(base_model):
    with pytest.raises(DomainError, match="boundary"):
        solve_steady_quadratic(base_model, Grid1D(L=1.0, n=64))


def test_epsilon_sweep_bounds(base_model, grid):
    """H0 and R0 dominate every row of the sweep."""
    sweep = epsilon_sweep(base_model, grid, [0.0, 0.02, 0.05])
    assert len(sweep["rows"]) == 3
    assert all(row["height"] <= sweep["H0"] for row in sweep["rows"])
    assert all(row["radius"] <= sweep["R0"] for row in sweep["rows"])


def test_inverse_curvature_integral_is_support_length(base_model, grid, steady):
    """F'' = 1 for a = 2, so the integral measures the support."""
    first, second = inverse_curvature_integral(steady, base_model)
    assert first == pytest.approx(2 * RADIUS, abs=2 * grid.dx)
    assert second == pytest.approx(first)
