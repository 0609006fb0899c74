"""Tests for the upwind finite-volume scheme."""

import numpy as np
import pytest

from src.errors import CFLViolationError
from src.flow import active_speed, cfl_dt, fv_step, parabolic_dt, run_flow, velocity_fields
from src.grid import (
    DensityPair,
    Grid1D,
    combined_first_moment,
    gaussian_density,
    l1_distance,
    random_pair,
    uniform_pair,
)
from src.lyapunov import decay_fit
from src.models import FlowConfig, GridConfig
from src.steady import make_grid, solve_steady_quadratic


def test_boundary_faces_carry_no_flux(base_model, grid):
    pair = uniform_pair(grid, 0.75)
    for v in velocity_fields(pair, base_model):
        assert v.shape == (grid.n + 1,)
        assert v[0] == 0.0
        assert v[-1] == 0.0


def test_step_conserves_mass_and_center(base_model, grid):
    pair = uniform_pair(grid, 0.75)
    dt = min(cfl_dt(pair, base_model), parabolic_dt(pair, base_model))
    after = fv_step(pair, base_model, dt)
    np.testing.assert_allclose(after.masses, pair.masses, atol=1e-13)
    # The scheme is symmetric, so the combined center stays at zero
    assert abs(combined_first_moment(after)) <= 1e-12


def test_cfl_step_on_a_random_state(base_model, grid, rng):
    pair = random_pair(grid, rng)
    velocities = velocity_fields(pair, base_model)
    dt = cfl_dt(pair, base_model, cfl_safety=0.4, dt_max=np.inf, velocities=velocities)
    assert dt * active_speed(pair, velocities) <= 0.4 * grid.dx * (1.0 + 1e-12)


def test_doubling_n_halves_the_cfl_step(base_model, grid):
    """The same smooth state sampled on n and 2n cells."""
    fine = Grid1D(L=grid.L, n=2 * grid.n)
    coarse_pair = DensityPair(grid, gaussian_density(grid, -0.2, 0.5), gaussian_density(grid, 0.2, 0.5))
    fine_pair = DensityPair(fine, gaussian_density(fine, -0.2, 0.5), gaussian_density(fine, 0.2, 0.5))
    coarse_dt = cfl_dt(coarse_pair, base_model, dt_max=np.inf)
    fine_dt = cfl_dt(fine_pair, base_model, dt_max=np.inf)
    assert fine_dt / coarse_dt == pytest.approx(0.5, rel=0.05)


def test_steady_state_is_stationary(base_model, steady):
    """No flux-carrying face moves mass at the steady state, so dt is capped."""
    dt = cfl_dt(steady.pair, base_model, dt_max=1e-2)
    assert dt == 1e-2
    after = fv_step(steady.pair, base_model, dt)
    assert l1_distance(after.rho1, steady.pair.rho1, steady.grid) <= 1e-6
    assert l1_distance(after.rho2, steady.pair.rho2, steady.grid) <= 1e-6


def test_oversized_step_is_rejected(base_model, grid):
    pair = uniform_pair(grid, 0.75)
    with pytest.raises(CFLViolationError) as info:
        fv_step(pair, base_model, 1.0)
    assert info.value.snapshot is pair


def test_short_run_dissipates_energy(base_model):
    grid = make_grid(base_model, GridConfig(n=128))
    steady = solve_steady_quadratic(base_model, grid)
    run = run_flow(uniform_pair(grid, 0.75), base_model, steady, FlowConfig(T=0.2, snapshot_every=10), quantiles=128)
    trace = run.trace
    assert trace.times[-1] == pytest.approx(0.2)
    assert trace.max_energy_increase() <= 1e-9
    assert run.max_step_mass_drift <= 1e-12
    assert run.max_center_drift <= 10 * grid.dx
    assert trace.E_eps[-1] < trace.E_eps[0]
    assert trace.L1_err_1[-1] < trace.L1_err_1[0]
    assert len(trace.to_frame()) == len(trace)


@pytest.mark.slow
def test_energy_gap_decays_at_twice_lambda(base_model):
    """eps = 0 from the uniform start: the fitted energy rate is at least 0.9 * 2 lam."""
    grid = make_grid(base_model, GridConfig(n=256))
    steady = solve_steady_quadratic(base_model, grid)
    run = run_flow(uniform_pair(grid, 0.75), base_model, steady, FlowConfig(T=2.5), quantiles=128)
    fit = decay_fit(run.trace, [0.5, 2.5])
    assert fit.rate_E >= 0.9 * 2 * base_model.kernel.lam
    assert fit.rate_L1 > 0
