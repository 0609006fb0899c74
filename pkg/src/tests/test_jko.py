"""Tests for the minimizing-movement scheme in quantile coordinates."""

import json
from pathlib import Path

import numpy as np
import pytest

from src.cli import load_config
from src.errors import DomainError
from src.experiment_service import experiment_service
from src.grid import (
    QuantilePair,
    mass_levels,
    pair_from_quantiles,
    pair_quantiles,
    quantile_distance,
    uniform_pair,
)
from src.jko import (
    JkoProblem,
    Zeta,
    energy_gradient,
    h1_diagnostics,
    internal_energy,
    jko_objective,
    jko_run,
    jko_step,
    lagrangian_energy,
    minimize_step,
    pav_project,
    quasi_continuity_ratio,
    random_step_report,
    weak_residual,
    weak_residual_grid,
)
from src.models import GridConfig, JkoConfig, PowerNonlinearity
from src.steady import make_grid, solve_steady_quadratic

CONFIGS = Path(__file__).resolve().parents[2] / "configs"


@pytest.fixture(scope="module")
def small_grid(base_model):
    return make_grid(base_model, GridConfig(n=128))


@pytest.fixture(scope="module")
def start(small_grid):
    return pair_quantiles(uniform_pair(small_grid, 0.75), 64)


def test_pav_projection():
    np.testing.assert_allclose(pav_project(np.array([3.0, 1.0, 2.0])), [2.0, 2.0, 2.0])
    np.testing.assert_allclose(pav_project(np.array([0.0, 2.0, 1.0, 3.0])), [0.0, 1.5, 1.5, 3.0])
    sorted_input = np.array([-1.0, 0.0, 4.0])
    np.testing.assert_array_equal(pav_project(sorted_input), sorted_input)


def test_internal_energy_of_box():
    """Half-height box on [-1, 1] with F(r) = r^2 / 2 has internal energy 1/4."""
    m = 40
    X = -1.0 + 2.0 * mass_levels(m)
    assert internal_energy(X, PowerNonlinearity(a=2)) == pytest.approx(0.25, rel=1e-13)
    X[5] = X[4]
    assert internal_energy(X, PowerNonlinearity(a=2)) == np.inf


def test_lagrangian_energy_of_centered_boxes(base_model):
    """Unit boxes on [-1/2, 1/2]: internal 1, interaction equal to the discrete variance."""
    m = 50
    X = mass_levels(m) - 0.5
    Q = QuantilePair(X, X.copy())
    assert lagrangian_energy(Q, base_model) == pytest.approx(1.0 + (1.0 - 1.0 / m**2) / 12.0, rel=1e-12)


def test_energy_gradient_matches_finite_differences(base_model, rng):
    m = 32
    # Jittered uniform spacing keeps every gap well above the difference step
    Q = QuantilePair(
        np.linspace(-1.0, 1.0, m) + rng.uniform(-0.01, 0.01, m),
        np.linspace(-0.8, 1.0, m) + rng.uniform(-0.01, 0.01, m),
    )
    grad = energy_gradient(Q, base_model)
    x = Q.stacked()
    step = 1e-6
    for i in (0, 7, m - 1, m, m + 20, 2 * m - 1):
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        fd = (
            lagrangian_energy(QuantilePair.from_stacked(up), base_model)
            - lagrangian_energy(QuantilePair.from_stacked(down), base_model)
        ) / (2 * step)
        assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_minimize_step_decreases_objective(base_model, start):
    cfg = JkoConfig(m=64, tau=1e-2)
    result = minimize_step(start, base_model, cfg)
    assert result.converged
    assert result.step_slack <= 1e-6
    assert result.energy_next < result.energy_prev
    assert jko_objective(result.X, start, base_model, cfg.tau) == pytest.approx(result.objective, rel=1e-12)
    assert result.objective <= jko_objective(start, start, base_model, cfg.tau) + 1e-12


def test_weak_residual_within_energy_drop(base_model, start):
    cfg = JkoConfig(m=64, tau=1e-2)
    X = minimize_step(start, base_model, cfg).X
    residual = weak_residual(start, X, base_model, cfg.tau)
    assert residual.ratio <= 1.05
    # Mass is conserved exactly, so the constant test function leaves nothing
    constant = weak_residual(start, X, base_model, cfg.tau, zeta_set=[Zeta(scale=None)])
    assert constant.R1[0] == 0.0
    assert constant.R2[0] == 0.0


def test_objective_rejects_bad_arguments(base_model, start):
    with pytest.raises(DomainError):
        jko_objective(start, start, base_model, 0.0)
    shorter = QuantilePair(start.X1[:-1], start.X2[:-1])
    with pytest.raises(DomainError):
        jko_objective(shorter, start, base_model, 1e-2)
    with pytest.raises(DomainError):
        JkoProblem(start, base_model, -1.0)


def test_coupled_energy_needs_grid(coupled_model, start):
    with pytest.raises(DomainError):
        lagrangian_energy(start, coupled_model)


def test_test_function_norms():
    assert Zeta(scale=None).c2_norm() == 1.0
    # g, g' and g'' of the unit gaussian peak at 1, exp(-1/2) and 1
    assert Zeta(0, 1.0).c2_norm() == pytest.approx(1.0, rel=1e-9)
    with pytest.raises(DomainError):
        Zeta(3, 1.0).derivatives(np.zeros(3))


def test_h1_cut_equals_full_above_the_maximum_height(base_model, start, small_grid):
    cfg = JkoConfig(m=64, tau=1e-2)
    X = minimize_step(start, base_model, cfg).X
    report = h1_diagnostics(start, X, base_model, cfg.tau, alpha=1e6, grid=small_grid)
    assert report["lhs_cut_raw"] == report["lhs_full"]
    assert report["energy_drop"] > 0
    assert np.isfinite(report["ratio_weighted"])


def test_short_run_is_monotone_and_quasi_continuous(base_model, small_grid):
    steady = solve_steady_quadratic(base_model, small_grid)
    run = jko_run(uniform_pair(small_grid, 0.75), base_model, JkoConfig(m=64, tau=1e-2), 3, steady)
    assert len(run.iterates) == 4
    assert len(run.steps) == 3
    assert len(run.trace) == 4
    assert run.energy_increase() <= 1e-12
    assert run.max_step_slack() <= 1e-6
    assert run.quasi_continuity <= 1.0
    assert quasi_continuity_ratio(run.iterates[:1], 1.0, 1e-2) == 0.0


def test_step_from_the_steady_state_barely_moves(base_model, start, small_grid):
    cfg = JkoConfig(m=64, tau=1e-2)
    steady = solve_steady_quadratic(base_model, small_grid)
    at_rest = pair_quantiles(steady.pair, cfg.m)
    rest_move = quantile_distance(jko_step(at_rest, base_model, cfg), at_rest)
    box_move = quantile_distance(jko_step(start, base_model, cfg), start)
    np.testing.assert_array_equal(jko_step(start, base_model, cfg).X1, minimize_step(start, base_model, cfg).X.X1)
    assert rest_move < 0.5 * box_move


def test_eulerian_weak_residual(base_model, start, small_grid):
    box = uniform_pair(small_grid, 0.75)
    # No motion and a constant test function: both terms vanish
    still = weak_residual_grid(box, box, base_model, 1e-2, zeta_set=[Zeta(scale=None)])
    assert still.R1[0] == 0.0 and still.R2[0] == 0.0
    assert still.ratio == 0.0

    cfg = JkoConfig(m=64, tau=1e-2)
    X = minimize_step(start, base_model, cfg).X
    moved = weak_residual_grid(
        pair_from_quantiles(start, small_grid), pair_from_quantiles(X, small_grid), base_model, cfg.tau
    )
    assert np.all(np.isfinite(moved.R1)) and np.all(np.isfinite(moved.R2))
    assert np.all(moved.R1 >= 0.0) and np.all(moved.R2 >= 0.0)


def test_next_energy_is_evaluated_directly(base_model, start):
    result = minimize_step(start, base_model, JkoConfig(m=64, tau=1e-2))
    assert result.energy_next == lagrangian_energy(result.X, base_model)
    assert result.energy_prev == lagrangian_energy(start, base_model)


def test_step_inequality_on_random_starts(base_model, coupled_model, small_grid, rng):
    """Fifty single steps at tol 1e-8, alternating the uncoupled and the coupled model."""
    cfg = JkoConfig(m=64, tol=1e-8)
    rows = random_step_report(base_model, small_grid, cfg, 25, rng)
    rows += random_step_report(coupled_model, small_grid, cfg, 25, rng)
    assert len(rows) == 50
    assert max(row["slack"] for row in rows) <= 1e-6


def test_gradient_bounds_on_random_steps(base_model, small_grid, rng):
    rows = random_step_report(base_model, small_grid, JkoConfig(m=128), 10, rng)
    for row in rows:
        assert row["ratio_cut"] <= 1.1
        assert row["ratio_weighted"] <= 1.1


@pytest.mark.slow
def test_finite_volume_and_jko_agree(tmp_path):
    """Both integrators started from the same box end within W2 distance 0.05 at T = 0.5."""
    config = load_config(str(CONFIGS / "jko.json"))
    assert config.jko.nsteps * config.jko.config.tau == pytest.approx(0.5)
    result = experiment_service.run(config, tmp_path)
    assert result["success"]
    summary = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert summary["results"]["fv_w2_gap"] <= 0.05
    assert summary["checks"]["fv_agreement"] is True
