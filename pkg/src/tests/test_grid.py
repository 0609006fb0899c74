"""Tests for grids, density pairs, quantiles and the Wasserstein distance."""

import numpy as np
import pytest

from src.errors import DomainError
from src.grid import (
    DensityPair,
    Grid1D,
    QuantilePair,
    box_density,
    combined_first_moment,
    convolve,
    from_quantiles,
    moments,
    pair_distance,
    perturb_pair,
    random_pair,
    recenter,
    to_quantiles,
    w2_distance,
)
from src.models import KernelSpec


@pytest.fixture
def aligned_grid():
    """Grid on [-2, 2] with dx = 0.5, so boxes on integer endpoints are exact."""
    return Grid1D(L=2.0, n=8)


def test_grid_rejects_bad_sizes():
    with pytest.raises(DomainError):
        Grid1D(L=1.0, n=4)
    with pytest.raises(DomainError):
        Grid1D(L=-1.0, n=64)


def test_centers_are_exactly_symmetric():
    grid = Grid1D(L=4.579, n=512)
    assert np.array_equal(grid.centers, -grid.centers[::-1])
    assert grid.edges[0] == -grid.L


def test_density_pair_rejects_negative_entries(aligned_grid):
    rho = box_density(aligned_grid, -1.0, 1.0)
    bad = rho.copy()
    bad[3] = -1e-3
    with pytest.raises(DomainError):
        DensityPair(aligned_grid, rho, bad)


def test_box_density_has_unit_mass(aligned_grid):
    rho = box_density(aligned_grid, -1.0, 1.0)
    assert rho.sum() * aligned_grid.dx == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(rho, [0, 0, 0.5, 0.5, 0.5, 0.5, 0, 0])


def test_recenter_moves_combined_center_to_zero():
    """Both species are shifted by the same amount and keep unit mass."""
    grid = Grid1D(L=4.0, n=256)
    pair = DensityPair(grid, box_density(grid, 0.2, 1.2), box_density(grid, -0.3, 0.7))
    centered = recenter(pair)
    mass1, mass2, m11, m12, _, _ = moments(centered)
    assert abs(combined_first_moment(centered)) <= 1e-10
    assert mass1 == pytest.approx(1.0, abs=1e-12)
    assert mass2 == pytest.approx(1.0, abs=1e-12)
    # The gap between the species is preserved
    assert m11 - m12 == pytest.approx(0.5, abs=1e-10)


def test_quadratic_convolution_matches_moments(rng):
    """K * rho = lam/2 (x^2 - 2 x m1 + m2) for the quadratic kernel."""
    grid = Grid1D(L=3.0, n=128)
    pair = random_pair(grid, rng)
    K = KernelSpec(lam=2.0)
    _, _, m1, _, m2, _ = moments(pair)
    x = grid.centers
    np.testing.assert_allclose(convolve(K, pair.rho1, grid), 1.0 * (x * x - 2 * x * m1 + m2), atol=1e-11)


def test_quantiles_of_box(aligned_grid):
    """The piecewise-linear CDF of a box is inverted exactly."""
    rho = box_density(aligned_grid, -1.0, 1.0)
    np.testing.assert_allclose(to_quantiles(rho, aligned_grid, 4), [-0.75, -0.25, 0.25, 0.75], atol=1e-14)


def test_from_quantiles_restores_box(aligned_grid):
    rho = box_density(aligned_grid, -1.0, 1.0)
    X = to_quantiles(rho, aligned_grid, 4)
    np.testing.assert_allclose(from_quantiles(X, 4, aligned_grid), rho, atol=1e-12)


def test_from_quantiles_rejects_bad_input(aligned_grid):
    with pytest.raises(DomainError):
        from_quantiles(np.array([-0.5, -0.5, 0.5, 1.0]), 4, aligned_grid)
    with pytest.raises(DomainError):
        from_quantiles(np.array([-1.9, -0.5, 0.5, 1.9]), 4, aligned_grid)


def test_quantile_pair_requires_monotone_arrays():
    with pytest.raises(DomainError):
        QuantilePair(np.array([0.0, 1.0, 0.5]), np.array([0.0, 0.5, 1.0]))


def test_w2_of_translated_box(aligned_grid):
    """Translating a box by one unit moves every quantile by one."""
    left = box_density(aligned_grid, -1.0, 0.0)
    right = box_density(aligned_grid, 0.0, 1.0)
    assert w2_distance(left, right, aligned_grid, 16) == pytest.approx(1.0, abs=1e-12)
    assert w2_distance(left, left, aligned_grid, 16) == 0.0


def test_pair_distance_needs_matching_grids(aligned_grid):
    other = Grid1D(L=2.0, n=16)
    p = DensityPair(aligned_grid, box_density(aligned_grid, -1, 1), box_density(aligned_grid, -1, 1))
    q = DensityPair(other, box_density(other, -1, 1), box_density(other, -1, 1))
    with pytest.raises(DomainError):
        pair_distance(p, q, 16)


def test_random_pair_is_reproducible_and_in_x0():
    grid = Grid1D(L=4.0, n=256)
    first = random_pair(grid, np.random.default_rng(7))
    second = random_pair(grid, np.random.default_rng(7))
    np.testing.assert_array_equal(first.rho1, second.rho1)
    assert first.check_invariants() == []


def test_perturb_pair_keeps_mass_and_support(steady):
    perturbed = perturb_pair(steady.pair, 0.1)
    assert perturbed.check_invariants() == []
    assert np.all(perturbed.rho1[steady.pair.rho1 == 0] == 0)
    assert not np.allclose(perturbed.rho1, steady.pair.rho1)


def test_w2_triangle_inequality(grid, rng):
    for _ in range(10):
        a, b, c = random_pair(grid, rng).rho1, random_pair(grid, rng).rho2, random_pair(grid, rng).rho1
        d_ac = w2_distance(a, c, grid, 512)
        d_ab = w2_distance(a, b, grid, 512)
        d_bc = w2_distance(b, c, grid, 512)
        assert d_ac <= d_ab + d_bc + 1e-9
