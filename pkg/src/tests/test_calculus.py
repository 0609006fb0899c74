"""Tests for the closed-form calculus, Gamma_eps and the admissibility gate."""

import numpy as np
import pytest
from pydantic import ValidationError

from src.calculus import (
    bregman,
    coupling_eval,
    estimate_kappa,
    gamma_inverse,
    gamma_inverse_array,
    gamma_map,
    gamma_map_array,
    hypothesis_numeric_audit,
    power_bounds,
    require_admissible,
    theta_eval,
    validate_example_params,
    with_kappa,
)
from src.errors import ConfigurationError, DomainError
from src.models import CouplingTerm, ModelSpec, PowerNonlinearity, SampleSpec, ThetaTerm


@pytest.mark.parametrize(
    "params, expected",
    [
        ((2, 2, 3, 3, 4), [True, True, True]),
        ((1.5, 2, 3, 3, 4), [False, True, False]),
        ((2, 2, 2.5, 3, 4), [True, False, True]),
        ((2, 2, 3, 3, 3), [True, True, False]),
        ((3, 2, 5, 3, 6), [True, True, True]),
        ((2, 3, 3, 5, 6), [True, True, True]),
        ((2, 3, 3, 4.5, 6), [True, False, True]),
        ((4, 4, 7, 7, 10), [True, True, True]),
        ((4, 4, 7, 7, 9), [True, True, False]),
    ],
)
def test_admissibility_classification(params, expected):
    """Each condition follows the inequality logic exactly, boundary cases included."""
    report = validate_example_params(*params)
    assert [c.passed for c in report.conditions] == expected
    assert report.admissible == all(expected)


def test_admissibility_rejects_non_positive_and_non_finite():
    """Zero and NaN parameters are rejected before classification."""
    with pytest.raises(ValidationError):
        validate_example_params(0, 2, 3, 3, 4)
    with pytest.raises(ValidationError):
        validate_example_params(2, 2, float("nan"), 3, 4)


def test_require_admissible_raises_configuration_error():
    """The gate used by every experiment raises with the failing condition named."""
    with pytest.raises(ConfigurationError, match="a_j >= 2"):
        require_admissible(ModelSpec(a1=1.5, a2=2, b1=3, b2=3, gamma=4))


def test_coupling_mixed_partials_agree(base_model, rng):
    """d12 and d21 come from different expansions but agree."""
    r1 = rng.uniform(0.0, 5.0, 200)
    r2 = rng.uniform(0.0, 5.0, 200)
    d12 = coupling_eval(base_model.h, CouplingTerm.D12, r1, r2)
    d21 = coupling_eval(base_model.h, CouplingTerm.D21, r1, r2)
    np.testing.assert_allclose(d12, d21, rtol=1e-12, atol=1e-14)


def test_coupling_first_derivative_matches_finite_difference(base_model):
    """d1 h against a central difference of h."""
    r1, r2, step = 0.7, 1.3, 1e-6
    fd = (
        coupling_eval(base_model.h, CouplingTerm.H, r1 + step, r2)
        - coupling_eval(base_model.h, CouplingTerm.H, r1 - step, r2)
    ) / (2 * step)
    assert coupling_eval(base_model.h, CouplingTerm.D1, r1, r2) == pytest.approx(fd, rel=1e-7)


def test_coupling_rejects_negative_density(base_model):
    with pytest.raises(DomainError):
        coupling_eval(base_model.h, CouplingTerm.H, -0.1, 1.0)


def test_theta_vanishes_on_boundary(base_model):
    """theta is extended by zero when one of the u_j is zero."""
    assert theta_eval(base_model, ThetaTerm.THETA1, 0.0, 1.0) == 0.0
    assert theta_eval(base_model, ThetaTerm.THETA21, 2.0, 0.0) == 0.0


def test_gamma_round_trip(base_model, rng):
    """Gamma_eps(Gamma_eps^-1(v)) = v on random points for eps = 0.1."""
    m = with_kappa(base_model.with_eps(0.1))
    u1 = rng.uniform(0.0, 4.0, 1000)
    u2 = rng.uniform(0.0, 4.0, 1000)
    v1, v2 = gamma_map_array(m, u1, u2)
    back1, back2 = gamma_inverse_array(m, v1, v2)
    w1, w2 = gamma_map_array(m, back1, back2)
    assert np.max(np.abs(w1 - v1)) <= 1e-10 * max(1.0, np.max(v1))
    assert np.max(np.abs(w2 - v2)) <= 1e-10 * max(1.0, np.max(v2))


def test_gamma_inverse_keeps_boundary_points(base_model):
    """u lies on the boundary exactly when v does."""
    m = with_kappa(base_model.with_eps(0.1))
    assert gamma_inverse(m, 0.0, 1.5) == (0.0, 1.5)


def test_gamma_map_is_identity_on_the_boundary(base_model):
    m = with_kappa(base_model.with_eps(0.1))
    assert gamma_map(m, 0.7, 0.0) == (0.7, 0.0)
    v1, v2 = gamma_map(m, 0.7, 0.4)
    assert gamma_inverse(m, v1, v2) == pytest.approx((0.7, 0.4), abs=1e-10)


def test_gamma_inverse_refuses_large_eps(base_model):
    """The Jacobian bound fails long before eps = 50."""
    with pytest.raises(ConfigurationError):
        gamma_inverse(base_model.with_eps(50.0), 1.0, 1.0)


def test_bregman_is_nonnegative_and_vanishes_on_diagonal():
    F = PowerNonlinearity(a=3)
    r = np.linspace(0.0, 3.0, 31)
    rbar = np.linspace(3.0, 0.0, 31)
    assert np.all(bregman(F, r, rbar) >= 0)
    np.testing.assert_allclose(bregman(F, r, r), 0.0, atol=1e-15)


@pytest.mark.parametrize("a", [2.0, 3.0, 4.5])
def test_bregman_is_midpoint_convex_in_its_first_argument(a, rng):
    F = PowerNonlinearity(a=a)
    r1, r2, rbar = rng.uniform(0.0, 3.0, size=(3, 200))
    midpoint = bregman(F, 0.5 * (r1 + r2), rbar)
    average = 0.5 * (bregman(F, r1, rbar) + bregman(F, r2, rbar))
    assert np.all(midpoint <= average + 1e-12 * (1.0 + average))


def test_power_bounds_constants():
    """beta = a - 2, m = M = a - 1 and alpha = max(1, a - 1)."""
    assert power_bounds(PowerNonlinearity(a=3)) == {"beta": 1.0, "m": 2.0, "M": 2.0, "alpha": 2.0}
    assert power_bounds(PowerNonlinearity(a=2))["alpha"] == 1.0


def test_audit_passes_for_admissible_uncoupled_model(base_model):
    """All five sampled checks pass at eps = 0 and eps0 is positive."""
    audit = hypothesis_numeric_audit(base_model)
    assert audit.passed
    assert len(audit.checks) == 5
    assert audit.eps0_estimate > 0
    # beta_H is the largest sampled ratio of the Bregman bound
    assert np.isfinite(audit.beta_H) and audit.beta_H >= 0.0


def test_kappa_estimate_saturates(base_model):
    """Doubling the sample density moves kappa by less than 20%."""
    coarse = estimate_kappa(base_model, SampleSpec(count=64))
    fine = estimate_kappa(base_model, SampleSpec(count=128))
    assert coarse.shape == (2, 2)
    assert np.all(np.isfinite(fine))
    assert np.all(np.abs(fine - coarse) <= 0.2 * np.abs(fine) + 1e-8)
