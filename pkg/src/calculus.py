"""Closed-form calculus of the power-law model family.

Nonlinearities F_j(r) = r^a_j / a_j, coupling
h(r1, r2) = r1^b1 r2^b2 / (1 + r1 + r2)^gamma and the kernels in
``src.models``. Every derivative of h is a finite linear combination of the
monomial quotients

    Q[p1, p2, g](r1, r2) = r1^p1 r2^p2 / (1 + r1 + r2)^g

and differentiation acts on these by

    d/dr1 Q[p1, p2, g] = p1 Q[p1 - 1, p2, g] - g Q[p1, p2, g + 1].

On top of that this module provides the theta calculus in the variables
u_j = F_j'(r_j), the map Gamma_eps(u) = u + eps * theta(u) with its Newton
inverse, the sampled hypothesis audit and the admissibility gate.
"""

import logging
from typing import Optional

import numpy as np

from src.config import settings
from src.errors import ConfigurationError, DomainError, NumericError
from src.models import (
    AdmissibilityCondition,
    AdmissibilityReport,
    AuditCheck,
    AuditReport,
    Coupling,
    CouplingTerm,
    ModelSpec,
    PowerNonlinearity,
    SampleSpec,
    ThetaTerm,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Admissibility
# ---------------------------------------------------------------------------

def validate_example_params(a1: float, a2: float, b1: float, b2: float, gamma: float) -> AdmissibilityReport:
    """
    Classify a parameter tuple of the power-law family.

    The three conditions are a_j >= 2, b_j >= 2 a_j - 1 and
    b1 + b2 <= gamma + min(a1, a2).

    Raises:
        pydantic.ValidationError: if any input is non-finite or not positive
    """
    # Field validation rejects non-finite and non-positive values
    ModelSpec(a1=a1, a2=a2, b1=b1, b2=b2, gamma=gamma)

    exponent_slacks = [a1 - 2.0, a2 - 2.0]
    coupling_slacks = [b1 - (2.0 * a1 - 1.0), b2 - (2.0 * a2 - 1.0)]
    sum_slack = gamma + min(a1, a2) - (b1 + b2)

    conditions = [
        AdmissibilityCondition(
            name="a_j >= 2",
            passed=min(exponent_slacks) >= 0,
            slack=min(exponent_slacks),
            slacks=exponent_slacks,
        ),
        AdmissibilityCondition(
            name="b_j >= 2 a_j - 1",
            passed=min(coupling_slacks) >= 0,
            slack=min(coupling_slacks),
            slacks=coupling_slacks,
        ),
        AdmissibilityCondition(
            name="b1 + b2 <= gamma + min(a1, a2)",
            passed=sum_slack >= 0,
            slack=sum_slack,
            slacks=[sum_slack],
        ),
    ]
    report = AdmissibilityReport(conditions=conditions, admissible=all(c.passed for c in conditions))
    if not report.admissible:
        failed = [c.name for c in conditions if not c.passed]
        logger.info(f"[AUDIT] Parameters ({a1}, {a2}, {b1}, {b2}, {gamma}) inadmissible: {failed}")
    return report


def require_admissible(m: ModelSpec) -> AdmissibilityReport:
    """Raise ConfigurationError unless the model passes the admissibility gate."""
    report = validate_example_params(m.a1, m.a2, m.b1, m.b2, m.gamma)
    if not report.admissible:
        raise ConfigurationError(
            "Inadmissible model parameters: "
            + ", ".join(f"{c.name} (slack {c.slack:g})" for c in report.conditions if not c.passed)
        )
    return report


# ---------------------------------------------------------------------------
# Coupling h and its Q-expansion
# ---------------------------------------------------------------------------

# A term is (coefficient, p1, p2, g)
_Term = tuple[float, float, float, float]


def _d_r1(terms: list[_Term]) -> list[_Term]:
    out: list[_Term] = []
    for coef, p1, p2, g in terms:
        if p1 != 0:
            out.append((coef * p1, p1 - 1.0, p2, g))
        if g != 0:
            out.append((-coef * g, p1, p2, g + 1.0))
    return out


def _d_r2(terms: list[_Term]) -> list[_Term]:
    out: list[_Term] = []
    for coef, p1, p2, g in terms:
        if p2 != 0:
            out.append((coef * p2, p1, p2 - 1.0, g))
        if g != 0:
            out.append((-coef * g, p1, p2, g + 1.0))
    return out


def coupling_terms(c: Coupling, which: CouplingTerm) -> list[_Term]:
    """Q-expansion of the requested term of h."""
    base = [(1.0, c.b1, c.b2, c.gamma)]
    which = CouplingTerm(which)
    if which == CouplingTerm.H:
        return base
    if which == CouplingTerm.D1:
        return _d_r1(base)
    if which == CouplingTerm.D2:
        return _d_r2(base)
    if which == CouplingTerm.D11:
        return _d_r1(_d_r1(base))
    if which == CouplingTerm.D12:
        return _d_r2(_d_r1(base))
    if which == CouplingTerm.D21:
        return _d_r1(_d_r2(base))
    return _d_r2(_d_r2(base))


def _q(p1: float, p2: float, g: float, r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.power(r1, p1) * np.power(r2, p2) / np.power(1.0 + r1 + r2, g)


def _as_nonnegative(*values, name: str = "argument") -> list[np.ndarray]:
    arrays = [np.asarray(v, dtype=float) for v in values]
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"{name} must be finite")
        if np.any(arr < 0):
            raise DomainError(f"{name} must be nonnegative")
    return arrays


def _scalarize(value: np.ndarray):
    return float(value) if np.ndim(value) == 0 else value


def coupling_array(c: Coupling, which: CouplingTerm, r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Vectorized coupling evaluation without domain checks."""
    out = np.zeros(np.broadcast(r1, r2).shape)
    for coef, p1, p2, g in coupling_terms(c, which):
        out = out + coef * _q(p1, p2, g, r1, r2)
    return out


def coupling_eval(c: Coupling, which: CouplingTerm, r1, r2):
    """Evaluate h or one of its derivatives up to order two at (r1, r2)."""
    r1, r2 = _as_nonnegative(r1, r2, name="density")
    return _scalarize(coupling_array(c, which, r1, r2))


def h_gradient(m: ModelSpec, rho1: np.ndarray, rho2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(d1 h, d2 h) on density arrays."""
    return (
        coupling_array(m.h, CouplingTerm.D1, rho1, rho2),
        coupling_array(m.h, CouplingTerm.D2, rho1, rho2),
    )


# ---------------------------------------------------------------------------
# Theta calculus
# ---------------------------------------------------------------------------

def theta_all(m: ModelSpec, u1: np.ndarray, u2: np.ndarray):
    """
    Evaluate theta_1, theta_2 and the four theta_{j,i} on arrays.

    Returns:
        (th1, th2, th11, th12, th21, th22); all zero where u1 = 0 or u2 = 0
    """
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    shape = np.broadcast(u1, u2).shape
    u1 = np.broadcast_to(u1, shape)
    u2 = np.broadcast_to(u2, shape)
    interior = (u1 > 0) & (u2 > 0)

    outputs = [np.zeros(shape) for _ in range(6)]
    if not np.any(interior):
        return tuple(outputs)

    r1 = m.F1.prime_inverse(u1[interior])
    r2 = m.F2.prime_inverse(u2[interior])
    f1pp = m.F1.second(r1)
    f2pp = m.F2.second(r2)
    h = m.h
    outputs[0][interior] = coupling_array(h, CouplingTerm.D1, r1, r2)
    outputs[1][interior] = coupling_array(h, CouplingTerm.D2, r1, r2)
    outputs[2][interior] = coupling_array(h, CouplingTerm.D11, r1, r2) / f1pp
    outputs[3][interior] = coupling_array(h, CouplingTerm.D12, r1, r2) / f2pp
    outputs[4][interior] = coupling_array(h, CouplingTerm.D21, r1, r2) / f1pp
    outputs[5][interior] = coupling_array(h, CouplingTerm.D22, r1, r2) / f2pp
    return tuple(outputs)


_THETA_INDEX = {
    ThetaTerm.THETA1: 0,
    ThetaTerm.THETA2: 1,
    ThetaTerm.THETA11: 2,
    ThetaTerm.THETA12: 3,
    ThetaTerm.THETA21: 4,
    ThetaTerm.THETA22: 5,
}


def theta_eval(m: ModelSpec, which: ThetaTerm, u1, u2):
    """Evaluate theta_j or theta_{j,i} (derivative of theta_j in u_i) at (u1, u2)."""
    u1, u2 = _as_nonnegative(u1, u2, name="u")
    values = theta_all(m, u1, u2)
    return _scalarize(values[_THETA_INDEX[ThetaTerm(which)]])


def estimate_kappa(m: ModelSpec, sample: Optional[SampleSpec] = None) -> np.ndarray:
    """
    Sampled suprema of |theta_{j,i}(u)| / min{1, u1, u2, sqrt(r_i / r_j)}.

    Returns:
        2x2 array, entry [j-1][i-1] bounds theta_{j,i}

    Raises:
        DomainError: if the sample grid is empty
    """
    sample = sample or SampleSpec()
    points = sample.points()
    if points.size == 0:
        raise DomainError("Sample grid for the kappa estimate is empty")

    u1, u2 = np.meshgrid(points, points, indexing="ij")
    r = (m.F1.prime_inverse(u1), m.F2.prime_inverse(u2))
    _, _, th11, th12, th21, th22 = theta_all(m, u1, u2)
    theta = {(1, 1): th11, (1, 2): th12, (2, 1): th21, (2, 2): th22}

    base = np.minimum(1.0, np.minimum(u1, u2))
    kappa = np.zeros((2, 2))
    for (j, i), values in theta.items():
        weight = np.minimum(base, np.sqrt(r[i - 1] / r[j - 1]))
        kappa[j - 1, i - 1] = float(np.max(np.abs(values) / weight))
    logger.debug(f"[AUDIT] kappa estimate {kappa.tolist()} on {points.size}^2 samples")
    return kappa


def with_kappa(m: ModelSpec, sample: Optional[SampleSpec] = None) -> ModelSpec:
    """Return a copy of the model carrying its kappa estimate."""
    if m.kappa is not None:
        return m
    return m.model_copy(update={"kappa": estimate_kappa(m, sample).tolist()})


# ---------------------------------------------------------------------------
# Gamma_eps and its inverse
# ---------------------------------------------------------------------------

def gamma_jacobian_bound(m: ModelSpec) -> float:
    """Lower bound 1 - eps(k11 + k22) - eps^2 (k11 k22 + k12 k21) on det D Gamma_eps."""
    kappa = m.kappa_array if m.kappa is not None else estimate_kappa(m)
    eps = m.eps
    return float(
        1.0
        - eps * (kappa[0, 0] + kappa[1, 1])
        - eps ** 2 * (kappa[0, 0] * kappa[1, 1] + kappa[0, 1] * kappa[1, 0])
    )


def gamma_map_array(m: ModelSpec, u1: np.ndarray, u2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    th1, th2, *_ = theta_all(m, u1, u2)
    return u1 + m.eps * th1, u2 + m.eps * th2


def gamma_map(m: ModelSpec, u1, u2):
    """Gamma_eps(u) = u + eps * (theta_1(u), theta_2(u))."""
    u1, u2 = _as_nonnegative(u1, u2, name="u")
    v1, v2 = gamma_map_array(m, u1, u2)
    return _scalarize(v1), _scalarize(v2)


def gamma_inverse_array(
    m: ModelSpec,
    v1: np.ndarray,
    v2: np.ndarray,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Invert Gamma_eps pointwise by a vectorized Newton iteration.

    Boundary points (v1 = 0 or v2 = 0) are returned unchanged. Interior
    iterates are kept positive by limiting each update to halve a coordinate
    at most.

    Raises:
        ConfigurationError: if the Jacobian lower bound is below the configured floor
        NumericError: if some point has not converged after max_iter iterations
    """
    tol = settings.newton_tol if tol is None else tol
    max_iter = settings.newton_max_iter if max_iter is None else max_iter
    v1 = np.array(v1, dtype=float)
    v2 = np.array(v2, dtype=float)
    shape = np.broadcast(v1, v2).shape
    v1 = np.broadcast_to(v1, shape).copy()
    v2 = np.broadcast_to(v2, shape).copy()

    if m.eps == 0.0:
        return v1, v2

    bound = gamma_jacobian_bound(m)
    if bound <= settings.jacobian_floor:
        raise ConfigurationError(
            f"Gamma_eps Jacobian bound {bound:.4f} <= {settings.jacobian_floor}; eps={m.eps} is too large"
        )

    u1 = v1.copy()
    u2 = v2.copy()
    active = (v1 > 0) & (v2 > 0)
    if not np.any(active):
        return u1, u2

    t1, t2 = v1[active], v2[active]
    x1, x2 = t1.copy(), t2.copy()
    scale = np.maximum(1.0, np.maximum(t1, t2))
    eps = m.eps
    residual = np.inf
    for iteration in range(max_iter + 1):
        th1, th2, j11, j12, j21, j22 = theta_all(m, x1, x2)
        f1 = x1 + eps * th1 - t1
        f2 = x2 + eps * th2 - t2
        err = np.maximum(np.abs(f1), np.abs(f2)) / scale
        residual = float(np.max(err))
        if residual <= tol:
            u1[active] = x1
            u2[active] = x2
            return u1, u2
        if iteration == max_iter:
            break

        a11 = 1.0 + eps * j11
        a12 = eps * j12
        a21 = eps * j21
        a22 = 1.0 + eps * j22
        det = a11 * a22 - a12 * a21
        dx1 = (a22 * f1 - a12 * f2) / det
        dx2 = (a11 * f2 - a21 * f1) / det
        x1 = np.maximum(x1 - dx1, 0.5 * x1)
        x2 = np.maximum(x2 - dx2, 0.5 * x2)

    raise NumericError(
        f"Gamma_eps inverse did not converge in {max_iter} iterations (residual {residual:.3e})",
        last_residual=residual,
    )


def gamma_inverse(m: ModelSpec, v1, v2, tol: Optional[float] = None):
    """Solve Gamma_eps(u) = v for u >= 0; u lies on the boundary iff v does."""
    v1, v2 = _as_nonnegative(v1, v2, name="v")
    u1, u2 = gamma_inverse_array(m, v1, v2, tol=tol)
    return _scalarize(u1), _scalarize(u2)


# ---------------------------------------------------------------------------
# Bregman divergences and power bounds
# ---------------------------------------------------------------------------

def bregman(F: PowerNonlinearity, r, rbar):
    """d_F(r | rbar) = F(r) - F(rbar) - F'(rbar)(r - rbar), clipped at 0."""
    r, rbar = _as_nonnegative(r, rbar, name="density")
    value = F.value(r) - F.value(rbar) - F.prime(rbar) * (r - rbar)
    return _scalarize(np.maximum(value, 0.0))


def power_bounds(F: PowerNonlinearity) -> dict:
    """
    Constants of the power-law bounds for F.

    m r^beta <= F''(r) <= M r^beta with beta = a - 2, and
    F'(r) <= alpha (min{1, r} + F(r)).
    """
    return {
        "beta": F.beta,
        "m": F.a - 1.0,
        "M": F.a - 1.0,
        "alpha": max(1.0, F.a - 1.0),
    }


# ---------------------------------------------------------------------------
# Hypothesis audit
# ---------------------------------------------------------------------------

_EPS_CEILING = 10.0
_REL_TOL = 1e-12


def _psd_everywhere(f1pp, f2pp, h11, h12, h22, eps2: float) -> bool:
    d1 = f1pp + eps2 * h11
    d2 = f2pp + eps2 * h22
    off = eps2 * h12
    scale = 1.0 + f1pp * f2pp
    det = d1 * d2 - off * off
    return bool(np.all(d1 >= -_REL_TOL * (1 + f1pp)) and np.all(d2 >= -_REL_TOL * (1 + f2pp))
                and np.all(det >= -_REL_TOL * scale))


def hypothesis_numeric_audit(m: ModelSpec, sample: Optional[SampleSpec] = None, height: float = 1.0) -> AuditReport:
    """
    Sampled audit of the structural hypotheses.

    Checks, in order: convexity of F_{2 eps} (and the eps0 estimate by
    bisection), the McCann condition, the sandwich bounds of F_eps, the
    Bregman bound for theta with a fitted beta_H for rbar <= height, and the
    power bounds of F_j. Failures are reported, never raised.
    """
    sample = sample or SampleSpec()
    m = with_kappa(m, sample)
    kappa = m.kappa_array
    points = sample.points()
    r1, r2 = np.meshgrid(points, points, indexing="ij")
    F1, F2 = m.F1, m.F2
    checks: list[AuditCheck] = []

    # (i) convexity of F_{2 eps}
    f1pp, f2pp = F1.second(r1), F2.second(r2)
    h11 = coupling_array(m.h, CouplingTerm.D11, r1, r2)
    h12 = coupling_array(m.h, CouplingTerm.D12, r1, r2)
    h22 = coupling_array(m.h, CouplingTerm.D22, r1, r2)
    if _psd_everywhere(f1pp, f2pp, h11, h12, h22, 2.0 * _EPS_CEILING):
        eps0 = _EPS_CEILING
    else:
        lo, hi = 0.0, _EPS_CEILING
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _psd_everywhere(f1pp, f2pp, h11, h12, h22, 2.0 * mid):
                lo = mid
            else:
                hi = mid
        eps0 = lo
    convex = _psd_everywhere(f1pp, f2pp, h11, h12, h22, 2.0 * m.eps)
    checks.append(AuditCheck(
        name="F_2eps positive semidefinite",
        passed=convex,
        value=eps0 - m.eps,
        detail={"eps0_estimate": eps0},
    ))

    # (ii) McCann condition
    mccann = min(
        float(np.min(F.value(points) - points * F.prime(points) + points ** 2 * F.second(points)))
        for F in (F1, F2)
    )
    checks.append(AuditCheck(name="McCann condition", passed=mccann >= 0, value=mccann))

    # (iii) sandwich bounds for F_eps
    f1, f2 = F1.value(r1), F2.value(r2)
    feps = f1 + f2 + m.eps * coupling_array(m.h, CouplingTerm.H, r1, r2)
    lower = feps - 0.5 * (f1 + f2)
    upper = (1 + 0.5 * m.eps * kappa[0, 0]) * f1 + (1 + 0.5 * m.eps * kappa[1, 1]) * f2 - feps
    tol = _REL_TOL * (1.0 + f1 + f2)
    sandwich = float(min(np.min(lower + tol), np.min(upper + tol)))
    checks.append(AuditCheck(
        name="F_eps sandwich",
        passed=bool(np.all(lower >= -tol) and np.all(upper >= -tol)),
        value=sandwich,
    ))

    # (iv) Bregman bound for theta
    beta_h = _fit_beta_h(m, points, height)
    checks.append(AuditCheck(
        name="theta Bregman bound",
        passed=bool(np.isfinite(beta_h)),
        value=beta_h,
        detail={"height": height},
    ))

    # (v) power bounds
    power_ok = True
    for F in (F1, F2):
        consts = power_bounds(F)
        rhs = consts["alpha"] * (np.minimum(1.0, points) + F.value(points))
        second = F.second(points)
        power_ok &= bool(np.all(F.prime(points) <= rhs * (1 + _REL_TOL)))
        power_ok &= bool(np.allclose(second, consts["m"] * np.power(points, consts["beta"]), rtol=1e-12))
    checks.append(AuditCheck(
        name="power bounds",
        passed=power_ok,
        value=0.0,
        detail={"F1": power_bounds(F1), "F2": power_bounds(F2)},
    ))

    report = AuditReport(eps=m.eps, checks=checks, eps0_estimate=eps0, beta_H=beta_h, kappa=kappa.tolist())
    logger.info(
        f"[AUDIT] eps={m.eps} eps0~{eps0:.4f} beta_H~{beta_h:.4g} passed={report.passed}"
    )
    return report


def _fit_beta_h(m: ModelSpec, points: np.ndarray, height: float) -> float:
    coarse = np.geomspace(points[0], points[-1], min(points.size, 24))
    bars = coarse[coarse <= height]
    if bars.size == 0:
        bars = coarse[:1]
    r1, r2 = np.meshgrid(coarse, coarse, indexing="ij")
    rb1, rb2 = np.meshgrid(bars, bars, indexing="ij")
    r1, r2 = r1.reshape(-1, 1), r2.reshape(-1, 1)
    rb1, rb2 = rb1.reshape(1, -1), rb2.reshape(1, -1)

    theta_r = theta_all(m, m.F1.prime(r1), m.F2.prime(r2))[2:]
    theta_b = theta_all(m, m.F1.prime(rb1), m.F2.prime(rb2))[2:]
    numerator = np.zeros(np.broadcast(r1, rb1).shape)
    for tr, tb in zip(theta_r, theta_b):
        numerator = np.maximum(numerator, (tr - tb) ** 2)
    numerator = np.maximum(r1, r2) * numerator
    denominator = (
        m.F1.value(r1) - m.F1.value(rb1) - m.F1.prime(rb1) * (r1 - rb1)
        + m.F2.value(r2) - m.F2.value(rb2) - m.F2.prime(rb2) * (r2 - rb2)
    )
    positive = denominator > 0
    if np.any((~positive) & (numerator > 0)):
        return float("inf")
    return float(np.max(numerator[positive] / denominator[positive]))
