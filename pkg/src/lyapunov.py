"""
Energy functionals, the Lyapunov split and the inequality probes.

With the frozen potentials V_j = d_j h(steady profile) the energy splits as
E_eps = L_eps + eps * N_eps,

    L_eps = int F_1 + F_2 + rho_1 K*rho_2 + eps (rho_1 V_1 + rho_2 V_2)
    N_eps = int h(rho) - (rho_1 V_1 + rho_2 V_2)

and the L-gap to the steady state decomposes exactly into a Bregman part
I_F, a positive-part part I_K and the kernel double integral of the
differences.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
from scipy import stats

from src.calculus import bregman, coupling_array, h_gradient
from src.config import settings
from src.errors import DomainError, NumericError
from src.grid import (
    DensityPair,
    convolve,
    convolve_gradient,
    interaction_energy,
    l1_distance,
    moments,
    pair_distance,
    pair_quantiles,
    w2_distance,
)
from src.models import CouplingTerm, LyapunovReport, ModelSpec
from src.steady import SteadyState

if TYPE_CHECKING:
    from src.flow import FlowTrace

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Functionals
# ---------------------------------------------------------------------------

def entropy(p: DensityPair) -> float:
    """Combined entropy int rho_1 log rho_1 + rho_2 log rho_2 with 0 log 0 = 0."""
    total = 0.0
    for rho in (p.rho1, p.rho2):
        positive = rho > 0
        total += float(np.sum(rho[positive] * np.log(rho[positive])))
    return total * p.grid.dx


def energy_parts(p: DensityPair, m: ModelSpec) -> dict:
    dx = p.grid.dx
    return {
        "internal1": float(np.sum(m.F1.value(p.rho1)) * dx),
        "internal2": float(np.sum(m.F2.value(p.rho2)) * dx),
        "coupling": float(np.sum(coupling_array(m.h, CouplingTerm.H, p.rho1, p.rho2)) * dx),
        "interaction": interaction_energy(m.kernel, p),
    }


def energy(p: DensityPair, m: ModelSpec) -> float:
    """E_eps(p) by midpoint quadrature."""
    parts = energy_parts(p, m)
    return parts["internal1"] + parts["internal2"] + m.eps * parts["coupling"] + parts["interaction"]


def _check_grid(p: DensityPair, s: SteadyState) -> None:
    if p.grid != s.grid:
        raise DomainError(f"Density grid {p.grid} does not match the steady grid {s.grid}")


def lyapunov_functionals(p: DensityPair, m: ModelSpec, s: SteadyState) -> tuple[float, float]:
    """(L_eps(p), N_eps(p)) with the frozen potentials of s."""
    _check_grid(p, s)
    parts = energy_parts(p, m)
    dx = p.grid.dx
    frozen = float(np.sum(p.rho1 * s.V1 + p.rho2 * s.V2) * dx)
    L = parts["internal1"] + parts["internal2"] + parts["interaction"] + m.eps * frozen
    N = parts["coupling"] - frozen
    return L, N


def _gaps(p: DensityPair, m: ModelSpec, s: SteadyState) -> tuple[float, float]:
    L, N = lyapunov_functionals(p, m, s)
    L_bar, N_bar = lyapunov_functionals(s.pair, m, s)
    return L - L_bar, N - N_bar


def lyapunov_decomposition(p: DensityPair, m: ModelSpec, s: SteadyState) -> LyapunovReport:
    """
    Evaluate L, N and the three-term decomposition of the L-gap.

    Raises:
        DomainError: if p and s live on different grids
    """
    _check_grid(p, s)
    grid = p.grid
    dx = grid.dx
    bar = s.pair
    L, N = lyapunov_functionals(p, m, s)
    L_bar, _ = lyapunov_functionals(bar, m, s)

    I_F = float((np.sum(bregman(m.F1, p.rho1, bar.rho1)) + np.sum(bregman(m.F2, p.rho2, bar.rho2))) * dx)
    I_K = float(
        (
            np.sum(p.rho1 * np.maximum(s.U2 - s.C1, 0.0))
            + np.sum(p.rho2 * np.maximum(s.U1 - s.C2, 0.0))
        )
        * dx
    )
    diff1 = p.rho1 - bar.rho1
    diff2 = p.rho2 - bar.rho2
    K_fun = float(np.sum(diff1 * convolve(m.kernel, diff2, grid)) * dx)

    L_gap = L - L_bar
    slope_lhs, slope_rhs = slope_domination_probe(p, m, s)
    return LyapunovReport(
        E_eps=L + m.eps * N,
        L_eps=L,
        N_eps=N,
        I_F=I_F,
        I_K=I_K,
        K_fun=K_fun,
        L_gap=L_gap,
        identity_residual=abs(L_gap - (I_F + I_K + K_fun)),
        ck_ratio=ck_check(p, s, m),
        slope_lhs=slope_lhs,
        slope_rhs=slope_rhs,
    )


def _ratio(numerator: float, denominator: float, what: str) -> float:
    # 0/0 is 0; a positive numerator over a vanishing gap is a violation
    if numerator <= settings.gap_floor:
        return 0.0
    if denominator <= settings.gap_floor:
        logger.warning(f"[AUDIT] {what}: numerator {numerator:.3e} over vanishing L-gap {denominator:.3e}")
        return float("inf")
    return numerator / denominator


def ck_check(p: DensityPair, s: SteadyState, m: ModelSpec) -> float:
    """(||rho_1 - steady_1||_1^2 + ||rho_2 - steady_2||_1^2) / L-gap."""
    _check_grid(p, s)
    numerator = l1_distance(p.rho1, s.pair.rho1, p.grid) ** 2 + l1_distance(p.rho2, s.pair.rho2, p.grid) ** 2
    L_gap, _ = _gaps(p, m, s)
    return _ratio(numerator, L_gap, "Csiszar-Kullback ratio")


def n_vs_l_check(p: DensityPair, m: ModelSpec, s: SteadyState) -> float:
    """|N-gap| / L-gap."""
    L_gap, N_gap = _gaps(p, m, s)
    return _ratio(abs(N_gap), L_gap, "N/L ratio")


def energy_sandwich(p: DensityPair, m: ModelSpec, s: SteadyState, c_n: float) -> dict:
    """Check (1 - eps c_n) L-gap <= E-gap <= (1 + eps c_n) L-gap."""
    L_gap, N_gap = _gaps(p, m, s)
    E_gap = L_gap + m.eps * N_gap
    lower = (1.0 - m.eps * c_n) * L_gap
    upper = (1.0 + m.eps * c_n) * L_gap
    slack = settings.gap_floor
    return {
        "E_gap": E_gap,
        "L_gap": L_gap,
        "lower": lower,
        "upper": upper,
        "holds": bool(lower - slack <= E_gap <= upper + slack),
    }


# ---------------------------------------------------------------------------
# Convexity and kernel probes
# ---------------------------------------------------------------------------

def reduced_modulus(m: ModelSpec, s: SteadyState) -> float:
    """lambda_eps = lambda - eps K0 with K0 from the steady potentials."""
    return m.kernel.lam - m.eps * s.K0_estimate


def convexity_floor(p: DensityPair, m: ModelSpec, s: SteadyState, quantiles: int = 512) -> float:
    """L-gap - lambda_eps / 2 * d(p, steady)^2; nonnegative on X0."""
    L_gap, _ = _gaps(p, m, s)
    d = pair_distance(p, s.pair, quantiles)
    return float(L_gap - 0.5 * reduced_modulus(m, s) * d * d)


def kernel_bound(p: DensityPair, m: ModelSpec, s: SteadyState, quantiles: int = 512) -> float:
    """K-functional + C_K / 2 * d(p, steady)^2; nonnegative."""
    report_K = float(
        np.sum((p.rho1 - s.pair.rho1) * convolve(m.kernel, p.rho2 - s.pair.rho2, p.grid)) * p.grid.dx
    )
    d = pair_distance(p, s.pair, quantiles)
    return report_K + 0.5 * m.kernel.c_k * d * d


def kernel_gradient_probe(p: DensityPair, s: SteadyState, m: ModelSpec, quantiles: int = 512) -> float:
    """max_j max_x |grad K*(steady_j - rho_j)| - C_K W2(rho_j, steady_j); at most O(dx)."""
    _check_grid(p, s)
    worst = -np.inf
    for j in (1, 2):
        grad = convolve_gradient(m.kernel, s.pair.species(j) - p.species(j), p.grid)
        w = w2_distance(p.species(j), s.pair.species(j), p.grid, quantiles)
        worst = max(worst, float(np.max(np.abs(grad)) - m.kernel.c_k * w))
    return worst


def geodesic_convexity_probe(
    p: DensityPair,
    q: DensityPair,
    m: ModelSpec,
    s_samples: Optional[Sequence[float]] = None,
    quantiles: int = 512,
) -> float:
    """
    Minimum over interior s of the interaction convexity slack along the
    displacement interpolant (1 - s) X_p + s X_q.

    The interaction is evaluated on the quantile positions, exact for the
    piecewise-constant densities they represent.
    """
    s_samples = np.linspace(0.0, 1.0, 11)[1:-1] if s_samples is None else np.asarray(s_samples, dtype=float)
    P = pair_quantiles(p, quantiles)
    Q = pair_quantiles(q, quantiles)
    dm = 1.0 / quantiles
    d2 = float((np.sum((Q.X1 - P.X1) ** 2) + np.sum((Q.X2 - P.X2) ** 2)) * dm)

    def interaction(X1: np.ndarray, X2: np.ndarray) -> float:
        return float(np.sum(m.kernel.value(X1[:, None] - X2[None, :])) * dm * dm)

    I0 = interaction(P.X1, P.X2)
    I1 = interaction(Q.X1, Q.X2)
    slacks = []
    for s in s_samples:
        Is = interaction((1 - s) * P.X1 + s * Q.X1, (1 - s) * P.X2 + s * Q.X2)
        slacks.append((1 - s) * I0 + s * I1 - 0.5 * m.kernel.lam * s * (1 - s) * d2 - Is)
    return float(min(slacks))


def slope_domination_probe(p: DensityPair, m: ModelSpec, s: SteadyState) -> tuple[float, float]:
    """
    (lhs, rhs) with lhs = sum_j int |grad(d_j h(rho) - V_j)|^2 rho_j and
    rhs = sum_j int |grad(F_j'(rho_j) + eps V_j + K*rho_j')|^2 rho_j.

    Gradients are face differences of the composed potentials; rho_j is
    averaged onto the faces.
    """
    _check_grid(p, s)
    dx = p.grid.dx
    d1, d2 = h_gradient(m, p.rho1, p.rho2)
    U1 = convolve(m.kernel, p.rho1, p.grid)
    U2 = convolve(m.kernel, p.rho2, p.grid)
    lhs = rhs = 0.0
    for j, rho, d, V, U_other in ((1, p.rho1, d1, s.V1, U2), (2, p.rho2, d2, s.V2, U1)):
        face_rho = 0.5 * (rho[1:] + rho[:-1])
        psi = d - V
        phi = m.nonlinearity(j).prime(rho) + m.eps * V + U_other
        lhs += float(np.sum((np.diff(psi) / dx) ** 2 * face_rho) * dx)
        rhs += float(np.sum((np.diff(phi) / dx) ** 2 * face_rho) * dx)
    return lhs, rhs


# ---------------------------------------------------------------------------
# A-priori bounds
# ---------------------------------------------------------------------------

def interaction_bounds(p: DensityPair, m: ModelSpec) -> dict:
    """
    Two-sided bounds on int rho_1 K*rho_2.

    spread form: lam/2 M <= value <= C_K/2 M with M = int int (x - y)^2 rho_1(x) rho_2(y)
    moment form: lam/2 (m2[rho_1] + m2[rho_2]) <= value <= C_K (m2[rho_1] + m2[rho_2])

    The moment form follows from the spread form when the combined center of
    mass is at the origin; "holds" requires both.
    """
    mass1, mass2, m11, m12, m21, m22 = moments(p)
    spread = m21 * mass2 + m22 * mass1 - 2.0 * m11 * m12
    second = m21 + m22
    value = interaction_energy(m.kernel, p)
    lower = 0.5 * m.kernel.lam * spread
    upper = 0.5 * m.kernel.c_k * spread
    lower_moments = 0.5 * m.kernel.lam * second
    upper_moments = m.kernel.c_k * second
    tol = 1e-10 * (1.0 + abs(value))
    holds_spread = lower - tol <= value <= upper + tol
    holds_moments = lower_moments - tol <= value <= upper_moments + tol
    return {
        "value": value,
        "lower": lower,
        "upper": upper,
        "lower_moments": lower_moments,
        "upper_moments": upper_moments,
        "holds_spread": bool(holds_spread),
        "holds_moments": bool(holds_moments),
        "holds": bool(holds_spread and holds_moments),
    }


def energy_lower_bounds(p: DensityPair, m: ModelSpec) -> dict:
    """E_eps >= 1/2 int (F_1 + F_2) and E_eps >= int rho_1 K*rho_2 (eps below eps0)."""
    parts = energy_parts(p, m)
    E = parts["internal1"] + parts["internal2"] + m.eps * parts["coupling"] + parts["interaction"]
    half_internal = 0.5 * (parts["internal1"] + parts["internal2"])
    tol = 1e-12 * (1.0 + abs(E))
    return {
        "E_eps": E,
        "half_internal": half_internal,
        "interaction": parts["interaction"],
        "holds": bool(E + tol >= half_internal and E + tol >= parts["interaction"]),
    }


# ---------------------------------------------------------------------------
# Decay fits
# ---------------------------------------------------------------------------

@dataclass
class DecayFit:
    rate_E: float
    rate_L1: float
    r2_fit: float
    t_start: float
    t_end: float
    points: int

    def as_dict(self) -> dict:
        return {
            "rate_E": self.rate_E,
            "rate_L1": self.rate_L1,
            "r2_fit": self.r2_fit,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "points": self.points,
        }


def decay_fit(
    trace: "FlowTrace",
    window: Sequence[float],
    E_steady: Optional[float] = None,
    gap_floor: Optional[float] = None,
) -> DecayFit:
    """
    Exponential rates of the energy gap and of the L1 error over a window.

    The window ends at the first sample whose energy gap has fallen to the
    floor.

    Raises:
        NumericError: if fewer than three usable samples remain
    """
    gap_floor = settings.gap_floor if gap_floor is None else gap_floor
    t0, t1 = window
    E_steady = trace.E_steady if E_steady is None else E_steady
    t = np.asarray(trace.times, dtype=float)
    gap = np.asarray(trace.E_eps, dtype=float) - E_steady
    err = np.hypot(np.asarray(trace.L1_err_1, dtype=float), np.asarray(trace.L1_err_2, dtype=float))

    in_window = (t >= t0) & (t <= t1)
    underflow = np.flatnonzero(in_window & (gap <= gap_floor))
    if underflow.size:
        cut = t[underflow[0]]
        logger.info(f"[AUDIT] energy gap reaches {gap_floor:.0e} at t={cut:.3f}; window truncated")
        in_window &= t < cut
    if np.count_nonzero(in_window) < 3:
        raise NumericError(f"Decay window [{t0}, {t1}] holds fewer than 3 positive-gap samples")

    fit_E = stats.linregress(t[in_window], np.log(gap[in_window]))
    usable = in_window & (err > 0)
    rate_L1 = float("nan")
    if np.count_nonzero(usable) >= 3:
        rate_L1 = float(-stats.linregress(t[usable], np.log(err[usable])).slope)
    return DecayFit(
        rate_E=float(-fit_E.slope),
        rate_L1=rate_L1,
        r2_fit=float(fit_E.rvalue ** 2),
        t_start=float(t[in_window][0]),
        t_end=float(t[in_window][-1]),
        points=int(np.count_nonzero(in_window)),
    )


@dataclass
class DegradationFit:
    """Loss of the energy decay rate with eps, measured from the uncoupled rate."""

    reference_rate: float
    C0: float
    eps: np.ndarray
    rates: np.ndarray
    deficit: np.ndarray

    def within_band(self, slack: float = 0.1) -> bool:
        """deficit(eps) <= C0 eps + slack for every run."""
        return bool(np.all(self.deficit <= self.C0 * self.eps + slack))

    def nonincreasing(self, rel: float = 0.05) -> bool:
        return bool(np.all(self.rates[1:] <= self.rates[:-1] * (1.0 + rel)))


def degradation_fit(eps: Sequence[float], rate_E: Sequence[float]) -> DegradationFit:
    """
    Fit rate_E(0) - rate_E(eps) ~ C0 eps over a sweep.

    The reference is the measured eps = 0 rate when the sweep contains it and
    the intercept of the linear fit otherwise. C0 is clipped at 0.

    Raises:
        NumericError: if a rate is not finite
    """
    order = np.argsort(np.asarray(eps, dtype=float), kind="stable")
    eps = np.asarray(eps, dtype=float)[order]
    rates = np.asarray(rate_E, dtype=float)[order]
    if not np.all(np.isfinite(rates)):
        raise NumericError(f"Sweep holds non-finite rates: {rates.tolist()}")

    if np.unique(eps).size < 2:
        return DegradationFit(float(rates[0]), 0.0, eps, rates, rates[0] - rates)
    fit = stats.linregress(eps, rates)
    reference = float(rates[0]) if eps[0] == 0.0 else float(fit.intercept)
    deficit = reference - rates
    C0 = max(float(-fit.slope), 0.0)
    logger.info(f"[SWEEP] reference rate {reference:.4f}, C0={C0:.4f}")
    return DegradationFit(reference, C0, eps, rates, deficit)
