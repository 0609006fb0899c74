"""
Stationary states of the coupled system.

The global minimizer satisfies, for j = 1, 2 and j' the other species,

    F_j'(rho_j) + eps * d_j h(rho) = (C_j - K * rho_j')_+

so on each cell the pair u = (F_1'(rho_1), F_2'(rho_2)) solves
Gamma_eps(u) = ((C_1 - U_2)_+, (C_2 - U_1)_+) with U_j = K * rho_j. Both
solvers below reduce to that pointwise inversion plus a search for the
constants that give unit masses.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy import optimize, special

from src.calculus import gamma_inverse_array, h_gradient, with_kappa
from src.config import settings
from src.errors import ConfigurationError, DomainError, NumericError
from src.grid import DensityPair, Grid1D, box_density, convolve, l1_distance, moments, recenter
from src.models import GridConfig, ModelSpec, SteadyParams, SteadySolver

logger = logging.getLogger(__name__)


@dataclass
class SteadyState:
    """Discrete minimizer with its Lagrange constants and frozen potentials."""

    pair: DensityPair
    C1: float
    C2: float
    support1: float
    support2: float
    residual: float
    V1: np.ndarray
    V2: np.ndarray
    K0_estimate: float
    U1: np.ndarray
    U2: np.ndarray
    C_tilde: Optional[tuple[float, float]] = None
    iterations: int = 0
    solver: str = "general"
    residuals: tuple[float, float] = field(default=(0.0, 0.0))

    @property
    def grid(self) -> Grid1D:
        return self.pair.grid

    def constant(self, j: int) -> float:
        return self.C1 if j == 1 else self.C2

    def frozen_potential(self, j: int) -> np.ndarray:
        return self.V1 if j == 1 else self.V2

    def potential(self, j: int) -> np.ndarray:
        """K * rho_j of the steady profile."""
        return self.U1 if j == 1 else self.U2

    def evenness(self) -> float:
        return float(
            max(
                np.max(np.abs(self.pair.rho1 - self.pair.rho1[::-1])),
                np.max(np.abs(self.pair.rho2 - self.pair.rho2[::-1])),
            )
        )

    def summary(self) -> dict:
        mass1, mass2, _, _, m21, m22 = moments(self.pair)
        out = {
            "solver": self.solver,
            "iterations": self.iterations,
            "C1": self.C1,
            "C2": self.C2,
            "support1": self.support1,
            "support2": self.support2,
            "peak1": float(self.pair.rho1.max()),
            "peak2": float(self.pair.rho2.max()),
            "m2_1": m21,
            "m2_2": m22,
            "mass1": mass1,
            "mass2": mass2,
            "residual": self.residual,
            "residual1": self.residuals[0],
            "residual2": self.residuals[1],
            "evenness": self.evenness(),
            "K0_estimate": self.K0_estimate,
            "L": self.grid.L,
            "n": self.grid.n,
        }
        if self.C_tilde is not None:
            out["C_tilde1"], out["C_tilde2"] = self.C_tilde
        return out


# ---------------------------------------------------------------------------
# Closed-form profiles and grid sizing
# ---------------------------------------------------------------------------

def barenblatt_constant(lam: float = 1.0, a: float = 2.0) -> float:
    """
    Height constant of the eps = 0 profile ((C - lam x^2/2)_+)^(1/(a-1)).

    For a = 2 this is (9 lam / 32)^(1/3); lam = 1 gives 0.655185.
    """
    k = 1.0 / (a - 1.0)
    beta_integral = np.sqrt(np.pi) * special.gamma(k + 1.0) / special.gamma(k + 1.5)
    return float((1.0 / (beta_integral * np.sqrt(2.0 / lam))) ** (1.0 / (k + 0.5)))


def barenblatt_radius(lam: float = 1.0, a: float = 2.0) -> float:
    return float(np.sqrt(2.0 * barenblatt_constant(lam, a) / lam))


def barenblatt_pair(grid: Grid1D, lam: float = 1.0, a: float = 2.0) -> DensityPair:
    """Point values of the analytic eps = 0 profile for both species (not renormalized)."""
    c = barenblatt_constant(lam, a)
    rho = np.power(np.maximum(c - 0.5 * lam * grid.centers ** 2, 0.0), 1.0 / (a - 1.0))
    return DensityPair(grid, rho, rho.copy())


def barenblatt_state(m: ModelSpec, grid: Grid1D) -> SteadyState:
    """SteadyState built from the analytic profile, for eps = 0 and a quadratic kernel."""
    if not m.kernel.is_quadratic or m.a1 != m.a2:
        raise ConfigurationError("The analytic profile needs a quadratic kernel and a1 == a2")
    lam = m.kernel.lam
    pair = barenblatt_pair(grid, lam, m.a1)
    c = barenblatt_constant(lam, m.a1)
    _, _, _, _, m21, m22 = moments(pair)
    return steady_from_profile(
        m, grid, pair.rho1, pair.rho2, c + 0.5 * lam * m22, c + 0.5 * lam * m21,
        C_tilde=(c, c), solver="analytic",
    )


def auto_half_width(m: ModelSpec, factor: Optional[float] = None) -> float:
    """Grid half-width as a multiple of the eps = 0 support radius."""
    factor = settings.domain_factor if factor is None else factor
    radius = max(barenblatt_radius(m.kernel.lam, m.a1), barenblatt_radius(m.kernel.lam, m.a2))
    return float(factor * radius)


def make_grid(m: ModelSpec, config: Optional[GridConfig] = None) -> Grid1D:
    config = config or GridConfig()
    half_width = config.L if config.L is not None else auto_half_width(m)
    return Grid1D(L=half_width, n=config.n)


# ---------------------------------------------------------------------------
# Pointwise profiles and mass normalization
# ---------------------------------------------------------------------------

def _prepared(m: ModelSpec) -> ModelSpec:
    # Gamma_eps inversion needs kappa; estimate it once per solve
    if m.eps > 0 and m.kappa is None:
        return with_kappa(m)
    return m


def _profile(m: ModelSpec, phi1: np.ndarray, phi2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u1, u2 = gamma_inverse_array(m, phi1, phi2)
    return m.F1.prime_inverse(np.maximum(u1, 0.0)), m.F2.prime_inverse(np.maximum(u2, 0.0))


class _MassMap:
    """Masses of the profile generated by constants (c1, c2) against fixed potentials."""

    def __init__(self, m: ModelSpec, grid: Grid1D, W1: np.ndarray, W2: np.ndarray):
        self.m = m
        self.dx = grid.dx
        self.W1 = W1
        self.W2 = W2
        self.evaluations = 0

    def profile(self, c1: float, c2: float) -> tuple[np.ndarray, np.ndarray]:
        self.evaluations += 1
        return _profile(self.m, np.maximum(c1 - self.W1, 0.0), np.maximum(c2 - self.W2, 0.0))

    def masses(self, c1: float, c2: float) -> np.ndarray:
        rho1, rho2 = self.profile(c1, c2)
        return np.array([rho1.sum() * self.dx, rho2.sum() * self.dx])

    def solve_component(self, j: int, other: float) -> float:
        """Root of mass_j(c) = 1 with the other constant fixed."""
        W = self.W1 if j == 1 else self.W2

        def excess(c: float) -> float:
            pair = (c, other) if j == 1 else (other, c)
            return float(self.masses(*pair)[j - 1] - 1.0)

        lo = float(W.min())
        step = max(1.0, abs(lo))
        for _ in range(60):
            hi = lo + step
            if excess(hi) > 0:
                break
            step *= 2.0
        else:
            raise NumericError(f"Mass equation for species {j} unsolvable within bracket [{lo}, {hi}]")
        return float(optimize.brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200))


def _mass_tolerance(tol: float) -> float:
    return max(1e-2 * tol, 1e-12)


def _gauss_seidel_constants(mass_map: _MassMap, mass_tol: float, guess=None, max_sweeps: int = 100):
    c1, c2 = guess if guess is not None else (None, float(mass_map.W2.min()))
    c2 = float(mass_map.W2.min()) if c2 is None else c2
    for sweep in range(max_sweeps):
        c1 = mass_map.solve_component(1, c2)
        c2 = mass_map.solve_component(2, c1)
        defect = np.max(np.abs(mass_map.masses(c1, c2) - 1.0))
        if defect <= mass_tol or mass_map.m.eps == 0.0:
            return c1, c2
    raise NumericError(
        f"Mass normalization did not settle after {max_sweeps} sweeps (defect {defect:.3e})",
        last_residual=float(defect),
    )


def _newton_constants(mass_map: _MassMap, guess, mass_tol: float, max_iter: int = 50):
    """2D Newton on the masses with a finite-difference Jacobian; None when it fails."""
    c = np.array(guess, dtype=float)
    for _ in range(max_iter):
        F = mass_map.masses(*c) - 1.0
        if np.max(np.abs(F)) <= mass_tol:
            return float(c[0]), float(c[1])
        J = np.empty((2, 2))
        for k in range(2):
            step = 1e-7 * max(1.0, abs(c[k]))
            shifted = c.copy()
            shifted[k] += step
            J[:, k] = (mass_map.masses(*shifted) - 1.0 - F) / step
        try:
            delta = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            return None
        c = np.maximum(c - delta, 0.5 * c)
    return None


def _normalized(rho: np.ndarray, dx: float) -> np.ndarray:
    mass = rho.sum() * dx
    if mass <= 0:
        raise NumericError("Steady profile has zero mass")
    return rho / mass


# ---------------------------------------------------------------------------
# Assembly and residuals
# ---------------------------------------------------------------------------

def _support_radius(phi: np.ndarray, grid: Grid1D, species: int) -> float:
    """Radius of {phi > 0}, the zero crossing located by linear interpolation."""
    idx = np.flatnonzero(phi > 0)
    if idx.size == 0:
        return 0.0
    lo, hi = int(idx[0]), int(idx[-1])
    if idx.size != hi - lo + 1:
        logger.warning(f"[STEADY] support of species {species} is not an interval")
    if lo == 0 or hi == grid.n - 1:
        raise DomainError(
            f"Support of species {species} reaches the grid boundary; enlarge L (currently {grid.L:.4f})"
        )
    x = grid.centers
    dx = grid.dx
    right = x[hi] + dx * phi[hi] / (phi[hi] - phi[hi + 1])
    left = x[lo] - dx * phi[lo] / (phi[lo] - phi[lo - 1])
    return float(max(right, -left))


def _second_difference_bound(V: np.ndarray, dx: float) -> float:
    return float(np.max(np.abs(V[2:] - 2.0 * V[1:-1] + V[:-2])) / dx ** 2)


def steady_from_profile(
    m: ModelSpec,
    grid: Grid1D,
    rho1: np.ndarray,
    rho2: np.ndarray,
    C1: float,
    C2: float,
    C_tilde: Optional[tuple[float, float]] = None,
    iterations: int = 0,
    solver: str = "general",
) -> SteadyState:
    """Fill potentials, supports, K0 and the EL residual around a computed profile."""
    pair = DensityPair(grid, rho1, rho2)
    U1 = convolve(m.kernel, pair.rho1, grid)
    U2 = convolve(m.kernel, pair.rho2, grid)
    V1, V2 = h_gradient(m, pair.rho1, pair.rho2)
    state = SteadyState(
        pair=pair,
        C1=float(C1),
        C2=float(C2),
        support1=_support_radius(C1 - U2, grid, 1),
        support2=_support_radius(C2 - U1, grid, 2),
        residual=0.0,
        V1=V1,
        V2=V2,
        K0_estimate=max(_second_difference_bound(V1, grid.dx), _second_difference_bound(V2, grid.dx)),
        U1=U1,
        U2=U2,
        C_tilde=C_tilde,
        iterations=iterations,
        solver=solver,
    )
    state.residuals = el_residual(state, m)
    state.residual = max(state.residuals)
    return state


def el_residual(s: SteadyState, m: ModelSpec, threshold: Optional[float] = None) -> tuple[float, float]:
    """Sup-norm defect of the Euler-Lagrange system, split by support."""
    threshold = settings.support_threshold if threshold is None else threshold
    p = s.pair
    U1 = convolve(m.kernel, p.rho1, p.grid)
    U2 = convolve(m.kernel, p.rho2, p.grid)
    d1, d2 = h_gradient(m, p.rho1, p.rho2)
    out = []
    for j, rho, d, U_other in ((1, p.rho1, d1, U2), (2, p.rho2, d2, U1)):
        phi = m.nonlinearity(j).prime(rho) + m.eps * d + U_other
        C = s.constant(j)
        inside = rho > threshold
        r_in = np.max(np.abs(phi[inside] - C)) if np.any(inside) else 0.0
        r_out = np.max(np.maximum(C - phi[~inside], 0.0)) if np.any(~inside) else 0.0
        out.append(float(max(r_in, r_out)))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

def solve_steady_quadratic(m: ModelSpec, grid: Grid1D, tol: Optional[float] = None) -> SteadyState:
    """
    Steady state for K(z) = lam z^2 / 2.

    The potentials are then lam x^2 / 2 up to constants, so only the two
    shifted constants C~_j are unknown; they are found by 2D Newton on the
    masses with a Gauss-Seidel bisection fallback.
    """
    if not m.kernel.is_quadratic:
        raise ConfigurationError("solve_steady_quadratic needs a quadratic kernel")
    tol = settings.steady_tol if tol is None else tol
    m = _prepared(m)
    lam = m.kernel.lam
    W = 0.5 * lam * grid.centers ** 2
    mass_tol = _mass_tolerance(tol)

    decoupled = _gauss_seidel_constants(_MassMap(m.with_eps(0.0), grid, W, W), mass_tol)
    mass_map = _MassMap(m, grid, W, W)
    constants = decoupled if m.eps == 0.0 else _newton_constants(mass_map, decoupled, mass_tol)
    if constants is None:
        logger.info("[STEADY] Newton on the constants failed, falling back to bisection sweeps")
        constants = _gauss_seidel_constants(mass_map, mass_tol, guess=decoupled)
    ct1, ct2 = constants

    rho1, rho2 = mass_map.profile(ct1, ct2)
    rho1 = _normalized(rho1, grid.dx)
    rho2 = _normalized(rho2, grid.dx)
    _, _, _, _, m21, m22 = moments(DensityPair(grid, rho1, rho2))
    state = steady_from_profile(
        m, grid, rho1, rho2, ct1 + 0.5 * lam * m22, ct2 + 0.5 * lam * m21,
        C_tilde=(ct1, ct2), iterations=mass_map.evaluations, solver="quadratic",
    )
    logger.info(
        f"[STEADY] quadratic eps={m.eps} C~=({ct1:.6f}, {ct2:.6f}) "
        f"R=({state.support1:.6f}, {state.support2:.6f}) residual={state.residual:.2e}"
    )
    return state


def _default_init(m: ModelSpec, grid: Grid1D) -> DensityPair:
    radius = min(max(barenblatt_radius(m.kernel.lam, m.a1), barenblatt_radius(m.kernel.lam, m.a2)), 0.5 * grid.L)
    rho = box_density(grid, -radius, radius)
    return DensityPair(grid, rho, rho.copy())


def solve_steady_general(
    m: ModelSpec,
    grid: Grid1D,
    tol: Optional[float] = None,
    damping: Optional[float] = None,
    max_outer: Optional[int] = None,
    init: Optional[DensityPair] = None,
) -> SteadyState:
    """
    Damped fixed point on the potentials U_j = K * rho_j.

    Each outer pass normalizes the constants against the current potentials,
    recenters the new profile and relaxes the potentials towards it.

    Raises:
        NumericError: if the L1 change has not dropped below tol in max_outer passes
    """
    tol = settings.steady_tol if tol is None else tol
    damping = settings.steady_damping if damping is None else damping
    max_outer = settings.steady_max_outer if max_outer is None else max_outer
    if not 0.0 < damping <= 1.0:
        raise ConfigurationError(f"damping must lie in (0, 1], got {damping}")
    m = _prepared(m)
    mass_tol = _mass_tolerance(tol)

    current = init if init is not None else _default_init(m, grid)
    U1 = convolve(m.kernel, current.rho1, grid)
    U2 = convolve(m.kernel, current.rho2, grid)
    constants = None
    change = np.inf
    for outer in range(1, max_outer + 1):
        mass_map = _MassMap(m, grid, U2, U1)
        constants = _gauss_seidel_constants(mass_map, mass_tol, guess=constants)
        rho1, rho2 = mass_map.profile(*constants)
        new = recenter(DensityPair(grid, _normalized(rho1, grid.dx), _normalized(rho2, grid.dx)))
        change = l1_distance(new.rho1, current.rho1, grid) + l1_distance(new.rho2, current.rho2, grid)
        U1 = (1.0 - damping) * U1 + damping * convolve(m.kernel, new.rho1, grid)
        U2 = (1.0 - damping) * U2 + damping * convolve(m.kernel, new.rho2, grid)
        current = new
        logger.debug(f"[STEADY] outer={outer} L1 change={change:.3e}")
        if change <= tol:
            break
    else:
        raise NumericError(
            f"Steady fixed point did not converge in {max_outer} passes (last L1 change {change:.3e})",
            last_residual=float(change),
            snapshot=current,
        )

    # Final pass against the exact potentials of the converged profile
    U1 = convolve(m.kernel, current.rho1, grid)
    U2 = convolve(m.kernel, current.rho2, grid)
    mass_map = _MassMap(m, grid, U2, U1)
    c1, c2 = _gauss_seidel_constants(mass_map, mass_tol, guess=constants)
    rho1, rho2 = mass_map.profile(c1, c2)
    state = steady_from_profile(
        m, grid, _normalized(rho1, grid.dx), _normalized(rho2, grid.dx), c1, c2,
        iterations=outer, solver="general",
    )
    logger.info(
        f"[STEADY] general eps={m.eps} passes={outer} C=({c1:.6f}, {c2:.6f}) residual={state.residual:.2e}"
    )
    return state


def solve_steady(m: ModelSpec, grid: Grid1D, params: Optional[SteadyParams] = None) -> SteadyState:
    """Dispatch on the configured solver; auto picks the quadratic one when it applies."""
    params = params or SteadyParams()
    solver = params.solver
    if solver == SteadySolver.AUTO:
        solver = SteadySolver.QUADRATIC if m.kernel.is_quadratic else SteadySolver.GENERAL
    if solver == SteadySolver.QUADRATIC:
        return solve_steady_quadratic(m, grid, tol=params.tol)
    return solve_steady_general(m, grid, tol=params.tol, damping=params.damping, max_outer=params.max_outer)


# ---------------------------------------------------------------------------
# Uniform constants
# ---------------------------------------------------------------------------

def epsilon_sweep(
    m: ModelSpec,
    grid: Grid1D,
    eps_list: Iterable[float],
    params: Optional[SteadyParams] = None,
) -> dict:
    """Heights, radii and K0 of the steady states over eps; H0 and R0 are their maxima."""
    rows = []
    for eps in eps_list:
        state = solve_steady(m.with_eps(float(eps)), grid, params)
        rows.append(
            {
                "eps": float(eps),
                "height": float(max(state.pair.rho1.max(), state.pair.rho2.max())),
                "radius": float(max(state.support1, state.support2)),
                "C1": state.C1,
                "C2": state.C2,
                "K0_estimate": state.K0_estimate,
                "residual": state.residual,
            }
        )
    return {
        "rows": rows,
        "H0": max(row["height"] for row in rows),
        "R0": max(row["radius"] for row in rows),
    }


def inverse_curvature_integral(s: SteadyState, m: ModelSpec, threshold: Optional[float] = None) -> tuple[float, float]:
    """Integrals of 1 / F_j''(rho_j) over the supports."""
    threshold = settings.support_threshold if threshold is None else threshold
    out = []
    for j in (1, 2):
        rho = s.pair.species(j)
        inside = rho > threshold
        out.append(float(np.sum(1.0 / m.nonlinearity(j).second(rho[inside])) * s.grid.dx))
    return out[0], out[1]
