"""
Minimizing movements in quantile coordinates.

Each species is represented by m positions X[k] at the mass levels
(k + 1/2)/m. In these coordinates the squared Wasserstein distance is the
quadratic sum_j sum_k (X_j[k] - Xhat_j[k])^2 / m, so one step minimizes

    J(X) = d(X, Xhat)^2 / (2 tau) + E_eps(X)

over monotone arrays by preconditioned projected gradient descent. The
internal and interaction parts of E_eps are evaluated in Lagrangian form;
the coupling h needs both species at the same point and is evaluated on the
Eulerian grid after depositing the densities there.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from src.calculus import coupling_array, estimate_kappa, h_gradient
from src.config import settings
from src.errors import DomainError, OptimizerStallError
from src.flow import FlowTrace, potentials
from src.grid import (
    DensityPair,
    Grid1D,
    QuantilePair,
    pair_from_quantiles,
    pair_quantiles,
    quantile_distance,
    quantile_knots,
    random_pair,
)
from src.lyapunov import energy, entropy, lyapunov_functionals
from src.models import CouplingTerm, JkoConfig, KernelSpec, ModelSpec, PowerNonlinearity
from src.steady import SteadyState

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Isotonic projection
# ---------------------------------------------------------------------------

def pav_project(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto nondecreasing arrays (pool adjacent violators)."""
    y = np.asarray(y, dtype=float)
    if y.size < 2 or np.all(np.diff(y) >= 0):
        return y.copy()
    means: list[float] = []
    counts: list[int] = []
    for value in y:
        means.append(float(value))
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            total = counts[-2] + counts[-1]
            merged = (means[-2] * counts[-2] + means[-1] * counts[-1]) / total
            means[-2:] = [merged]
            counts[-2:] = [total]
    return np.repeat(means, counts)


# ---------------------------------------------------------------------------
# Energy pieces in Lagrangian form
# ---------------------------------------------------------------------------

def _gap_weights(m: int) -> np.ndarray:
    # End gaps also carry the half-width tails
    w = np.ones(m - 1)
    w[0] += 0.5
    w[-1] += 0.5
    return w


def internal_energy(X: np.ndarray, F: PowerNonlinearity) -> float:
    """sum_k w_k g_k F(dm / g_k); +inf on a collapsed gap."""
    gaps = np.diff(X)
    if np.any(gaps <= 0):
        return np.inf
    dm = 1.0 / X.size
    return float(np.sum(_gap_weights(X.size) * gaps * F.value(dm / gaps)))


def internal_gradient(X: np.ndarray, F: PowerNonlinearity) -> np.ndarray:
    gaps = np.diff(X)
    pressure = _gap_weights(X.size) * F.pressure(1.0 / X.size / gaps)
    grad = np.zeros_like(X)
    grad[:-1] += pressure
    grad[1:] -= pressure
    return grad


def internal_hessian_bands(X: np.ndarray, F: PowerNonlinearity) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal and superdiagonal of the (tridiagonal) internal Hessian."""
    gaps = np.diff(X)
    rho = 1.0 / X.size / gaps
    curvature = _gap_weights(X.size) * rho * rho * F.second(rho) / gaps
    diag = np.zeros_like(X)
    diag[:-1] += curvature
    diag[1:] += curvature
    return diag, -curvature


def interaction_terms(X1: np.ndarray, X2: np.ndarray, K: KernelSpec, want_gradient: bool = True):
    """
    Interaction sum_{i,k} dm^2 K(X1_i - X2_k), its gradients and the
    diagonals of its Hessian blocks.
    """
    dm = 1.0 / X1.size
    diff = X1[:, None] - X2[None, :]
    value = float(np.sum(K.value(diff)) * dm * dm)
    if not want_gradient:
        return value, None, None, None, None
    slope = K.prime(diff)
    curvature = K.second(diff)
    return (
        value,
        slope.sum(axis=1) * dm * dm,
        -slope.sum(axis=0) * dm * dm,
        curvature.sum(axis=1) * dm * dm,
        curvature.sum(axis=0) * dm * dm,
    )


def _deposit(X: np.ndarray, grid: Grid1D):
    """Eulerian cell densities of X plus the pieces needed to differentiate them."""
    knots, levels = quantile_knots(X)
    if knots[0] < grid.edges[0] or knots[-1] > grid.edges[-1]:
        return None
    cdf = np.interp(grid.edges, knots, levels)
    return np.diff(cdf) / grid.dx, knots, levels


def _knot_gradient(knots: np.ndarray, levels: np.ndarray, grid: Grid1D, edge_weights: np.ndarray) -> np.ndarray:
    """Chain rule from edge weights dH/dG(e) through the piecewise-linear CDF onto X."""
    e = grid.edges
    inside = (e >= knots[0]) & (e <= knots[-1])
    e_in = e[inside]
    w_in = edge_weights[inside]
    k = np.clip(np.searchsorted(knots, e_in, side="right") - 1, 0, knots.size - 2)
    width = knots[k + 1] - knots[k]
    rise = levels[k + 1] - levels[k]
    dG_left = -rise * (knots[k + 1] - e_in) / width ** 2
    dG_right = -rise * (e_in - knots[k]) / width ** 2
    gZ = np.zeros(knots.size)
    np.add.at(gZ, k, w_in * dG_left)
    np.add.at(gZ, k + 1, w_in * dG_right)
    # Z_0 = 1.5 X_0 - 0.5 X_1 and Z_{m+1} = 1.5 X_{m-1} - 0.5 X_{m-2}
    gX = gZ[1:-1].copy()
    gX[0] += 1.5 * gZ[0]
    gX[1] -= 0.5 * gZ[0]
    gX[-1] += 1.5 * gZ[-1]
    gX[-2] -= 0.5 * gZ[-1]
    return gX


def coupling_terms_lagrangian(Q: QuantilePair, m: ModelSpec, grid: Grid1D, want_gradient: bool = True):
    """int h(rho_1, rho_2) after depositing both species on the grid, with its X-gradient."""
    d1 = _deposit(Q.X1, grid)
    d2 = _deposit(Q.X2, grid)
    if d1 is None or d2 is None:
        return np.inf, None, None
    rho1, knots1, levels1 = d1
    rho2, knots2, levels2 = d2
    value = float(np.sum(coupling_array(m.h, CouplingTerm.H, rho1, rho2)) * grid.dx)
    if not want_gradient:
        return value, None, None
    grads = []
    for psi, knots, levels in zip(h_gradient(m, rho1, rho2), (knots1, knots2), (levels1, levels2)):
        # dH/dG(e_i) = psi_{i-1} - psi_i
        edge_weights = np.zeros(grid.n + 1)
        edge_weights[1:] += psi
        edge_weights[:-1] -= psi
        grads.append(_knot_gradient(knots, levels, grid, edge_weights))
    return value, grads[0], grads[1]


def lagrangian_energy(Q: QuantilePair, m: ModelSpec, grid: Optional[Grid1D] = None) -> float:
    """E_eps of the piecewise-constant densities described by Q."""
    total = internal_energy(Q.X1, m.F1) + internal_energy(Q.X2, m.F2)
    if not np.isfinite(total):
        return np.inf
    total += interaction_terms(Q.X1, Q.X2, m.kernel, want_gradient=False)[0]
    if m.eps > 0:
        if grid is None:
            raise DomainError("The coupling term needs a grid when eps > 0")
        total += m.eps * coupling_terms_lagrangian(Q, m, grid, want_gradient=False)[0]
    return total


def energy_gradient(Q: QuantilePair, m: ModelSpec, grid: Optional[Grid1D] = None) -> np.ndarray:
    """Stacked gradient of E_eps with respect to (X1, X2)."""
    _, g1, g2, _, _ = interaction_terms(Q.X1, Q.X2, m.kernel)
    g1 = g1 + internal_gradient(Q.X1, m.F1)
    g2 = g2 + internal_gradient(Q.X2, m.F2)
    if m.eps > 0:
        _, c1, c2 = coupling_terms_lagrangian(Q, m, grid)
        if c1 is None:
            raise DomainError("Quantile support leaves the grid")
        g1 = g1 + m.eps * c1
        g2 = g2 + m.eps * c2
    return np.concatenate([g1, g2])


# ---------------------------------------------------------------------------
# One minimizing-movement step
# ---------------------------------------------------------------------------

class JkoProblem:
    """Penalized functional J(X | Xhat) on stacked quantile vectors."""

    def __init__(self, Xhat: QuantilePair, m: ModelSpec, tau: float, grid: Optional[Grid1D] = None):
        if tau <= 0:
            raise DomainError(f"tau must be positive, got {tau}")
        self.Xhat = Xhat
        self.xhat = Xhat.stacked()
        self.model = m
        self.tau = tau
        self.grid = grid
        self.size = Xhat.m
        self.dm = 1.0 / Xhat.m

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return x[: self.size], x[self.size:]

    def value(self, x: np.ndarray) -> float:
        X1, X2 = self.split(x)
        if np.any(np.diff(X1) <= 0) or np.any(np.diff(X2) <= 0):
            return np.inf
        Q = QuantilePair(X1, X2)
        distance = np.sum((x - self.xhat) ** 2) * self.dm / (2.0 * self.tau)
        return float(distance + lagrangian_energy(Q, self.model, self.grid))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        X1, X2 = self.split(x)
        return energy_gradient(QuantilePair(X1, X2), self.model, self.grid) + (x - self.xhat) * self.dm / self.tau

    def direction(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Solve with the tridiagonal part of the Hessian (internal + distance + interaction diagonal)."""
        X1, X2 = self.split(x)
        g1, g2 = self.split(g)
        _, _, _, c1, c2 = interaction_terms(X1, X2, self.model.kernel)
        out = []
        for X, gj, F, curv in ((X1, g1, self.model.F1, c1), (X2, g2, self.model.F2, c2)):
            diag, off = internal_hessian_bands(X, F)
            bands = np.zeros((2, X.size))
            bands[0, 1:] = off
            bands[1] = diag + self.dm / self.tau + np.maximum(curv, 0.0)
            try:
                out.append(-linalg.solveh_banded(bands, gj))
            except linalg.LinAlgError:
                out.append(-gj / bands[1])
        return np.concatenate(out)

    def stationarity(self, g: np.ndarray) -> float:
        """Max-norm of the gradient per unit mass."""
        return float(np.max(np.abs(g)) / self.dm)


@dataclass
class StepResult:
    X: QuantilePair
    iterations: int
    grad_norm: float
    converged: bool
    objective: float
    energy_prev: float
    energy_next: float
    distance_sq: float
    tau: float

    @property
    def step_slack(self) -> float:
        """d^2 / (2 tau) - (E(prev) - E(next)); the step inequality holds when this is <= 0."""
        return self.distance_sq / (2.0 * self.tau) - (self.energy_prev - self.energy_next)


def minimize_step(Xhat: QuantilePair, m: ModelSpec, cfg: Optional[JkoConfig] = None, grid: Optional[Grid1D] = None) -> StepResult:
    """
    Minimize J( . | Xhat) from Xhat.

    Raises:
        OptimizerStallError: if backtracking cannot find an acceptable point
    """
    cfg = cfg or JkoConfig()
    problem = JkoProblem(Xhat, m, cfg.tau, grid)
    x = problem.xhat.copy()
    J = problem.value(x)
    if not np.isfinite(J):
        raise DomainError("The previous iterate has infinite energy")
    energy_prev = J
    g = problem.gradient(x)
    grad_norm = problem.stationarity(g)
    iterations = 0
    stagnant = 0
    converged = grad_norm <= cfg.tol

    # Stops at tol, at max_iters, or after three steps that improve neither J beyond
    # round-off nor the gradient norm
    while not converged and iterations < cfg.max_iters and stagnant < 3:
        d = problem.direction(x, g)
        step = cfg.step_size
        accepted = False
        slack = 64 * np.finfo(float).eps * (1.0 + abs(J))
        for _ in range(60):
            trial = x + step * d
            X1, X2 = problem.split(trial)
            trial = np.concatenate([pav_project(X1), pav_project(X2)])
            J_trial = problem.value(trial)
            if np.isfinite(J_trial) and J_trial <= J + 1e-4 * float(g @ (trial - x)) + slack:
                accepted = True
                break
            step *= cfg.backtracking
        if not accepted:
            raise OptimizerStallError(
                f"Backtracking exhausted after {iterations} iterations (gradient norm {grad_norm:.3e})",
                last_residual=grad_norm,
                snapshot=QuantilePair.from_stacked(x),
            )
        previous_norm = grad_norm
        no_decrease = J - J_trial <= slack
        x, J = trial, J_trial
        g = problem.gradient(x)
        grad_norm = problem.stationarity(g)
        stagnant = stagnant + 1 if no_decrease and grad_norm > 0.9 * previous_norm else 0
        iterations += 1
        converged = grad_norm <= cfg.tol

    if not converged:
        logger.debug(f"[JKO] step stopped after {iterations} iterations with gradient norm {grad_norm:.3e}")

    X = QuantilePair.from_stacked(x)
    distance_sq = quantile_distance(X, Xhat) ** 2
    return StepResult(
        X=X,
        iterations=iterations,
        grad_norm=grad_norm,
        converged=converged,
        objective=J,
        energy_prev=energy_prev,
        energy_next=lagrangian_energy(X, m, grid),
        distance_sq=distance_sq,
        tau=cfg.tau,
    )


def jko_step(Xhat: QuantilePair, m: ModelSpec, cfg: Optional[JkoConfig] = None, grid: Optional[Grid1D] = None) -> QuantilePair:
    """One minimizing-movement step; see minimize_step."""
    return minimize_step(Xhat, m, cfg, grid).X


def jko_objective(X: QuantilePair, Xhat: QuantilePair, m: ModelSpec, tau: float, grid: Optional[Grid1D] = None) -> float:
    """J(X | Xhat) = d(X, Xhat)^2 / (2 tau) + E_eps(X); +inf on collapsed gaps."""
    if X.m != Xhat.m:
        raise DomainError(f"Quantile counts differ: {X.m} vs {Xhat.m}")
    return JkoProblem(Xhat, m, tau, grid).value(X.stacked())


# ---------------------------------------------------------------------------
# Discrete weak form
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Zeta:
    """Test function x^power exp(-x^2 / (2 scale^2)); scale None is the constant 1."""

    power: int = 0
    scale: Optional[float] = 1.0

    def derivatives(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if self.scale is None:
            return np.ones_like(x), np.zeros_like(x), np.zeros_like(x)
        s2 = self.scale ** 2
        g = np.exp(-0.5 * x * x / s2)
        g1 = -x / s2 * g
        g2 = (x * x / s2 ** 2 - 1.0 / s2) * g
        if self.power == 0:
            return g, g1, g2
        if self.power == 1:
            return x * g, g + x * g1, 2.0 * g1 + x * g2
        if self.power == 2:
            return x * x * g, 2.0 * x * g + x * x * g1, 2.0 * g + 4.0 * x * g1 + x * x * g2
        raise DomainError(f"Unsupported test function power {self.power}")

    def c2_norm(self) -> float:
        if self.scale is None:
            return 1.0
        x = np.linspace(-12.0 * self.scale, 12.0 * self.scale, 48001)
        return float(max(np.max(np.abs(d)) for d in self.derivatives(x)))


def default_test_functions() -> list[Zeta]:
    return [Zeta(power, scale) for scale in (0.5, 1.0) for power in (0, 1, 2)]


@dataclass
class WeakResidual:
    R1: np.ndarray
    R2: np.ndarray
    bound: np.ndarray

    @property
    def ratio(self) -> float:
        """max over test functions of (R1 + R2) / bound."""
        total = self.R1 + self.R2
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(self.bound > 0, total / self.bound, np.where(total > 0, np.inf, 0.0))
        return float(np.max(ratios))

    def as_dict(self) -> dict:
        return {"R1": self.R1.tolist(), "R2": self.R2.tolist(), "bound": self.bound.tolist(), "ratio": self.ratio}


def weak_residual(
    prev: QuantilePair,
    next: QuantilePair,
    m: ModelSpec,
    tau: float,
    zeta_set: Optional[Sequence[Zeta]] = None,
    grid: Optional[Grid1D] = None,
) -> WeakResidual:
    """
    R_j = |sum_k dm (zeta(X+_jk) - zeta(Xhat_jk)) / tau + sum_k dE/dX_jk(X+) zeta'(X+_jk)|
    and bound = (E(prev) - E(next)) ||zeta||_C2, per test function.
    """
    zeta_set = default_test_functions() if zeta_set is None else list(zeta_set)
    dm = 1.0 / next.m
    grad = energy_gradient(next, m, grid)
    grads = (grad[: next.m], grad[next.m:])
    drop = lagrangian_energy(prev, m, grid) - lagrangian_energy(next, m, grid)
    R = np.zeros((2, len(zeta_set)))
    bound = np.zeros(len(zeta_set))
    for i, zeta in enumerate(zeta_set):
        for j in (0, 1):
            Xn = next.species(j + 1)
            Xp = prev.species(j + 1)
            z_next, dz_next, _ = zeta.derivatives(Xn)
            z_prev, _, _ = zeta.derivatives(Xp)
            R[j, i] = abs(np.sum(z_next - z_prev) * dm / tau + np.sum(grads[j] * dz_next))
        bound[i] = drop * zeta.c2_norm()
    return WeakResidual(R[0], R[1], bound)


def weak_residual_grid(
    prev: DensityPair,
    next: DensityPair,
    m: ModelSpec,
    tau: float,
    zeta_set: Optional[Sequence[Zeta]] = None,
) -> WeakResidual:
    """Eulerian counterpart of weak_residual with face fluxes of the composed potentials."""
    zeta_set = default_test_functions() if zeta_set is None else list(zeta_set)
    grid = next.grid
    dx = grid.dx
    x = grid.centers
    phis = potentials(next, m)
    drop = energy(prev, m) - energy(next, m)
    R = np.zeros((2, len(zeta_set)))
    bound = np.zeros(len(zeta_set))
    for i, zeta in enumerate(zeta_set):
        z, _, _ = zeta.derivatives(x)
        for j in (0, 1):
            rho_next = next.species(j + 1)
            rho_prev = prev.species(j + 1)
            face_rho = 0.5 * (rho_next[1:] + rho_next[:-1])
            flux = np.sum(face_rho * np.diff(phis[j]) / dx * np.diff(z) / dx) * dx
            R[j, i] = abs(np.sum((rho_next - rho_prev) * z) * dx / tau + flux)
        bound[i] = drop * zeta.c2_norm()
    return WeakResidual(R[0], R[1], bound)


# ---------------------------------------------------------------------------
# Gradient regularity of one step
# ---------------------------------------------------------------------------

def h1_diagnostics(
    prev: QuantilePair,
    next: QuantilePair,
    m: ModelSpec,
    tau: float,
    alpha: float,
    grid: Grid1D,
) -> dict:
    """
    Cut-off and full gradient bounds for one step.

    cut: (1 / 2A) sum_j int |grad F_j'(min(rho_j+, alpha))|^2
         <= (H(prev) - H(next)) / tau + 2 C_K, A = max F_j'' on [0, alpha]
    full: sum_j int |grad F_j'(rho_j+)|^2 <= C [dE / tau + 2 C_K^2 / lambda E(prev) + dH / tau + 2 C_K]
    weighted: sum_j int |grad (F_j' + eps d_j h)(rho+)|^2 rho_j+ <= 4 dE / tau + 8 C_K^2 / lambda E(next)
    """
    dx = grid.dx
    p_prev = pair_from_quantiles(prev, grid)
    p_next = pair_from_quantiles(next, grid)
    E_prev = lagrangian_energy(prev, m, grid)
    E_next = lagrangian_energy(next, m, grid)
    dE = E_prev - E_next
    dH = entropy(p_prev) - entropy(p_next)
    c_k = m.kernel.c_k
    lam = m.kernel.lam

    A = max(m.F1.second(alpha), m.F2.second(alpha))
    cut_raw = 0.0
    full = 0.0
    weighted = 0.0
    d1, d2 = h_gradient(m, p_next.rho1, p_next.rho2)
    for j, d in ((1, d1), (2, d2)):
        F = m.nonlinearity(j)
        rho = p_next.species(j)
        cut_raw += float(np.sum((np.diff(F.prime(np.minimum(rho, alpha))) / dx) ** 2) * dx)
        full += float(np.sum((np.diff(F.prime(rho)) / dx) ** 2) * dx)
        face_rho = 0.5 * (rho[1:] + rho[:-1])
        weighted += float(np.sum((np.diff(F.prime(rho) + m.eps * d) / dx) ** 2 * face_rho) * dx)

    lhs_cut = cut_raw / (2.0 * A) if A > 0 else np.inf
    rhs_cut = dH / tau + 2.0 * c_k

    kappa = m.kappa_array if m.kappa is not None else (estimate_kappa(m) if m.eps > 0 else np.zeros((2, 2)))
    kappa_max = float(np.max(np.abs(kappa)))
    denominator = 1.0 - 3.0 * kappa_max ** 2 * m.eps ** 2
    B = 12.0 / denominator if denominator > 0 else np.inf
    C = max(B / alpha, 2.0 * A)
    rhs_full = C * (dE / tau + 2.0 * c_k ** 2 / lam * E_prev + dH / tau + 2.0 * c_k)
    rhs_weighted = 4.0 * dE / tau + 8.0 * c_k ** 2 / lam * E_next

    def ratio(lhs: float, rhs: float) -> float:
        return lhs / rhs if rhs > 0 else np.inf

    return {
        "A": A,
        "lhs_cut": lhs_cut,
        "lhs_cut_raw": cut_raw,
        "rhs_cut": rhs_cut,
        "ratio_cut": ratio(lhs_cut, rhs_cut),
        "lhs_full": full,
        "rhs_full": rhs_full,
        "ratio_full": ratio(full, rhs_full),
        "lhs_weighted": weighted,
        "rhs_weighted": rhs_weighted,
        "ratio_weighted": ratio(weighted, rhs_weighted),
        "energy_drop": dE,
        "entropy_drop": dH,
    }


def random_step_report(
    m: ModelSpec,
    grid: Grid1D,
    cfg: JkoConfig,
    count: int,
    rng: np.random.Generator,
    alpha: float = 1.0,
) -> list[dict]:
    """One step from each of count random pairs, with its step slack and gradient-bound ratios."""
    rows = []
    for k in range(count):
        Xhat = pair_quantiles(random_pair(grid, rng), cfg.m)
        result = minimize_step(Xhat, m, cfg, grid)
        h1 = h1_diagnostics(Xhat, result.X, m, cfg.tau, alpha, grid)
        rows.append(
            {
                "start": k,
                "converged": result.converged,
                "grad_norm": result.grad_norm,
                "slack": result.step_slack,
                "ratio_cut": h1["ratio_cut"],
                "ratio_weighted": h1["ratio_weighted"],
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

@dataclass
class JkoRun:
    trace: FlowTrace
    iterates: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    quasi_continuity: float = 0.0
    discrete_rates: list = field(default_factory=list)

    @property
    def final(self) -> QuantilePair:
        return self.iterates[-1]

    def max_step_slack(self) -> float:
        return max((s["slack"] for s in self.steps), default=0.0)

    def energy_increase(self) -> float:
        E = np.asarray(self.trace.E_eps)
        return float(np.max(np.diff(E))) if E.size > 1 else 0.0


def quasi_continuity_ratio(iterates: Sequence[QuantilePair], E0: float, tau: float) -> float:
    """max over n < k of d(X_n, X_k)^2 / (2 E0 ((k - n) tau + tau)); at most 1."""
    if len(iterates) < 2:
        return 0.0
    stack = np.stack([it.stacked() for it in iterates])
    dm = 1.0 / iterates[0].m
    sq = np.sum(stack ** 2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * stack @ stack.T, 0.0) * dm
    idx = np.arange(len(iterates))
    lag = np.abs(idx[:, None] - idx[None, :])
    allowed = 2.0 * E0 * (lag * tau + tau)
    return float(np.max(d2 / allowed))


def jko_run(
    init: DensityPair,
    m: ModelSpec,
    cfg: Optional[JkoConfig],
    nsteps: int,
    steady: SteadyState,
    quantiles_for_distance: Optional[int] = None,
) -> JkoRun:
    """
    Iterate minimize_step nsteps times from the quantiles of init.

    The trace records the Lagrangian energy; the remaining columns are
    evaluated on the deposited Eulerian densities.
    """
    cfg = cfg or JkoConfig()
    grid = init.grid
    quantiles_for_distance = cfg.m if quantiles_for_distance is None else quantiles_for_distance
    X = pair_quantiles(init, cfg.m)
    steady_X = pair_quantiles(steady.pair, cfg.m)

    trace = FlowTrace()
    trace.E_steady = lagrangian_energy(steady_X, m, grid)
    trace.L_steady, trace.N_steady = lyapunov_functionals(steady.pair, m, steady)
    E0 = lagrangian_energy(X, m, grid)
    trace.record(0.0, pair_from_quantiles(X, grid), m, steady, quantiles_for_distance, E=E0)
    run = JkoRun(trace=trace, iterates=[X])

    logger.info(f"[JKO] eps={m.eps} tau={cfg.tau} m={cfg.m} steps={nsteps} start")
    for k in range(1, nsteps + 1):
        result = minimize_step(X, m, cfg, grid)
        X = result.X
        trace.record(k * cfg.tau, pair_from_quantiles(X, grid), m, steady, quantiles_for_distance, E=result.energy_next)
        run.iterates.append(X)
        run.steps.append(
            {
                "step": k,
                "iterations": result.iterations,
                "grad_norm": result.grad_norm,
                "converged": result.converged,
                "distance_sq": result.distance_sq,
                "energy_drop": result.energy_prev - result.energy_next,
                "slack": result.step_slack,
            }
        )
        L_prev, L_next = trace.L_eps[-2], trace.L_eps[-1]
        gap = L_next - trace.L_steady
        if gap > settings.gap_floor:
            run.discrete_rates.append((L_prev - L_next) / (cfg.tau * gap))
        logger.debug(f"[JKO] step={k} iterations={result.iterations} grad={result.grad_norm:.2e}")

    run.quasi_continuity = quasi_continuity_ratio(run.iterates, E0, cfg.tau)
    logger.info(
        f"[JKO] done E-gap={trace.E_eps[-1] - trace.E_steady:.3e} "
        f"max slack={run.max_step_slack():.2e} quasi-continuity={run.quasi_continuity:.3f}"
    )
    return run
