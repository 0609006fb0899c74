"""1D grid, density pairs and quantile (Lagrangian) coordinates.

Densities are cell averages on a uniform grid over [-L, L]; all integrals use
the midpoint rule. Quantile arrays hold positions at the mass levels
(k + 1/2)/m. Between consecutive quantiles the density is constant, and two
half-mass tails extend the first and last gaps by half their width, so a
quantile array describes a piecewise-constant density exactly.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np
from scipy import stats

from src.errors import DomainError
from src.models import KernelSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid1D:
    """Uniform cell-centered grid on [-L, L]."""

    L: float
    n: int

    def __post_init__(self):
        if not np.isfinite(self.L) or self.L <= 0:
            raise DomainError(f"Grid half-width must be positive and finite, got {self.L}")
        if self.n < 8:
            raise DomainError(f"Grid needs at least 8 cells, got {self.n}")

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.n

    @cached_property
    def centers(self) -> np.ndarray:
        # Built from half-integers so x_i = -x_{n-1-i} holds exactly
        x = (np.arange(self.n) - 0.5 * (self.n - 1)) * self.dx
        x.flags.writeable = False
        return x

    @cached_property
    def edges(self) -> np.ndarray:
        e = (np.arange(self.n + 1) - 0.5 * self.n) * self.dx
        e.flags.writeable = False
        return e


@dataclass
class DensityPair:
    """Two nonnegative cell-average fields on a shared grid."""

    grid: Grid1D
    rho1: np.ndarray
    rho2: np.ndarray

    def __post_init__(self):
        self.rho1 = np.asarray(self.rho1, dtype=float)
        self.rho2 = np.asarray(self.rho2, dtype=float)
        for name, rho in (("rho1", self.rho1), ("rho2", self.rho2)):
            if rho.shape != (self.grid.n,):
                raise DomainError(f"{name} has shape {rho.shape}, expected ({self.grid.n},)")
            if not np.all(np.isfinite(rho)):
                raise DomainError(f"{name} contains non-finite values")
            if np.any(rho < 0):
                raise DomainError(f"{name} has negative entries (min {rho.min():.3e})")

    @property
    def masses(self) -> tuple[float, float]:
        dx = self.grid.dx
        return float(self.rho1.sum() * dx), float(self.rho2.sum() * dx)

    def species(self, j: int) -> np.ndarray:
        return self.rho1 if j == 1 else self.rho2

    def copy(self) -> "DensityPair":
        return DensityPair(self.grid, self.rho1.copy(), self.rho2.copy())

    def check_invariants(self, mass_tol: float = 1e-10, center_tol: float = 1e-8) -> list[str]:
        """Return the violated pair invariants (empty when the pair is valid)."""
        issues = []
        mass1, mass2, m11, m12, _, _ = moments(self)
        if abs(mass1 - 1.0) > mass_tol or abs(mass2 - 1.0) > mass_tol:
            issues.append(f"masses ({mass1:.12f}, {mass2:.12f}) differ from 1")
        if abs(m11 + m12) > center_tol:
            issues.append(f"combined first moment {m11 + m12:.3e} is not 0")
        return issues


@dataclass
class QuantilePair:
    """Monotone quantile positions of both species at mass levels (k + 1/2)/m."""

    X1: np.ndarray
    X2: np.ndarray
    m: int = field(init=False)

    def __post_init__(self):
        self.X1 = np.asarray(self.X1, dtype=float)
        self.X2 = np.asarray(self.X2, dtype=float)
        if self.X1.shape != self.X2.shape or self.X1.ndim != 1:
            raise DomainError("Quantile arrays must be one-dimensional with equal length")
        for name, X in (("X1", self.X1), ("X2", self.X2)):
            if not np.all(np.isfinite(X)):
                raise DomainError(f"{name} contains non-finite values")
            if np.any(np.diff(X) < 0):
                raise DomainError(f"{name} is not monotone nondecreasing")
        self.m = self.X1.size

    def species(self, j: int) -> np.ndarray:
        return self.X1 if j == 1 else self.X2

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.X1, self.X2])

    @classmethod
    def from_stacked(cls, x: np.ndarray) -> "QuantilePair":
        half = x.size // 2
        return cls(x[:half].copy(), x[half:].copy())


# ---------------------------------------------------------------------------
# Quadrature and moments
# ---------------------------------------------------------------------------

def moments(p: DensityPair) -> tuple[float, float, float, float, float, float]:
    """(mass1, mass2, m1[rho1], m1[rho2], m2[rho1], m2[rho2]) by the midpoint rule."""
    x = p.grid.centers
    dx = p.grid.dx
    return (
        float(np.sum(p.rho1) * dx),
        float(np.sum(p.rho2) * dx),
        float(np.sum(x * p.rho1) * dx),
        float(np.sum(x * p.rho2) * dx),
        float(np.sum(x * x * p.rho1) * dx),
        float(np.sum(x * x * p.rho2) * dx),
    )


def combined_first_moment(p: DensityPair) -> float:
    _, _, m11, m12, _, _ = moments(p)
    return m11 + m12


def _normalize(rho: np.ndarray, dx: float) -> np.ndarray:
    mass = rho.sum() * dx
    if mass <= 0:
        raise DomainError("Density has zero mass")
    return rho / mass


def _shift(rho: np.ndarray, grid: Grid1D, v: float) -> np.ndarray:
    x = grid.centers
    return np.interp(x - v, x, rho, left=0.0, right=0.0)


def recenter(p: DensityPair, tol: float = 1e-12, max_passes: int = 8) -> DensityPair:
    """
    Shift both densities so that the combined center of mass is zero.

    The shift v = -(m1[rho1] + m1[rho2]) / 2 is applied by linear
    interpolation and repeated until |v| <= tol; masses are renormalized to 1.

    Raises:
        DomainError: if the total shift exceeds L / 2
    """
    grid = p.grid
    out = p
    total = 0.0
    for _ in range(max_passes):
        mass1, mass2, m11, m12, _, _ = moments(out)
        v = -0.5 * (m11 / mass1 + m12 / mass2)
        if abs(v) <= tol:
            break
        total += v
        if abs(total) > 0.5 * grid.L:
            raise DomainError(f"Recentering shift {total:.4f} exceeds L/2 = {0.5 * grid.L:.4f}")
        out = DensityPair(
            grid,
            _normalize(_shift(out.rho1, grid, v), grid.dx),
            _normalize(_shift(out.rho2, grid, v), grid.dx),
        )
    else:
        logger.warning(f"[GRID] recenter stopped after {max_passes} passes (|v|={abs(v):.2e})")
    return out if out is not p else p.copy()


# ---------------------------------------------------------------------------
# Kernel convolution
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def kernel_matrix(kernel: KernelSpec, grid: Grid1D) -> np.ndarray:
    """K(x_i - x_k) on all center pairs (symmetric)."""
    x = grid.centers
    mat = kernel.value(x[:, None] - x[None, :])
    mat.flags.writeable = False
    return mat


@lru_cache(maxsize=16)
def kernel_gradient_matrix(kernel: KernelSpec, grid: Grid1D) -> np.ndarray:
    """K'(x_i - x_k) on all center pairs (antisymmetric)."""
    x = grid.centers
    mat = kernel.prime(x[:, None] - x[None, :])
    mat.flags.writeable = False
    return mat


def convolve(K: KernelSpec, rho: np.ndarray, grid: Grid1D) -> np.ndarray:
    """(K * rho)(x_i) = sum_k K(x_i - x_k) rho_k dx."""
    return kernel_matrix(K, grid) @ np.asarray(rho, dtype=float) * grid.dx


def convolve_gradient(K: KernelSpec, rho: np.ndarray, grid: Grid1D) -> np.ndarray:
    """d/dx (K * rho) at the cell centers, using K' exactly."""
    return kernel_gradient_matrix(K, grid) @ np.asarray(rho, dtype=float) * grid.dx


def interaction_energy(K: KernelSpec, p: DensityPair) -> float:
    """Integral of rho1 (K * rho2)."""
    return float(np.sum(p.rho1 * convolve(K, p.rho2, p.grid)) * p.grid.dx)


# ---------------------------------------------------------------------------
# Quantile coordinates and Wasserstein distance
# ---------------------------------------------------------------------------

def mass_levels(m: int) -> np.ndarray:
    return (np.arange(m) + 0.5) / m


def to_quantiles(rho: np.ndarray, grid: Grid1D, m: int) -> np.ndarray:
    """
    Invert the piecewise-linear CDF of a cell-average density at (k + 1/2)/m.

    Plateaus of the CDF resolve to their leftmost preimage.

    Raises:
        DomainError: if the density has zero mass
    """
    rho = np.asarray(rho, dtype=float)
    cell_mass = rho * grid.dx
    total = cell_mass.sum()
    if total <= 0:
        raise DomainError("Cannot take quantiles of a zero-mass density")
    cdf = np.concatenate([[0.0], np.cumsum(cell_mass) / total])
    levels = mass_levels(m)
    # First edge with cdf >= level; the cell before it carries the level
    idx = np.searchsorted(cdf, levels, side="left")
    cell = np.clip(idx - 1, 0, grid.n - 1)
    width = cdf[cell + 1] - cdf[cell]
    frac = np.where(width > 0, (levels - cdf[cell]) / np.where(width > 0, width, 1.0), 0.0)
    X = grid.edges[cell] + np.clip(frac, 0.0, 1.0) * grid.dx
    return np.maximum.accumulate(X)


def quantile_knots(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Knots Z and cumulative levels of the piecewise-constant density of X.

    Z = [X_0 - g_0/2, X_0, ..., X_{m-1}, X_{m-1} + g_{m-2}/2] with
    levels [0, 1/(2m), 3/(2m), ..., 1 - 1/(2m), 1].
    """
    m = X.size
    left = X[0] - 0.5 * (X[1] - X[0])
    right = X[-1] + 0.5 * (X[-1] - X[-2])
    knots = np.concatenate([[left], X, [right]])
    levels = np.concatenate([[0.0], mass_levels(m), [1.0]])
    return knots, levels


def from_quantiles(X: np.ndarray, m: int, grid: Grid1D) -> np.ndarray:
    """
    Deposit the piecewise-constant density of X onto the grid conservatively.

    Raises:
        DomainError: for non-increasing quantiles or support leaving the grid
    """
    X = np.asarray(X, dtype=float)
    if X.size != m or m < 2:
        raise DomainError(f"Expected {m} >= 2 quantiles, got {X.size}")
    if np.any(np.diff(X) <= 0):
        raise DomainError("Quantiles must be strictly increasing to define a density")
    knots, levels = quantile_knots(X)
    if knots[0] < grid.edges[0] or knots[-1] > grid.edges[-1]:
        raise DomainError(
            f"Quantile support [{knots[0]:.4f}, {knots[-1]:.4f}] leaves the grid [-{grid.L}, {grid.L}]"
        )
    cdf = np.interp(grid.edges, knots, levels)
    return np.diff(cdf) / grid.dx


def w2_distance(p: np.ndarray, q: np.ndarray, grid: Grid1D, m: int) -> float:
    """L2-Wasserstein distance of two unit-mass densities via quantiles."""
    Xp = to_quantiles(p, grid, m)
    Xq = to_quantiles(q, grid, m)
    return float(np.sqrt(np.mean((Xp - Xq) ** 2)))


def pair_quantiles(p: DensityPair, m: int) -> QuantilePair:
    return QuantilePair(to_quantiles(p.rho1, p.grid, m), to_quantiles(p.rho2, p.grid, m))


def pair_from_quantiles(Q: QuantilePair, grid: Grid1D) -> DensityPair:
    return DensityPair(grid, from_quantiles(Q.X1, Q.m, grid), from_quantiles(Q.X2, Q.m, grid))


def pair_distance(p: DensityPair, q: DensityPair, m: int) -> float:
    """d(p, q) = sqrt(W2(rho1, sigma1)^2 + W2(rho2, sigma2)^2)."""
    _check_same_grid(p, q)
    w1 = w2_distance(p.rho1, q.rho1, p.grid, m)
    w2 = w2_distance(p.rho2, q.rho2, p.grid, m)
    return float(np.hypot(w1, w2))


def quantile_distance(P: QuantilePair, Q: QuantilePair) -> float:
    """d between two quantile pairs with the same number of levels."""
    return float(np.sqrt((np.sum((P.X1 - Q.X1) ** 2) + np.sum((P.X2 - Q.X2) ** 2)) / P.m))


def _check_same_grid(p: DensityPair, q: DensityPair) -> None:
    if p.grid != q.grid:
        raise DomainError(f"Mismatched grids: {p.grid} vs {q.grid}")


def l1_distance(p: np.ndarray, q: np.ndarray, grid: Grid1D) -> float:
    return float(np.sum(np.abs(np.asarray(p) - np.asarray(q))) * grid.dx)


# ---------------------------------------------------------------------------
# Initial data
# ---------------------------------------------------------------------------

def box_density(grid: Grid1D, left: float, right: float) -> np.ndarray:
    """Exact cell averages of the uniform probability density on [left, right]."""
    if not right > left:
        raise DomainError("Box density needs left < right")
    e = grid.edges
    overlap = np.clip(np.minimum(e[1:], right) - np.maximum(e[:-1], left), 0.0, None)
    rho = overlap / (right - left) / grid.dx
    return _normalize(rho, grid.dx)


def gaussian_density(grid: Grid1D, center: float, width: float) -> np.ndarray:
    """Cell averages of a normal density, renormalized on the grid."""
    cdf = stats.norm.cdf(grid.edges, loc=center, scale=width)
    return _normalize(np.diff(cdf) / grid.dx, grid.dx)


def uniform_pair(grid: Grid1D, half_width: float, offset: float = 0.0) -> DensityPair:
    """Species 1 uniform around +offset, species 2 uniform around -offset, recentered."""
    pair = DensityPair(
        grid,
        box_density(grid, offset - half_width, offset + half_width),
        box_density(grid, -offset - half_width, -offset + half_width),
    )
    return recenter(pair)


def random_pair(grid: Grid1D, rng: np.random.Generator, spread: Optional[float] = None) -> DensityPair:
    """Gaussian mixtures (one to three bumps per species) recentered into X0."""
    spread = 0.25 * grid.L if spread is None else spread
    fields = []
    for _ in range(2):
        count = int(rng.integers(1, 4))
        weights = rng.dirichlet(np.ones(count))
        centers = rng.uniform(-spread, spread, size=count)
        widths = rng.uniform(0.12, 0.4, size=count) * spread
        rho = sum(w * gaussian_density(grid, c, s) for w, c, s in zip(weights, centers, widths))
        fields.append(_normalize(rho, grid.dx))
    return recenter(DensityPair(grid, fields[0], fields[1]))


def perturb_pair(p: DensityPair, amplitude: float) -> DensityPair:
    """Mass-neutral, support-preserving perturbation rho_j (1 + amplitude * w_j(x))."""
    x = p.grid.centers
    out = []
    for j, rho in ((1, p.rho1), (2, p.rho2)):
        support = x[rho > 0]
        if support.size == 0:
            raise DomainError("Cannot perturb an empty density")
        radius = max(abs(support[0]), abs(support[-1]), p.grid.dx)
        sign = 1.0 if j == 1 else -1.0
        bump = np.cos(np.pi * x / radius) + 0.5 * sign * np.sin(np.pi * x / radius)
        out.append(_normalize(rho * np.clip(1.0 + amplitude * bump, 0.0, None), p.grid.dx))
    return recenter(DensityPair(p.grid, out[0], out[1]))
