"""
Explicit first-order upwind finite volumes for the evolution system

    d/dt rho_j = d/dx (rho_j d/dx Phi_j),
    Phi_j = F_j'(rho_j) + eps d_j h(rho) + K * rho_j'

with no-flux boundaries. Face velocities are differences of the composed
potential Phi_j, so the degenerate diffusion never appears explicitly.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from src.calculus import coupling_array, h_gradient
from src.config import settings
from src.errors import CFLViolationError, NumericError
from src.grid import DensityPair, combined_first_moment, convolve, l1_distance, pair_distance
from src.lyapunov import (
    entropy,
    energy,
    kernel_gradient_probe,
    lyapunov_functionals,
    n_vs_l_check,
    ck_check,
    slope_domination_probe,
)
from src.models import CouplingTerm, FlowConfig, ModelSpec
from src.steady import SteadyState

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["t", "E_eps", "L_eps", "N_eps", "H_c", "mass1", "mass2", "m1_comb", "W2", "L1err1", "L1err2"]


@dataclass
class FlowTrace:
    """Functionals recorded at each snapshot of a run."""

    E_steady: float = 0.0
    L_steady: float = 0.0
    N_steady: float = 0.0
    times: list = field(default_factory=list)
    E_eps: list = field(default_factory=list)
    L_eps: list = field(default_factory=list)
    N_eps: list = field(default_factory=list)
    H_c: list = field(default_factory=list)
    mass1: list = field(default_factory=list)
    mass2: list = field(default_factory=list)
    m1_combined: list = field(default_factory=list)
    W2_to_steady: list = field(default_factory=list)
    L1_err_1: list = field(default_factory=list)
    L1_err_2: list = field(default_factory=list)
    # Ratios of the inequality probes; not part of the CSV
    ck_ratio: list = field(default_factory=list)
    n_ratio: list = field(default_factory=list)
    slope_ratio: list = field(default_factory=list)
    kernel_gradient_slack: list = field(default_factory=list)

    def record(
        self,
        t: float,
        p: DensityPair,
        m: ModelSpec,
        steady: SteadyState,
        quantiles: int,
        E: Optional[float] = None,
    ) -> None:
        L, N = lyapunov_functionals(p, m, steady)
        mass1, mass2 = p.masses
        self.times.append(float(t))
        self.E_eps.append(float(energy(p, m) if E is None else E))
        self.L_eps.append(L)
        self.N_eps.append(N)
        self.H_c.append(entropy(p))
        self.mass1.append(mass1)
        self.mass2.append(mass2)
        self.m1_combined.append(combined_first_moment(p))
        self.W2_to_steady.append(pair_distance(p, steady.pair, quantiles))
        self.L1_err_1.append(l1_distance(p.rho1, steady.pair.rho1, p.grid))
        self.L1_err_2.append(l1_distance(p.rho2, steady.pair.rho2, p.grid))
        self.ck_ratio.append(ck_check(p, steady, m))
        self.n_ratio.append(n_vs_l_check(p, m, steady))
        lhs, rhs = slope_domination_probe(p, m, steady)
        self.slope_ratio.append(lhs / rhs if rhs > settings.gap_floor else 0.0)
        self.kernel_gradient_slack.append(kernel_gradient_probe(p, steady, m, quantiles))

    def __len__(self) -> int:
        return len(self.times)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "t": self.times,
                "E_eps": self.E_eps,
                "L_eps": self.L_eps,
                "N_eps": self.N_eps,
                "H_c": self.H_c,
                "mass1": self.mass1,
                "mass2": self.mass2,
                "m1_comb": self.m1_combined,
                "W2": self.W2_to_steady,
                "L1err1": self.L1_err_1,
                "L1err2": self.L1_err_2,
            },
            columns=TRACE_COLUMNS,
        )

    def max_energy_increase(self) -> float:
        E = np.asarray(self.E_eps)
        return float(np.max(np.diff(E))) if E.size > 1 else 0.0

    def run_constants(self) -> dict:
        """Run maxima of the probe ratios, finite entries only."""

        def finite_max(values: list) -> float:
            arr = np.asarray(values, dtype=float)
            arr = arr[np.isfinite(arr)]
            return float(arr.max()) if arr.size else 0.0

        return {
            "C_CK": finite_max(self.ck_ratio),
            "C_N": finite_max(self.n_ratio),
            "C_slope": finite_max(self.slope_ratio),
            "kernel_gradient_slack": finite_max(self.kernel_gradient_slack),
        }


@dataclass
class FlowRun:
    trace: FlowTrace
    final: DensityPair
    steps: int
    snapshots: list = field(default_factory=list)
    max_step_mass_drift: float = 0.0
    max_center_drift: float = 0.0
    min_dt: float = np.inf


# ---------------------------------------------------------------------------
# Velocities and time step
# ---------------------------------------------------------------------------

def potentials(p: DensityPair, m: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Composed potentials Phi_1, Phi_2 at the cell centers."""
    d1, d2 = h_gradient(m, p.rho1, p.rho2)
    U1 = convolve(m.kernel, p.rho1, p.grid)
    U2 = convolve(m.kernel, p.rho2, p.grid)
    return m.F1.prime(p.rho1) + m.eps * d1 + U2, m.F2.prime(p.rho2) + m.eps * d2 + U1


def velocity_fields(p: DensityPair, m: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Face velocities (n + 1 entries each), zero on the two boundary faces."""
    dx = p.grid.dx
    out = []
    for phi in potentials(p, m):
        v = np.zeros(p.grid.n + 1)
        v[1:-1] = -np.diff(phi) / dx
        out.append(v)
    return out[0], out[1]


def _diffusivity(p: DensityPair, m: ModelSpec) -> float:
    """Largest effective diffusivity rho_j (F_j'' + eps |h_jj| + eps |h_jj'|)."""
    rho1, rho2 = p.rho1, p.rho2
    D1 = m.F1.second(rho1)
    D2 = m.F2.second(rho2)
    if m.eps > 0:
        h11 = np.abs(coupling_array(m.h, CouplingTerm.D11, rho1, rho2))
        h12 = np.abs(coupling_array(m.h, CouplingTerm.D12, rho1, rho2))
        h22 = np.abs(coupling_array(m.h, CouplingTerm.D22, rho1, rho2))
        D1 = D1 + m.eps * (h11 + h12)
        D2 = D2 + m.eps * (h22 + h12)
    return float(max(np.max(rho1 * D1), np.max(rho2 * D2)))


def active_speed(p: DensityPair, velocities: tuple[np.ndarray, np.ndarray]) -> float:
    """Largest |v| over faces whose upwind cell carries mass."""
    speed = 0.0
    for rho, v in zip((p.rho1, p.rho2), velocities):
        inner = v[1:-1]
        upwind = np.where(inner > 0, rho[:-1], rho[1:])
        carrying = np.abs(inner[upwind > 0])
        if carrying.size:
            speed = max(speed, float(carrying.max()))
    return speed


def cfl_dt(
    p: DensityPair,
    m: ModelSpec,
    cfl_safety: Optional[float] = None,
    dt_max: Optional[float] = None,
    velocities: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> float:
    """cfl_safety * dx / max|v| over flux-carrying faces, capped at dt_max."""
    cfl_safety = settings.cfl_safety if cfl_safety is None else cfl_safety
    dt_max = settings.dt_max if dt_max is None else dt_max
    velocities = velocities if velocities is not None else velocity_fields(p, m)
    speed = active_speed(p, velocities)
    if speed == 0.0:
        return dt_max
    return min(dt_max, cfl_safety * p.grid.dx / speed)


def parabolic_dt(p: DensityPair, m: ModelSpec, cfl_safety: Optional[float] = None) -> float:
    """cfl_safety * dx^2 / (2 D) for the largest effective diffusivity D (inf when D = 0)."""
    cfl_safety = settings.cfl_safety if cfl_safety is None else cfl_safety
    diffusivity = _diffusivity(p, m)
    if diffusivity <= 0:
        return np.inf
    return cfl_safety * p.grid.dx ** 2 / (2.0 * diffusivity)


def _upwind_update(rho: np.ndarray, v: np.ndarray, dt: float, dx: float) -> np.ndarray:
    # Face i+1/2 sits at v[i+1]; upwind cell is i for v > 0, i+1 otherwise
    flux = np.zeros_like(v)
    inner = v[1:-1]
    flux[1:-1] = np.where(inner > 0, rho[:-1], rho[1:]) * inner
    return rho - dt * (flux[1:] - flux[:-1]) / dx


def fv_step(
    p: DensityPair,
    m: ModelSpec,
    dt: float,
    velocities: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> DensityPair:
    """
    One upwind step.

    Raises:
        CFLViolationError: if a cell turns negative beyond round-off
        NumericError: if the update is not finite
    """
    dx = p.grid.dx
    v1, v2 = velocities if velocities is not None else velocity_fields(p, m)
    new = []
    for j, rho, v in ((1, p.rho1, v1), (2, p.rho2, v2)):
        out = _upwind_update(rho, v, dt, dx)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"Non-finite density for species {j} after a step of {dt:.3e}", snapshot=p)
        floor = -1e-13 * max(float(rho.max()), 1.0)
        if out.min() < floor:
            raise CFLViolationError(
                f"Species {j} turned negative ({out.min():.3e}) with dt={dt:.3e}",
                last_residual=float(out.min()),
                snapshot=p,
            )
        new.append(np.maximum(out, 0.0))
    return DensityPair(p.grid, new[0], new[1])


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def run_flow(
    init: DensityPair,
    m: ModelSpec,
    steady: SteadyState,
    cfg: Optional[FlowConfig] = None,
    quantiles: Optional[int] = None,
) -> FlowRun:
    """
    Integrate from init to cfg.T and record the trace every snapshot_every steps.

    Raises:
        CFLViolationError, NumericError: with the last valid state as snapshot
    """
    cfg = cfg or FlowConfig()
    quantiles = settings.jko_quantiles if quantiles is None else quantiles
    trace = FlowTrace()
    trace.L_steady, trace.N_steady = lyapunov_functionals(steady.pair, m, steady)
    trace.E_steady = energy(steady.pair, m)

    p = init
    t = 0.0
    steps = 0
    trace.record(t, p, m, steady, quantiles)
    run = FlowRun(trace=trace, final=p, steps=0, snapshots=[(0.0, p)])
    center0 = combined_first_moment(p)
    mass_before = np.array(p.masses)

    logger.info(f"[FLOW] eps={m.eps} T={cfg.T} n={p.grid.n} start")
    while t < cfg.T * (1.0 - 1e-14):
        velocities = velocity_fields(p, m)
        dt = min(
            cfl_dt(p, m, cfg.cfl_safety, cfg.dt_max, velocities=velocities),
            parabolic_dt(p, m, cfg.cfl_safety),
            cfg.T - t,
        )
        p = fv_step(p, m, dt, velocities=velocities)
        t += dt
        steps += 1
        run.min_dt = min(run.min_dt, dt)

        mass_after = np.array(p.masses)
        run.max_step_mass_drift = max(run.max_step_mass_drift, float(np.max(np.abs(mass_after - mass_before))))
        mass_before = mass_after
        run.max_center_drift = max(run.max_center_drift, abs(combined_first_moment(p) - center0))

        if steps % cfg.snapshot_every == 0 or t >= cfg.T * (1.0 - 1e-14):
            trace.record(t, p, m, steady, quantiles)
            run.snapshots.append((t, p))
            if steps % (50 * cfg.snapshot_every) == 0:
                logger.info(f"[FLOW] t={t:.3f} E-gap={trace.E_eps[-1] - trace.E_steady:.3e}")

    run.final = p
    run.steps = steps
    logger.info(f"[FLOW] done steps={steps} E-gap={trace.E_eps[-1] - trace.E_steady:.3e}")
    return run
