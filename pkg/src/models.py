"""Data models for the cross-diffusion lab."""

from enum import Enum
from typing import Optional, List, Dict, Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.config import settings


class KernelType(str, Enum):
    """Supported interaction kernels."""
    QUADRATIC = "quadratic"
    REGULARIZED_QUADRATIC = "regularized_quadratic"


class CouplingTerm(str, Enum):
    """Closed-form terms of the coupling h."""
    H = "h"
    D1 = "d1"
    D2 = "d2"
    D11 = "d11"
    D12 = "d12"
    D21 = "d21"
    D22 = "d22"


class ThetaTerm(str, Enum):
    """Terms of the theta calculus in the u = F'(r) variables."""
    THETA1 = "theta1"
    THETA2 = "theta2"
    THETA11 = "theta11"
    THETA12 = "theta12"
    THETA21 = "theta21"
    THETA22 = "theta22"


class Experiment(str, Enum):
    """Experiments the CLI can run."""
    VALIDATE = "validate"
    STEADY = "steady"
    FLOW = "flow"
    JKO = "jko"
    DECAY_SWEEP = "decay-sweep"
    PROBES = "probes"


class SteadySolver(str, Enum):
    """Steady-state solver selection."""
    AUTO = "auto"
    QUADRATIC = "quadratic"
    GENERAL = "general"


class InitKind(str, Enum):
    """Initial data families for time integration."""
    UNIFORM = "uniform"
    STEADY = "steady"
    PERTURBED_STEADY = "perturbed_steady"
    RANDOM = "random"


# Model Building Blocks
class PowerNonlinearity(BaseModel):
    """Internal energy density F(r) = r^a / a."""
    model_config = ConfigDict(frozen=True)

    a: float = Field(..., description="Exponent a (admissible when a >= 2)", gt=0, allow_inf_nan=False)

    @property
    def beta(self) -> float:
        """Power of F'' near zero."""
        return self.a - 2.0

    def value(self, r):
        return np.power(r, self.a) / self.a

    def prime(self, r):
        return np.power(r, self.a - 1.0)

    def second(self, r):
        return (self.a - 1.0) * np.power(r, self.a - 2.0)

    def prime_inverse(self, u):
        return np.power(u, 1.0 / (self.a - 1.0))

    def pressure(self, r):
        """P(r) = r F'(r) - F(r)."""
        return (1.0 - 1.0 / self.a) * np.power(r, self.a)


class Coupling(BaseModel):
    """Cross-diffusion coupling h(r1, r2) = r1^b1 r2^b2 / (1 + r1 + r2)^gamma."""
    model_config = ConfigDict(frozen=True)

    b1: float = Field(..., gt=0, allow_inf_nan=False)
    b2: float = Field(..., gt=0, allow_inf_nan=False)
    gamma: float = Field(..., gt=0, allow_inf_nan=False)


class KernelSpec(BaseModel):
    """Radially symmetric, lambda-convex interaction kernel."""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    type: KernelType = Field(default=KernelType.QUADRATIC, description="Kernel family")
    lam: float = Field(default=1.0, alias="lambda", gt=0, allow_inf_nan=False, description="Convexity modulus")
    mu: float = Field(default=0.0, ge=0, allow_inf_nan=False, description="Regularized perturbation weight")

    @property
    def is_quadratic(self) -> bool:
        """Check if the kernel is the pure quadratic one."""
        return self.type == KernelType.QUADRATIC or self.mu == 0.0

    @property
    def c_k(self) -> float:
        """Upper bound on K''."""
        if self.type == KernelType.QUADRATIC:
            return self.lam
        return self.lam + self.mu

    def value(self, z):
        z = np.asarray(z, dtype=float)
        out = 0.5 * self.lam * z * z
        if self.type == KernelType.REGULARIZED_QUADRATIC and self.mu > 0:
            out = out + self.mu * (np.sqrt(1.0 + z * z) - 1.0)
        return out

    def prime(self, z):
        z = np.asarray(z, dtype=float)
        out = self.lam * z
        if self.type == KernelType.REGULARIZED_QUADRATIC and self.mu > 0:
            out = out + self.mu * z / np.sqrt(1.0 + z * z)
        return out

    def second(self, z):
        z = np.asarray(z, dtype=float)
        out = np.full_like(z, self.lam)
        if self.type == KernelType.REGULARIZED_QUADRATIC and self.mu > 0:
            out = out + self.mu / np.power(1.0 + z * z, 1.5)
        return out


class ModelSpec(BaseModel):
    """Full parameterization of the two-species model plus derived constants.

    Serialized as ``{a1, a2, b1, b2, gamma, eps, kernel: {type, lambda, mu}}``;
    the derived fields are filled in by the calculus and steady modules.
    """
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    a1: float = Field(..., gt=0, allow_inf_nan=False)
    a2: float = Field(..., gt=0, allow_inf_nan=False)
    b1: float = Field(..., gt=0, allow_inf_nan=False)
    b2: float = Field(..., gt=0, allow_inf_nan=False)
    gamma: float = Field(..., gt=0, allow_inf_nan=False)
    eps: float = Field(default=0.0, ge=0, allow_inf_nan=False, description="Coupling strength")
    kernel: KernelSpec = Field(default_factory=KernelSpec)
    kappa: Optional[List[List[float]]] = Field(None, description="Empirical bounds kappa[j][i]")
    eps0_estimate: Optional[float] = Field(None, description="Largest sampled eps with convex F_2eps")
    K0_estimate: Optional[float] = Field(None, description="Semiconvexity constant of the frozen potentials")

    @property
    def F1(self) -> PowerNonlinearity:
        return PowerNonlinearity(a=self.a1)

    @property
    def F2(self) -> PowerNonlinearity:
        return PowerNonlinearity(a=self.a2)

    @property
    def h(self) -> Coupling:
        return Coupling(b1=self.b1, b2=self.b2, gamma=self.gamma)

    def nonlinearity(self, j: int) -> PowerNonlinearity:
        """Return F_j for species j in {1, 2}."""
        return self.F1 if j == 1 else self.F2

    @property
    def kappa_array(self) -> Optional[np.ndarray]:
        if self.kappa is None:
            return None
        return np.asarray(self.kappa, dtype=float)

    @property
    def lambda_eps(self) -> Optional[float]:
        """Reduced convexity modulus lambda - eps * K0 (None before a steady solve)."""
        if self.K0_estimate is None:
            return None
        return self.kernel.lam - self.eps * self.K0_estimate

    def with_eps(self, eps: float) -> "ModelSpec":
        """Copy with a new coupling strength; eps-dependent estimates are dropped."""
        return self.model_copy(update={"eps": eps, "K0_estimate": None})


class SampleSpec(BaseModel):
    """Log-spaced sample grid over (0, u_max]^2."""
    model_config = ConfigDict(frozen=True)

    u_min: float = Field(default_factory=lambda: settings.sample_u_min, gt=0)
    u_max: float = Field(default_factory=lambda: settings.sample_u_max, gt=0)
    count: int = Field(default_factory=lambda: settings.sample_count, ge=0)

    def points(self) -> np.ndarray:
        if self.count == 0:
            return np.empty(0)
        return np.geomspace(self.u_min, self.u_max, self.count)


# Report Models
class AdmissibilityCondition(BaseModel):
    """One admissibility inequality of the power-law example family."""
    name: str = Field(..., description="Human-readable inequality")
    passed: bool
    slack: float = Field(..., description="Smallest slack over the components (>= 0 passes)")
    slacks: List[float] = Field(default_factory=list, description="Slack per component")


class AdmissibilityReport(BaseModel):
    """Result of validate_example_params."""
    conditions: List[AdmissibilityCondition]
    admissible: bool


class AuditCheck(BaseModel):
    """A single sampled hypothesis check."""
    name: str
    passed: bool
    value: float = Field(..., description="Worst sampled margin or fitted constant")
    detail: Dict[str, Any] = Field(default_factory=dict)


class AuditReport(BaseModel):
    """Numeric audit of the structural hypotheses."""
    eps: float
    checks: List[AuditCheck]
    eps0_estimate: float
    beta_H: float
    kappa: List[List[float]]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


class LyapunovReport(BaseModel):
    """Evaluated Lyapunov functionals and the three-term decomposition."""
    E_eps: float
    L_eps: float
    N_eps: float
    I_F: float
    I_K: float
    K_fun: float
    L_gap: float
    identity_residual: float
    ck_ratio: float
    slope_lhs: float
    slope_rhs: float


# Run Configuration Models
class FlowConfig(BaseModel):
    """Finite-volume integration parameters."""
    T: float = Field(default=5.0, gt=0, allow_inf_nan=False, description="Final time")
    cfl_safety: float = Field(default_factory=lambda: settings.cfl_safety, gt=0, le=0.9)
    snapshot_every: int = Field(default_factory=lambda: settings.snapshot_every, ge=1)
    dt_max: float = Field(default_factory=lambda: settings.dt_max, gt=0)


class JkoConfig(BaseModel):
    """Minimizing-movement parameters."""
    tau: float = Field(default_factory=lambda: settings.jko_tau, gt=0, allow_inf_nan=False)
    m: int = Field(default_factory=lambda: settings.jko_quantiles, ge=32)
    max_iters: int = Field(default_factory=lambda: settings.jko_max_iters, ge=1)
    step_size: float = Field(default_factory=lambda: settings.jko_step_size, gt=0)
    backtracking: float = Field(default_factory=lambda: settings.jko_backtracking, gt=0, lt=1)
    tol: float = Field(default_factory=lambda: settings.jko_tol, gt=0)


class InitialCondition(BaseModel):
    """Initial data for time integration.

    ``uniform``: species 1 uniform on [offset - w, offset + w], species 2 on
    [-offset - w, -offset + w]; ``perturbed_steady``: steady state plus a
    mass-neutral bump of relative size ``amplitude``; ``random``: Gaussian
    mixtures drawn from the run seed.
    """
    kind: InitKind = InitKind.UNIFORM
    half_width: float = Field(default=0.75, gt=0)
    offset: float = Field(default=0.0)
    amplitude: float = Field(default=0.1, ge=0)


class GridConfig(BaseModel):
    """Grid section of a run configuration."""
    model_config = ConfigDict(populate_by_name=True)

    L: Optional[float] = Field(default_factory=lambda: settings.grid_half_width, gt=0, description="Half-width, None = auto")
    n: int = Field(default_factory=lambda: settings.grid_n, ge=8)


class SteadyParams(BaseModel):
    solver: SteadySolver = SteadySolver.AUTO
    tol: float = Field(default_factory=lambda: settings.steady_tol, gt=0)
    damping: float = Field(default_factory=lambda: settings.steady_damping, gt=0, le=1)
    max_outer: int = Field(default_factory=lambda: settings.steady_max_outer, ge=1)
    multistart: bool = Field(default=True, description="Steady experiment: also solve from three initializations and compare")


class FlowParams(BaseModel):
    config: FlowConfig = Field(default_factory=FlowConfig)
    init: InitialCondition = Field(default_factory=InitialCondition)
    window: List[float] = Field(default_factory=lambda: [1.0, 5.0], min_length=2, max_length=2)


class JkoParams(BaseModel):
    config: JkoConfig = Field(default_factory=JkoConfig)
    nsteps: int = Field(default=10, ge=1)
    init: InitialCondition = Field(default_factory=InitialCondition)
    alpha: float = Field(default=1.0, gt=0, description="Cut-off height for the H1 diagnostics")
    compare_flow: bool = Field(default=False, description="Also run the finite-volume scheme to the same time")
    random_starts: int = Field(default=50, ge=0, description="Single steps from random pairs checked against the step inequality")


class SweepParams(BaseModel):
    eps_list: List[float] = Field(default_factory=lambda: [0.0, 0.02, 0.05, 0.1], min_length=1)
    flow: FlowParams = Field(default_factory=FlowParams)


class ProbeParams(BaseModel):
    n_pairs: int = Field(default=100, ge=1)
    quantiles: int = Field(default=512, ge=16)


class RunConfig(BaseModel):
    """Schema-validated configuration of one experiment run."""
    model: ModelSpec
    grid: GridConfig = Field(default_factory=GridConfig)
    experiment: Experiment = Experiment.VALIDATE
    steady: SteadyParams = Field(default_factory=SteadyParams)
    flow: FlowParams = Field(default_factory=FlowParams)
    jko: JkoParams = Field(default_factory=JkoParams)
    sweep: SweepParams = Field(default_factory=SweepParams)
    probes: ProbeParams = Field(default_factory=ProbeParams)
    sample: SampleSpec = Field(default_factory=SampleSpec)
    output_dir: str = Field(default_factory=lambda: settings.output_dir)
    seed: int = Field(default=0, ge=0, lt=2**64)
    baseline_path: Optional[str] = Field(None, description="JSON file of stored constant baselines")

    @model_validator(mode="after")
    def _check_window(self) -> "RunConfig":
        t0, t1 = self.flow.window
        if not t0 < t1:
            raise ValueError("flow.window must satisfy t0 < t1")
        return self
