"""Configuration management for the cross-diffusion lab.

This is the single defaults table. Every value can be overridden through the
environment (or a ``.env`` file) and most of them per run through RunConfig.
"""

from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    # Grid
    grid_n: int = 512
    grid_half_width: Optional[float] = None  # None = auto from the support radius
    domain_factor: float = 4.0

    # Steady solvers
    steady_tol: float = 1e-10
    steady_damping: float = 0.5
    steady_max_outer: int = 500
    support_threshold: float = 1e-12

    # Newton for the inverse of Gamma_eps
    newton_tol: float = 1e-12
    newton_max_iter: int = 50
    jacobian_floor: float = 0.1

    # Sampling for hypothesis audits
    sample_count: int = 64
    sample_u_min: float = 1e-6
    sample_u_max: float = 1e4

    # Finite-volume flow
    cfl_safety: float = 0.4
    dt_max: float = 1e-2
    snapshot_every: int = 50

    # Minimizing movement
    jko_tau: float = 1e-3
    jko_quantiles: int = 256
    jko_max_iters: int = 500
    jko_step_size: float = 1.0
    jko_backtracking: float = 0.5
    jko_tol: float = 1e-8

    # Lyapunov bookkeeping
    baseline_band: float = 0.2
    gap_floor: float = 1e-13

    # Execution
    max_workers: int = 1
    output_dir: str = "runs"
    log_level: str = "INFO"

    @property
    def parallel_enabled(self) -> bool:
        """Check if sweeps should fan out over worker processes."""
        return self.max_workers > 1

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",  # Ignore extra environment variables
    )


# Global settings instance
settings = Settings()
