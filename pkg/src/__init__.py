"""Cross-diffusion lab - steady states, flows and Lyapunov checks for two-species aggregation."""

__version__ = "0.1.0"
