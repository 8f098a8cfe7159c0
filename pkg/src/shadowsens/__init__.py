"""Shadowing-based sensitivity analysis for chaotic dynamical systems.

Computes derivatives of long-time averages in chaotic systems via
non-intrusive least squares shadowing (tangent and adjoint), with exact
derivative propagation through the time integrator, Lyapunov spectrum and
covariant-vector diagnostics, and applications to gradient-based parameter
optimization and variational data assimilation.
"""

from .dynamics import (
    InputError,
    NumericalBlowupError,
    SystemModel,
    TimeAverage,
    Trajectory,
    evolve,
    spin_up,
    step,
)

__all__ = [
    "InputError",
    "NumericalBlowupError",
    "SystemModel",
    "TimeAverage",
    "Trajectory",
    "evolve",
    "spin_up",
    "step",
]

__version__ = "0.1.0"
