"""Lorenz'63 convection model, stepped with forward Euler.

The classical three-variable reduced model of thermal convection.  The
control parameter is the Rayleigh-like coefficient ``s`` (the other two
coefficients are fixed at 10 and 8/3).  Long-run averages of the z
coordinate respond to s with a slope close to one, which makes the model
the standard validation case for sensitivity machinery.
"""

from dataclasses import dataclass
from functools import partial

import numpy as np

from ..dynamics import SystemModel, forward_euler_step

DEFAULT_S = 28.0
DEFAULT_DT = 0.005
DEFAULT_RUNUP = 50.0  # time units; enough to land on the attractor

SIGMA = 10.0
B_COEFF = 8.0 / 3.0


@dataclass(frozen=True)
class LorenzParams:
    s: float = DEFAULT_S


def lorenz_rhs(u, params):
    """Right-hand side of the Lorenz'63 equations."""
    s = params["s"]
    x, y, z = u[0], u[1], u[2]
    return np.stack([SIGMA * (y - x), x * (s - z) - y, x * y - B_COEFF * z])


def _lorenz_step(u, params, dt):
    return forward_euler_step(lorenz_rhs, u, params, dt)


def _obs_x(u):
    return u[0]


def _obs_y(u):
    return u[1]


def _obs_z(u):
    return u[2]


def lorenz_system(s=DEFAULT_S, dt=DEFAULT_DT):
    """Build the Lorenz'63 SystemModel (forward Euler time-one map)."""
    return SystemModel(
        name="lorenz63",
        dim=3,
        dt=dt,
        params={"s": float(s)},
        step_fn=partial(_lorenz_step, dt=dt),
        rhs_fn=lorenz_rhs,
        observables={"x": _obs_x, "y": _obs_y, "z": _obs_z},
    )
