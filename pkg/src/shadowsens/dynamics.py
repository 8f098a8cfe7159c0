"""Dynamical-system abstraction and explicit fixed-step time integration.

A :class:`SystemModel` bundles a deterministic time-one map (one
application of a fixed-step integrator), the underlying continuous-time
right-hand side when there is one, named parameters and named scalar
observables.  Everything downstream (derivative propagation, Lyapunov
analysis, shadowing) talks to the dynamics exclusively through this
interface.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

BLOWUP_THRESHOLD = 1.0e8


class InputError(ValueError):
    """Invalid argument to a dynamics operation."""


class NumericalBlowupError(RuntimeError):
    """State left the plausible attractor region (non-finite or huge)."""

    def __init__(self, step_index, message=None):
        self.step_index = step_index
        super().__init__(
            message or f"numerical blowup at step {step_index}"
        )


def check_state(u, step_index):
    """Raise NumericalBlowupError if u has non-finite or huge components."""
    m = np.max(np.abs(u))
    if not (m <= BLOWUP_THRESHOLD):  # False for NaN as well
        raise NumericalBlowupError(step_index)


@dataclass(frozen=True)
class SystemModel:
    """A parameterized time-one map with observables.

    Attributes
    ----------
    name : str
        Identifier ("lorenz63", "rijke", ...).
    dim : int
        State dimension d.
    dt : float
        Time units advanced per application of the step map.
    params : dict
        Named parameter values (ordering is meaningful).
    step_fn : callable
        ``step_fn(u, params) -> u'``, pure and deterministic.  Must accept
        dual-number states/parameters for derivative propagation and
        batched states of shape (d, B).
    rhs_fn : callable or None
        Continuous-time right-hand side when the map discretizes an ODE;
        used as the approximate neutral (center) direction.
    observables : dict
        Name -> callable(u) -> scalar, dual-friendly.
    """

    name: str
    dim: int
    dt: float
    params: dict
    step_fn: Callable
    rhs_fn: Optional[Callable] = None
    observables: dict = field(default_factory=dict)

    def merged_params(self, params=None):
        if params is None:
            return dict(self.params)
        merged = dict(self.params)
        for key in params:
            if key not in merged:
                raise InputError(f"unknown parameter {key!r}")
        merged.update(params)
        return merged

    def param_names(self):
        return list(self.params)


@dataclass
class Trajectory:
    """States u_0..u_N plus the parameter snapshot that generated them."""

    states: np.ndarray  # (N+1, d)
    dt: float
    params: dict
    observable_series: dict = field(default_factory=dict)  # name -> (N+1,)

    @property
    def nsteps(self):
        return self.states.shape[0] - 1

    @property
    def times(self):
        return np.arange(self.states.shape[0]) * self.dt


@dataclass
class TimeAverage:
    """Finite-window mean of an observable with a batch-means error bar."""

    name: str
    nsteps: int
    value: float
    stderr: float


def batch_means_stderr(series, nbatches=0):
    """Standard error of the mean of a correlated series via batch means."""
    n = len(series)
    if nbatches <= 0:
        nbatches = min(100, max(2, n // 100))
    if n < 2 * nbatches:
        return float(np.std(series, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    blen = n // nbatches
    chunks = np.asarray(series[: nbatches * blen]).reshape(nbatches, blen)
    means = chunks.mean(axis=1)
    return float(np.std(means, ddof=1) / np.sqrt(nbatches))


# ----------------------------------------------------------------------
# integrators
# ----------------------------------------------------------------------

def forward_euler_step(rhs, u, params, dt):
    return u + dt * rhs(u, params)


# Tsitouras 5(4) explicit Runge-Kutta coefficients; the propagating
# solution is the 5th-order one, so only six stages are needed at a
# fixed step size.
_TSIT5_C = np.array([0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0])
_TSIT5_A = [
    np.array([]),
    np.array([0.161]),
    np.array([-0.008480655492356989, 0.335480655492357]),
    np.array([2.8971530571054935, -6.359448489975075, 4.3622954328695815]),
    np.array(
        [
            5.325864828439257,
            -11.748883564062828,
            7.4955393428898365,
            -0.09249506636175525,
        ]
    ),
    np.array(
        [
            5.86145544294642,
            -12.92096931784711,
            8.159367898576159,
            -0.071584973281401,
            -0.028269050394068383,
        ]
    ),
]
_TSIT5_B = np.array(
    [
        0.09646076681806523,
        0.01,
        0.4798896504144996,
        1.379008574103742,
        -3.290069515436081,
        2.324710524099774,
    ]
)


def tsit5_step(rhs, u, params, dt):
    """One fixed-step application of the Tsitouras 5(4) scheme."""
    k = [rhs(u, params)]
    for i in range(1, 6):
        a = _TSIT5_A[i]
        incr = a[0] * k[0]
        for j in range(1, i):
            incr = incr + a[j] * k[j]
        k.append(rhs(u + dt * incr, params))
    acc = _TSIT5_B[0] * k[0]
    for j in range(1, 6):
        acc = acc + _TSIT5_B[j] * k[j]
    return u + dt * acc


# ----------------------------------------------------------------------
# operations
# ----------------------------------------------------------------------

def step(system, u, params=None):
    """Apply the time-one map once, validating input and output."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (system.dim,):
        raise InputError(
            f"state has shape {u.shape}, expected ({system.dim},)"
        )
    merged = system.merged_params(params)
    out = system.step_fn(u, merged)
    check_state(out, 0)
    return out


def evolve(system, u0, params=None, nsteps=1, observables=None,
           record_states=True):
    """Run the map for nsteps, recording states and/or observable series.

    Returns (Trajectory, dict of TimeAverage).  The time averages are
    taken over u_0..u_{N-1} (N terms).  With ``record_states=False`` the
    trajectory carries only the first and last state (streaming mode).
    """
    if nsteps < 1:
        raise InputError("nsteps must be >= 1")
    u = np.asarray(u0, dtype=np.float64)
    if u.shape != (system.dim,):
        raise InputError(
            f"state has shape {u.shape}, expected ({system.dim},)"
        )
    merged = system.merged_params(params)
    if observables is None:
        observables = list(system.observables)
    obs_fns = {name: system.observables[name] for name in observables}

    if record_states:
        states = np.empty((nsteps + 1, system.dim))
        states[0] = u
    series = {name: np.empty(nsteps + 1) for name in obs_fns}
    for name, fn in obs_fns.items():
        series[name][0] = fn(u)
    for n in range(1, nsteps + 1):
        u = system.step_fn(u, merged)
        check_state(u, n)
        if record_states:
            states[n] = u
        for name, fn in obs_fns.items():
            series[name][n] = fn(u)
    if not record_states:
        states = np.stack([np.asarray(u0, dtype=np.float64), u])

    averages = {}
    for name, vals in series.items():
        window = vals[:nsteps]
        averages[name] = TimeAverage(
            name=name,
            nsteps=nsteps,
            value=float(window.mean()),
            stderr=batch_means_stderr(window),
        )
    traj = Trajectory(states=states, dt=system.dt, params=merged,
                      observable_series=series)
    return traj, averages


def spin_up(system, u0, params=None, runup_time=None):
    """Integrate for runup_time time units and return the end state."""
    if runup_time is None:
        raise InputError("runup_time is required")
    if runup_time < 0:
        raise InputError("runup_time must be >= 0")
    nsteps = int(round(runup_time / system.dt))
    u = np.asarray(u0, dtype=np.float64)
    if nsteps == 0:
        return u.copy()
    merged = system.merged_params(params)
    for n in range(1, nsteps + 1):
        u = system.step_fn(u, merged)
        check_state(u, n)
    return u


def replay_check(system, traj, atol=0.0):
    """Re-run a trajectory from its initial state and compare states."""
    u = traj.states[0].copy()
    for n in range(1, traj.states.shape[0]):
        u = system.step_fn(u, traj.params)
        if not np.allclose(u, traj.states[n], rtol=0.0, atol=atol):
            return False
    return True
