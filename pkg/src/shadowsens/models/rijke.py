"""Time-delayed thermoacoustic (Rijke tube) model.

Galerkin acoustic modes (velocity eta_j, pressure theta_j) are driven by a
smoothed King's-law heat release evaluated at the flame base velocity
delayed by tau.  The delay is realized without history storage: an
auxiliary linear advection field carries the flame velocity across a
Chebyshev grid in an internal coordinate, so the full state is Markovian
and every parameter -- including tau -- enters through the chain rule.

State layout (d = 2*d_g + d_c):

    [eta_1..eta_dg | theta_1..theta_dg | w_0..w_{dc-1}]

where w_j is the advected field at Chebyshev point y_j = cos(j*pi/(dc-1)).
Point 0 sits at y=+1 (the delayed value feeding the heat release), point
dc-1 at y=-1 (the inflow).  The inflow value is a dependent variable slaved
to the instantaneous flame velocity: its time-derivative row mirrors
d(u_f)/dt, the advection rows see the substituted u_f instead of the stored
slot, and after every step the slot is reset to u_f exactly.  The reset
removes the spurious neutral direction a purely slaved slot would add to
the tangent dynamics.
"""

from dataclasses import dataclass

import numpy as np

from ..dynamics import InputError, SystemModel, tsit5_step

DEFAULT_TAU = 0.2
DEFAULT_C1 = 0.1
DEFAULT_C2 = 0.06
DEFAULT_XF = 0.22
DEFAULT_DG = 10
DEFAULT_DC = 10
DEFAULT_BETA = 7.0
DEFAULT_RUNUP = 10000.0  # time units

# King's law smoothing band and polynomial coefficients
_BAND_LO = -1.01
_BAND_HI = -0.99
_POLY_C2 = 1750.0
_POLY_C4 = 7.5e6


@dataclass(frozen=True)
class RijkeParams:
    """Physical and discretization parameters of the Rijke model."""

    beta: float = DEFAULT_BETA
    tau: float = DEFAULT_TAU
    c1: float = DEFAULT_C1
    c2: float = DEFAULT_C2
    x_f: float = DEFAULT_XF
    d_g: int = DEFAULT_DG
    d_c: int = DEFAULT_DC

    def __post_init__(self):
        if self.tau <= 0:
            raise InputError("tau must be positive")
        if self.d_g < 2 or self.d_c < 2:
            raise InputError("d_g and d_c must be at least 2")
        if not 0.0 < self.x_f < 1.0:
            raise InputError("x_f must lie in (0, 1)")

    @property
    def dim(self):
        return 2 * self.d_g + self.d_c


def heat_release(u):
    """Smoothed modified King's law: sqrt(|1+u|)-1 with a quartic patch.

    The patch on [-1.01, -0.99] matches the square-root branch in value
    and slope at both edges, keeping the map differentiable along orbits
    that cross u = -1.  Works on scalars, arrays and dual numbers.
    """
    band = (u >= _BAND_LO) & (u <= _BAND_HI)
    w = 1.0 + u
    # lift the sqrt argument inside the band so its (discarded) derivative
    # stays finite at w = 0
    lift = np.asarray(band, dtype=np.float64)
    outer = np.sqrt(np.abs(w) + lift) - 1.0
    inner = -1.0 + _POLY_C2 * w**2 - _POLY_C4 * w**4
    return np.where(band, inner, outer)


def cheb(n):
    """Chebyshev Gauss-Lobatto points and differentiation matrix.

    Returns (y, D) with y_j = cos(j*pi/(n-1)), j = 0..n-1, and the
    standard collocation derivative matrix (Trefethen's construction).
    """
    if n < 2:
        raise InputError("need at least 2 Chebyshev points")
    m = n - 1
    j = np.arange(n)
    y = np.cos(np.pi * j / m)
    c = np.ones(n)
    c[0] = 2.0
    c[-1] = 2.0
    c = c * (-1.0) ** j
    Y = np.tile(y, (n, 1)).T
    dY = Y - Y.T + np.eye(n)
    D = np.outer(c, 1.0 / c) / dY
    D = D - np.diag(D.sum(axis=1))
    return y, D


def damping_coefficients(d_g, c1, c2):
    j = np.arange(1, d_g + 1, dtype=np.float64)
    return c1 * j**2 + c2 * np.sqrt(j)


class RijkeModel:
    """Precomputed linear operators for one Rijke configuration.

    The right-hand side splits as A0 @ u + (Aadv @ u)/tau + nonlinear
    rank-one heat-release term; beta and tau are the run-time (and
    differentiable) parameters, everything else is fixed at construction.
    """

    def __init__(self, p: RijkeParams):
        self.p = p
        d_g, d_c = p.d_g, p.d_c
        d = p.dim
        self.dim = d
        self.dt = p.tau / (2.0 * p.d_c)
        self.i_eta = slice(0, d_g)
        self.i_theta = slice(d_g, 2 * d_g)
        self.i_w = slice(2 * d_g, d)
        self.i_out = 2 * d_g          # advected value at y = +1
        self.i_in = d - 1             # inflow slot at y = -1

        j = np.arange(1, d_g + 1, dtype=np.float64)
        self.jpi = j * np.pi
        self.zeta = damping_coefficients(d_g, p.c1, p.c2)
        self.cosx = np.cos(j * np.pi * p.x_f)
        self.sinx = np.sin(j * np.pi * p.x_f)
        self.y, self.D = cheb(d_c)

        A0 = np.zeros((d, d))
        for k in range(d_g):
            A0[k, d_g + k] = self.jpi[k]                    # deta/dt
            A0[d_g + k, k] = -self.jpi[k]                   # dtheta/dt
            A0[d_g + k, d_g + k] = -self.zeta[k]
        # inflow slot tracks u_f: d(w_in)/dt = sum_k (k pi theta_k) cos(k pi x_f)
        A0[self.i_in, self.i_theta] = self.jpi * self.cosx
        self.A0 = A0

        # advection rows (all Chebyshev points except the inflow), with the
        # inflow column eliminated by substituting u_f = cos . eta
        Aadv = np.zeros((d, d))
        base = 2 * d_g
        for m in range(d_c - 1):
            Aadv[base + m, base : base + d_c - 1] = -2.0 * self.D[m, : d_c - 1]
            Aadv[base + m, self.i_eta] = -2.0 * self.D[m, d_c - 1] * self.cosx
        self.Aadv = Aadv

        svec = np.zeros(d)
        svec[self.i_theta] = self.sinx
        self.svec = svec

        # end-of-step reset of the dependent inflow slot
        P = np.eye(d)
        P[self.i_in, :] = 0.0
        P[self.i_in, self.i_eta] = self.cosx
        self.proj = P

        # allow tau down to twice the advective CFL limit of the default
        self.tau_min = self.dt * p.d_c

    # -- dynamics ------------------------------------------------------
    def rhs(self, u, params):
        beta = params["beta"]
        tau = params["tau"]
        tau_val = tau.val if hasattr(tau, "val") else tau
        if np.any(np.asarray(tau_val) < self.tau_min):
            raise InputError(
                f"tau below advective stability margin {self.tau_min}"
            )
        lin = self.A0 @ u + (self.Aadv @ u) / tau
        qdot = heat_release(u[self.i_out])
        amp = -2.0 * beta * qdot
        if isinstance(u, np.ndarray) and u.ndim == 2:
            return lin + self.svec[:, None] * amp
        return lin + self.svec * amp

    def step(self, u, params):
        out = tsit5_step(self.rhs, u, params, self.dt)
        return self.proj @ out

    def consistent_state(self, u):
        """Copy of u with the inflow slot slaved to the flame velocity."""
        u = np.array(u, dtype=np.float64)
        u[self.i_in] = self.cosx @ u[self.i_eta]
        return u

    # -- observables -----------------------------------------------------
    def acoustic_energy(self, u):
        return 0.25 * np.sum(u[self.i_eta] ** 2 + u[self.i_theta] ** 2)

    def rayleigh_index(self, u):
        return 0.5 * np.sum(self.zeta * u[self.i_theta] ** 2)

    def rayleigh_source(self, u):
        # p_f * qdot on the discretized fields
        return -heat_release(u[self.i_out]) * np.sum(u[self.i_theta] * self.sinx)

    def flame_velocity(self, u):
        return self.cosx @ u[self.i_eta]


def acoustic_energy(u, d_g=DEFAULT_DG):
    """Quarter sum of squared Galerkin mode amplitudes."""
    return 0.25 * np.sum(u[0:d_g] ** 2 + u[d_g : 2 * d_g] ** 2)


def rayleigh_index(u, d_g=DEFAULT_DG, c1=DEFAULT_C1, c2=DEFAULT_C2):
    """Dissipation form of the Rayleigh index, (1/2) sum zeta_j theta_j^2."""
    zeta = damping_coefficients(d_g, c1, c2)
    return 0.5 * np.sum(zeta * u[d_g : 2 * d_g] ** 2)


def rijke_system(beta=DEFAULT_BETA, tau=DEFAULT_TAU, c1=DEFAULT_C1,
                 c2=DEFAULT_C2, x_f=DEFAULT_XF, d_g=DEFAULT_DG,
                 d_c=DEFAULT_DC):
    """Build the Rijke SystemModel.

    The run-time parameters are beta and tau; structural choices (damping,
    flame position, mode/point counts) are baked into the operators.  The
    timestep is tau/(2*d_c) at construction and stays fixed if tau is
    varied later.
    """
    model = RijkeModel(RijkeParams(beta=beta, tau=tau, c1=c1, c2=c2,
                                   x_f=x_f, d_g=d_g, d_c=d_c))
    return SystemModel(
        name="rijke",
        dim=model.dim,
        dt=model.dt,
        params={"beta": float(beta), "tau": float(tau)},
        step_fn=model.step,
        rhs_fn=model.rhs,
        observables={
            "j_ac": model.acoustic_energy,
            "j_ray": model.rayleigh_index,
            "rayleigh_source": model.rayleigh_source,
            "u_f": model.flame_velocity,
        },
    )


def random_state(system, rng, scale=0.1):
    """Small random initial state with a consistent inflow slot."""
    model = _model_of(system)
    u = scale * rng.standard_normal(system.dim)
    return model.consistent_state(u)


def _model_of(system):
    step_self = getattr(system.step_fn, "__self__", None)
    if not isinstance(step_self, RijkeModel):
        raise InputError("system was not built by rijke_system")
    return step_self
