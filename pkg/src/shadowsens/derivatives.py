"""Derivatives of the step map: JVP, VJP, Jacobians, naive sensitivities.

Two interchangeable providers are offered.  The exact provider ("ad")
propagates dual numbers through the step map: forward directional
derivatives come straight from the chain rule, reverse/transposed products
from the transpose of a Jacobian assembled in a single batched forward
sweep.  The finite-difference provider ("fd") uses one-sided differences
with a relative step, evaluating all perturbed states in one batched call
to the step map.

Also here: parameter-derivative and observable-gradient sequences along an
orbit, the naive (non-shadowing) finite-time sensitivity in tangent and
adjoint form, and the perturbation-growth diagnostic comparing iterative
tangent/adjoint recursions, trajectory differences and both AD directions.
"""

from dataclasses import dataclass

import numpy as np

from . import ad
from .dynamics import InputError

_AD_MODES = {"ad", "ad-forward", "ad-reverse"}


@dataclass(frozen=True)
class DerivativeProvider:
    """Selects how step-map derivatives are evaluated.

    mode : "ad", "ad-forward", "ad-reverse" (exact, dual numbers) or "fd"
    fd_step : relative finite-difference step (h scales with max(1, |u|))
    """

    mode: str = "ad"
    fd_step: float = 1.0e-6

    def __post_init__(self):
        if self.mode not in _AD_MODES and self.mode != "fd":
            raise InputError(f"unknown derivative mode {self.mode!r}")

    @property
    def exact(self):
        return self.mode in _AD_MODES

    # -- Jacobian-vector products -------------------------------------
    def jvp(self, system, u, params, w, dparams=None):
        """(D_u f) W + (d f/d params) dparams at (u, params).

        W may be a single direction (d,) or a stack (d, k); dparams maps
        parameter name -> scalar direction or (k,) array.
        """
        u = np.asarray(u, dtype=np.float64)
        w = np.asarray(w, dtype=np.float64)
        single = w.ndim == 1
        W = w[:, None] if single else w
        merged = system.merged_params(params)
        if self.exact:
            out = _jvp_dual(system, u, merged, W, dparams)
        else:
            if self.fd_step == 0:
                raise InputError("fd_step must be nonzero")
            out = _jvp_fd(system, u, merged, W, dparams, self.fd_step)
        return out[:, 0] if single else out

    def vjp(self, system, u, params, z):
        """((D_u f)^T Z, (d f/d params)^T Z); Z is (d,) or (d, k).

        The parameter cotangent is a dict name -> scalar or (k,).
        """
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        Z = z[:, None] if single else z
        J = self.step_jacobian(system, u, params)
        JP = self.param_jacobian(system, u, params)
        state_ct = J.T @ Z
        param_ct = {name: col @ Z for name, col in JP.items()}
        if single:
            state_ct = state_ct[:, 0]
            param_ct = {k: v[0] for k, v in param_ct.items()}
        return state_ct, param_ct

    def step_jacobian(self, system, u, params=None):
        """Full d x d Jacobian of the step map, one batched evaluation."""
        d = system.dim
        return self.jvp(system, u, params, np.eye(d))

    def param_jacobian(self, system, u, params=None, names=None):
        """df/dp columns for each named parameter."""
        merged = system.merged_params(params)
        if names is None:
            names = list(merged)
        cols = {}
        for name in names:
            zero = np.zeros(system.dim)
            cols[name] = self.jvp(system, u, params, zero, {name: 1.0})
        return cols


def _jvp_dual(system, u, params, W, dparams):
    k = W.shape[1]
    du = ad.seed(u, W)
    dp = dict(params)
    if dparams:
        for name, direction in dparams.items():
            if name not in dp:
                raise InputError(f"unknown parameter {name!r}")
            dot = np.broadcast_to(np.asarray(direction, dtype=np.float64), (k,))
            dp[name] = ad.seed(dp[name], dot)
    out = system.step_fn(du, dp)
    return ad.tangent(out, k)


def _jvp_fd(system, u, params, W, dparams, h_rel):
    d, k = W.shape
    pdirs = {}
    if dparams:
        pdirs = {
            name: np.broadcast_to(np.asarray(v, dtype=np.float64), (k,))
            for name, v in dparams.items()
        }
    # normalize each extended direction (state + parameter components)
    norms = np.sqrt(
        np.sum(W**2, axis=0)
        + sum(np.asarray(v) ** 2 for v in pdirs.values())
    )
    safe = np.where(norms > 0.0, norms, 1.0)
    h = h_rel * max(1.0, float(np.linalg.norm(u)))
    batch = np.concatenate([u[:, None], u[:, None] + (h / safe) * W], axis=1)
    pbatch = {}
    for name, val in params.items():
        pb = np.full(k + 1, val, dtype=np.float64)
        if name in pdirs:
            pb[1:] += (h / safe) * pdirs[name]
        pbatch[name] = pb
    out = system.step_fn(batch, pbatch)
    jvp = (out[:, 1:] - out[:, :1]) * (safe / h)
    jvp[:, norms == 0.0] = 0.0
    return jvp


# ---------------------------------------------------------------------
# sequences along an orbit
# ---------------------------------------------------------------------

def param_derivative_series(system, states, param_name, params=None,
                            provider=None):
    """x_{n+1} = (df/dp)(u_n) for each orbit state u_0..u_{M-1}.

    Returns an (M, d) array whose row n is the parameter derivative of the
    step leaving states[n].  With the fd provider all rows are evaluated
    in one batched sweep against the known next states.
    """
    provider = provider or DerivativeProvider()
    states = np.asarray(states, dtype=np.float64)
    merged = system.merged_params(params)
    M = states.shape[0]
    if provider.exact:
        out = np.empty_like(states)
        for n in range(M):
            out[n] = provider.jvp(system, states[n], params,
                                  np.zeros(system.dim), {param_name: 1.0})
        return out
    # batched forward difference over all orbit points at once
    h = provider.fd_step
    scale = h * max(1.0, float(np.abs(states).max()))
    pplus = dict(merged)
    pplus[param_name] = merged[param_name] + scale
    base = system.step_fn(states.T, merged)
    bumped = system.step_fn(states.T, pplus)
    return ((bumped - base) / scale).T


def observable_gradient(fn, u):
    """Exact gradient of a scalar observable via dual propagation."""
    u = np.asarray(u, dtype=np.float64)
    out = fn(ad.seed(u, np.eye(len(u))))
    return ad.tangent(out, len(u))


def observable_gradient_fd(fn, u, h=1.0e-6):
    u = np.asarray(u, dtype=np.float64)
    scale = h * max(1.0, float(np.linalg.norm(u)))
    base = float(fn(u))
    g = np.empty(len(u))
    for i in range(len(u)):
        up = u.copy()
        up[i] += scale
        g[i] = (float(fn(up)) - base) / scale
    return g


def observable_gradient_series(fn, states):
    """Gradient of a scalar observable at every orbit state, (M, d)."""
    states = np.asarray(states, dtype=np.float64)
    out = np.empty_like(states)
    for n in range(states.shape[0]):
        out[n] = observable_gradient(fn, states[n])
    return out


# ---------------------------------------------------------------------
# naive finite-time sensitivity (diverges with window length in chaos)
# ---------------------------------------------------------------------

def finite_time_sensitivity(system, u0, params, observable, nsteps,
                            param_name, mode="tangent", provider=None):
    """d/dp of the nsteps-average of an observable along one orbit.

    Tangent mode propagates the inhomogeneous tangent forward; adjoint
    mode accumulates the same bilinear form backward.  The two agree to
    rounding on the same orbit.  Both diverge exponentially with nsteps
    on a chaotic attractor, which is the point of computing them.
    """
    if nsteps < 1:
        raise InputError("nsteps must be >= 1")
    provider = provider or DerivativeProvider()
    merged = system.merged_params(params)
    obs = system.observables[observable]
    d = system.dim

    states = np.empty((nsteps, d))
    u = np.asarray(u0, dtype=np.float64)
    states[0] = u
    for n in range(1, nsteps):
        u = system.step_fn(u, merged)
        states[n] = u

    if mode == "tangent":
        v = np.zeros(d)
        acc = 0.0
        for n in range(1, nsteps):
            v = provider.jvp(system, states[n - 1], params, v,
                             {param_name: 1.0})
            acc += observable_gradient(obs, states[n]) @ v
        return acc / nsteps
    if mode == "adjoint":
        w = np.zeros(d)
        acc = 0.0
        for n in range(nsteps - 1, 0, -1):
            J = provider.step_jacobian(system, states[n], params)
            w = J.T @ w + observable_gradient(obs, states[n])
            x_n = provider.jvp(system, states[n - 1], params, np.zeros(d),
                               {param_name: 1.0})
            acc += x_n @ w
        return acc / nsteps
    raise InputError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------
# perturbation growth diagnostic
# ---------------------------------------------------------------------

def perturbation_growth(system, u0, params=None, nsteps=1000, eps=1.0e-4,
                        seed=0, fd_step=1.0e-6):
    """Norm histories of linear perturbations by five methods.

    Returns a dict with 'times' and series (length nsteps+1) for:
    'tangent' and 'adjoint' (iterative recursions with finite-difference
    Jacobians), 'fd' (normalized trajectory difference, step eps),
    'ad_forward' (dual-number directional derivative) and 'ad_reverse'
    (transposed exact Jacobians, iterated backward).  Adjoint-type series
    are indexed by steps before the horizon, so every series grows with
    its index.
    """
    if eps <= 0:
        raise InputError("eps must be positive")
    merged = system.merged_params(params)
    d = system.dim
    rng = np.random.default_rng(seed)
    q0 = rng.standard_normal(d)
    q0 /= np.linalg.norm(q0)

    u = np.asarray(u0, dtype=np.float64)
    states = np.empty((nsteps + 1, d))
    states[0] = u
    for n in range(1, nsteps + 1):
        u = system.step_fn(u, merged)
        states[n] = u

    fd = DerivativeProvider(mode="fd", fd_step=fd_step)
    exact = DerivativeProvider(mode="ad")

    series = {name: np.empty(nsteps + 1) for name in
              ("tangent", "adjoint", "fd", "ad_forward", "ad_reverse")}
    for name in series:
        series[name][0] = 1.0

    # trajectory difference
    up = states[0] + eps * q0
    for n in range(1, nsteps + 1):
        up = system.step_fn(up, merged)
        series["fd"][n] = np.linalg.norm(up - states[n]) / eps

    # iterative recursions with FD Jacobians, exact-AD counterparts
    A_fd = [fd.step_jacobian(system, states[n], merged)
            for n in range(nsteps)]
    q = q0.copy()
    for n in range(1, nsteps + 1):
        q = A_fd[n - 1] @ q
        series["tangent"][n] = np.linalg.norm(q)
    q = q0.copy()
    for j in range(1, nsteps + 1):
        q = A_fd[nsteps - j].T @ q
        series["adjoint"][j] = np.linalg.norm(q)

    q = q0.copy()
    for n in range(1, nsteps + 1):
        q = exact.jvp(system, states[n - 1], merged, q)
        series["ad_forward"][n] = np.linalg.norm(q)
    q = q0.copy()
    for j in range(1, nsteps + 1):
        J = exact.step_jacobian(system, states[nsteps - j], merged)
        q = J.T @ q
        series["ad_reverse"][j] = np.linalg.norm(q)

    series["times"] = np.arange(nsteps + 1) * system.dt
    return series


def growth_log_slope(times, norms, t_lo, t_hi):
    """Least-squares slope of ln(norm) over a time window."""
    times = np.asarray(times)
    norms = np.asarray(norms)
    mask = (times >= t_lo) & (times <= t_hi) & (norms > 0)
    if mask.sum() < 2:
        raise InputError("window too small for a slope fit")
    return float(np.polyfit(times[mask], np.log(norms[mask]), 1)[0])
