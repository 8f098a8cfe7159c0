"""Unified discrete tangent/adjoint shadowing (least-squares) algorithm.

The driver orthonormalizes a bundle of homogeneous perturbations alongside
the projected inhomogeneous one (the n-loop), solves a min-norm block
least-squares problem for the reconstruction coefficients, and assembles
derivatives of long-time averages from the bounded shadowing perturbation.

Two input routes produce identical numbers: matrix mode consumes explicit
per-step matrices A_n (Jacobians, or their transposes in reversed time for
the adjoint case) and source vectors b_n; operator mode queries a
derivative provider per step, so only the primal step map is required.

Conventions (tangent case): the reference orbit is u_0..u_{N+1};
A_{n-1} = D_u f(u_{n-1}), b_n = (df/dp)(u_{n-1}), so the loop runs the
recursions q_n = A_{n-1} q_{n-1} and v_n = A_{n-1} v_{n-1} + b_n for
n = 1..N.  Adjoint case: A_{n-1} = (D_u f)^T(u_{N+2-n}), b_n is the
observable gradient at u_{N+2-n}; outputs are indexed in reversed time.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .derivatives import (
    DerivativeProvider,
    observable_gradient,
    observable_gradient_series,
    param_derivative_series,
)
from .dynamics import InputError, batch_means_stderr, evolve, spin_up
from .lyapunov import qr_positive


@dataclass
class PerturbationSequence:
    """Output of the n-loop (section references in module docstring).

    Arrays are indexed by n = 0..N with row 0 holding initial data
    (Q_0 random orthonormal, v_0 = 0); R and pi have N rows, R[n-1] = R_n.
    """

    case: str                      # "tangent" | "adjoint"
    dt: float
    Q: np.ndarray                  # (N+1, d, d_u)
    R: np.ndarray                  # (N, d_u, d_u)
    v: np.ndarray                  # (N+1, d) projected inhomogeneous
    pi: np.ndarray                 # (N, d_u)
    center: bool
    source_scale: float = 1.0      # b_n = source_scale * canonical source
    center_coef: np.ndarray = None   # (N+1,) v.F/|F|^2 before projection
    center_coef_Q: np.ndarray = None  # (N+1, d_u) F.(pushed Q)/|F|^2
    QtF: np.ndarray = None         # (N+1, d_u)
    vtF: np.ndarray = None         # (N+1,)

    @property
    def nsteps(self):
        return self.R.shape[0]

    @property
    def d_u(self):
        return self.R.shape[1]

    def lyapunov_estimates(self):
        """Exponent estimates per unit time from the R diagonals."""
        diags = np.abs(self.R[:, np.arange(self.d_u), np.arange(self.d_u)])
        return np.log(diags).sum(axis=0) / (self.nsteps * self.dt)


@dataclass
class ShadowingSolution:
    """Coefficients, shadowing perturbation and solve diagnostics."""

    a: np.ndarray                  # (N+1, d_u)
    vsh: np.ndarray                # (N+1, d) = v + Q a
    certificate: np.ndarray        # Y with X = G^T Y (min-norm witness)
    residual_rel: float            # |G X - H| / |H|
    constraint_residual_max: float
    cond_estimate: float
    max_vsh_norm: float
    warnings: list = field(default_factory=list)


def n_loop(A_seq, b_seq, d_u, nsteps, seed=0, center=False, F_seq=None,
           case="tangent", source_scale=1.0, rng=None, dt=1.0):
    """Propagate and orthonormalize perturbations (matrix mode).

    A_seq/b_seq: callables j -> A_{j} (d,d) and j -> b_{j+1} (d,), or
    arrays of shapes (N, d, d) and (N, d).  With center=True (tangent
    case) the neutral direction F_seq[n] is projected out of both bundles
    and the per-step center coefficients of v are recorded beforehand.
    """
    A_fn = (lambda j: A_seq[j]) if not callable(A_seq) else A_seq
    b_fn = (lambda j: b_seq[j]) if not callable(b_seq) else b_seq
    probe = np.asarray(A_fn(0))
    d = probe.shape[0]

    def apply(j, W):
        A = np.asarray(A_fn(j))
        out = A @ W
        out[:, -1] += np.asarray(b_fn(j))
        return out

    return _n_loop_core(apply, d, d_u, nsteps, seed, center, F_seq, case,
                        source_scale, rng, dt)


def _n_loop_core(apply_fn, d, d_u, nsteps, seed, center, F_seq, case,
                 source_scale, rng=None, dt=1.0):
    if center and case == "adjoint":
        raise InputError(
            "the adjoint case handles the neutral direction via an extra "
            "constraint row, not in the n-loop"
        )
    if center and F_seq is None:
        raise InputError("center handling requires the neutral directions")
    if rng is None:
        rng = np.random.default_rng(seed)
    N = nsteps

    Q, _ = qr_positive(rng.standard_normal((d, d_u)))
    v = np.zeros(d)
    Qs = np.empty((N + 1, d, d_u))
    Rs = np.empty((N, d_u, d_u))
    vs = np.empty((N + 1, d))
    pis = np.empty((N, d_u))
    Qs[0] = Q
    vs[0] = v
    track_F = F_seq is not None
    ccoef = np.zeros(N + 1) if track_F else None
    gcoef = np.zeros((N + 1, d_u)) if track_F else None
    QtF = np.zeros((N + 1, d_u)) if track_F else None
    vtF = np.zeros(N + 1) if track_F else None

    for n in range(1, N + 1):
        W = apply_fn(n - 1, np.concatenate([Q, v[:, None]], axis=1))
        Q, v = W[:, :-1], W[:, -1]
        if not np.all(np.isfinite(v)) or not np.all(np.isfinite(Q)):
            raise InputError(f"non-finite perturbation at step {n}")
        if track_F:
            F = F_seq[n]
            f2 = F @ F
        if center:
            # record the center components of both bundles, then remove them
            c_n = (v @ F) / f2
            g_n = (F @ Q) / f2
            ccoef[n] = c_n
            gcoef[n] = g_n
            Q = Q - np.outer(F, g_n)
            v = v - c_n * F
        Q, R = qr_positive(Q)
        pi_n = Q.T @ v
        v = v - Q @ pi_n
        Qs[n], Rs[n - 1], pis[n - 1], vs[n] = Q, R, pi_n, v
        if track_F:
            QtF[n] = Q.T @ F
            vtF[n] = v @ F

    return PerturbationSequence(
        case=case, dt=dt, Q=Qs, R=Rs, v=vs, pi=pis, center=center,
        source_scale=source_scale, center_coef=ccoef, center_coef_Q=gcoef,
        QtF=QtF, vtF=vtF,
    )


# ---------------------------------------------------------------------
# min-norm block least squares:  X = G^T (G G^T)^{-1} H
# ---------------------------------------------------------------------

def _tridiag_blocks(R):
    """Diagonal and super-diagonal blocks of G G^T."""
    N, d_u, _ = R.shape
    eye = np.eye(d_u)
    diag = np.einsum("nij,nkj->nik", R, R) + eye   # R_n R_n^T + I
    return diag, -np.transpose(R, (0, 2, 1))       # coupling -R_{n+1}^T


def _banded_cholesky(diag, offdiag):
    """Upper-banded Cholesky of the SPD block tridiagonal matrix."""
    N, d_u, _ = diag.shape
    n_tot = N * d_u
    bw = 2 * d_u - 1
    ab = np.zeros((bw + 1, n_tot))
    for n in range(N):
        base = n * d_u
        for i in range(d_u):
            for j in range(d_u):
                row, col = base + i, base + j
                if col >= row:
                    ab[bw - (col - row), col] = diag[n, i, j]
        if n + 1 < N:
            off = offdiag[n + 1]  # couples block n to block n+1
            for i in range(d_u):
                for j in range(d_u):
                    row, col = base + i, base + d_u + j
                    ab[bw - (col - row), col] = off[i, j]
    return cholesky_banded(ab, lower=False)


def _gram_matvec(diag, offdiag, y):
    """(G G^T) y for y shaped (N, d_u)."""
    out = np.einsum("nij,nj->ni", diag, y)
    out[:-1] += np.einsum("nij,nj->ni", offdiag[1:], y[1:])
    out[1:] += np.einsum("nji,nj->ni", offdiag[1:], y[:-1])
    return out


def _apply_GT(R, Y):
    """X = G^T Y, blocks a_0..a_N from multipliers Y_1..Y_N."""
    N, d_u = Y.shape
    a = np.empty((N + 1, d_u))
    a[0] = -R[0].T @ Y[0]
    a[N] = Y[N - 1]
    for j in range(1, N):
        a[j] = Y[j - 1] - R[j].T @ Y[j]
    return a


def solve_min_norm(R, pi, center_row=None, center_rhs=0.0):
    """Minimum-norm solution of the shadowing constraint system.

    R: (N, d_u, d_u) growth factors, pi: (N, d_u) projections.  The
    optional extra row (adjoint neutral-direction constraint) makes the
    normal matrix an arrowhead over the block tridiagonal core, solved by
    a bordered elimination on the banded Cholesky factorization.

    Returns (a, Y, cond_estimate) with a of shape (N+1, d_u) and the
    certificate Y (multipliers proving X lies in the row space of G).
    """
    R = np.asarray(R, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    N, d_u, _ = R.shape
    diag, offdiag = _tridiag_blocks(R)
    cb = _banded_cholesky(diag, offdiag)

    def tri_solve(rhs):
        flat = cho_solve_banded((cb, False), rhs.reshape(-1))
        return flat.reshape(N, d_u)

    y1 = tri_solve(pi)
    if center_row is None:
        Y = y1
        a = _apply_GT(R, Y)
        mu = None
    else:
        r = np.asarray(center_row, dtype=np.float64)  # (N+1, d_u)
        # c = G r (block rows), rho = r.r
        c = r[1:] - np.einsum("nij,nj->ni", R, r[:-1])
        rho = float(np.sum(r * r))
        y2 = tri_solve(c)
        denom = rho - float(np.sum(c * y2))
        if abs(denom) < 1.0e-300:
            raise InputError("degenerate neutral-direction constraint row")
        mu = (center_rhs - float(np.sum(c * y1))) / denom
        Y = y1 - mu * y2
        a = _apply_GT(R, Y) + mu * r
    cond = _condition_estimate(diag, offdiag, cb)
    return a, Y, mu, cond


def _condition_estimate(diag, offdiag, cb, iters=8):
    """Rough condition estimate of G G^T via power iterations."""
    N, d_u, _ = diag.shape
    rng = np.random.default_rng(12345)
    y = rng.standard_normal((N, d_u))
    lam_max = 1.0
    for _ in range(iters):
        y = _gram_matvec(diag, offdiag, y)
        lam_max = float(np.linalg.norm(y))
        y /= lam_max
    z = rng.standard_normal(N * d_u)
    lam_min_inv = 1.0
    for _ in range(iters):
        z = cho_solve_banded((cb, False), z)
        lam_min_inv = float(np.linalg.norm(z))
        z /= lam_min_inv
    return lam_max * lam_min_inv


def solve_min_norm_dense(R, pi, center_row=None, center_rhs=0.0):
    """Dense reference solve (oracle): X = G^T (G G^T)^{-1} H."""
    R = np.asarray(R, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    N, d_u, _ = R.shape
    G = build_dense_G(R)
    H = pi.reshape(-1)
    if center_row is not None:
        G = np.vstack([G, np.asarray(center_row).reshape(1, -1)])
        H = np.concatenate([H, [center_rhs]])
    X, *_ = np.linalg.lstsq(G, H, rcond=None)
    return X.reshape(N + 1, d_u)


def build_dense_G(R):
    """Explicit (N d_u) x ((N+1) d_u) block bidiagonal constraint matrix."""
    N, d_u, _ = R.shape
    G = np.zeros((N * d_u, (N + 1) * d_u))
    eye = np.eye(d_u)
    for n in range(N):
        G[n * d_u:(n + 1) * d_u, n * d_u:(n + 1) * d_u] = -R[n]
        G[n * d_u:(n + 1) * d_u, (n + 1) * d_u:(n + 2) * d_u] = eye
    return G


def assemble_and_solve(seq, center=None):
    """Solve for the coefficients a_n and build the shadowing sequence.

    For the adjoint case with center handling the single extra constraint
    row sum_n (v_n.F_n + a_n.Q_n^T F_n) = 0 is appended; the tangent case
    relies on the projections already performed in the n-loop.
    """
    if center is None:
        center = seq.center or (seq.case == "adjoint" and seq.QtF is not None)
    solution_warnings = []
    if seq.case == "adjoint" and center:
        if seq.QtF is None or seq.vtF is None:
            raise InputError("adjoint center row needs Q^T F and v.F data")
        row = seq.QtF.copy()
        row[0] = 0.0
        rhs = -float(seq.vtF[1:].sum())
        a, Y, mu, cond = solve_min_norm(seq.R, seq.pi, row, rhs)
    else:
        a, Y, mu, cond = solve_min_norm(seq.R, seq.pi)
    if cond > 1.0e12:
        msg = f"ill-conditioned least-squares system (cond ~ {cond:.2e})"
        solution_warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    vsh = seq.v + np.einsum("nij,nj->ni", seq.Q, a)
    res = a[1:] - np.einsum("nij,nj->ni", seq.R, a[:-1]) - seq.pi
    h_norm = float(np.linalg.norm(seq.pi))
    res_rel = float(np.linalg.norm(res)) / (h_norm if h_norm > 0 else 1.0)
    return ShadowingSolution(
        a=a,
        vsh=vsh,
        certificate=Y,
        residual_rel=res_rel,
        constraint_residual_max=float(np.abs(res).max()) if res.size else 0.0,
        cond_estimate=cond,
        max_vsh_norm=float(np.linalg.norm(vsh, axis=1).max()),
        warnings=solution_warnings,
    )


# ---------------------------------------------------------------------
# sensitivity assembly
# ---------------------------------------------------------------------

def default_spin_steps(seq, dt):
    """Steps excluded from sensitivity sums: one estimated Lyapunov time,
    capped at a quarter of the window when the window is not chaotic."""
    N = seq.nsteps
    T = N * dt
    lam1 = float(seq.lyapunov_estimates()[0])
    if lam1 <= 4.0 / T:
        return N // 4
    return min(N // 4, int(np.ceil(1.0 / (lam1 * dt))))


def tangent_sensitivity(seq, sol, xstar, J_vals=None, J_mean=None,
                        spin_steps=0):
    """d<J>/dp from a tangent shadowing solution.

    xstar[n] is the observable gradient at u_n (rows 1..N used).  With
    center handling on, the neutral components removed inside the loop
    re-enter as a time-dilation correction: the per-step dilation rate of
    the assembled shadowing perturbation is
    delta_n = v_n.F_n/|F_n|^2 + a_{n-1}.(F_n.(A Q)_n)/|F_n|^2 (both
    recorded before the projections), and the correction is
    (1/(N dt)) sum delta_n (<J> - J_n), so J_vals[n] = J(u_n) is required.
    """
    N = seq.nsteps
    n0 = spin_steps + 1
    if n0 > N:
        raise InputError("spin-up swallows the whole window")
    n_eff = N - spin_steps
    core = float(np.einsum("ni,ni->", xstar[n0:N + 1], sol.vsh[n0:N + 1]))
    if seq.center:
        if J_vals is None:
            raise InputError("center correction needs the observable series")
        window = J_vals[n0:N + 1]
        mean = float(window.mean()) if J_mean is None else J_mean
        delta = (seq.center_coef[n0:N + 1]
                 + np.einsum("ni,ni->n", seq.center_coef_Q[n0:N + 1],
                             sol.a[n0 - 1:N]))
        core += float(delta @ (mean - window)) / seq.dt
    return core / n_eff


def adjoint_sensitivity(seq, sol, x_paired, spin_steps=0):
    """d<J>/dp from an adjoint shadowing solution.

    x_paired[n] must hold the parameter derivative paired with vsh_n,
    i.e. (df/dp)(u_{N+1-n}) for n = 1..N (reversed-time pairing).
    """
    N = seq.nsteps
    n0 = spin_steps + 1
    if n0 > N:
        raise InputError("spin-up swallows the whole window")
    n_eff = N - spin_steps
    core = float(np.einsum("ni,ni->", x_paired[n0:N + 1], sol.vsh[n0:N + 1]))
    return core / (n_eff * seq.source_scale)


# ---------------------------------------------------------------------
# operator-mode windows and the sampling driver
# ---------------------------------------------------------------------

def tangent_window(system, states, param_name, observables, d_u=2,
                   provider=None, center=True, seed=0, params=None,
                   spin_steps=None, matrix_mode=False, rng=None):
    """One tangent shadowing window on a reference orbit u_0..u_{N+1}.

    Returns (dict observable -> sensitivity, PerturbationSequence,
    ShadowingSolution).  AD (operator) mode queries the provider with the
    bundled directions; matrix mode assembles explicit Jacobians first.
    Both produce identical numbers with the same seed.
    """
    provider = provider or DerivativeProvider()
    states = np.asarray(states, dtype=np.float64)
    N = states.shape[0] - 2
    if N < 2:
        raise InputError("need at least 4 orbit states")
    merged = system.merged_params(params)
    F_seq = None
    if center:
        if system.rhs_fn is None:
            raise InputError("center handling needs the continuous RHS")
        F_seq = np.stack([system.rhs_fn(states[n], merged)
                          for n in range(N + 1)])

    if matrix_mode:
        A = [provider.step_jacobian(system, states[n], params)
             for n in range(N)]
        b = param_derivative_series(system, states[:N], param_name, params,
                                    provider)
        seq = n_loop(lambda j: A[j], lambda j: b[j], d_u, N, seed=seed,
                     center=center, F_seq=F_seq, case="tangent", rng=rng)
    else:
        def apply(j, W):
            dP = {param_name: np.concatenate(
                [np.zeros(W.shape[1] - 1), [1.0]])}
            return provider.jvp(system, states[j], params, W, dP)

        seq = _n_loop_core(apply, system.dim, d_u, N, seed, center, F_seq,
                           "tangent", 1.0, rng=rng)
    seq.dt = system.dt
    sol = assemble_and_solve(seq)
    if spin_steps is None:
        spin_steps = default_spin_steps(seq, system.dt)

    out = {}
    for name in observables:
        fn = system.observables[name]
        xstar = observable_gradient_series(fn, states[:N + 1])
        J_vals = np.array([float(fn(states[n])) for n in range(N + 1)])
        out[name] = tangent_sensitivity(seq, sol, xstar, J_vals,
                                        spin_steps=spin_steps)
    return out, seq, sol


def adjoint_window(system, states, parameters, observable, d_u=2,
                   provider=None, center=True, seed=0, params=None,
                   spin_steps=None, matrix_mode=False, ad_source=True,
                   rng=None):
    """One adjoint shadowing window on a reference orbit u_0..u_{N+1}.

    Returns (dict parameter -> sensitivity, seq, sol).  With ad_source
    the observable-gradient source carries the 1/N weight of the averaged
    objective (the reverse-mode construction); matrix mode passes the raw
    gradients and weights the final sum instead.  Identical results.
    """
    provider = provider or DerivativeProvider()
    states = np.asarray(states, dtype=np.float64)
    N = states.shape[0] - 2
    if N < 2:
        raise InputError("need at least 4 orbit states")
    merged = system.merged_params(params)
    fn = system.observables[observable]
    scale = (1.0 / N) if ad_source else 1.0

    # neutral directions paired with the reversed-time index: row n of the
    # loop lives at orbit point u_{N+2-n}
    F_rev = np.zeros((N + 1, system.dim))
    for n in range(1, N + 1):
        F_rev[n] = system.rhs_fn(states[N + 2 - n], merged)

    if matrix_mode:
        A = [provider.step_jacobian(system, states[N + 1 - j], params).T
             for j in range(N)]
        b = np.stack([scale * observable_gradient(fn, states[N + 1 - j])
                      for j in range(N)])
        seq = n_loop(lambda j: A[j], lambda j: b[j], d_u, N, seed=seed,
                     center=False, F_seq=F_rev, case="adjoint",
                     source_scale=scale, rng=rng)
    else:
        def apply(j, W):
            J = provider.step_jacobian(system, states[N + 1 - j], params)
            out = J.T @ W
            out[:, -1] += scale * observable_gradient(fn, states[N + 1 - j])
            return out

        seq = _n_loop_core(apply, system.dim, d_u, N, seed, False, F_rev,
                           "adjoint", scale, rng=rng)
    seq.dt = system.dt
    sol = assemble_and_solve(seq, center=center)
    if spin_steps is None:
        spin_steps = default_spin_steps(seq, system.dt)

    xp = {name: np.zeros((N + 1, system.dim)) for name in parameters}
    xs = {name: param_derivative_series(system, states[1:N + 1], name,
                                        params, provider)
          for name in parameters}
    out = {}
    for name in parameters:
        # pair vsh_n with x_{n'+1} = (df/dp)(u_{N+1-n})
        paired = xp[name]
        paired[1:] = xs[name][::-1]
        out[name] = adjoint_sensitivity(seq, sol, paired,
                                        spin_steps=spin_steps)
    return out, seq, sol


@dataclass
class SensitivityEstimate:
    parameter: str
    observable: str
    case: str
    samples: np.ndarray
    cumulative: np.ndarray

    @property
    def mean(self):
        return float(self.samples.mean())

    @property
    def stderr(self):
        n = len(self.samples)
        if n < 2:
            return 0.0
        return float(self.samples.std(ddof=1) / np.sqrt(n))


def shadowing_sensitivity(system, case="tangent", parameters=("beta",),
                          observables=("j_ac",), window_steps=2000,
                          samples=10, d_u=2, seed=0, provider=None,
                          center=True, params=None, u0=None,
                          runup_time=None, matrix_mode=False):
    """Sample-averaged shadowing sensitivities over disjoint orbit windows.

    Tangent case: one n-loop per parameter covers every observable;
    adjoint case: one n-loop per observable covers every parameter.
    Returns dict (parameter, observable) -> SensitivityEstimate.
    """
    provider = provider or DerivativeProvider()
    merged = system.merged_params(params)
    rng = np.random.default_rng(seed)
    if u0 is None:
        if runup_time is None:
            raise InputError("need either a post-runup state or runup_time")
        u_start = spin_up(system, rng.standard_normal(system.dim), params,
                          runup_time)
    else:
        u_start = np.asarray(u0, dtype=np.float64)

    # boundary states of disjoint windows
    starts = [u_start]
    u = u_start
    for _ in range(samples - 1):
        traj, _ = evolve(system, u, params, window_steps + 1,
                         observables=[], record_states=False)
        u = traj.states[-1]
        starts.append(u)

    values = {}
    for m in range(samples):
        traj, _ = evolve(system, starts[m], params, window_steps + 1,
                         observables=[])
        states = traj.states
        w_seed = rng.integers(0, 2**63 - 1)
        if case == "tangent":
            for p in parameters:
                sens, _, _ = tangent_window(
                    system, states, p, observables, d_u=d_u,
                    provider=provider, center=center, seed=w_seed,
                    params=params, matrix_mode=matrix_mode)
                for name, val in sens.items():
                    values.setdefault((p, name), []).append(val)
        elif case == "adjoint":
            for name in observables:
                sens, _, _ = adjoint_window(
                    system, states, parameters, name, d_u=d_u,
                    provider=provider, center=center, seed=w_seed,
                    params=params, matrix_mode=matrix_mode)
                for p, val in sens.items():
                    values.setdefault((p, name), []).append(val)
        else:
            raise InputError(f"unknown case {case!r}")

    out = {}
    for key, vals in values.items():
        arr = np.asarray(vals)
        out[key] = SensitivityEstimate(
            parameter=key[0], observable=key[1], case=case, samples=arr,
            cumulative=np.cumsum(arr) / np.arange(1, len(arr) + 1),
        )
    return out
