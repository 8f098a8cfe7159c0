"""Lyapunov exponents by repeated QR and covariant vectors by the
backward-iteration (Ginelli) method, with angle statistics.

Exponents come from the running product of R diagonals of a QR-
re-orthonormalized tangent basis pushed with Jacobian-vector products.
Covariant vectors are recovered by iterating upper-triangular coefficient
matrices backward through the stored R factors; the adjoint variant runs
the same machinery on the transposed cocycle in reversed time.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .derivatives import DerivativeProvider
from .dynamics import InputError

DEGENERACY_TOL = 1.0e-13
R_CONDITION_WARN = 1.0e12
REGIME_TOL = 0.02


class DegenerateBasisError(RuntimeError):
    """Tangent basis lost rank during re-orthonormalization."""


def qr_positive(M):
    """Reduced QR with the sign convention diag(R) > 0.

    Raises DegenerateBasisError when a diagonal entry of R falls below
    the rank tolerance.
    """
    Q, R = np.linalg.qr(np.asarray(M, dtype=np.float64))
    diag = np.diag(R)
    if np.any(np.abs(diag) < DEGENERACY_TOL):
        raise DegenerateBasisError(
            f"min |diag R| = {np.abs(diag).min():.3e}"
        )
    signs = np.where(diag < 0.0, -1.0, 1.0)
    return Q * signs, R * signs[:, None]


@dataclass
class LyapunovResult:
    """Exponent estimates per unit time, plus running averages."""

    exponents: np.ndarray          # (k,)
    dt: float
    nsteps: int
    running: np.ndarray = None     # (nsteps, k) cumulative estimates

    @property
    def lyapunov_time(self):
        lam1 = self.exponents[0]
        return 1.0 / lam1 if lam1 > 0 else np.inf


def lyapunov_spectrum(system, u0, params=None, k=3, nsteps=20000,
                      provider=None, seed=0, return_running=False):
    """Leading k Lyapunov exponents along the orbit of u0.

    QR re-orthonormalization is applied every step; exponents are
    (1/(N dt)) sum log |R_n^k|, i.e. per unit time.
    """
    if k > system.dim:
        raise InputError("k cannot exceed the state dimension")
    provider = provider or DerivativeProvider()
    merged = system.merged_params(params)
    rng = np.random.default_rng(seed)
    Q, _ = qr_positive(rng.standard_normal((system.dim, k)))
    u = np.asarray(u0, dtype=np.float64)
    logsum = np.zeros(k)
    running = np.empty((nsteps, k)) if return_running else None
    for n in range(nsteps):
        Q = provider.jvp(system, u, params, Q)
        u = system.step_fn(u, merged)
        Q, R = qr_positive(Q)
        logsum += np.log(np.abs(np.diag(R)))
        if return_running:
            running[n] = logsum / ((n + 1) * system.dt)
    return LyapunovResult(
        exponents=logsum / (nsteps * system.dt),
        dt=system.dt,
        nsteps=nsteps,
        running=running,
    )


def classify_regime(exponents, tol=REGIME_TOL):
    """Label an attractor from its leading exponents.

    lambda_1 > tol: chaotic; all < -tol: fixed point; otherwise one
    near-zero exponent means periodic, two or more quasiperiodic.
    """
    lam = np.sort(np.asarray(exponents))[::-1]
    if lam[0] > tol:
        return "chaotic"
    if np.all(lam < -tol):
        return "fixed_point"
    nzero = int(np.sum(np.abs(lam) <= tol))
    return "periodic" if nzero <= 1 else "quasiperiodic"


@dataclass
class ClvSet:
    """Unit covariant vectors on a window of a reference orbit."""

    vectors: np.ndarray            # (T+1, d, k), unit columns
    variant: str                   # "tangent" | "adjoint"
    dt: float
    exponents: np.ndarray          # from the forward QR pass, per unit time
    flagged_steps: list = field(default_factory=list)  # ill-conditioned R
    growth_rates: np.ndarray = None  # (k,) mean log growth of each vector

    @property
    def k(self):
        return self.vectors.shape[2]


def clv_ginelli(system, u0, params=None, k=6, report_steps=10000,
                variant="tangent", provider=None, seed=0,
                discard_time=None):
    """Covariant Lyapunov vectors on a report window.

    A forward QR pass stores Q and R; a backward pass pulls random upper-
    triangular coefficients through R^{-1} with column renormalization.
    Convergence windows at both ends (default 20 estimated Lyapunov times
    each) are discarded.  The adjoint variant applies the same algorithm
    to transposed Jacobians in reversed time, so its vectors are reported
    on the same orbit window, aligned index-by-index with the tangent set.
    """
    if variant not in ("tangent", "adjoint"):
        raise InputError(f"unknown variant {variant!r}")
    provider = provider or DerivativeProvider()
    merged = system.merged_params(params)
    d = system.dim
    rng = np.random.default_rng(seed)

    # orbit long enough for both convergence buffers
    if discard_time is None:
        probe = lyapunov_spectrum(system, u0, params, k=1,
                                  nsteps=min(report_steps, 5000),
                                  provider=provider, seed=seed)
        lam1 = max(probe.exponents[0], 0.05)
        discard_time = 20.0 / lam1
    n_buf = max(1, int(np.ceil(discard_time / system.dt)))
    M = report_steps + 2 * n_buf

    states = np.empty((M + 1, d))
    u = np.asarray(u0, dtype=np.float64)
    states[0] = u
    for n in range(1, M + 1):
        u = system.step_fn(u, merged)
        states[n] = u

    # forward QR pass over the (possibly transposed/reversed) cocycle
    def push(j, Q):
        if variant == "tangent":
            return provider.jvp(system, states[j], params, Q)
        J = provider.step_jacobian(system, states[M - 1 - j], params)
        return J.T @ Q

    Q, _ = qr_positive(rng.standard_normal((d, k)))
    Qs = np.empty((report_steps + 1, d, k))
    Rs = np.empty((M, k, k))
    logsum = np.zeros(k)
    lo, hi = n_buf, n_buf + report_steps  # report window in pass index
    for j in range(M):
        Q = push(j, Q)
        Q, R = qr_positive(Q)
        Rs[j] = R
        logsum += np.log(np.abs(np.diag(R)))
        if lo <= j + 1 <= hi:
            Qs[j + 1 - lo] = Q

    exponents = logsum / (M * system.dt)

    flagged = []
    C = np.triu(rng.standard_normal((k, k)))
    C[np.diag_indices(k)] = np.abs(C[np.diag_indices(k)]) + 0.5
    C /= np.linalg.norm(C, axis=0)
    vectors = np.empty((report_steps + 1, d, k))
    # backward from the end of the pass down to the report window
    for j in range(M - 1, -1, -1):
        R = Rs[j]
        diag = np.abs(np.diag(R))
        if diag.max() / diag.min() > R_CONDITION_WARN:
            flagged.append(j)
        C = solve_triangular(R, C, lower=False)
        C /= np.linalg.norm(C, axis=0)
        if lo <= j <= hi:
            vectors[j - lo] = Qs[j - lo] @ C
        if j == lo:
            break

    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    if variant == "adjoint":
        # pass index j corresponds to orbit index M - j; flip so that
        # vectors[i] sits at the same orbit point as the tangent set's
        vectors = vectors[::-1].copy()

    growth = _mean_log_growth(system, params, provider, states, vectors,
                              variant, lo, hi, M)
    return ClvSet(vectors=vectors, variant=variant, dt=system.dt,
                  exponents=exponents, flagged_steps=flagged,
                  growth_rates=growth)


def _mean_log_growth(system, params, provider, states, vectors, variant,
                     lo, hi, M):
    """Mean one-step log growth of each vector under the cocycle."""
    T = vectors.shape[0] - 1
    k = vectors.shape[2]
    if T < 1:
        return None
    sample = range(0, T, max(1, T // 200))
    acc = np.zeros(k)
    cnt = 0
    for i in sample:
        if variant == "tangent":
            out = provider.jvp(system, states[lo + i], params, vectors[i])
        else:
            orbit_idx = lo + i  # vectors already orbit-aligned
            if orbit_idx - 1 < 0:
                continue
            J = provider.step_jacobian(system, states[orbit_idx - 1], params)
            out = J.T @ vectors[i]
        acc += np.log(np.linalg.norm(out, axis=0))
        cnt += 1
    return acc / (cnt * system.dt)


def angle_matrix_deg(A, B):
    """Instantaneous angles (degrees, in [0, 90]) between vector sets.

    A, B: (d, ka), (d, kb) with unit columns -> (ka, kb).
    """
    dots = np.abs(A.T @ B)
    return np.degrees(np.arccos(np.clip(dots, 0.0, 1.0)))


def clv_angle_statistics(set_a, set_b=None):
    """Mean pairwise angle matrix over a common window, in degrees.

    With one argument, the statistics are within-set.  Also returns the
    minimum instantaneous off-diagonal angle, the tangency diagnostic.
    """
    same = set_b is None
    if same:
        set_b = set_a
    if set_a.vectors.shape[0] != set_b.vectors.shape[0]:
        raise InputError("windows differ in length")
    T = set_a.vectors.shape[0]
    ka, kb = set_a.k, set_b.k
    mean = np.zeros((ka, kb))
    min_offdiag = 90.0
    offmask = ~np.eye(min(ka, kb), dtype=bool) if ka == kb else None
    for n in range(T):
        ang = angle_matrix_deg(set_a.vectors[n], set_b.vectors[n])
        mean += ang
        if offmask is not None:
            m = float(ang[offmask].min())
            if m < min_offdiag:
                min_offdiag = m
    return mean / T, min_offdiag
