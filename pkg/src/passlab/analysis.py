"""Certificates for linear systems.

Passivity-index verification with quadratic storage, the gain from input to
output derivative, incremental-stability comparison functions, strong
finite-time detectability and state bounds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize
from scipy.linalg import expm, solve_continuous_lyapunov

from .systems import (
    TOL_PSD,
    LinearSystem,
    QuadraticStorage,
    SupplyRate,
    zoh_discretize,
)


class CertificateError(ValueError):
    """A certificate cannot be constructed for the given data."""


class UnboundedGainError(CertificateError):
    """The input-to-output-derivative map is not L2-stable."""


@dataclass(frozen=True)
class PassivityVerdict:
    holds: bool
    max_eigenvalue: float


@dataclass(frozen=True)
class QuasiPassivityVerdict:
    holds: bool
    max_eigenvalue: float
    worst_residual: float
    samples: int


@dataclass(frozen=True)
class GainCertificate:
    """``gamma`` bounds the L2 gain from ``u`` to ``dy/dt`` between samples."""

    gamma: float
    gamma_peak: float
    peak_frequency: float
    frequency_grid_used: np.ndarray = field(repr=False)
    safety: float = 1.01

    @property
    def margin(self) -> float:
        return self.gamma - self.gamma_peak


@dataclass(frozen=True)
class DeltaIssCertificate:
    """``beta1(r, t) = c exp(-a t) r`` and ``beta2(r) = b r`` in the infinity norm."""

    c: float
    a: float
    b: float

    def __post_init__(self):
        if not (self.c >= 1 and self.a > 0 and self.b >= 0):
            raise CertificateError(f"invalid comparison functions c={self.c}, a={self.a}, "
                                   f"b={self.b}")

    def beta1(self, r, t):
        return self.c * np.exp(-self.a * np.asarray(t)) * np.asarray(r)

    def beta2(self, r):
        return self.b * np.asarray(r)


@dataclass(frozen=True)
class DetectabilityCertificate:
    """``sum_{i=k}^{k+N0} ||y[i]||^2 >= kappa ||x[k]||^2``.

    ``inputs`` records the input sequences the bound covers: ``"any"`` or
    ``"zero"``.
    """

    N0: int
    kappa: float
    valid: bool
    inputs: str = "any"


@dataclass(frozen=True)
class StateBoundEstimate:
    M: float
    M_symbolic: float


def passivity_form(sys: LinearSystem, V: QuadraticStorage, nu: float, rho: float) -> np.ndarray:
    """Symmetric matrix of ``dV/dt - (u'y - nu u'u - rho y'y)`` in ``(x, u)``."""
    _check_pair(sys, V)
    A, B, C, D, P = sys.A, sys.B, sys.C, sys.D, V.P
    m = sys.m
    top_left = A.T @ P + P @ A + rho * C.T @ C
    off = P @ B - 0.5 * C.T + rho * C.T @ D
    bottom = -0.5 * (D + D.T) + nu * np.eye(m) + rho * D.T @ D
    M = np.block([[top_left, off], [off.T, bottom]])
    return 0.5 * (M + M.T)


def verify_passivity_indices(sys: LinearSystem, V: QuadraticStorage, nu: float, rho: float,
                             tol: float = TOL_PSD) -> PassivityVerdict:
    """Check ``d/dt V <= u'y - nu u'u - rho y'y`` for all ``(x, u)``.

    Substitutes ``y = Cx + Du`` and tests the resulting quadratic form for
    negative semidefiniteness.
    """
    if sys.is_discrete:
        raise ValueError("verify_passivity_indices expects a continuous-time system")
    lam = float(np.linalg.eigvalsh(passivity_form(sys, V, nu, rho))[-1])
    return PassivityVerdict(holds=lam <= tol, max_eigenvalue=lam)


def quasi_passivity_form(sys: LinearSystem, V: QuadraticStorage, w: SupplyRate,
                         scale: float = 1.0) -> np.ndarray:
    """Matrix of ``V(x+) - V(x) - scale (u'y - nu u'u - rho y'y)`` in ``(x, u)``."""
    _check_pair(sys, V)
    A, B, C, D, P = sys.A, sys.B, sys.C, sys.D, V.P
    m = sys.m
    s = scale
    top_left = A.T @ P @ A - P + s * w.rho * C.T @ C
    off = A.T @ P @ B - 0.5 * s * C.T + s * w.rho * C.T @ D
    bottom = B.T @ P @ B - 0.5 * s * (D + D.T) + s * w.nu * np.eye(m) + s * w.rho * D.T @ D
    M = np.block([[top_left, off], [off.T, bottom]])
    return 0.5 * (M + M.T)


def verify_discrete_quasi_passivity(sys: LinearSystem, V: QuadraticStorage, w: SupplyRate,
                                    sample_count: int = 1000, radius: float = 1.0,
                                    scale: float = 1.0, seed: int = 0,
                                    tol: float = TOL_PSD) -> QuasiPassivityVerdict:
    """Check ``V(x[k+1]) - V(x[k]) <= scale (u'y - nu u'u - rho y'y) + alpha``.

    ``scale`` carries the sampling period when the supply is stated per unit
    time. The global verdict asks the quadratic part to be negative
    semidefinite (the constant ``alpha`` cannot help on unbounded sets). The
    empirical worst residual over random ``(x, u)`` with ``||(x, u)||_inf <=
    radius`` is reported as a cross-check and does include ``alpha``.
    """
    M = quasi_passivity_form(sys, V, w, scale)
    lam = float(np.linalg.eigvalsh(M)[-1])
    rng = np.random.default_rng(seed)
    Z = rng.uniform(-radius, radius, size=(sample_count, sys.n + sys.m))
    residuals = np.einsum("ij,jk,ik->i", Z, M, Z) - w.alpha
    worst = float(residuals.max()) if sample_count else -w.alpha
    return QuasiPassivityVerdict(holds=lam <= tol, max_eigenvalue=lam,
                                 worst_residual=worst, samples=sample_count)


def _derivative_response(sys: LinearSystem, omega: float) -> float:
    """Largest singular value of ``CA (j omega I - A)^-1 B + CB``."""
    n = sys.n
    G = sys.C @ sys.A @ np.linalg.solve(1j * omega * np.eye(n) - sys.A, sys.B) + sys.C @ sys.B
    return float(np.linalg.svd(G, compute_uv=False)[0])


def _hidden_unstable_modes_only(sys: LinearSystem) -> bool:
    # each eigenvalue with Re >= 0 must be uncontrollable from B or unobservable from CA
    n = sys.n
    CA = sys.C @ sys.A
    for lam in np.linalg.eigvals(sys.A):
        if lam.real < 0:
            continue
        pencil = lam * np.eye(n) - sys.A
        ctrb = np.linalg.matrix_rank(np.hstack([pencil, sys.B]), tol=1e-9)
        obsv = np.linalg.matrix_rank(np.vstack([pencil, CA]), tol=1e-9)
        if ctrb == n and obsv == n:
            return False
    return True


def estimate_gain_gamma(sys: LinearSystem, omega_min: float = 1e-4, omega_max: float = 1e6,
                        points: int = 2000, safety: float = 1.01) -> GainCertificate:
    """Gain from a sample-held input to the output derivative.

    Between samples ``u`` is constant, so ``dy/dt = CA x + CB u`` and the
    relevant transfer is ``CA (sI - A)^-1 B + CB``. Its peak magnitude on the
    imaginary axis is located on a log grid, refined by bounded scalar search
    in ``log omega`` and compared against the high-frequency limit ``CB``.
    """
    if sys.is_discrete:
        raise ValueError("estimate_gain_gamma expects a continuous-time system")
    if not sys.is_hurwitz() and not _hidden_unstable_modes_only(sys):
        raise UnboundedGainError("A is not Hurwitz and the derivative map is not L2-stable")

    grid = np.logspace(np.log10(omega_min), np.log10(omega_max), points)
    mags = np.array([_derivative_response(sys, w) for w in grid])
    if not np.all(np.isfinite(mags)):
        raise UnboundedGainError("derivative transfer is unbounded on the frequency grid")
    i = int(np.argmax(mags))
    peak, peak_w = float(mags[i]), float(grid[i])
    if 0 < i < points - 1:
        bounds = (np.log(grid[i - 1]), np.log(grid[i + 1]))
        res = optimize.minimize_scalar(lambda s: -_derivative_response(sys, math.exp(s)),
                                       bounds=bounds, method="bounded",
                                       options={"xatol": 1e-10})
        if -res.fun > peak:
            peak, peak_w = float(-res.fun), float(math.exp(res.x))
    limit = float(np.linalg.svd(sys.C @ sys.B, compute_uv=False)[0])
    if limit >= peak:
        peak, peak_w = limit, math.inf
    return GainCertificate(gamma=safety * peak, gamma_peak=peak, peak_frequency=peak_w,
                           frequency_grid_used=grid, safety=safety)


def _integral_abs_response(sys: LinearSystem, rate: float, scale: float,
                           cutoff: float = 1e-12) -> float:
    """``int_0^inf ||e^{As} B||_2 ds`` with a rigorous exponential tail cut."""
    normB = np.linalg.norm(sys.B, 2)
    if normB == 0:
        return 0.0
    # ||e^{As}B|| <= scale e^{-rate s} ||B|| (from the Lyapunov certificate)
    horizon = max(math.log(scale * normB / cutoff), 0.0) / rate
    panels = 64
    edges = np.linspace(0.0, horizon, panels + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(lambda s: np.linalg.norm(expm(sys.A * s) @ sys.B, 2), lo, hi,
                                epsabs=1e-13, epsrel=1e-10, limit=200)
        total += val
    return total


def build_delta_iss_certificate(sys: LinearSystem, safety: float = 1.05) -> DeltaIssCertificate:
    """Comparison functions for incremental ISS from a Lyapunov solve.

    With ``A'P + PA = -I``: ``||e^{At}||_2 <= sqrt(cond P) e^{-t / (2 lmax)}``.
    The factors ``sqrt(n)`` and ``sqrt(m)`` convert 2-norm bounds to the
    infinity-norm metric of the abstraction.
    """
    if sys.is_discrete:
        raise ValueError("build_delta_iss_certificate expects a continuous-time system")
    if not sys.is_hurwitz():
        raise CertificateError("A is not Hurwitz; no incremental-stability certificate")
    n, m = sys.n, sys.m
    P = solve_continuous_lyapunov(sys.A.T, -np.eye(n))
    P = 0.5 * (P + P.T)
    w = np.linalg.eigvalsh(P)
    ratio = math.sqrt(w[-1] / w[0])
    a = float(1.0 / (2.0 * w[-1]))
    c = math.sqrt(n) * ratio
    b = math.sqrt(m) * safety * _integral_abs_response(sys, a, ratio)
    return DeltaIssCertificate(c=max(c, 1.0), a=a, b=b)


def spot_check_delta_iss(sys: LinearSystem, cert: DeltaIssCertificate, tau: float = 0.1,
                         steps: int = 100, trials: int = 100, seed: int = 0) -> float:
    """Smallest slack of the incremental-stability inequality over random pairs.

    Pairs of trajectories from random states under random piecewise-constant
    inputs; the slack ``beta1 + beta2 - ||x1(t) - x2(t)||_inf`` is evaluated
    at every sample. Non-negative means no violation was seen.
    """
    rng = np.random.default_rng(seed)
    sd = zoh_discretize(sys, tau)
    n, m = sys.n, sys.m
    t = np.arange(steps + 1) * tau
    worst = math.inf
    for _ in range(trials):
        dx = rng.normal(size=n) * rng.uniform(0.1, 10.0)
        du = rng.normal(size=(steps, m)) * rng.uniform(0.0, 5.0)
        # the difference of two trajectories of a linear system is itself a trajectory
        e = np.empty((steps + 1, n))
        e[0] = dx
        for k in range(steps):
            e[k + 1] = sd.A @ e[k] + sd.B @ du[k]
        sup_du = np.maximum.accumulate(np.abs(du).max(axis=1))
        sup_du = np.concatenate([[0.0], sup_du])
        bound = cert.beta1(np.abs(dx).max(), t) + cert.beta2(sup_du)
        worst = min(worst, float(np.min(bound - np.abs(e).max(axis=1))))
    return worst


def detectability_matrices(sys: LinearSystem, N0: int):
    """Stacked output map ``Y = O x + T U`` over ``k .. k + N0``."""
    if N0 < 0:
        raise ValueError("N0 must be non-negative")
    m = sys.m
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    blocks = [C]
    for _ in range(N0):
        blocks.append(blocks[-1] @ A)
    O = np.vstack(blocks)
    markov = [D] + [blocks[i] @ B for i in range(N0)]
    T = np.zeros(((N0 + 1) * m, (N0 + 1) * m))
    for i in range(N0 + 1):
        for j in range(i + 1):
            T[i * m:(i + 1) * m, j * m:(j + 1) * m] = markov[i - j]
    return O, T


def compute_detectability(sys: LinearSystem, N0: int, inputs: str = "any") -> DetectabilityCertificate:
    """Strong finite-time detectability constant.

    ``kappa = lambda_min(O' (I - T T^+) O)``: the output energy left after
    the worst-case input has cancelled as much as it can. With
    ``inputs="zero"`` the inputs are fixed at zero and ``kappa`` is the
    observability-Gramian bound ``lambda_min(O'O)``.
    """
    O, T = detectability_matrices(sys, N0)
    if inputs == "any":
        U, s, _ = np.linalg.svd(T)
        rank = int(np.sum(s > s[0] * max(T.shape) * np.finfo(float).eps)) if s.size and s[0] > 0 else 0
        basis = U[:, :rank]
        R = O - basis @ (basis.T @ O)
    elif inputs == "zero":
        R = O
    else:
        raise ValueError("inputs must be 'any' or 'zero'")
    G = R.T @ R
    kappa = float(np.linalg.eigvalsh(0.5 * (G + G.T))[0])
    floor = 1e-12 * max(1.0, float(np.linalg.norm(O, 2)) ** 2)
    return DetectabilityCertificate(N0=N0, kappa=kappa, valid=kappa > floor, inputs=inputs)


def state_bound(cert: DeltaIssCertificate, x0_norm: float, u_inf_norm: float,
                eps: float = 0.0) -> StateBoundEstimate:
    """Sampled-state bound ``M = beta1(|x0|, 0) + beta2(|u|_inf)`` and ``M + eps``.

    Valid for systems with ``x(t, 0, 0) = 0``, which every linear system has.
    """
    M = float(cert.c * x0_norm + cert.b * u_inf_norm)
    return StateBoundEstimate(M=M, M_symbolic=M + eps)


def search_storage(sys: LinearSystem, nu: float, rho: float, restarts: int = 8, seed: int = 0,
                   maxiter: int = 4000):
    """Randomized local search for a storage matrix certifying ``(nu, rho)``.

    Minimizes the largest eigenvalue of the passivity form over ``P = L L'``
    from random starts. No guarantee of finding a certificate when
    one exists; always re-check the result with
    :func:`verify_passivity_indices`.

    Returns
    -------
    P : ndarray
    max_eigenvalue : float
    """
    n = sys.n
    rng = np.random.default_rng(seed)
    tri = np.tril_indices(n)

    def unpack(theta):
        L = np.zeros((n, n))
        L[tri] = theta
        return L @ L.T

    def objective(theta):
        return np.linalg.eigvalsh(passivity_form(sys, QuadraticStorage(unpack(theta)), nu, rho))[-1]

    best_P, best_val = None, math.inf
    for _ in range(restarts):
        theta0 = rng.normal(size=len(tri[0]))
        res = optimize.minimize(objective, theta0, method="Nelder-Mead",
                                options={"maxiter": maxiter, "xatol": 1e-12, "fatol": 1e-14})
        if res.fun < best_val:
            best_val, best_P = float(res.fun), unpack(res.x)
    return 0.5 * (best_P + best_P.T), best_val


def _check_pair(sys: LinearSystem, V: QuadraticStorage):
    if V.n != sys.n:
        raise ValueError(f"storage dimension {V.n} does not match state dimension {sys.n}")
