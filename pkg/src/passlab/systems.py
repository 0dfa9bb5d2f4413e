"""Dynamical-system types, exact sampling, simulation and energy bookkeeping.

Continuous-time systems are ``x' = f(x, u), y = h(x, u)``. The linear case
is :class:`LinearSystem`; anything exposing ``state_dim``, ``input_dim``,
``f`` and ``h`` works with :func:`simulate_continuous` (integrated by RK4).
Linear systems are always propagated with the exact zero-order-hold map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from scipy.linalg import expm

from . import kernels

#: default tolerance for every semidefiniteness verdict in the package
TOL_PSD = 1e-9


class DivergenceError(FloatingPointError):
    """A simulated state became non-finite."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


class DynamicsProvider(Protocol):
    state_dim: int
    input_dim: int

    def f(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def h(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...


def _matrix(name, value, rows=None, cols=None):
    arr = np.array(value, dtype=float, ndmin=2)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ValueError(f"{name} has {arr.shape[0]} rows, expected {rows}")
    if cols is not None and arr.shape[1] != cols:
        raise ValueError(f"{name} has {arr.shape[1]} columns, expected {cols}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def _vector(name, value, dim):
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (dim,):
        raise ValueError(f"{name} must have dimension {dim}, got {arr.size}")
    return arr


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """State-space realization ``(A, B, C, D)`` with square input/output.

    ``dt`` is ``None`` for continuous time, otherwise the sampling period of
    the discrete-time map ``x[k+1] = A x[k] + B u[k]``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    dt: float | None = None

    def __post_init__(self):
        A = _matrix("A", self.A)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got shape {A.shape}")
        B = _matrix("B", self.B, rows=n)
        m = B.shape[1]
        C = _matrix("C", self.C, rows=m, cols=n)
        D = _matrix("D", self.D, rows=m, cols=m)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive for a discrete-time system")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    state_dim = n
    input_dim = m

    @property
    def is_discrete(self) -> bool:
        return self.dt is not None

    def f(self, x, u):
        return self.A @ x + self.B @ u

    def h(self, x, u):
        return self.C @ x + self.D @ u

    def is_hurwitz(self) -> bool:
        return bool(np.all(np.linalg.eigvals(self.A).real < 0))

    def __repr__(self):
        kind = "continuous" if self.dt is None else f"discrete, dt={self.dt}"
        return f"LinearSystem(n={self.n}, m={self.m}, {kind})"


@dataclass(frozen=True)
class NonlinearSystem:
    """Continuous-time system given by plain callables ``f(x, u)``, ``h(x, u)``."""

    f_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    h_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    state_dim: int
    input_dim: int

    def f(self, x, u):
        return np.asarray(self.f_fn(x, u), dtype=float)

    def h(self, x, u):
        return np.asarray(self.h_fn(x, u), dtype=float)


@dataclass(frozen=True, eq=False)
class Trace:
    """Sampled trajectory: ``x[k]``, ``u[k]``, ``y[k]`` for ``k = 0..K``.

    ``dense_t``/``dense_x`` optionally hold intra-step samples of the
    continuous state (only filled when requested).
    """

    tau: float
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    dense_t: np.ndarray | None = None
    dense_x: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return self.x.shape[0] - 1

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.x.shape[0]) * self.tau


@dataclass(frozen=True, eq=False)
class QuadraticStorage:
    """Storage function ``V(x) = x' P x`` with symmetric PSD ``P``."""

    P: np.ndarray

    def __post_init__(self):
        P = _matrix("P", self.P)
        if P.shape[0] != P.shape[1]:
            raise ValueError(f"P must be square, got shape {P.shape}")
        if not np.allclose(P, P.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(P).max())):
            raise ValueError("P must be symmetric")
        if np.linalg.eigvalsh(P).min() < -TOL_PSD:
            raise ValueError("P must be positive semi-definite")
        object.__setattr__(self, "P", P)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def eig_min(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[0])

    @property
    def eig_max(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[-1])

    def __call__(self, x):
        return evaluate_storage(self, x)


@dataclass(frozen=True)
class StorageRegularity:
    """Hölder bound ``|V(a) - V(b)| <= L ||a - b||^theta`` for ``||a - b|| <= valid_radius``."""

    L: float
    theta: float
    valid_radius: float

    def __post_init__(self):
        if not (self.L > 0 and self.theta > 0):
            raise ValueError("regularity constants L and theta must be positive")

    @classmethod
    def for_quadratic(cls, V: QuadraticStorage, state_radius: float, eps: float):
        """Lipschitz constant (``theta = 1``) of ``x' P x`` on the box ``||x|| <= state_radius``.

        Distances are in the infinity norm. For ``a, b`` in the box,
        ``|a'Pa - b'Pb| = |(a-b)' P (a+b)| <= |P|_2 sqrt(n) |a-b| 2 sqrt(n) R``.
        """
        n = V.n
        L = 2.0 * n * max(V.eig_max, 0.0) * state_radius
        return cls(L=max(L, np.finfo(float).tiny), theta=1.0, valid_radius=eps)


@dataclass(frozen=True)
class SupplyRate:
    """Supply ``u'y - nu u'u - rho y'y + alpha``."""

    nu: float
    rho: float
    alpha: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("generation rate alpha must be non-negative")


def evaluate_storage(V: QuadraticStorage, x) -> float:
    x = _vector("x", x, V.n)
    return float(x @ V.P @ x)


def evaluate_supply(w: SupplyRate, u, y) -> float:
    u = np.asarray(u, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if u.shape != y.shape:
        raise ValueError(f"input and output dimensions differ: {u.size} vs {y.size}")
    return float(u @ y - w.nu * (u @ u) - w.rho * (y @ y) + w.alpha)


def zoh_discretize(sys: LinearSystem, tau: float) -> LinearSystem:
    """Exact sampled map under piecewise-constant input.

    ``A_d = e^{A tau}`` and ``B_d = int_0^tau e^{A s} ds B`` come out of a
    single exponential of the augmented block ``[[A, B], [0, 0]] tau``.
    """
    if sys.is_discrete:
        raise ValueError("system is already discrete-time")
    if not (np.isfinite(tau) and tau > 0):
        raise ValueError("sampling period must be positive and finite")
    n, m = sys.n, sys.m
    M = np.zeros((n + m, n + m))
    M[:n, :n] = sys.A
    M[:n, n:] = sys.B
    E = expm(M * tau)
    return LinearSystem(E[:n, :n], E[:n, n:], sys.C, sys.D, dt=float(tau))


def rk4_step(sys: DynamicsProvider, x, u, h):
    k1 = sys.f(x, u)
    k2 = sys.f(x + 0.5 * h * k1, u)
    k3 = sys.f(x + 0.5 * h * k2, u)
    k4 = sys.f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _input_signal(u, m):
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, 1) if m == 1 else u.reshape(1, -1)
    if u.ndim != 2 or u.shape[1] != m or u.shape[0] < 1:
        raise ValueError(f"input signal must have shape (K+1, {m}), got {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("input signal has non-finite entries")
    return u


def _first_bad_row(X):
    bad = ~np.all(np.isfinite(X), axis=1)
    return int(np.argmax(bad)) if bad.any() else None


def simulate_continuous(sys, x0, u, tau: float, substeps: int = 1,
                        dense: bool = False) -> Trace:
    """Sample a continuous system driven by a zero-order-held input.

    Parameters
    ----------
    sys : LinearSystem or DynamicsProvider
        Continuous-time system.
    x0 : array_like
        Initial state.
    u : array_like, shape (K+1, m)
        Input values; ``u[k]`` is held on ``[k tau, (k+1) tau)``. The last
        row only enters the final output ``y[K]``.
    tau : float
        Sampling period.
    substeps : int
        RK4 steps per period for nonlinear systems; for linear systems only
        the number of dense samples per period.
    dense : bool
        Also record intra-step states.
    """
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    n, m = sys.state_dim, sys.input_dim
    x0 = _vector("x0", x0, n)
    u = _input_signal(u, m)
    K = u.shape[0] - 1

    dense_t = dense_x = None
    if isinstance(sys, LinearSystem):
        if sys.is_discrete:
            raise ValueError("simulate_continuous needs a continuous-time system")
        sd = zoh_discretize(sys, tau)
        X = kernels.lti_rollout(sd.A, sd.B, x0, u[:K])
        bad = _first_bad_row(X)
        if bad is not None:
            raise DivergenceError(bad)
        if dense:
            sub = zoh_discretize(sys, tau / substeps)
            dense_x = np.empty((K * substeps + 1, n))
            dense_x[0] = x0
            for k in range(K):
                seg = kernels.lti_rollout(sub.A, sub.B, X[k], np.repeat(u[k:k + 1], substeps, 0))
                dense_x[k * substeps + 1:(k + 1) * substeps + 1] = seg[1:]
    else:
        h = tau / substeps
        X = np.empty((K + 1, n))
        X[0] = x0
        if dense:
            dense_x = np.empty((K * substeps + 1, n))
            dense_x[0] = x0
        # overflow shows up as non-finite states and is reported as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(K):
                x = X[k]
                for j in range(substeps):
                    x = rk4_step(sys, x, u[k], h)
                    if dense:
                        dense_x[k * substeps + j + 1] = x
                if not np.all(np.isfinite(x)):
                    raise DivergenceError(k + 1)
                X[k + 1] = x
    if dense:
        idx = np.arange(K * substeps + 1)
        dense_t = (idx // substeps) * tau + (idx % substeps) * (tau / substeps)

    Y = np.array([sys.h(X[k], u[k]) for k in range(K + 1)]).reshape(K + 1, m)
    return Trace(tau=float(tau), x=X, u=u, y=Y, dense_t=dense_t, dense_x=dense_x)


def intrastep_output_excess(trace: Trace, sys: LinearSystem, gamma: float) -> float:
    """Largest ``||y(t) - y(k tau)||_2 - tau gamma ||u[k]||_2`` over dense samples.

    Non-positive when the between-samples output drift respects the gain
    bound. Output is evaluated on half-open intervals, holding ``u[k]``.
    """
    if trace.dense_x is None:
        raise ValueError("trace has no dense samples; simulate with dense=True")
    K = trace.steps
    s = (trace.dense_x.shape[0] - 1) // max(K, 1)
    worst = -np.inf
    for k in range(K):
        seg = trace.dense_x[k * s:(k + 1) * s]
        y_seg = seg @ sys.C.T + trace.u[k] @ sys.D.T
        drift = np.linalg.norm(y_seg - y_seg[0], axis=1).max()
        worst = max(worst, drift - trace.tau * gamma * np.linalg.norm(trace.u[k]))
    return float(worst)
