"""Feedback of a sampled plant with a symbolic controller.

Index composition for the interconnection, the admissible region of
closed-loop indices, a step-exact simulator of the quantized loop, a
monitor for the closed-loop dissipation inequality and the ultimate bound
implied by quasi-passivity plus detectability.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .abstraction import AbstractionParams, SymbolicModel
from .analysis import CertificateError, DetectabilityCertificate
from .degradation import FreeParams, degrade_sampled, degrade_symbolic
from .systems import (
    DivergenceError,
    LinearSystem,
    QuadraticStorage,
    StorageRegularity,
    SupplyRate,
    rk4_step,
    zoh_discretize,
)

PSD_TOL = 1e-9
SWEEP_POINTS = 200


@dataclass(frozen=True)
class ClosedLoopIndices:
    """Plant-side sampled indices and controller-side symbolic indices.

    ``*_hat`` are the symbolic-model values before the correction for the
    quantized controller input, ``*_bar`` after it. Fields not computed
    (for instance when built from printed values) are ``nan``.
    """

    nu1_bar: float
    rho1_bar: float
    nu2_bar: float
    rho2_bar: float
    alpha2_bar: float
    nu2_hat: float = math.nan
    rho2_hat: float = math.nan
    alpha_hat: float = math.nan
    tau: float = math.nan
    free_params: FreeParams | None = None

    @classmethod
    def from_values(cls, nu1_bar, rho1_bar, nu2_bar, rho2_bar, alpha2_bar=0.0, tau=math.nan):
        return cls(nu1_bar=nu1_bar, rho1_bar=rho1_bar, nu2_bar=nu2_bar, rho2_bar=rho2_bar,
                   alpha2_bar=alpha2_bar, tau=tau)


def input_quantization_correction(nu2_hat: float, rho2_hat: float, alpha_hat: float,
                                  tau: float, mu: float, m: int, fp: FreeParams):
    """Indices of the controller with respect to its unquantized input.

    The quantization error ``|u_hat - u| <= mu / 2`` is absorbed with the
    weights ``l1`` and ``l2``.
    """
    nu_bar = nu2_hat * (1 - 1 / fp.l2)
    rho_bar = rho2_hat - 1 / (4 * fp.l1)
    alpha_bar = alpha_hat + tau * (m * mu ** 2 / 4) * (fp.l1 + nu2_hat * (fp.l2 + 1))
    return nu_bar, rho_bar, alpha_bar


def compose_indices(plant, controller, params: AbstractionParams, m: int,
                    reg: StorageRegularity, fp: FreeParams) -> ClosedLoopIndices:
    """Closed-loop index data.

    Parameters
    ----------
    plant : tuple
        ``(nu1, rho1, gamma1)`` of the continuous plant.
    controller : tuple
        ``(nu2, rho2, gamma2)`` of the continuous controller.
    params : AbstractionParams
        Shared sampling period and controller lattices.
    m : int
        Signal dimension on each side of the loop.
    reg : StorageRegularity
        Regularity of the controller storage.
    fp : FreeParams
    """
    nu1, rho1, gamma1 = plant
    nu2, rho2, gamma2 = controller
    side1 = degrade_sampled(nu1, rho1, gamma1, params.tau, fp.lambda1)
    side2 = degrade_symbolic(nu2, rho2, gamma2, params, m, reg, fp)
    nu_bar, rho_bar, alpha_bar = input_quantization_correction(
        side2.nu, side2.rho, side2.alpha, params.tau, params.mu, m, fp)
    return ClosedLoopIndices(nu1_bar=side1.nu, rho1_bar=side1.rho, nu2_bar=nu_bar,
                             rho2_bar=rho_bar, alpha2_bar=alpha_bar, nu2_hat=side2.nu,
                             rho2_hat=side2.rho, alpha_hat=side2.alpha, tau=params.tau,
                             free_params=fp)


def coupling_matrices(idx: ClosedLoopIndices, nu_c: float, rho_c: float):
    """The two 2x2 blocks whose semidefiniteness certifies ``(nu_c, rho_c)``."""
    n1, r1, n2, r2 = idx.nu1_bar, idx.rho1_bar, idx.nu2_bar, idx.rho2_bar
    M1 = np.array([[n1 - nu_c, -n1], [-n1, r2 + n1 - rho_c]])
    M2 = np.array([[n2 - nu_c, n2], [n2, r1 + n2 - rho_c]])
    return M1, M2


@dataclass(frozen=True)
class FeasibleIndices:
    """Closed-loop indices with the smallest eigenvalue of each coupling block."""

    nu_c: float
    rho_c: float
    rho_c_max: float
    psd_margins: tuple

    @property
    def feasible(self) -> bool:
        return min(self.psd_margins) >= -PSD_TOL


def max_rho_c(idx: ClosedLoopIndices, nu_c: float) -> float:
    """Largest admissible ``rho_c`` for ``nu_c``; ``-inf`` when ``nu_c`` exceeds both plant and controller ``nu``."""
    lim = min(idx.nu1_bar, idx.nu2_bar)
    if nu_c == idx.nu1_bar or nu_c == idx.nu2_bar:
        raise ValueError("nu_c equals a side index; the admissible rho_c bound is degenerate")
    if nu_c > lim:
        return -math.inf
    b1 = idx.rho2_bar - nu_c * idx.nu1_bar / (idx.nu1_bar - nu_c)
    b2 = idx.rho1_bar - nu_c * idx.nu2_bar / (idx.nu2_bar - nu_c)
    return min(b1, b2)


def check_feasible(idx: ClosedLoopIndices, nu_c: float, rho_c: float | None = None) -> FeasibleIndices:
    """Evaluate a proposal; ``rho_c`` defaults to the largest admissible value."""
    rmax = max_rho_c(idx, nu_c)
    if rho_c is None:
        rho_c = rmax
    if not np.isfinite(rho_c):
        margins = (-math.inf, -math.inf)
    else:
        M1, M2 = coupling_matrices(idx, nu_c, rho_c)
        margins = (float(np.linalg.eigvalsh(M1)[0]), float(np.linalg.eigvalsh(M2)[0]))
    return FeasibleIndices(nu_c=float(nu_c), rho_c=float(rho_c), rho_c_max=float(rmax),
                           psd_margins=margins)


def feasible_nu_rho(idx: ClosedLoopIndices, nu_c: float | None = None,
                    rho_c: float | None = None, points: int = SWEEP_POINTS):
    """Admissible closed-loop indices.

    With ``nu_c`` given, returns one :class:`FeasibleIndices`. Otherwise
    sweeps ``nu_c`` from ``-|2 min(nu1, nu2)| - 1`` up to just below
    ``min(nu1, nu2)`` and returns the list of boundary points.
    """
    if nu_c is not None:
        return check_feasible(idx, nu_c, rho_c)
    lim = min(idx.nu1_bar, idx.nu2_bar)
    grid = np.linspace(-abs(2 * lim) - 1, lim - 1e-6, points)
    return [check_feasible(idx, float(v)) for v in grid]


@dataclass(frozen=True)
class DecayMargin:
    margin: float
    plant_output_side: float
    controller_output_side: float
    alpha2_bar: float


def zero_input_decay_margin(idx: ClosedLoopIndices) -> DecayMargin:
    """``min(nu2 + rho1, nu1 + rho2)``: positive means the unforced loop dissipates."""
    a = idx.nu2_bar + idx.rho1_bar
    b = idx.nu1_bar + idx.rho2_bar
    return DecayMargin(margin=min(a, b), plant_output_side=a, controller_output_side=b,
                       alpha2_bar=idx.alpha2_bar)


def _signal(w, K, m, name):
    if w is None:
        return np.zeros((K + 1, m))
    w = np.asarray(w, dtype=float)
    if w.ndim == 0 or w.size == m and w.ndim == 1:
        return np.tile(w.reshape(1, m), (K + 1, 1))
    w = w.reshape(len(w), -1)
    if w.shape != (K + 1, m):
        raise ValueError(f"{name} must have shape ({K + 1}, {m}), got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{name} has non-finite entries")
    return w


@dataclass
class FeedbackConfig:
    """Plant, symbolic controller, exogenous inputs and initial conditions.

    Interconnection: ``u1 = w1 - y2`` and ``u2 = w2 + y1``. The plant must
    be strictly proper so that the loop has no algebraic cycle.
    """

    plant: object
    controller: SymbolicModel
    x1_0: np.ndarray
    xc_0: np.ndarray
    K: int
    w1: np.ndarray | None = None
    w2: np.ndarray | None = None
    substeps: int = 64

    def __post_init__(self):
        p, c = self.plant, self.controller
        if p.input_dim != c.m:
            raise ValueError("plant and controller signal dimensions differ")
        if isinstance(p, LinearSystem):
            if p.is_discrete:
                raise ValueError("plant must be continuous-time")
            if np.any(p.D != 0):
                raise ValueError("plant feedthrough must be zero for a well-posed loop")
        if self.K < 0:
            raise ValueError("horizon must be non-negative")
        self.x1_0 = np.asarray(self.x1_0, dtype=float).reshape(p.state_dim)
        self.xc_0 = np.asarray(self.xc_0, dtype=float).reshape(c.n)
        if not c.state_q.on_lattice(self.xc_0):
            raise ValueError("controller initial state must lie on the state lattice")
        self.w1 = _signal(self.w1, self.K, c.m, "w1")
        self.w2 = _signal(self.w2, self.K, c.m, "w2")


@dataclass(eq=False)
class ClosedLoopTrace:
    """Signals of the loop for ``k = 0..K``.

    ``uc`` and ``yc`` are the controller's quantized input and output, and
    ``u2`` is the unquantized controller input before the quantizer.
    """

    tau: float
    x1: np.ndarray
    u1: np.ndarray
    y1: np.ndarray
    xc: np.ndarray
    uc: np.ndarray
    yc: np.ndarray
    u2: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    mode: str = "symbolic"
    V: np.ndarray | None = field(default=None, repr=False)
    residual: np.ndarray | None = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return self.x1.shape[0] - 1

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.tau

    @property
    def w(self) -> np.ndarray:
        return np.hstack([self.w1, self.w2])

    @property
    def y(self) -> np.ndarray:
        return np.hstack([self.y1, self.yc])

    def quantization_error(self) -> np.ndarray:
        """``|uc[k] - u2[k]|_inf`` per step."""
        return np.abs(self.uc - self.u2).max(axis=1)

    def write_csv(self, path):
        K = self.steps
        V = self.V if self.V is not None else np.full(K + 1, np.nan)
        res = np.full(K + 1, np.nan)
        if self.residual is not None:
            res[:len(self.residual)] = self.residual
        groups = [("x1", self.x1), ("u1", self.u1), ("y1", self.y1), ("xc", self.xc),
                  ("uc", self.uc), ("yc", self.yc)]
        header = ["k", "t"]
        for name, arr in groups:
            header += [f"{name}_{i}" for i in range(arr.shape[1])]
        header += ["V", "residual"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(K + 1):
                row = [str(k), "%.17g" % (k * self.tau)]
                for _, arr in groups:
                    row += ["%.17g" % v for v in arr[k]]
                row += ["%.17g" % V[k], "%.17g" % res[k]]
                writer.writerow(row)


class _Plant:
    def __init__(self, sys, tau, substeps):
        self.sys = sys
        self.tau = tau
        self.substeps = substeps
        self.sd = zoh_discretize(sys, tau) if isinstance(sys, LinearSystem) else None

    def output(self, x):
        return np.asarray(self.sys.h(x, np.zeros(self.sys.input_dim)), dtype=float).reshape(-1)

    def step(self, x, u):
        if self.sd is not None:
            return self.sd.A @ x + self.sd.B @ u
        h = self.tau / self.substeps
        for _ in range(self.substeps):
            x = rk4_step(self.sys, x, u, h)
        return x


def simulate_closed_loop(cfg: FeedbackConfig, mode: str = "symbolic",
                         storages: tuple | None = None) -> ClosedLoopTrace:
    """Run the sampled feedback loop for ``cfg.K`` steps.

    Per step: plant output, controller input and its quantization,
    controller output, plant input, then both state updates. In
    ``"sampled"`` mode the controller runs on its exact sampled map without
    any quantization (the limit of vanishing lattice pitches).

    ``storages = (V1, V2)`` fills the ``V`` column with ``V1(x1) + V2(xc)``.
    """
    if mode not in ("symbolic", "sampled"):
        raise ValueError("mode must be 'symbolic' or 'sampled'")
    sm = cfg.controller
    tau, mu, eta = sm.params.tau, sm.params.mu, sm.params.eta
    plant = _Plant(cfg.plant, tau, cfg.substeps)
    K, m = cfg.K, sm.m
    n1, n2 = cfg.plant.state_dim, sm.n
    x1 = np.empty((K + 1, n1))
    xc = np.empty((K + 1, n2))
    sig = {name: np.empty((K + 1, m)) for name in ("u1", "y1", "uc", "yc", "u2")}
    x1[0] = cfg.x1_0
    xc[0] = cfg.xc_0
    p_idx = sm.state_q.index(cfg.xc_0)
    for k in range(K + 1):
        y1 = plant.output(x1[k])
        u2 = cfg.w2[k] + y1
        if mode == "symbolic":
            u_idx = sm.io_q.index(u2)
            uc = u_idx * mu
            yc = np.asarray(sm.output(p_idx, u_idx), dtype=float) * mu
        else:
            uc = u2
            yc = np.asarray(sm.system.h(xc[k], uc), dtype=float).reshape(-1)
        u1 = cfg.w1[k] - yc
        for name, val in (("u1", u1), ("y1", y1), ("uc", uc), ("yc", yc), ("u2", u2)):
            sig[name][k] = val
        if k == K:
            break
        x1[k + 1] = plant.step(x1[k], u1)
        if mode == "symbolic":
            p_idx = np.asarray(sm.successor(p_idx, u_idx), dtype=np.int64)
            xc[k + 1] = p_idx * eta
        else:
            xc[k + 1] = sm.flow(xc[k], uc)
        if not (np.all(np.isfinite(x1[k + 1])) and np.all(np.isfinite(xc[k + 1]))):
            raise DivergenceError(k + 1)
    trace = ClosedLoopTrace(tau=tau, x1=x1, xc=xc, w1=cfg.w1, w2=cfg.w2, mode=mode, **sig)
    if storages is not None:
        V1, V2 = storages
        trace.V = np.einsum("ki,ij,kj->k", x1, V1.P, x1) + np.einsum("ki,ij,kj->k", xc, V2.P, xc)
    return trace


@dataclass(frozen=True)
class ResidualReport:
    worst: float
    series: np.ndarray = field(repr=False)

    @property
    def holds(self) -> bool:
        return self.worst <= 0


def dissipation_residual_check(trace: ClosedLoopTrace, idx: ClosedLoopIndices,
                               V1: QuadraticStorage, V2: QuadraticStorage,
                               nu_c: float, rho_c: float) -> ResidualReport:
    """Per-step excess of storage growth over the closed-loop supply.

    ``residual[k] = (V[k+1] - V[k]) / tau - (w'y - nu_c w'w - rho_c y'y + alpha / tau)``
    with ``w = (w1, w2)``, ``y = (y1, yc)`` and ``V = V1(x1) + V2(xc)``.
    Non-positive everywhere when the loop meets the composed certificate.
    The series is also stored on ``trace.residual``.
    """
    if trace.x1.shape[1] != V1.n or trace.xc.shape[1] != V2.n:
        raise ValueError("storage dimensions do not match the trace")
    if not (len(trace.w1) == len(trace.x1) == len(trace.xc) == len(trace.yc)):
        raise ValueError("trace signals have different lengths")
    tau = trace.tau
    V = np.einsum("ki,ij,kj->k", trace.x1, V1.P, trace.x1) \
        + np.einsum("ki,ij,kj->k", trace.xc, V2.P, trace.xc)
    w, y = trace.w[:-1], trace.y[:-1]
    supply = np.einsum("ki,ki->k", w, y) - nu_c * np.einsum("ki,ki->k", w, w) \
        - rho_c * np.einsum("ki,ki->k", y, y) + idx.alpha2_bar / tau
    series = np.diff(V) / tau - supply
    trace.V = V
    trace.residual = series
    worst = float(series.max()) if series.size else -math.inf
    return ResidualReport(worst=worst, series=series)


@dataclass(frozen=True)
class UltimateBoundResult:
    """Radius ``D`` of the ball the state eventually stays in, with its ingredients."""

    B1: float
    B2: float
    lam: float
    r: float
    v: float
    D: float
    window: int
    kappa: float
    detectability_inputs: str
    nu: float
    rho: float
    alpha: float


def ultimate_bound(supply: SupplyRate, det: DetectabilityCertificate, V: QuadraticStorage,
                   B1: float, B2: float, window: int | None = None) -> UltimateBoundResult:
    """Ultimate bound for a quasi-passive, detectable discrete system.

    Parameters
    ----------
    supply : SupplyRate
        Certified indices with ``rho > 0`` and ``nu > 0``; ``nu = inf``
        encodes zero input (then ``B1`` must be 0).
    det : DetectabilityCertificate
        Detectability over ``det.N0 + 1`` consecutive outputs; it must cover
        the inputs the system actually receives.
    V : QuadraticStorage
        Storage with ``lambda_min(P) > 0``.
    B1, B2 : float
        Bounds on ``|u[k]|_2`` and ``|x[0]|_2``.
    window : int, optional
        Number of steps in the energy balance; defaults to ``det.N0 + 1``,
        the number of outputs the detectability bound covers.
    """
    nu, rho, alpha = supply.nu, supply.rho, supply.alpha
    if not (rho > 0 and nu > 0):
        raise CertificateError("ultimate bound needs positive nu and rho")
    if not (det.valid and det.kappa > 0):
        raise CertificateError("detectability constant must be positive")
    if not V.eig_min > 0:
        raise CertificateError("storage must be positive definite")
    if B1 < 0 or B2 < 0:
        raise ValueError("bounds must be non-negative")
    N = det.N0 + 1 if window is None else int(window)
    if N < 1:
        raise ValueError("window must be at least 1")
    if math.isinf(nu):
        if B1 != 0:
            raise ValueError("nu = inf describes zero input; B1 must be 0")
        lam = math.inf
        gen = N * alpha
        decay = rho * det.kappa
    else:
        lam = 1 / (2 * rho) + 2 * nu
        gen = N * (B1 ** 2 / (4 * rho) + alpha)
        decay = 4 * rho ** 2 * nu * det.kappa / (4 * rho * nu + 1)
    r = max(B2, math.sqrt(gen / decay))
    v = V.eig_max * r ** 2
    D = math.sqrt((v + gen) / V.eig_min)
    return UltimateBoundResult(B1=B1, B2=B2, lam=lam, r=r, v=v, D=D, window=N, kappa=det.kappa,
                               detectability_inputs=det.inputs,
                               nu=nu, rho=rho, alpha=alpha)


def closed_loop_aggregate(plant_d: LinearSystem, ctrl_d: LinearSystem) -> LinearSystem:
    """Discrete loop from ``w = (w1, w2)`` to ``y = (y1, y2)``, state ``(x1, xc)``.

    Both systems share a sampling period; the plant must be strictly proper.
    """
    if not (plant_d.is_discrete and ctrl_d.is_discrete):
        raise ValueError("both systems must be discrete-time")
    if np.any(plant_d.D != 0):
        raise ValueError("plant feedthrough must be zero")
    A1, B1, C1 = plant_d.A, plant_d.B, plant_d.C
    A2, B2, C2, D2 = ctrl_d.A, ctrl_d.B, ctrl_d.C, ctrl_d.D
    n2, m = ctrl_d.n, plant_d.m
    A = np.block([[A1 - B1 @ D2 @ C1, -B1 @ C2], [B2 @ C1, A2]])
    B = np.block([[B1, -B1 @ D2], [np.zeros((n2, m)), B2]])
    C = np.block([[C1, np.zeros((m, n2))], [D2 @ C1, C2]])
    D = np.block([[np.zeros((m, m)), np.zeros((m, m))], [np.zeros((m, m)), D2]])
    return LinearSystem(A, B, C, D, dt=plant_d.dt)
