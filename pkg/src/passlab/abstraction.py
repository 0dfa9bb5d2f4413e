"""Lattice quantizers, the symbolic controller model and approximate bisimulation.

The symbolic model of a continuous system lives on the state lattice of
pitch ``eta`` with inputs and outputs on the lattice of pitch ``mu``; its
transitions sample the flow for ``tau`` seconds and snap to the nearest
state lattice point (ties rounded up per coordinate). The model is infinite;
transitions are computed lazily and cached. Finite pieces are cut out with
:func:`build_truncated_ts` and compared with
:func:`check_eps_mu_bisimulation`.
"""
from __future__ import annotations

import csv
import itertools
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .analysis import DeltaIssCertificate
from .systems import LinearSystem, rk4_step, zoh_discretize

# relative slack on metric thresholds so that 9 * 0.1 <= 0.9 holds in floating point
METRIC_RTOL = 1e-9


@dataclass(frozen=True)
class AbstractionParams:
    tau: float
    mu: float
    eta: float
    eps: float

    def __post_init__(self):
        for name in ("tau", "mu", "eta", "eps"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value}")


@dataclass(frozen=True)
class Quantizer:
    """Uniform quantizer onto ``pitch * Z^dim`` with round-half-up ties."""

    pitch: float
    dim: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.pitch) and self.pitch > 0):
            raise ValueError("pitch must be positive and finite")

    def index(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("cannot quantize non-finite values")
        return np.floor(v / self.pitch + 0.5).astype(np.int64)

    def value(self, idx) -> np.ndarray:
        return np.asarray(idx, dtype=np.int64) * self.pitch

    def __call__(self, v) -> np.ndarray:
        return self.value(self.index(v))

    def on_lattice(self, v, rtol: float = 1e-9) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(np.abs(v - self(v)) <= rtol * self.pitch))


def quantize(q: Quantizer, v) -> np.ndarray:
    """Nearest lattice point to ``v`` (error at most ``pitch / 2`` per coordinate)."""
    return q(v)


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    margin: float


def feasibility_check(cert, params: AbstractionParams) -> Feasibility:
    """Sufficient condition for the sampled and symbolic models to be bisimilar.

    ``margin = eps - (beta1(eps, tau) + beta2(mu) + eta / 2)``; any object with
    ``beta1(r, t)`` and ``beta2(r)`` methods is accepted as ``cert``.
    """
    used = float(cert.beta1(params.eps, params.tau)) + float(cert.beta2(params.mu)) \
        + params.eta / 2
    margin = params.eps - used
    return Feasibility(feasible=margin >= 0, margin=margin)


@dataclass(frozen=True)
class MinTau:
    feasible: bool
    tau: float | None


def solve_min_tau(cert: DeltaIssCertificate, eps: float, mu: float, eta: float) -> MinTau:
    """Smallest sampling period meeting the bisimilarity condition, if any."""
    room = eps - cert.b * mu - eta / 2
    if room <= 0:
        return MinTau(False, None)
    tau = max(math.log(cert.c * eps / room) / cert.a, 0.0)
    return MinTau(True, tau)


class SymbolicModel:
    """Lazy deterministic symbolic model of a continuous-time system.

    Lattice points are addressed by integer index vectors: state ``p``
    stands for ``p * eta`` and input ``u`` for ``u * mu``.

    Parameters
    ----------
    system : LinearSystem or DynamicsProvider
        Continuous-time dynamics.
    params : AbstractionParams
    substeps : int
        RK4 steps per period for nonlinear dynamics (ignored for linear ones).
    """

    def __init__(self, system, params: AbstractionParams, substeps: int = 64):
        self.system = system
        self.params = params
        self.substeps = substeps
        self.state_q = Quantizer(params.eta, system.state_dim)
        self.io_q = Quantizer(params.mu, system.input_dim)
        self._sampled = None
        if isinstance(system, LinearSystem):
            self._sampled = zoh_discretize(system, params.tau)
        self._cache: dict[tuple, tuple] = {}
        self._lock = threading.Lock()

    @property
    def n(self) -> int:
        return self.system.state_dim

    @property
    def m(self) -> int:
        return self.system.input_dim

    @property
    def sampled(self) -> LinearSystem | None:
        """Exact sampled linear map, when the underlying system is linear."""
        return self._sampled

    def flow(self, x, u) -> np.ndarray:
        """State reached after one period from ``x`` under constant input ``u``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self._sampled is not None:
            return x @ self._sampled.A.T + u @ self._sampled.B.T
        h = self.params.tau / self.substeps
        for _ in range(self.substeps):
            x = rk4_step(self.system, x, u, h)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("flow diverged within one sampling period")
        return x

    def successor(self, p, u) -> tuple:
        """Index of the successor of state index ``p`` under input index ``u``."""
        key = (tuple(int(v) for v in np.ravel(p)), tuple(int(v) for v in np.ravel(u)))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        x_next = self.flow(np.array(key[0]) * self.params.eta, np.array(key[1]) * self.params.mu)
        q = tuple(int(v) for v in self.state_q.index(x_next))
        with self._lock:
            # racing writers compute the same value; keep the first
            return self._cache.setdefault(key, q)

    def output(self, x, u) -> tuple:
        """Index of the quantized output at state index ``x`` and input index ``u``."""
        xv = np.asarray(x, dtype=float).reshape(-1) * self.params.eta
        uv = np.asarray(u, dtype=float).reshape(-1) * self.params.mu
        return tuple(int(v) for v in self.io_q.index(self.system.h(xv, uv)))

    def successors(self, P, U) -> np.ndarray:
        """Vectorized successors: indices of shape ``(len(P), len(U), n)``.

        Bypasses the cache; used to build finite truncations.
        """
        P = np.asarray(P, dtype=np.int64).reshape(-1, self.n)
        U = np.asarray(U, dtype=np.int64).reshape(-1, self.m)
        if self._sampled is None:
            out = np.empty((len(P), len(U), self.n), dtype=np.int64)
            for i, j in itertools.product(range(len(P)), range(len(U))):
                out[i, j] = self.successor(P[i], U[j])
            return out
        drift = (P * self.params.eta) @ self._sampled.A.T
        push = (U * self.params.mu) @ self._sampled.B.T
        return self.state_q.index(drift[:, None, :] + push[None, :, :])

    def outputs(self, P, U) -> np.ndarray:
        P = np.asarray(P, dtype=np.int64).reshape(-1, self.n)
        U = np.asarray(U, dtype=np.int64).reshape(-1, self.m)
        if isinstance(self.system, LinearSystem):
            y = ((P * self.params.eta) @ self.system.C.T)[:, None, :] \
                + ((U * self.params.mu) @ self.system.D.T)[None, :, :]
            return self.io_q.index(y)
        out = np.empty((len(P), len(U), self.m), dtype=np.int64)
        for i, j in itertools.product(range(len(P)), range(len(U))):
            out[i, j] = self.output(P[i], U[j])
        return out


def symbolic_successor(sm: SymbolicModel, p, u) -> tuple:
    return sm.successor(p, u)


def symbolic_output(sm: SymbolicModel, x, u) -> tuple:
    return sm.output(x, u)


@dataclass(eq=False)
class FiniteTransitionSystem:
    """Finite metric transition system with embedded states, labels and outputs.

    Transitions are stored per state in CSR form, sorted by label. A
    destination of ``-1`` marks a transition leaving the modelled domain.
    """

    state_embed: np.ndarray
    label_embed: np.ndarray
    trans_ptr: np.ndarray
    trans_label: np.ndarray
    trans_dst: np.ndarray
    output_embed: np.ndarray
    trans_output: np.ndarray
    dense: bool = field(default=False)

    def __post_init__(self):
        n_states, n_labels = len(self.state_embed), len(self.label_embed)
        if self.trans_ptr.shape != (n_states + 1,):
            raise ValueError("trans_ptr must have one entry per state plus one")
        if len(self.trans_label) and (self.trans_label.min() < 0
                                      or self.trans_label.max() >= n_labels):
            raise ValueError("transition references an unknown label")
        if len(self.trans_dst) and (self.trans_dst.min() < -1
                                    or self.trans_dst.max() >= n_states):
            raise ValueError("transition references an unknown state")

    @classmethod
    def from_table(cls, state_embed, label_embed, succ, outputs=None):
        """Deterministic system with one transition per (state, label).

        ``succ[q, l]`` is the destination index (``-1`` = out of domain) and
        ``outputs[q, l]`` the output vector.
        """
        state_embed = np.asarray(state_embed, dtype=float).reshape(len(state_embed), -1)
        label_embed = np.asarray(label_embed, dtype=float).reshape(len(label_embed), -1)
        succ = np.asarray(succ, dtype=np.int64)
        N, M = succ.shape
        ptr = np.arange(N + 1, dtype=np.int64) * M
        labels = np.tile(np.arange(M, dtype=np.int64), N)
        if outputs is None:
            outputs = np.zeros((N, M, 1))
        outputs = np.asarray(outputs, dtype=float).reshape(N * M, -1)
        out_embed, out_idx = np.unique(outputs, axis=0, return_inverse=True)
        return cls(state_embed, label_embed, ptr, labels, succ.reshape(-1), out_embed,
                   out_idx.reshape(-1).astype(np.int64), dense=True)

    @classmethod
    def from_edges(cls, state_embed, label_embed, edges, outputs=None):
        """System from ``(state, label, successor)`` triples (nondeterminism allowed)."""
        state_embed = np.asarray(state_embed, dtype=float).reshape(len(state_embed), -1)
        label_embed = np.asarray(label_embed, dtype=float).reshape(len(label_embed), -1)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
        order = np.lexsort((edges[:, 2], edges[:, 1], edges[:, 0]))
        edges = edges[order]
        counts = np.bincount(edges[:, 0], minlength=len(state_embed))
        ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        if outputs is None:
            outputs = np.zeros((len(edges), 1))
        else:
            outputs = np.asarray(outputs, dtype=float).reshape(len(edges), -1)[order]
        out_embed, out_idx = np.unique(outputs, axis=0, return_inverse=True)
        return cls(state_embed, label_embed, ptr, edges[:, 1].copy(), edges[:, 2].copy(),
                   out_embed, out_idx.reshape(-1).astype(np.int64), dense=False)

    @property
    def n_states(self) -> int:
        return len(self.state_embed)

    @property
    def n_labels(self) -> int:
        return len(self.label_embed)

    @property
    def n_transitions(self) -> int:
        return len(self.trans_dst)

    def transitions(self):
        """Arrays ``(state, label, successor, output)`` of every transition."""
        src = np.repeat(np.arange(self.n_states, dtype=np.int64), np.diff(self.trans_ptr))
        return src, self.trans_label, self.trans_dst, self.trans_output

    def write_csv(self, path):
        """Edge list ``state,label,successor,output`` (successor -1 = out of domain)."""
        src, lab, dst, out = self.transitions()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["state", "label", "successor", "output"])
            writer.writerows(zip(src.tolist(), lab.tolist(), dst.tolist(), out.tolist()))

    def _csr(self):
        return (self.trans_ptr, self.trans_label, self.trans_dst, self.dense)


def _box_indices(lo, hi, pitch, name):
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    i_lo = np.rint(lo / pitch).astype(np.int64)
    i_hi = np.rint(hi / pitch).astype(np.int64)
    if not (np.allclose(i_lo * pitch, lo, atol=1e-9 * pitch)
            and np.allclose(i_hi * pitch, hi, atol=1e-9 * pitch)):
        raise ValueError(f"{name} box is not aligned to the lattice of pitch {pitch}")
    if np.any(i_hi < i_lo):
        raise ValueError(f"{name} box is empty")
    return i_lo, i_hi


def _grid(i_lo, i_hi):
    axes = [np.arange(a, b + 1, dtype=np.int64) for a, b in zip(i_lo, i_hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=1)


def _locate(idx, i_lo, i_hi):
    """Row-major position of lattice indices inside a box, -1 when outside."""
    shape = i_hi - i_lo + 1
    rel = idx - i_lo
    inside = np.all((rel >= 0) & (rel < shape), axis=-1)
    strides = np.concatenate([np.cumprod(shape[::-1])[::-1][1:], [1]])
    flat = (rel * strides).sum(axis=-1)
    return np.where(inside, flat, -1)


def build_truncated_ts(sm: SymbolicModel, state_box, input_box,
                       max_states: int = 10**7) -> FiniteTransitionSystem:
    """Finite piece of the symbolic model on lattice-aligned boxes.

    ``state_box`` and ``input_box`` are ``(lower, upper)`` corner pairs in
    real coordinates. Successors outside the state box become ``-1``.
    """
    s_lo, s_hi = _box_indices(*state_box, sm.params.eta, "state")
    u_lo, u_hi = _box_indices(*input_box, sm.params.mu, "input")
    if s_lo.size != sm.n or u_lo.size != sm.m:
        raise ValueError("box dimensions do not match the system")
    n_states = int(np.prod(s_hi - s_lo + 1))
    if n_states > max_states:
        raise ValueError(f"state box holds {n_states} lattice points (limit {max_states})")
    P = _grid(s_lo, s_hi)
    U = _grid(u_lo, u_hi)
    succ = _locate(sm.successors(P, U), s_lo, s_hi)
    outputs = sm.outputs(P, U) * sm.params.mu
    return FiniteTransitionSystem.from_table(P * sm.params.eta, U * sm.params.mu, succ, outputs)


def sampled_reference_ts(system: LinearSystem, params: AbstractionParams, state_box, input_box,
                         refine: int = 2, max_states: int = 10**7) -> FiniteTransitionSystem:
    """Finite stand-in for the sampled system on a lattice ``refine`` times finer.

    States are points of pitch ``eta / refine`` in the box, labels are the
    input lattice points, successors are exact one-period flows snapped to the
    fine lattice, and outputs are the exact (unquantized) outputs.
    """
    if refine < 1:
        raise ValueError("refine must be a positive integer")
    fine = params.eta / refine
    sd = zoh_discretize(system, params.tau)
    s_lo, s_hi = _box_indices(*state_box, fine, "state")
    u_lo, u_hi = _box_indices(*input_box, params.mu, "input")
    n_states = int(np.prod(s_hi - s_lo + 1))
    if n_states > max_states:
        raise ValueError(f"state box holds {n_states} lattice points (limit {max_states})")
    X = _grid(s_lo, s_hi) * fine
    U = _grid(u_lo, u_hi) * params.mu
    nxt = (X @ sd.A.T)[:, None, :] + (U @ sd.B.T)[None, :, :]
    succ = _locate(np.floor(nxt / fine + 0.5).astype(np.int64), s_lo, s_hi)
    outputs = (X @ system.C.T)[:, None, :] + (U @ system.D.T)[None, :, :]
    return FiniteTransitionSystem.from_table(X, U, succ, outputs)


@dataclass(eq=False)
class BisimRelation:
    """Greatest approximate bisimulation between two finite systems.

    ``pairs`` has one ``(q1, q2)`` row per related pair. ``bisimilar`` is
    true when every state of either system has a partner.
    """

    pairs: np.ndarray
    eps: float
    mu: float
    bisimilar: bool
    covered_1: np.ndarray = field(repr=False)
    covered_2: np.ndarray = field(repr=False)
    candidates: int = 0
    sweeps: int = 0

    def __len__(self):
        return len(self.pairs)

    def as_set(self) -> set:
        return set(map(tuple, self.pairs.tolist()))

    def contains(self, q1: int, q2: int) -> bool:
        hit = (self.pairs[:, 0] == q1) & (self.pairs[:, 1] == q2)
        return bool(hit.any())


def candidate_pairs(T1: FiniteTransitionSystem, T2: FiniteTransitionSystem, eps: float):
    """All ``(q1, q2)`` with ``||x1 - x2||_inf <= eps``, sorted, as CSR arrays."""
    if T1.state_embed.shape[1] != T2.state_embed.shape[1]:
        raise ValueError("state embeddings have different dimensions")
    r = eps * (1 + METRIC_RTOL)
    tree1 = cKDTree(T1.state_embed)
    tree2 = cKDTree(T2.state_embed)
    coo = tree1.sparse_distance_matrix(tree2, r, p=np.inf, output_type="ndarray")
    i = coo["i"].astype(np.int64)
    j = coo["j"].astype(np.int64)
    order = np.lexsort((j, i))
    i, j = i[order], j[order]
    ptr = np.concatenate([[0], np.cumsum(np.bincount(i, minlength=T1.n_states))])
    return ptr.astype(np.int64), j


def label_neighbours(labels: np.ndarray, mu: float):
    """CSR lists of labels within ``mu`` (infinity norm), nearest first."""
    tree = cKDTree(labels)
    r = mu * (1 + METRIC_RTOL)
    lists = tree.query_ball_point(labels, r, p=np.inf)
    ptr = [0]
    flat = []
    for l, nbrs in enumerate(lists):
        nbrs = np.asarray(nbrs, dtype=np.int64)
        dist = np.abs(labels[nbrs] - labels[l]).max(axis=1)
        nbrs = nbrs[np.lexsort((nbrs, dist))]
        flat.extend(nbrs.tolist())
        ptr.append(len(flat))
    return np.asarray(ptr, dtype=np.int64), np.asarray(flat, dtype=np.int64)


def check_eps_mu_bisimulation(T1: FiniteTransitionSystem, T2: FiniteTransitionSystem,
                              eps: float, mu: float, impl=None) -> BisimRelation:
    """Greatest ``(eps, mu)``-approximate bisimulation between ``T1`` and ``T2``.

    Starts from every pair of states within ``eps`` and prunes pairs for
    which some move of one system cannot be matched by the other with a label
    within ``mu`` while landing in a still-related pair. Both systems leaving
    the modelled domain together counts as a match; only one leaving does not.
    """
    if T1.label_embed.shape != T2.label_embed.shape \
            or not np.array_equal(T1.label_embed, T2.label_embed):
        raise ValueError("both systems must share the same label set")
    ptr, q2 = candidate_pairs(T1, T2, eps)
    alive = np.ones(len(q2), dtype=np.uint8)
    nbr_ptr, nbr_lab = label_neighbours(T1.label_embed, mu)
    sweeps, _ = kernels.refine_relation(ptr, q2, alive, T1._csr(), T2._csr(), nbr_ptr, nbr_lab,
                                        impl=impl)
    keep = alive.astype(bool)
    q1 = np.repeat(np.arange(T1.n_states, dtype=np.int64), np.diff(ptr))
    pairs = np.stack([q1[keep], q2[keep]], axis=1)
    covered_1 = np.zeros(T1.n_states, dtype=bool)
    covered_2 = np.zeros(T2.n_states, dtype=bool)
    covered_1[pairs[:, 0]] = True
    covered_2[pairs[:, 1]] = True
    return BisimRelation(pairs=pairs, eps=eps, mu=mu,
                         bisimilar=bool(covered_1.all() and covered_2.all()),
                         covered_1=covered_1, covered_2=covered_2,
                         candidates=len(q2), sweeps=sweeps)


@dataclass
class BisimTraceReport:
    holds: bool
    max_deviation: float
    trials: int
    horizon: int
    counterexample: dict | None = None


def empirical_bisim_trace_check(system: LinearSystem, sm: SymbolicModel, eps: float,
                                horizon: int = 100, trials: int = 500, seed: int = 0,
                                input_scale: float = 5.0) -> BisimTraceReport:
    """Spot-check that sampled and symbolic trajectories stay ``eps``-close.

    Each trial draws ``x0`` and a lattice state within ``eps`` of it, drives
    the sampled system with random inputs ``u[k]`` and the symbolic model
    with ``quantize_mu(u[k])``, and records the infinity-norm deviation.
    """
    rng = np.random.default_rng(seed)
    sd = zoh_discretize(system, sm.params.tau)
    n, m = system.state_dim, system.input_dim
    eta = sm.params.eta
    worst = 0.0
    for trial in range(trials):
        x = rng.uniform(-input_scale, input_scale, size=n)
        offset = rng.uniform(-eps, eps, size=n)
        # lattice point within eps of x: shrink the offset onto the lattice
        xh_idx = sm.state_q.index(x + offset)
        if np.abs(xh_idx * eta - x).max() > eps * (1 + METRIC_RTOL):
            xh_idx = sm.state_q.index(x)
        xs = [x.copy()]
        xhs = [xh_idx * eta]
        us = rng.uniform(-input_scale, input_scale, size=(horizon, m))
        for k in range(horizon + 1):
            dev = float(np.abs(x - xh_idx * eta).max())
            worst = max(worst, dev)
            if dev > eps * (1 + METRIC_RTOL):
                return BisimTraceReport(False, worst, trial + 1, horizon, counterexample={
                    "trial": trial, "step": k, "x": np.array(xs), "x_hat": np.array(xhs),
                    "u": us[:k], "deviation": dev})
            if k == horizon:
                break
            u_idx = sm.io_q.index(us[k])
            x = sd.A @ x + sd.B @ us[k]
            xh_idx = np.asarray(sm.successor(xh_idx, u_idx), dtype=np.int64)
            xs.append(x.copy())
            xhs.append(xh_idx * eta)
    return BisimTraceReport(True, worst, trials, horizon)
