"""Passivity-index loss from sampling and quantization.

Sampling a passive system with period ``tau`` behind a zero-order hold
costs input and output passivity; replacing it with its symbolic model
costs a little more and adds a constant generation rate ``alpha``. The
formulas take free positive weights trading the two indices against each
other; :func:`optimize_free_params` picks them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable

import numpy as np

from .abstraction import AbstractionParams
from .systems import StorageRegularity


def _gamma_value(gamma) -> float:
    g = float(getattr(gamma, "gamma", gamma))
    if not (np.isfinite(g) and g > 0):
        raise ValueError(f"gain bound must be positive and finite, got {g}")
    return g


@dataclass(frozen=True)
class FreeParams:
    """Positive weights: ``lambda1..lambda5`` for index degradation, ``l1, l2`` for the loop."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    l1: float = 1.0
    l2: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"free parameter {f.name} must be positive, got {value}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DegradedIndices:
    """Indices of the sampled system for the supply scaled by ``tau``.

    ``scaled_nu = tau * nu`` and ``scaled_rho = tau * rho`` are the per-step
    indices of the unscaled discrete supply.
    """

    nu: float
    rho: float
    tau: float

    @property
    def scaled_nu(self) -> float:
        return self.tau * self.nu

    @property
    def scaled_rho(self) -> float:
        return self.tau * self.rho


@dataclass(frozen=True)
class QuantizedDegradedIndices:
    nu: float
    rho: float
    alpha: float
    tau: float

    @property
    def scaled_nu(self) -> float:
        return self.tau * self.nu

    @property
    def scaled_rho(self) -> float:
        return self.tau * self.rho


def degrade_sampled(nu: float, rho: float, gamma, tau: float, lambda1: float) -> DegradedIndices:
    """Indices of the zero-order-hold sampled system.

    ``nu' = nu - g tau (1 + lambda1 |rho|) - g^2 tau^2 |rho|`` and
    ``rho' = rho - g tau |rho| / lambda1`` with ``g`` the input to
    output-derivative gain.
    """
    g = _gamma_value(gamma)
    if not lambda1 > 0:
        raise ValueError("lambda1 must be positive")
    if tau < 0:
        raise ValueError("sampling period must be non-negative")
    r = abs(rho)
    gt = g * tau
    return DegradedIndices(nu=nu - gt * (1 + lambda1 * r) - gt * gt * r,
                           rho=rho - gt * r / lambda1, tau=tau)


def degrade_symbolic(nu: float, rho: float, gamma, params: AbstractionParams | None, m: int,
                     reg: StorageRegularity, fp: FreeParams, *, tau: float | None = None,
                     mu: float | None = None, eps: float | None = None,
                     check_radius: bool = True) -> QuantizedDegradedIndices:
    """Quasi-passivity data of the symbolic model.

    ``tau``, ``mu`` and ``eps`` default to those in ``params`` and may be
    overridden individually (``mu = 0`` is allowed here, unlike in
    :class:`AbstractionParams`).
    """
    g = _gamma_value(gamma)
    tau = params.tau if tau is None else tau
    mu = params.mu if mu is None else mu
    eps = params.eps if eps is None else eps
    if tau < 0 or mu < 0 or eps < 0:
        raise ValueError("tau, mu and eps must be non-negative")
    if m < 1:
        raise ValueError("input dimension must be at least 1")
    if check_radius and eps > reg.valid_radius * (1 + 1e-12):
        raise ValueError(f"regularity holds up to distance {reg.valid_radius}, need {eps}")
    r = abs(rho)
    sm = math.sqrt(m)
    tg = tau * g
    nu2 = nu - tg - fp.lambda2 * sm * mu / 4 - r * tg * (tg + sm * mu * fp.lambda3 + fp.lambda4)
    rho2 = rho - r * (tg / fp.lambda4 + sm * mu * fp.lambda5)
    alpha = (tau * sm * mu / (4 * fp.lambda2)
             + tau * mu * r * (tg * sm / (4 * fp.lambda3) + sm / (4 * fp.lambda5) + m * mu / 4)
             + 2 * reg.L * eps ** reg.theta)
    return QuantizedDegradedIndices(nu=nu2, rho=rho2, alpha=alpha, tau=tau)


def tau_max(nu: float, rho: float, gamma) -> float:
    """Longest sampling period keeping both sampled indices positive.

    Requires ``nu, rho > 0``; raises ``ValueError`` otherwise.
    """
    g = _gamma_value(gamma)
    if not (nu > 0 and rho > 0):
        raise ValueError("sampling-period bound needs positive nu and rho")
    return 2 * nu / (g * (math.sqrt(8 * nu * rho + 1) + 1))


def sampled_lambda1_window(nu: float, rho: float, gamma, tau: float):
    """Open interval of ``lambda1`` giving ``nu' > 0`` and ``rho' > 0``, or ``None``.

    ``rho' > 0`` needs ``lambda1 > g tau`` and ``nu' > 0`` needs
    ``lambda1 < (nu - g tau - g^2 tau^2 rho) / (g tau rho)``.
    """
    g = _gamma_value(gamma)
    if not (nu > 0 and rho > 0 and tau > 0):
        return None
    gt = g * tau
    lo = gt
    hi = (nu - gt - gt * gt * rho) / (gt * rho)
    return (lo, hi) if hi > lo else None


def _log_grid(lo: float, hi: float, points: int) -> np.ndarray:
    return np.geomspace(lo, hi, points) if hi > lo else np.array([lo])


def optimize_free_params(objective: Callable[[FreeParams], float], bounds=(1e-3, 1e3),
                         budget: int = 2000, grid_points: int = 41,
                         start: FreeParams | None = None, names=None):
    """Maximize ``objective`` over free parameters by coordinate search.

    Each coordinate in turn is scanned over a log-spaced grid within its
    bounds and set to the best value; sweeps repeat until nothing improves
    or ``budget`` objective evaluations are spent. The starting point
    (all ones by default) is always the first evaluation, so the result is
    never worse than it. Ties keep the earlier point, which makes the
    search deterministic.

    Parameters
    ----------
    objective : callable
        ``FreeParams -> float``; larger is better. Non-finite values and
        ``ValueError`` count as ``-inf``.
    bounds : tuple or dict
        ``(lo, hi)`` for every parameter, or a mapping name to ``(lo, hi)``.
    budget : int
        Maximum number of objective evaluations (at least 1).
    names : sequence of str, optional
        Parameters to vary; the rest stay at ``start``.

    Returns
    -------
    best : FreeParams
    value : float
    evaluations : int
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    best = start or FreeParams()
    names = list(names or [f.name for f in fields(FreeParams)])

    def score(fp):
        try:
            v = float(objective(fp))
        except ValueError:
            return -math.inf
        return v if np.isfinite(v) else -math.inf

    def bound(name):
        b = bounds.get(name, (1e-3, 1e3)) if isinstance(bounds, dict) else bounds
        lo, hi = float(b[0]), float(b[1])
        if not (0 < lo <= hi):
            raise ValueError(f"bounds for {name} must satisfy 0 < lo <= hi")
        return lo, hi

    best_val = score(best)
    used = 1
    improved = True
    while improved and used < budget:
        improved = False
        for name in names:
            for v in _log_grid(*bound(name), grid_points):
                if used >= budget:
                    break
                cand = replace(best, **{name: float(v)})
                if cand == best:
                    continue
                val = score(cand)
                used += 1
                if val > best_val:
                    best, best_val, improved = cand, val, True
    return best, best_val, used
