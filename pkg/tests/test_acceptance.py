"""Acceptance suite: one test group per numbered criterion.

The terminal summary prints one PASS/FAIL line per criterion.
"""
import math
import time

import numpy as np
import pytest

from oracles import bisimulation_reference, detectability_reference, successor_dicts, zoh_reference
from passlab.abstraction import (
    FiniteTransitionSystem,
    Quantizer,
    SymbolicModel,
    build_truncated_ts,
    candidate_pairs,
    check_eps_mu_bisimulation,
    sampled_reference_ts,
)
from passlab.analysis import (
    DetectabilityCertificate,
    compute_detectability,
    estimate_gain_gamma,
    verify_discrete_quasi_passivity,
    verify_passivity_indices,
)
from passlab.closedloop import (
    ClosedLoopIndices,
    FeedbackConfig,
    simulate_closed_loop,
    ultimate_bound,
    zero_input_decay_margin,
)
from passlab.degradation import (
    FreeParams,
    degrade_sampled,
    degrade_symbolic,
    tau_max,
)
from passlab.scenario import load
from passlab.systems import (
    LinearSystem,
    QuadraticStorage,
    StorageRegularity,
    SupplyRate,
    simulate_continuous,
)


# -- 1 -----------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_plant_sampled_indices(plant):
    start = time.perf_counter()
    g = estimate_gain_gamma(plant, safety=1.0)
    d = degrade_sampled(0.0, 0.01, g, 0.3, 1.0)
    elapsed = time.perf_counter() - start
    assert abs(g.gamma - 1.0) <= 1e-12
    assert abs(d.nu - (-0.3039)) <= 1e-12
    assert abs(d.rho - 0.007) <= 1e-12
    assert elapsed < 1.0


# -- 2 -----------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_zero_pitch_reduces_to_sampled(rng):
    for _ in range(1000):
        nu, rho = rng.uniform(-2, 2, 2)
        gamma = rng.uniform(0.01, 5)
        tau = rng.uniform(0, 1)
        m = int(rng.integers(1, 5))
        lam = rng.uniform(0.01, 10, 5)
        fp = FreeParams(lam[0], lam[1], lam[2], lam[0], lam[4])
        reg = StorageRegularity(L=rng.uniform(0.01, 10), theta=rng.uniform(0.2, 2),
                                valid_radius=2.0)
        eps = rng.uniform(0.01, 2)
        q = degrade_symbolic(nu, rho, gamma, None, m, reg, fp, tau=tau, mu=0.0, eps=eps)
        d = degrade_sampled(nu, rho, gamma, tau, fp.lambda1)
        assert abs(q.nu - d.nu) <= 1e-12
        assert abs(q.rho - d.rho) <= 1e-12
        assert q.alpha == 2 * reg.L * eps ** reg.theta


# -- 3 -----------------------------------------------------------------------

def positive_lambda1_exists(nu, rho, gamma, tau, grid):
    d_nu = nu - gamma * tau * (1 + grid * rho) - (gamma * tau) ** 2 * rho
    d_rho = rho - gamma * tau * rho / grid
    return bool(np.any((d_nu > 0) & (d_rho > 0)))


@pytest.mark.criterion(3)
def test_tau_max_separates(rng):
    start = time.perf_counter()
    grid = np.geomspace(1e-8, 1e8, 20001)
    for _ in range(100):
        nu, rho = rng.uniform(1e-3, 10, 2)
        gamma = rng.uniform(1e-2, 10)
        tm = tau_max(nu, rho, gamma)
        assert positive_lambda1_exists(nu, rho, gamma, 0.99 * tm, grid)
        assert not positive_lambda1_exists(nu, rho, gamma, 1.01 * tm, grid)
        # the library formula agrees with the sweep at the witness
        lam = grid[np.argmax((nu - gamma * 0.99 * tm * (1 + grid * rho)
                              - (gamma * 0.99 * tm) ** 2 * rho > 0)
                             & (rho - gamma * 0.99 * tm * rho / grid > 0))]
        d = degrade_sampled(nu, rho, gamma, 0.99 * tm, lam)
        assert d.nu > 0 and d.rho > 0
    assert time.perf_counter() - start < 10.0


# -- 4 -----------------------------------------------------------------------

def random_passive_system(rng):
    """Stable system with identity storage, a random input index and the largest output index."""
    n, m = int(rng.integers(1, 5)), int(rng.integers(1, 3))
    G = rng.normal(size=(n, n))
    K = G @ G.T / n + rng.uniform(0.1, 1) * np.eye(n)
    S = rng.normal(size=(n, n))
    A = -K + (S - S.T)
    B = rng.normal(size=(n, m))
    sys = LinearSystem(A, B, 2 * B.T, rng.uniform(0.2, 2) * np.eye(m))
    V = QuadraticStorage(np.eye(n))
    nu = rng.uniform(0, 0.9) * sys.D[0, 0]
    if not verify_passivity_indices(sys, V, nu, 0.0).holds:
        return None
    lo, hi = 0.0, 10.0
    for _ in range(60):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if verify_passivity_indices(sys, V, nu, mid).holds else (lo, mid)
    return sys, V, nu, lo * 0.999


@pytest.mark.criterion(4)
def test_sampled_dissipation_holds_on_random_systems(rng):
    worst = -math.inf
    for _ in range(50):
        drawn = None
        while drawn is None:
            drawn = random_passive_system(rng)
        sys, V, nu, rho = drawn
        assert verify_passivity_indices(sys, V, nu, rho).holds
        gamma = estimate_gain_gamma(sys).gamma
        tau, lam1 = rng.uniform(0.01, 0.5), rng.uniform(0.2, 5)
        d = degrade_sampled(nu, rho, gamma, tau, lam1)
        U = np.repeat(rng.uniform(-3, 3, size=(41, sys.m)), 5, axis=0)[:201]
        tr = simulate_continuous(sys, rng.uniform(-3, 3, size=sys.n), U, tau)
        Vx = np.einsum("ki,ij,kj->k", tr.x, V.P, tr.x)
        u, y = tr.u[:-1], tr.y[:-1]
        supply = tau * (np.einsum("ki,ki->k", u, y) - d.nu * np.einsum("ki,ki->k", u, u)
                        - d.rho * np.einsum("ki,ki->k", y, y))
        worst = max(worst, float((np.diff(Vx) - supply).max()))
    assert worst <= 1e-7


# -- 5 -----------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_cruise_control_loop_is_bounded():
    start = time.perf_counter()
    sc = load("cruise_control")
    cfg = FeedbackConfig(sc.plant, sc.symbolic_model(), sc.x1_0, sc.xc_0, sc.K,
                         w1=sc.w1, w2=sc.w2)
    tr = simulate_closed_loop(cfg)
    assert np.all(np.isfinite(tr.x1)) and np.all(np.isfinite(tr.xc))
    plant_env = np.linalg.norm(tr.x1, axis=1)
    ctrl_env = np.abs(tr.xc).max(axis=1)
    # after the first block, each block's peak does not exceed the previous one
    for env in (plant_env, ctrl_env):
        peaks = np.array([env[k:k + 50].max() for k in range(50, len(env), 50)])
        assert np.all(np.diff(peaks) <= 1e-12)
        assert peaks[0] <= env[:50].max()
    printed = ClosedLoopIndices.from_values(-0.3039, 0.007, 0.0106, 0.3411 - 1 / (4 * 10))
    margin = zero_input_decay_margin(printed)
    assert margin.margin == pytest.approx(0.0122, abs=1e-12) and margin.margin > 0
    assert printed.rho1_bar + printed.nu2_bar == pytest.approx(0.0176, abs=1e-12)
    assert time.perf_counter() - start < 5.0


# -- 6 -----------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_detectability_matches_oracle(rng):
    for trial in range(20):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, n + 1))
        A = rng.normal(size=(n, n)) * rng.uniform(0.2, 0.8)
        B = rng.normal(size=(n, m))
        C = rng.normal(size=(m, n))
        D = np.zeros((m, m)) if trial % 4 else rng.normal(size=(m, m))
        sys = LinearSystem(A, B, C, D, dt=1.0)
        for N0 in (0, 1, 3, 5):
            det = compute_detectability(sys, N0)
            ref = detectability_reference(A, B, C, D, N0, samples=1000, seed=trial)
            assert det.kappa == pytest.approx(ref, rel=1e-6, abs=1e-10)


# -- 7 -----------------------------------------------------------------------

def random_quasi_passive(rng):
    """Discrete system with identity storage, verified indices and zero-input detectability."""
    n, m = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    if rng.random() < 0.5:
        A = Q @ np.diag(rng.uniform(-0.95, 0.95, size=n)) @ Q.T
    else:
        A = Q * rng.uniform(0.3, 0.95)
    B = rng.normal(size=(n, m)) * 0.5
    b2 = float(np.linalg.norm(B, 2) ** 2)
    d = b2 + rng.uniform(0.3, 1.5)
    sys = LinearSystem(A, B, 2 * B.T @ A, d * np.eye(m), dt=1.0)
    V = QuadraticStorage(np.eye(n))
    nu = rng.uniform(0.05, 0.5) * (d - b2)
    if not verify_discrete_quasi_passivity(sys, V, SupplyRate(nu, 1e-9)).holds:
        return None
    lo, hi = 0.0, 10.0
    for _ in range(60):
        mid = (lo + hi) / 2
        ok = verify_discrete_quasi_passivity(sys, V, SupplyRate(nu, mid)).holds
        lo, hi = (mid, hi) if ok else (lo, mid)
    if lo <= 0:
        return None
    supply = SupplyRate(nu, lo * 0.99, rng.uniform(0.01, 1))
    det = compute_detectability(sys, int(rng.integers(0, 4)), inputs="zero")
    if not det.valid:
        return None
    return sys, V, supply, det


def sup_norm(sys, x0, U):
    x, peak = x0, np.linalg.norm(x0)
    for u in U:
        x = sys.A @ x + sys.B @ u
        peak = max(peak, np.linalg.norm(x))
    return peak


@pytest.mark.criterion(7)
def test_ultimate_bound_never_exceeded(rng):
    systems = []
    while len(systems) < 25:
        drawn = random_quasi_passive(rng)
        if drawn is not None:
            systems.append(drawn)
    steps = 10_000
    for sys, V, supply, det in systems:
        assert verify_discrete_quasi_passivity(sys, V, supply).holds
        B2 = rng.uniform(0.1, 5)
        x0 = rng.normal(size=sys.n)
        x0 *= B2 / np.linalg.norm(x0)
        # certified case: the detectability bound covers exactly these (zero) inputs
        unforced = ultimate_bound(SupplyRate(math.inf, supply.rho, supply.alpha), det, V, 0.0, B2)
        assert sup_norm(sys, x0, np.zeros((steps, sys.m))) <= unforced.D
        # bounded inputs, checked empirically against the same formula
        B1 = rng.uniform(0.1, 3)
        forced = ultimate_bound(supply, det, V, B1, B2)
        U = rng.normal(size=(steps, sys.m))
        U *= (B1 * rng.uniform(0, 1, size=steps) ** (1 / sys.m)
              / np.linalg.norm(U, axis=1))[:, None]
        assert np.linalg.norm(U, axis=1).max() <= B1
        assert sup_norm(sys, x0, U) <= forced.D


@pytest.mark.criterion(7)
def test_ultimate_bound_worked_example():
    res = ultimate_bound(SupplyRate(1.0, 1.0, 0.5), DetectabilityCertificate(1, 1.0, True),
                         QuadraticStorage(np.eye(2)), B1=2.0, B2=1.0)
    assert abs(res.D - math.sqrt(6.75)) <= 1e-12


# -- 8 -----------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_identical_systems_are_bisimilar(rng):
    X = rng.uniform(-1, 1, size=(10, 2))
    T = FiniteTransitionSystem.from_table(X, np.array([[0.0], [0.5]]),
                                          rng.integers(-1, 10, size=(10, 2)))
    rel = check_eps_mu_bisimulation(T, T, 0.1, 0.0)
    assert all(rel.contains(i, i) for i in range(10))
    assert rel.bisimilar
    s = successor_dicts(T)
    assert rel.as_set() == bisimulation_reference(X, X, [0.0, 0.5], s, s, 0.1, 0.0)


@pytest.mark.criterion(8)
def test_counterexample_pair_is_not_related():
    X = np.array([[0.0], [1.0]])
    T1 = FiniteTransitionSystem.from_table(X, [[0.0]], [[1], [-1]])
    T2 = FiniteTransitionSystem.from_table(X, [[0.0]], [[0], [1]])
    rel = check_eps_mu_bisimulation(T1, T2, 0.5, 0.1)
    assert len(rel) == 0 and not rel.bisimilar
    ref = bisimulation_reference(X, X, [0.0], successor_dicts(T1), successor_dicts(T2), 0.5, 0.1)
    assert ref == set()


def assert_relation_closed(T1, T2, ptr, q2, eps, unit, chunk=300_000):
    """Every candidate pair has matched-label successors that are again candidates.

    States are compared in integer multiples of ``unit``; leaving the domain
    maps to a far sentinel, so two exits match and a single exit does not.
    """
    far = 10 ** 6
    q1 = np.repeat(np.arange(T1.n_states), np.diff(ptr))
    L = T1.n_labels
    limit = int(np.floor(eps / unit + 1e-9))

    def successor_coords(T):
        coords = np.vstack([np.rint(T.state_embed / unit).astype(np.int32),
                            np.full((1, T.state_embed.shape[1]), far, dtype=np.int32)])
        dst = T.trans_dst.reshape(T.n_states, L)
        return coords[np.where(dst < 0, T.n_states, dst)]

    s1, s2 = successor_coords(T1), successor_coords(T2)
    for lo in range(0, len(q1), chunk):
        a, b = q1[lo:lo + chunk], q2[lo:lo + chunk]
        gap = np.abs(s1[a] - s2[b]).max(axis=2)
        assert gap.max() <= limit


@pytest.mark.criterion(8)
def test_controller_abstraction_keeps_quantization_pairs(controller, params):
    sm = SymbolicModel(controller, params)
    box, inputs = ([-5.0, -5.0], [5.0, 5.0]), ([-5.0], [5.0])
    T2 = build_truncated_ts(sm, box, inputs)
    T1 = sampled_reference_ts(controller, params, box, inputs, refine=2)
    rel = check_eps_mu_bisimulation(T1, T2, params.eps, params.mu)
    # every fine-lattice point is related to its quantization
    q_idx = np.rint(sm.state_q(T1.state_embed) / params.eta).astype(np.int64) + 50
    partner = q_idx[:, 0] * 101 + q_idx[:, 1]
    np.testing.assert_allclose(T2.state_embed[partner], sm.state_q(T1.state_embed), atol=1e-12)
    kept = rel.pairs[:, 0] * T2.n_states + rel.pairs[:, 1]
    assert np.all(np.diff(kept) > 0)
    wanted = np.arange(T1.n_states) * T2.n_states + partner
    pos = np.searchsorted(kept, wanted)
    assert np.all(pos < len(kept)) and np.array_equal(kept[pos], wanted)
    # independent check: the candidate relation is closed, so it is the greatest one
    ptr0, q20 = candidate_pairs(T1, T2, params.eps)
    assert_relation_closed(T1, T2, ptr0, q20, params.eps, params.eta / 2)
    assert len(rel) == len(q20)
    sample = np.random.default_rng(0).choice(T1.n_states, 300, replace=False)
    for i in sample:
        dist = np.abs(T2.state_embed - T1.state_embed[i]).max(axis=1)
        expected = np.nonzero(dist <= params.eps * (1 + 1e-9))[0]
        np.testing.assert_array_equal(q20[ptr0[i]:ptr0[i + 1]], expected)


@pytest.mark.criterion(8)
@pytest.mark.parametrize("u_max, eps, mu", [
    (0.2, 0.9, 0.1), (0.2, 0.1, 0.0), (0.2, 0.1, 0.1), (0.2, 0.05, 0.1), (1.0, 0.9, 0.1),
])
def test_controller_abstraction_small_box_exhaustive(controller, params, u_max, eps, mu):
    sm = SymbolicModel(controller, params)
    box, inputs = ([-0.3, -0.3], [0.3, 0.3]), ([-u_max], [u_max])
    T2 = build_truncated_ts(sm, box, inputs)
    T1 = sampled_reference_ts(controller, params, box, inputs, refine=2)
    rel = check_eps_mu_bisimulation(T1, T2, eps, mu)
    ref = bisimulation_reference(T1.state_embed, T2.state_embed, T1.label_embed,
                                 successor_dicts(T1), successor_dicts(T2), eps, mu)
    assert rel.as_set() == ref


# -- 9 -----------------------------------------------------------------------

SAMPLES = 100_000


@pytest.mark.criterion(9)
def test_quantizer_error(rng):
    for mu in (0.1, 0.3, 1.0):
        v = rng.uniform(-100, 100, size=(SAMPLES, 2))
        assert np.abs(Quantizer(mu, 2)(v) - v).max() <= mu / 2 * (1 + 1e-12)


@pytest.mark.criterion(9)
def test_successor_error(rng, controller, params):
    sm = SymbolicModel(controller, params)
    Ad, Bd = zoh_reference(controller.A, controller.B, params.tau)
    P = rng.integers(-1000, 1001, size=(SAMPLES, 2))
    U = rng.integers(-100, 101, size=(SAMPLES, 1))
    succ = np.array([sm.successor(p, u) for p, u in zip(P, U)]) * params.eta
    exact = (P * params.eta) @ Ad.T + (U * params.mu) @ Bd.T
    assert np.abs(exact - succ).max() <= params.eta / 2 * (1 + 1e-9)


@pytest.mark.criterion(9)
def test_loop_quantization_error(rng):
    sc = load("cruise_control")
    K = SAMPLES
    w1 = rng.uniform(-2, 2, size=(K + 1, 1))
    w2 = rng.uniform(-2, 2, size=(K + 1, 1))
    cfg = FeedbackConfig(sc.plant, sc.symbolic_model(), sc.x1_0, sc.xc_0, K, w1=w1, w2=w2)
    tr = simulate_closed_loop(cfg)
    assert tr.quantization_error().max() <= sc.mu / 2 * (1 + 1e-9)
