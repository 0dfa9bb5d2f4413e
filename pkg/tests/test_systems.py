import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from oracles import zoh_reference
from passlab.systems import (
    DivergenceError,
    LinearSystem,
    NonlinearSystem,
    QuadraticStorage,
    StorageRegularity,
    SupplyRate,
    evaluate_storage,
    evaluate_supply,
    intrastep_output_excess,
    simulate_continuous,
    zoh_discretize,
)


def random_stable(rng, n, m):
    A = rng.normal(size=(n, n))
    A -= (np.abs(np.linalg.eigvals(A).real).max() + 0.5) * np.eye(n)
    return LinearSystem(A, rng.normal(size=(n, m)), rng.normal(size=(m, n)), rng.normal(size=(m, m)))


class TestLinearSystem:
    def test_shapes_and_dims(self, controller):
        assert (controller.n, controller.m) == (2, 1)
        assert controller.state_dim == 2 and controller.input_dim == 1
        assert not controller.is_discrete
        assert controller.is_hurwitz()

    def test_arrays_are_read_only(self, controller):
        with pytest.raises(ValueError):
            controller.A[0, 0] = 5.0

    @pytest.mark.parametrize("bad", [
        dict(A=[[1.0, 0.0]], B=[[1.0]], C=[[1.0]], D=[[0.0]]),
        dict(A=[[1.0]], B=[[1.0, 2.0]], C=[[1.0]], D=[[0.0]]),
        dict(A=[[1.0]], B=[[1.0]], C=[[1.0]], D=[[0.0, 1.0]]),
        dict(A=[[np.nan]], B=[[1.0]], C=[[1.0]], D=[[0.0]]),
    ])
    def test_rejects_inconsistent_data(self, bad):
        with pytest.raises(ValueError):
            LinearSystem(**bad)

    def test_rejects_bad_sampling_period(self):
        with pytest.raises(ValueError):
            LinearSystem([[1.0]], [[1.0]], [[1.0]], [[0.0]], dt=-1.0)


class TestStorageAndSupply:
    def test_storage_value(self, controller_storage):
        x = np.array([1.4, -3.0])
        assert evaluate_storage(controller_storage, x) == pytest.approx(x @ controller_storage.P @ x)

    def test_rejects_indefinite_or_asymmetric(self):
        with pytest.raises(ValueError):
            QuadraticStorage([[1.0, 0.0], [0.0, -1.0]])
        with pytest.raises(ValueError):
            QuadraticStorage([[1.0, 0.5], [0.0, 1.0]])

    def test_supply_arithmetic(self):
        w = SupplyRate(nu=0.1, rho=0.2, alpha=0.3)
        assert evaluate_supply(w, [2.0], [3.0]) == pytest.approx(6 - 0.4 - 1.8 + 0.3)

    def test_negative_generation_rejected(self):
        with pytest.raises(ValueError):
            SupplyRate(0.0, 0.0, alpha=-1.0)

    def test_regularity_bound_holds(self, controller_storage, rng):
        R = 5.0
        reg = StorageRegularity.for_quadratic(controller_storage, R, eps=0.9)
        a = rng.uniform(-R, R, size=(20000, 2))
        b = np.clip(a + rng.uniform(-0.9, 0.9, size=a.shape), -R, R)
        dv = np.abs(np.einsum("ki,ij,kj->k", a, controller_storage.P, a)
                    - np.einsum("ki,ij,kj->k", b, controller_storage.P, b))
        dist = np.abs(a - b).max(axis=1)
        assert np.all(dv <= reg.L * dist ** reg.theta + 1e-12)


class TestDiscretization:
    def test_scalar_closed_form(self, plant):
        sd = zoh_discretize(plant, 0.3)
        assert sd.A[0, 0] == pytest.approx(math.exp(-0.003), rel=1e-14)
        assert sd.B[0, 0] == pytest.approx((1 - math.exp(-0.003)) / 0.01, rel=1e-12)
        assert sd.dt == 0.3

    def test_matches_reference(self, rng):
        for n, m in [(1, 1), (2, 1), (3, 2), (4, 3)]:
            sys = random_stable(rng, n, m)
            sd = zoh_discretize(sys, 0.37)
            Ad, Bd = zoh_reference(sys.A, sys.B, 0.37)
            np.testing.assert_allclose(sd.A, Ad, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(sd.B, Bd, rtol=1e-10, atol=1e-12)

    def test_rejects_discrete_and_bad_tau(self, plant):
        with pytest.raises(ValueError):
            zoh_discretize(plant, 0.0)
        with pytest.raises(ValueError):
            zoh_discretize(zoh_discretize(plant, 0.1), 0.1)


class TestSimulation:
    def test_linear_matches_ode_solver(self, controller, rng):
        tau, K = 0.3, 20
        u = rng.uniform(-1, 1, size=(K + 1, 1))
        x0 = np.array([1.4, -3.0])
        tr = simulate_continuous(controller, x0, u, tau)
        x = x0.copy()
        for k in range(K):
            sol = solve_ivp(lambda t, z: controller.A @ z + controller.B @ u[k], (0, tau), x,
                            rtol=1e-12, atol=1e-14)
            x = sol.y[:, -1]
            np.testing.assert_allclose(tr.x[k + 1], x, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(tr.y[3], controller.C @ tr.x[3] + controller.D @ u[3])

    def test_nonlinear_rk4_matches_ode_solver(self):
        sys = NonlinearSystem(lambda x, u: -x ** 3 + u, lambda x, u: x, 1, 1)
        u = np.full((11, 1), 0.5)
        tr = simulate_continuous(sys, [1.0], u, 0.2, substeps=50)
        sol = solve_ivp(lambda t, z: -z ** 3 + 0.5, (0, 2.0), [1.0], rtol=1e-12, atol=1e-14)
        assert tr.x[-1, 0] == pytest.approx(sol.y[0, -1], abs=1e-9)

    def test_dense_samples_join_up(self, controller, rng):
        u = rng.uniform(-1, 1, size=(6, 1))
        tr = simulate_continuous(controller, [1.0, 0.0], u, 0.3, substeps=7, dense=True)
        np.testing.assert_allclose(tr.dense_x[::7], tr.x, atol=1e-12)
        assert tr.dense_t[7] == pytest.approx(0.3)

    def test_divergence_reports_step(self):
        sys = NonlinearSystem(lambda x, u: x ** 2, lambda x, u: x, 1, 1)
        with pytest.raises(DivergenceError) as err:
            simulate_continuous(sys, [10.0], np.zeros((50, 1)), 0.5, substeps=4)
        assert err.value.step >= 1

    def test_input_shape_checked(self, controller):
        with pytest.raises(ValueError):
            simulate_continuous(controller, [0.0, 0.0], np.zeros((5, 2)), 0.1)

    def test_intrastep_excess_zero_state_drift(self):
        # dy/dt = u exactly when CA = 0, so drift equals tau |u|
        sys = LinearSystem([[0.0]], [[1.0]], [[1.0]], [[0.0]])
        tr = simulate_continuous(sys, [0.0], np.ones((4, 1)), 0.25, substeps=10, dense=True)
        assert intrastep_output_excess(tr, sys, 1.0) <= 1e-12
