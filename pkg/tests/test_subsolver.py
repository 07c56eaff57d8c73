import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcopt.problem import (
    AgentProblem,
    L1DistanceConstraint,
    L1Norm,
    QuadraticFunction,
    ZeroFunction,
    agent_smoothness_constants,
    make_paper_instance,
)
from dcopt.subsolver import (
    InnerSolveError,
    InnerSolveParams,
    NonsmoothConstraintError,
    augmented_lagrangian_value,
    dual_function_value,
    dual_gradient,
    minimize_augmented_lagrangian,
    solve_dual_subproblem,
    stationarity_residual,
)

TOL = 1e-10


def half_square(b=0.0, nonsmooth=None):
    return AgentProblem(QuadraticFunction([[1.0]], [0.0]), nonsmooth or ZeroFunction(), np.array([[1.0]]),
                        [b], None, mu=1.0, L_g=0.0)


@pytest.fixture(scope="module")
def bench():
    return make_paper_instance(20, 25, 1, seed=0)


class TestMinimize:
    def test_unconstrained_zero(self):
        res = minimize_augmented_lagrangian(half_square(), [0.0], [], [0.0], [], 1.0, InnerSolveParams(tol=TOL))
        assert res.converged
        assert res.x[0] == pytest.approx(0.0, abs=1e-12)

    def test_linear_term(self):
        res = minimize_augmented_lagrangian(half_square(), [1.0], [], [0.0], [], 1.0, InnerSolveParams(tol=TOL))
        assert res.x[0] == pytest.approx(-0.5, abs=1e-10)

    def test_random_benchmark_agents(self, bench):
        rng = np.random.default_rng(0)
        params = InnerSolveParams(tol=1e-9)
        for ag in bench.agents[:8]:
            p_mix, v = rng.standard_normal(25), rng.standard_normal(25)
            q_mix, z = rng.standard_normal(1), rng.standard_normal(1)
            rho = 10 ** rng.uniform(-3, 1)
            res = minimize_augmented_lagrangian(ag, p_mix, q_mix, v, z, rho, params)
            assert res.converged and res.residual <= 1e-9
            u = p_mix + rho * (ag.A @ res.x - ag.b - v)
            y = np.maximum(q_mix + rho * (ag.g(res.x) - z), 0.0)
            assert stationarity_residual(ag, res.x, u, y) <= 1e-9

    def test_minimum_beats_perturbations(self, bench):
        rng = np.random.default_rng(1)
        ag = bench.agents[3]
        args = (rng.standard_normal(25), np.array([0.5]), rng.standard_normal(25), np.array([-1.0]), 0.1)
        res = minimize_augmented_lagrangian(ag, *args, InnerSolveParams(tol=1e-11))
        best = augmented_lagrangian_value(ag, res.x, *args)
        for _ in range(50):
            x = res.x + 1e-3 * rng.standard_normal(ag.dim)
            assert augmented_lagrangian_value(ag, x, *args) >= best - 1e-12

    def test_budget_exhaustion_flags(self, bench):
        ag = bench.agents[0]
        res = minimize_augmented_lagrangian(ag, np.ones(25), [1.0], np.zeros(25), [0.0], 1.0,
                                            InnerSolveParams(tol=1e-14, max_iter=2))
        assert not res.converged
        assert res.x.shape == (ag.dim,)

    def test_nonsmooth_constraint_needs_fallback(self):
        ag = AgentProblem(QuadraticFunction(np.eye(2), [0.0, 0.0]), ZeroFunction(), np.eye(2), [0.0, 0.0],
                          L1DistanceConstraint([1.0, 1.0], 0.5), mu=1.0, L_g=np.sqrt(2))
        with pytest.raises(NonsmoothConstraintError):
            minimize_augmented_lagrangian(ag, [0, 0], [0], [0, 0], [0], 1.0)
        res = minimize_augmented_lagrangian(ag, [0, 0], [0], [0, 0], [0], 1.0,
                                            InnerSolveParams(tol=1e-4, subgradient_fallback=True))
        assert res.method == "subgradient"
        assert np.all(np.isfinite(res.x))

    def test_bad_rho(self):
        with pytest.raises(ValueError):
            minimize_augmented_lagrangian(half_square(), [0.0], [], [0.0], [], 0.0)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            InnerSolveParams(tol=0.0)
        with pytest.raises(ValueError):
            InnerSolveParams(max_iter=0)

    def test_restarted_objective_history_nonincreasing(self, bench):
        ag = bench.agents[5]
        res = minimize_augmented_lagrangian(ag, np.ones(25), [2.0], np.zeros(25), [0.0], 1.0,
                                            InnerSolveParams(tol=1e-10, record_history=True))
        h = np.array(res.history)
        assert np.all(np.diff(h) <= 1e-12 * (1 + np.abs(h[:-1])))


class TestStationarity:
    def test_exact_minimizer(self):
        assert stationarity_residual(half_square(), np.array([-1.0]), np.array([1.0]), np.zeros(0)) <= 1e-12

    def test_unit_perturbation(self):
        # f = x^2 / 2, minimizer 0: the unit-step map sends x to 0, residual |x|
        assert stationarity_residual(half_square(), np.array([1.0]), np.zeros(1), np.zeros(0)) > 0.1

    def test_with_l1(self):
        ag = half_square(nonsmooth=L1Norm())
        # minimizer of x^2/2 + |x| + 0.5 x is 0
        assert stationarity_residual(ag, np.array([0.0]), np.array([0.5]), np.zeros(0)) == 0.0


class TestDual:
    def test_zero_multipliers(self):
        val, x = dual_function_value(half_square(), ([0.0], []))
        assert val == pytest.approx(0.0, abs=1e-15) and x[0] == pytest.approx(0.0, abs=1e-12)

    def test_closed_form(self):
        val, x = dual_function_value(half_square(), ([1.0], []), params=InnerSolveParams(tol=TOL))
        assert val == pytest.approx(-0.5, abs=1e-12)
        assert x[0] == pytest.approx(-1.0, abs=1e-10)

    @pytest.mark.parametrize("u", [-2.0, 0.3, 1.7])
    def test_gradient_closed_form(self, u):
        gu, gy = dual_gradient(half_square(), ([u], []), params=InnerSolveParams(tol=TOL))
        assert gu[0] == pytest.approx(-u, abs=1e-9)
        assert gy.shape == (0,)

    def test_negative_y_clamped(self, bench):
        ag = bench.agents[0]
        a, _, _ = solve_dual_subproblem(ag, (np.zeros(25), np.array([-1e-14])))
        b, _, _ = solve_dual_subproblem(ag, (np.zeros(25), np.array([0.0])))
        assert a == b

    def test_failure_raises(self, bench):
        with pytest.raises(InnerSolveError):
            solve_dual_subproblem(bench.agents[0], (np.ones(25), np.ones(1)),
                                  params=InnerSolveParams(tol=1e-15, max_iter=1))

    def test_finite_differences(self, bench):
        ag = bench.agents[2]
        rng = np.random.default_rng(3)
        u, y = 0.3 * rng.standard_normal(25), np.array([0.4])
        params = InnerSolveParams(tol=1e-12, max_iter=20000)
        gu, gy = dual_gradient(ag, (u, y), params=params)
        h = 1e-5
        for idx in (0, 7, 24):
            e = np.zeros(25)
            e[idx] = h
            fp, _ = dual_function_value(ag, (u + e, y), params=params)
            fm, _ = dual_function_value(ag, (u - e, y), params=params)
            assert (fp - fm) / (2 * h) == pytest.approx(gu[idx], abs=1e-4)
        fp, _ = dual_function_value(ag, (u, y + h), params=params)
        fm, _ = dual_function_value(ag, (u, y - h), params=params)
        assert (fp - fm) / (2 * h) == pytest.approx(gy[0], abs=1e-4)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_concavity(self, seed):
        inst = make_paper_instance(3, 4, 1, seed=seed % 20)
        ag = inst.agents[seed % 3]
        rng = np.random.default_rng(seed)
        z1 = (rng.standard_normal(4), rng.uniform(0, 2, 1))
        z2 = (rng.standard_normal(4), rng.uniform(0, 2, 1))
        mid = ((z1[0] + z2[0]) / 2, (z1[1] + z2[1]) / 2)
        params = InnerSolveParams(tol=1e-11)
        f1, _ = dual_function_value(ag, z1, params=params)
        f2, _ = dual_function_value(ag, z2, params=params)
        fm, _ = dual_function_value(ag, mid, params=params)
        assert fm >= 0.5 * (f1 + f2) - 1e-9

    def test_lipschitz_gradient_and_minimizer(self, bench):
        params = InnerSolveParams(tol=1e-10)
        L = agent_smoothness_constants(bench)
        rng = np.random.default_rng(5)
        for i in (0, 9, 17):
            ag = bench.agents[i]
            bound_x = np.sqrt(ag.A_norm ** 2 + bench.q * bench.L_g ** 2) / bench.mu
            for _ in range(20):
                z1 = (rng.standard_normal(25), rng.uniform(0, 1, 1))
                z2 = (rng.standard_normal(25), rng.uniform(0, 1, 1))
                g1 = np.concatenate(dual_gradient(ag, z1, params=params))
                g2 = np.concatenate(dual_gradient(ag, z2, params=params))
                dist = np.linalg.norm(np.concatenate([z1[0] - z2[0], z1[1] - z2[1]]))
                assert np.linalg.norm(g1 - g2) <= L[i] * dist + 10 * params.tol
                _, x1 = dual_function_value(ag, z1, params=params)
                _, x2 = dual_function_value(ag, z2, params=params)
                assert np.linalg.norm(x1 - x2) <= bound_x * dist + 10 * params.tol
