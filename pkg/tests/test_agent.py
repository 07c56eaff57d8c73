import numpy as np
import pytest

from dcopt.agent import (
    AgentState,
    RunParams,
    allocation_update,
    init_state,
    local_update,
    mix_duals,
    mixing_disagreement,
    resolve_params,
)
from dcopt.graph import GraphSequence
from dcopt.problem import (
    AgentProblem,
    QuadraticFunction,
    SquaredDistanceConstraint,
    ZeroFunction,
    make_paper_instance,
    smoothness_constant,
)
from dcopt.subsolver import InnerSolveError, InnerSolveParams, stationarity_residual


def half_square(b=1.0, constraint=None):
    return AgentProblem(QuadraticFunction([[1.0]], [0.0]), ZeroFunction(), np.array([[1.0]]), [b],
                        constraint, mu=1.0, L_g=0.0 if constraint is None else 2.0)


def scalar_state(**kw):
    base = dict(x=np.zeros(1), u=np.zeros(1), y=np.zeros(0), p_mix=np.zeros(1), q_mix=np.zeros(0),
                v=np.zeros(1), z=np.zeros(0))
    base.update({k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in kw.items()})
    return AgentState(**base)


class TestInit:
    def test_defaults(self):
        ag = make_paper_instance(2, 3, 1, seed=0).agents[0]
        s = init_state(ag)
        assert np.all(s.u == 0) and np.all(s.p_mix == 0) and np.all(s.v == 0) and np.all(s.z == 0)

    def test_y0_clamped(self):
        ag = make_paper_instance(2, 3, 1, seed=0).agents[0]
        s = init_state(ag, u0=[1, 2, 3], y0=[-2.0])
        np.testing.assert_array_equal(s.p_mix, [1, 2, 3])
        assert s.y[0] == 0.0 and s.q_mix[0] == 0.0

    def test_copy_is_deep(self):
        s = scalar_state(u=1.0)
        c = s.copy()
        c.u[0] = 5.0
        assert s.u[0] == 1.0


class TestParams:
    def test_auto(self):
        inst = make_paper_instance(4, 3, 1, seed=1)
        prm = resolve_params(inst, 10)
        L = smoothness_constant(inst)
        assert prm.rho == pytest.approx(0.9 / (2 * L))
        assert prm.gamma * prm.rho == pytest.approx(1.0)
        assert prm.warnings == ()

    def test_violations_warn(self, caplog):
        inst = make_paper_instance(4, 3, 1, seed=1)
        prm = resolve_params(inst, 10, rho=1.0, gamma=2.0)
        assert len(prm.warnings) == 2
        assert "1/(2L)" in prm.warnings[0]

    @pytest.mark.parametrize("kw", [dict(rho=0.0, gamma=1.0, rounds=1), dict(rho=1.0, gamma=-1.0, rounds=1),
                                    dict(rho=1.0, gamma=1.0, rounds=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            RunParams(**kw)


class TestLocalUpdate:
    def test_closed_form(self):
        upd = local_update(scalar_state(), half_square(b=1.0), 1.0, InnerSolveParams(tol=1e-12))
        assert upd.x[0] == pytest.approx(0.5, abs=1e-11)
        assert upd.u[0] == pytest.approx(-0.5, abs=1e-11)

    def test_projection_clamps(self):
        # g(x) = x^2 - 1; pick z so that g(x+) - z = 0.5 after the solve; q_mix = -1
        ag = half_square(b=0.0, constraint=SquaredDistanceConstraint([0.0], 1.0))
        s = scalar_state(y=0.0, q_mix=-1.0, z=-1.5)
        upd = local_update(s, ag, 1.0, InnerSolveParams(tol=1e-12))
        assert ag.g(upd.x)[0] - s.z[0] == pytest.approx(0.5, abs=1e-9)
        assert upd.y[0] == 0.0

    def test_stationarity_identity(self):
        inst = make_paper_instance(5, 6, 1, seed=4)
        rng = np.random.default_rng(0)
        inner = InnerSolveParams(tol=1e-9)
        for ag in inst.agents:
            s = init_state(ag, u0=rng.standard_normal(6), y0=[0.3])
            s.v, s.z = rng.standard_normal(6), rng.standard_normal(1)
            upd = local_update(s, ag, 0.05, inner)
            assert stationarity_residual(ag, upd.x, upd.u, upd.y) <= inner.tol
            assert np.all(upd.y >= 0)

    def test_failure_carries_round(self):
        inst = make_paper_instance(6, 3, 1, seed=0)
        ag = max(inst.agents, key=lambda a: a.dim)
        s = init_state(ag, u0=np.ones(3), y0=[1.0])
        with pytest.raises(InnerSolveError, match="round 17"):
            local_update(s, ag, 1.0, InnerSolveParams(tol=1e-15, max_iter=1), round_index=17)


class TestMixing:
    def test_identity(self):
        us, ys = [np.array([1.0]), np.array([2.0])], [np.array([0.5]), np.array([0.0])]
        p, q = mix_duals(us, ys, np.eye(2), 1)
        assert p[0] == 2.0 and q[0] == 0.0

    def test_average(self):
        p, _ = mix_duals([np.array([0.0]), np.array([2.0])], [np.zeros(0)] * 2, np.full((2, 2), 0.5), 0)
        assert p[0] == 1.0

    def test_only_neighbors_read(self):
        W = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
        us = [np.array([1.0]), np.array([3.0]), None]
        ys = [np.zeros(0), np.zeros(0), None]
        p, _ = mix_duals(us, ys, W, 0)
        assert p[0] == 2.0

    def test_sum_preserved(self):
        W = GraphSequence(7, 2, seed=3).weights(5)
        rng = np.random.default_rng(1)
        us = [rng.standard_normal(4) for _ in range(7)]
        ys = [rng.uniform(0, 1, 2) for _ in range(7)]
        ps = [mix_duals(us, ys, W, i)[0] for i in range(7)]
        np.testing.assert_allclose(np.sum(ps, axis=0), np.sum(us, axis=0), atol=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mix_duals([np.zeros(1)] * 2, [np.zeros(0)] * 2, np.eye(3), 0)

    def test_disagreement_matches_difference(self):
        W = GraphSequence(6, 2, seed=0).weights(4)
        rng = np.random.default_rng(2)
        us = [rng.standard_normal(3) for _ in range(6)]
        ys = [rng.uniform(0, 1, 1) for _ in range(6)]
        for i in range(6):
            p, q = mix_duals(us, ys, W, i)
            du, dy = mixing_disagreement(us, ys, W, i)
            np.testing.assert_allclose(du, us[i] - p, atol=1e-14)
            np.testing.assert_allclose(dy, ys[i] - q, atol=1e-14)


class TestAllocation:
    def test_identity_round(self):
        s = scalar_state(u=3.0, p_mix=3.0, v=0.7)
        v, _ = allocation_update(s, 10.0)
        assert v[0] == 0.7

    def test_two_agents(self):
        a = scalar_state(u=0.0, p_mix=1.0, v=0.25)
        b = scalar_state(u=2.0, p_mix=1.0, v=-0.25)
        va, _ = allocation_update(a, 1.0)
        vb, _ = allocation_update(b, 1.0)
        assert va[0] == -0.75 and vb[0] == 0.75
        assert va[0] + vb[0] == 0.0

    def test_sum_preserved_random(self):
        W = GraphSequence(5, 2, seed=8).weights(3)
        rng = np.random.default_rng(4)
        us = [rng.standard_normal(2) for _ in range(5)]
        ys = [rng.uniform(0, 1, 1) for _ in range(5)]
        vs = [rng.standard_normal(2) for _ in range(5)]
        vs = [v - np.mean(vs, axis=0) for v in vs]
        new = []
        for i in range(5):
            p, q = mix_duals(us, ys, W, i)
            s = AgentState(np.zeros(1), us[i], ys[i], p, q, vs[i], np.zeros(1))
            new.append(allocation_update(s, 3.0, mixing_disagreement(us, ys, W, i))[0])
        np.testing.assert_allclose(np.sum(new, axis=0), np.sum(vs, axis=0), atol=1e-12)
