import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcopt.graph import (
    Digraph,
    GraphSequence,
    SupportMismatchError,
    build_weight_matrix,
    check_strong_connectivity,
    export_edges_csv,
    generate_graph_sequence,
    in_neighbors,
    validate_weight_matrix,
)


def loops_plus(n, extra):
    return Digraph(n, frozenset({(i, i) for i in range(n)} | set(extra)))


CYCLE3 = [(0, 1), (1, 2), (2, 0)]


class TestGenerate:
    def test_single_agent(self):
        seq = generate_graph_sequence(1, 1, seed=5)
        for k in range(5):
            assert seq.digraph(k).edges == {(0, 0)}
            np.testing.assert_array_equal(seq.weights(k), [[1.0]])

    def test_round_zero_is_identity(self):
        seq = generate_graph_sequence(6, 2, seed=0)
        np.testing.assert_array_equal(seq.weights(0), np.eye(6))
        assert seq.digraph(0) == Digraph.self_loops(6)

    def test_three_agents_one_cycle(self):
        seq = generate_graph_sequence(3, 1, seed=11)
        for k in range(1, 20):
            rnd = seq.round(k)
            off = {e for e in rnd.digraph.edges if e[0] != e[1]}
            assert len(off) == 3
            assert rnd.digraph.has_self_loops()
            W = rnd.weights
            np.testing.assert_allclose(np.diag(W), 0.5)
            assert validate_weight_matrix(W, rnd.digraph).passed

    def test_twenty_agents_thousand_rounds(self):
        seq = generate_graph_sequence(20, 2, seed=7)
        for k in range(1, 1001):
            rnd = seq.round(k)
            assert validate_weight_matrix(rnd.weights, rnd.digraph).passed
            assert check_strong_connectivity(rnd.digraph)
            assert rnd.digraph.has_self_loops()

    def test_deterministic_and_order_free(self):
        a = GraphSequence(8, 3, seed=4)
        b = GraphSequence(8, 3, seed=4)
        for k in (17, 3, 9):
            np.testing.assert_array_equal(a.weights(k), b.weights(k))
        c = GraphSequence(8, 3, seed=5)
        assert any(not np.array_equal(a.weights(k), c.weights(k)) for k in range(1, 5))

    def test_first_permutation_is_full_cycle(self):
        seq = GraphSequence(9, 2, seed=2)
        for k in range(1, 30):
            cyc = seq.round(k).permutations[1]
            seen, j = set(), 0
            for _ in range(9):
                seen.add(j)
                j = cyc[j]
            assert len(seen) == 9 and j == 0

    def test_weights_read_only(self):
        W = GraphSequence(4, 1, 0).weights(1)
        with pytest.raises(ValueError):
            W[0, 0] = 2.0

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            GraphSequence(0, 1, 0)
        with pytest.raises(ValueError):
            GraphSequence(3, 0, 0)
        with pytest.raises(ValueError):
            GraphSequence(3, 1, 0).round(-1)

    def test_custom_mixing_weights(self):
        seq = GraphSequence(5, 1, seed=3, mixing_weights=[0.7, 0.3])
        W = seq.weights(2)
        np.testing.assert_allclose(np.diag(W), 0.7)
        assert seq.config()["mixing_weights"] == [0.7, 0.3]


class TestBuildWeights:
    def test_identity_only(self):
        W = build_weight_matrix(Digraph.self_loops(4), [np.arange(4)], [1.0])
        np.testing.assert_array_equal(W, np.eye(4))

    def test_three_cycle_half(self):
        g = loops_plus(3, CYCLE3)
        W = build_weight_matrix(g, [np.arange(3), np.array([1, 2, 0])], [0.5, 0.5])
        expected = 0.5 * np.eye(3)
        for j, i in CYCLE3:
            expected[i, j] = 0.5
        np.testing.assert_array_equal(W, expected)

    def test_support_mismatch(self):
        g = loops_plus(3, CYCLE3 + [(0, 2)])
        with pytest.raises(SupportMismatchError):
            build_weight_matrix(g, [np.arange(3), np.array([1, 2, 0])])

    def test_identity_required(self):
        with pytest.raises(ValueError):
            build_weight_matrix(loops_plus(3, CYCLE3), [np.array([1, 2, 0])])

    @pytest.mark.parametrize("w", [[0.0, 1.0], [0.6, 0.6], [-0.5, 1.5]])
    def test_bad_mixing_weights(self, w):
        with pytest.raises(ValueError):
            build_weight_matrix(loops_plus(3, CYCLE3), [np.arange(3), np.array([1, 2, 0])], w)


class TestValidate:
    def test_identity(self):
        rep = validate_weight_matrix(np.eye(3), Digraph.self_loops(3))
        assert rep.passed and rep.deviation == 0.0

    def test_row_sum_violation(self):
        W = np.eye(3)
        W[0, 0] = 1.1
        rep = validate_weight_matrix(W, Digraph.self_loops(3))
        assert not rep.passed
        assert rep.max_row_deviation == pytest.approx(0.1)

    def test_row_but_not_column_stochastic(self):
        rng = np.random.default_rng(0)
        W = rng.uniform(0.1, 1.0, (4, 4))
        W /= W.sum(axis=1, keepdims=True)
        full = Digraph(4, frozenset((j, i) for i in range(4) for j in range(4)))
        rep = validate_weight_matrix(W, full)
        assert rep.max_row_deviation < 1e-12
        assert not rep.passed

    def test_support_mismatch_reported(self):
        W = np.full((2, 2), 0.5)
        rep = validate_weight_matrix(W, Digraph.self_loops(2))
        assert not rep.passed
        assert sorted(rep.support_mismatches) == [(0, 1), (1, 0)]

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            validate_weight_matrix(np.eye(2), Digraph.self_loops(3))


class TestConnectivity:
    def test_single_node(self):
        assert check_strong_connectivity(Digraph.self_loops(1))

    def test_path_is_not_strong(self):
        assert not check_strong_connectivity(loops_plus(3, [(0, 1), (1, 2)]))

    def test_cycle(self):
        assert check_strong_connectivity(loops_plus(3, CYCLE3))


class TestNeighbors:
    def test_self_loop_only(self):
        assert in_neighbors(Digraph.self_loops(3), 2) == {2}

    def test_cycle(self):
        assert in_neighbors(loops_plus(3, CYCLE3), 1) == {0, 1}

    def test_generated_round(self):
        g = generate_graph_sequence(20, 2, seed=1).digraph(3)
        assert all(len(in_neighbors(g, i)) >= 2 and i in in_neighbors(g, i) for i in range(20))

    def test_unknown_agent(self):
        with pytest.raises(KeyError):
            in_neighbors(Digraph.self_loops(2), 5)

    def test_edge_out_of_range(self):
        with pytest.raises(ValueError):
            Digraph(2, frozenset({(0, 3)}))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 12), cycles=st.integers(1, 4), seed=st.integers(0, 2**31), k=st.integers(1, 500))
def test_mixing_is_nonexpansive_and_sum_preserving(n, cycles, seed, k):
    W = GraphSequence(n, cycles, seed).weights(k)
    rng = np.random.default_rng(seed % 1000)
    Z = rng.standard_normal((n, 3))
    mixed = W @ Z
    np.testing.assert_allclose(mixed.sum(axis=0), Z.sum(axis=0), rtol=1e-10, atol=1e-10)
    before = np.linalg.norm(Z - Z.mean(axis=0))
    after = np.linalg.norm(mixed - Z.mean(axis=0))
    assert after <= before * (1 + 1e-12) + 1e-12


def test_export_edges_csv(tmp_path):
    seq = GraphSequence(4, 1, seed=0)
    path = tmp_path / "edges.csv"
    export_edges_csv(seq, range(0, 3), path)
    rows = list(csv.DictReader(open(path)))
    assert set(rows[0]) == {"round", "from", "to", "weight"}
    r2 = [r for r in rows if r["round"] == "2"]
    W = seq.weights(2)
    assert len(r2) == len(seq.digraph(2).edges)
    for r in r2:
        assert float(r["weight"]) == W[int(r["to"]), int(r["from"])]
