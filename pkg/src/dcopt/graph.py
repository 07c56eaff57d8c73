"""
Time-varying directed communication graphs and doubly stochastic weights.

Each round k >= 1 is built as the union of the self-loops and a handful of
random permutations, one of which is forced to be a single N-cycle.  The
weight matrix is the convex combination of the corresponding permutation
matrices, so it is doubly stochastic with exactly the graph's support.
Round 0 is the self-loop-only graph with identity weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

__all__ = [
    "Digraph",
    "GraphRound",
    "GraphSequence",
    "WeightValidation",
    "SupportMismatchError",
    "generate_graph_sequence",
    "build_weight_matrix",
    "validate_weight_matrix",
    "check_strong_connectivity",
    "in_neighbors",
    "permutation_edges",
    "export_edges_csv",
]

DOUBLY_STOCHASTIC_TOL = 1e-12


class SupportMismatchError(ValueError):
    """Permutation edges do not reproduce the digraph's edge set."""


@dataclass(frozen=True)
class Digraph:
    """Directed graph on agents ``0..n_agents-1``.

    An edge ``(j, i)`` means that ``j`` sends to ``i``.
    """

    n_agents: int
    edges: frozenset

    def __post_init__(self):
        for j, i in self.edges:
            if not (0 <= j < self.n_agents and 0 <= i < self.n_agents):
                raise ValueError(f"edge {(j, i)} outside 0..{self.n_agents - 1}")

    @classmethod
    def self_loops(cls, n_agents: int) -> "Digraph":
        return cls(n_agents, frozenset((i, i) for i in range(n_agents)))

    def has_self_loops(self) -> bool:
        return all((i, i) in self.edges for i in range(self.n_agents))

    def adjacency(self) -> np.ndarray:
        """Boolean matrix with ``adj[i, j]`` true iff ``(j, i)`` is an edge."""
        adj = np.zeros((self.n_agents, self.n_agents), dtype=bool)
        for j, i in self.edges:
            adj[i, j] = True
        return adj


@dataclass(frozen=True)
class GraphRound:
    """One round of a sequence: the digraph, its weights and the permutations used."""

    k: int
    digraph: Digraph
    weights: np.ndarray
    permutations: tuple


@dataclass
class WeightValidation:
    passed: bool
    max_row_deviation: float
    max_col_deviation: float
    support_mismatches: list
    negative_entries: int = 0

    @property
    def deviation(self) -> float:
        return max(self.max_row_deviation, self.max_col_deviation)


def permutation_edges(perm) -> set:
    """Edges ``(j, perm[j])`` of a permutation given in image form."""
    return {(j, int(t)) for j, t in enumerate(perm)}


def _permutation_matrix(perm) -> np.ndarray:
    n = len(perm)
    P = np.zeros((n, n))
    P[np.asarray(perm, dtype=int), np.arange(n)] = 1.0
    return P


def build_weight_matrix(digraph: Digraph, permutations, mixing_weights=None) -> np.ndarray:
    """Convex combination of permutation matrices with the digraph's support.

    Parameters
    ----------
    digraph : Digraph
        Target graph.  Must equal the union of the permutations' edges.
    permutations : sequence of array_like
        Permutations in image form, ``perm[j]`` is the agent ``j`` sends to.
        The identity must be one of them.
    mixing_weights : array_like, optional
        Strictly positive weights summing to one.  Uniform by default.

    Returns
    -------
    W : ndarray
        ``W = sum_m alpha_m P_m``, doubly stochastic by construction.
    """
    n = digraph.n_agents
    perms = [np.asarray(p, dtype=int) for p in permutations]
    if not perms:
        raise ValueError("at least one permutation is required")
    if mixing_weights is None:
        mixing_weights = np.full(len(perms), 1.0 / len(perms))
    alpha = np.asarray(mixing_weights, dtype=float)
    if alpha.shape != (len(perms),):
        raise ValueError("one mixing weight per permutation is required")
    if np.any(alpha <= 0) or abs(alpha.sum() - 1.0) > 1e-12:
        raise ValueError("mixing weights must be strictly positive and sum to 1")
    identity = np.arange(n)
    if not any(np.array_equal(p, identity) for p in perms):
        raise ValueError("the identity permutation must be included")

    union = set()
    for p in perms:
        if p.shape != (n,) or sorted(p.tolist()) != list(range(n)):
            raise ValueError(f"not a permutation of 0..{n - 1}: {p.tolist()}")
        union |= permutation_edges(p)
    if union != set(digraph.edges):
        missing = sorted(set(digraph.edges) - union)
        extra = sorted(union - set(digraph.edges))
        raise SupportMismatchError(f"support mismatch: missing {missing}, extra {extra}")

    W = np.zeros((n, n))
    for a, p in zip(alpha, perms):
        W += a * _permutation_matrix(p)
    return W


def validate_weight_matrix(W, digraph: Digraph, tol: float = DOUBLY_STOCHASTIC_TOL) -> WeightValidation:
    """Check double stochasticity and support against ``digraph``."""
    W = np.asarray(W, dtype=float)
    n = digraph.n_agents
    if W.shape != (n, n):
        raise ValueError(f"weight matrix shape {W.shape} does not match {n} agents")
    row_dev = float(np.max(np.abs(W.sum(axis=1) - 1.0)))
    col_dev = float(np.max(np.abs(W.sum(axis=0) - 1.0)))
    negative = int(np.count_nonzero(W < 0))
    adj = digraph.adjacency()
    mism = np.argwhere((W > 0) != adj)
    mismatches = [(int(i), int(j)) for i, j in mism]
    passed = row_dev <= tol and col_dev <= tol and not mismatches and negative == 0
    return WeightValidation(passed, row_dev, col_dev, mismatches, negative)


def check_strong_connectivity(digraph: Digraph) -> bool:
    """True iff a single strongly connected component covers every agent."""
    n = digraph.n_agents
    if n == 0:
        return False
    if not digraph.edges:
        return n == 1
    rows, cols = zip(*digraph.edges)
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    n_comp, _ = connected_components(graph, directed=True, connection="strong")
    return n_comp == 1


def in_neighbors(digraph: Digraph, i: int) -> set:
    """Agents ``j`` with ``(j, i)`` in the edge set."""
    if not 0 <= i < digraph.n_agents:
        raise KeyError(f"unknown agent {i}")
    return {j for j, t in digraph.edges if t == i}


class GraphSequence:
    """Reproducible sequence of (digraph, weight matrix) pairs.

    Rounds are random-access: round ``k`` is drawn from a generator seeded
    with ``(seed, k)``, so the sequence does not depend on the order in
    which rounds are requested.

    Parameters
    ----------
    n_agents : int
        Number of agents.
    n_cycles : int
        Number of random permutations per round (the first is a full cycle).
    seed : int
        Graph seed.
    mixing_weights : array_like, optional
        Weights over ``[identity, perm_1, ..., perm_n_cycles]``.  Uniform
        by default.
    """

    def __init__(self, n_agents: int, n_cycles: int, seed: int, mixing_weights=None):
        if n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if n_cycles < 1:
            raise ValueError("n_cycles must be >= 1")
        self.n_agents = int(n_agents)
        self.n_cycles = int(n_cycles)
        self.seed = int(seed)
        if mixing_weights is not None:
            mixing_weights = tuple(float(a) for a in mixing_weights)
            if len(mixing_weights) != n_cycles + 1:
                raise ValueError("need n_cycles + 1 mixing weights")
        self.mixing_weights = mixing_weights
        self._cached = lru_cache(maxsize=4)(self._build)

    def __repr__(self):
        return (f"GraphSequence(n_agents={self.n_agents}, n_cycles={self.n_cycles}, "
                f"seed={self.seed})")

    def config(self) -> dict:
        out = {"n_agents": self.n_agents, "n_cycles": self.n_cycles, "seed": self.seed}
        if self.mixing_weights is not None:
            out["mixing_weights"] = list(self.mixing_weights)
        return out

    def _draw_permutations(self, k: int):
        n = self.n_agents
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, k])))
        order = rng.permutation(n)
        cycle = np.empty(n, dtype=int)
        cycle[order] = np.roll(order, -1)
        perms = [cycle]
        for _ in range(self.n_cycles - 1):
            perms.append(rng.permutation(n))
        return perms

    def _build(self, k: int) -> GraphRound:
        n = self.n_agents
        identity = np.arange(n)
        if k == 0:
            return GraphRound(0, Digraph.self_loops(n), np.eye(n), (identity,))
        perms = [identity] + self._draw_permutations(k)
        edges = set()
        for p in perms:
            edges |= permutation_edges(p)
        digraph = Digraph(n, frozenset(edges))
        W = build_weight_matrix(digraph, perms, self.mixing_weights)
        W.setflags(write=False)
        return GraphRound(k, digraph, W, tuple(perms))

    def round(self, k: int) -> GraphRound:
        if k < 0:
            raise ValueError("round index must be >= 0")
        return self._cached(int(k))

    def digraph(self, k: int) -> Digraph:
        return self.round(k).digraph

    def weights(self, k: int) -> np.ndarray:
        return self.round(k).weights

    def __iter__(self):
        k = 0
        while True:
            yield self.round(k)
            k += 1


def generate_graph_sequence(n_agents: int, n_cycles: int, seed: int) -> GraphSequence:
    """Build the permutation-union graph sequence for ``n_agents`` agents."""
    return GraphSequence(n_agents, n_cycles, seed)


def export_edges_csv(graphs: GraphSequence, rounds, path) -> None:
    """Write per-round weighted edge lists with columns round, from, to, weight."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "from", "to", "weight"])
        for k in rounds:
            W = graphs.weights(k)
            for j, i in sorted(graphs.digraph(k).edges):
                writer.writerow([k, j, i, repr(float(W[i, j]))])
