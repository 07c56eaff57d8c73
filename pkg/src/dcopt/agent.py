"""
Per-agent state and the three update rules of one round.

Round ``k`` of agent ``i``:

1. local update with the round-``k`` mixed duals ``p, q`` and allocations ``v, z``::

       x+ = argmin_x L_rho(x, p, q, v, z)
       u+ = p + rho (A x+ - b - v)
       y+ = [q + rho (g(x+) - z)]_+

2. mixing with ``W^{k+1}``: ``p+ = sum_j W_ij u_j+``, ``q+ = sum_j W_ij y_j+``
3. allocation: ``v+ = v + gamma (u+ - p+)``, ``z+ = z + gamma (y+ - q+)``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .problem import smoothness_constant
from .subsolver import InnerSolveError, InnerSolveParams, minimize_augmented_lagrangian

__all__ = [
    "AgentState",
    "RunParams",
    "LocalUpdate",
    "init_state",
    "resolve_params",
    "local_update",
    "mix_duals",
    "mixing_disagreement",
    "allocation_update",
]

log = logging.getLogger(__name__)

DEFAULT_RHO_FACTOR = 0.9


@dataclass
class AgentState:
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    p_mix: np.ndarray
    q_mix: np.ndarray
    v: np.ndarray
    z: np.ndarray

    def copy(self):
        return AgentState(*(np.array(a, copy=True) for a in
                            (self.x, self.u, self.y, self.p_mix, self.q_mix, self.v, self.z)))


def init_state(agent, u0=None, y0=None, x0=None):
    """Initial state: ``p = u0``, ``q = y0`` (clamped >= 0), ``v = z = 0``.

    ``x0`` is only used as the warm start of the first inner solve.
    """
    u0 = np.zeros(agent.p) if u0 is None else np.array(u0, dtype=float).reshape(agent.p)
    y0 = np.zeros(agent.q) if y0 is None else np.maximum(np.array(y0, dtype=float).reshape(agent.q), 0.0)
    x0 = np.zeros(agent.dim) if x0 is None else np.array(x0, dtype=float).reshape(agent.dim)
    return AgentState(x0, u0, y0, u0.copy(), y0.copy(), np.zeros(agent.p), np.zeros(agent.q))


@dataclass
class RunParams:
    """Penalty ``rho``, allocation step ``gamma`` and number of rounds.

    ``warnings`` collects departures from ``gamma = 1/rho`` and
    ``rho < 1/(2L)``.
    """

    rho: float
    gamma: float
    rounds: int
    L: float = None
    warnings: tuple = ()

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")

    def to_dict(self):
        return {"rho": self.rho, "gamma": self.gamma, "rounds": self.rounds, "L": self.L,
                "warnings": list(self.warnings)}


def resolve_params(instance, rounds, rho=None, gamma=None):
    """Fill in ``rho = 0.9/(2L)`` and ``gamma = 1/rho`` and flag departures."""
    L = smoothness_constant(instance)
    if rho is None:
        rho = DEFAULT_RHO_FACTOR / (2.0 * L) if L > 0 else 1.0
    if gamma is None:
        gamma = 1.0 / rho
    warnings = []
    if L > 0 and not rho < 1.0 / (2.0 * L):
        warnings.append(f"rho={rho:.6g} violates rho < 1/(2L) = {1.0 / (2.0 * L):.6g}")
    if abs(gamma * rho - 1.0) > 1e-12:
        warnings.append(f"gamma={gamma:.6g} differs from 1/rho = {1.0 / rho:.6g}")
    for w in warnings:
        log.warning(w)
    return RunParams(float(rho), float(gamma), int(rounds), float(L), tuple(warnings))


class LocalUpdate(NamedTuple):
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    inner: object


def local_update(state, agent, rho, inner=None, round_index=None):
    """Primal step followed by the two dual steps.

    Raises
    ------
    InnerSolveError
        If the inner solver stops short of its tolerance.
    """
    inner = inner or InnerSolveParams()
    res = minimize_augmented_lagrangian(agent, state.p_mix, state.q_mix, state.v, state.z, rho,
                                        inner, x0=state.x)
    if not res.converged:
        where = "" if round_index is None else f" at round {round_index}"
        raise InnerSolveError(f"inner solve failed{where}: residual {res.residual:.3e} "
                              f"after {res.iterations} iterations", res)
    x = res.x
    u = state.p_mix + rho * (agent.A @ x - agent.b - state.v)
    y = np.maximum(state.q_mix + rho * (agent.g(x) - state.z), 0.0)
    return LocalUpdate(x, u, y, res)


def mix_duals(all_u, all_y, W, i):
    """Weighted combination of the in-neighbors' duals, ``(p_i, q_i)``.

    Only entries with ``W[i, j] > 0`` are read.
    """
    W = np.asarray(W)
    row = W[i]
    if row.size != len(all_u) or len(all_u) != len(all_y):
        raise ValueError("weight row and dual lists must have matching lengths")
    nbrs = np.flatnonzero(row > 0)
    w = row[nbrs]
    U = np.array([all_u[j] for j in nbrs], dtype=float)
    Y = np.array([all_y[j] for j in nbrs], dtype=float)
    p = w @ U if U.ndim == 2 else np.zeros(0)
    q = w @ Y if Y.ndim == 2 else np.zeros(0)
    return p, q


def mixing_disagreement(all_u, all_y, W, i):
    """``(u_i - p_i, y_i - q_i)`` evaluated as ``sum_j W_ij (u_i - u_j)``.

    Equal to the plain difference in exact arithmetic, but the rounding
    error scales with the spread of the neighbors' duals rather than with
    their magnitude.  With ``gamma = 1/rho`` large this keeps the
    allocations' zero-sum drift at the level of the consensus error.
    """
    W = np.asarray(W)
    row = W[i]
    nbrs = np.flatnonzero(row > 0)
    w = row[nbrs]
    du = np.array([all_u[i] - all_u[j] for j in nbrs], dtype=float)
    dy = np.array([all_y[i] - all_y[j] for j in nbrs], dtype=float)
    return w @ du, w @ dy


def allocation_update(state, gamma, disagreement=None):
    """``(v + gamma (u - p), z + gamma (y - q))`` using the state's fresh duals and mixes.

    ``disagreement`` optionally supplies ``(u - p, y - q)`` computed by
    :func:`mixing_disagreement`.
    """
    if disagreement is None:
        disagreement = (state.u - state.p_mix, state.y - state.q_mix)
    du, dy = disagreement
    return state.v + gamma * du, state.z + gamma * dy
