"""
Centralized ground truth.

``solve_centralized`` stacks all agents into a single agent and runs the
method of multipliers with the same inner solver used by the distributed
method.  The multipliers are then split into per-agent allocations
satisfying the local KKT system:

    v_i* = A_i x_i* - b_i,
    z_i* = g_i(x_i*) - (1/N) sum_j g_j(x_j*).

``solve_kkt_small`` is an independent dense oracle for purely quadratic,
equality-coupled instances.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import block_diag

from .problem import AgentProblem, L1Norm, QuadraticFunction, ZeroFunction
from .subsolver import (
    InnerSolveParams,
    minimize_augmented_lagrangian,
    solve_dual_subproblem,
    stationarity_residual,
)

__all__ = [
    "ReferenceSolution",
    "ReferenceError",
    "SingularSystemError",
    "stack_agents",
    "solve_centralized",
    "solve_kkt_small",
    "kkt_residuals",
    "optimal_dual_values",
    "dual_gap",
    "save_reference",
    "load_reference",
]

log = logging.getLogger(__name__)


class ReferenceError(RuntimeError):
    """The centralized solve did not converge or looks infeasible."""


class SingularSystemError(ValueError):
    """The dense KKT system is singular."""


@dataclass
class ReferenceSolution:
    x_star: list
    f_star: float
    u_star: np.ndarray
    y_star: np.ndarray
    v_star: list
    z_star: list
    residuals: dict = field(default_factory=dict)
    iterations: int = 0
    phi_star: list = None

    def zeta_star(self):
        return self.u_star, self.y_star

    def to_dict(self):
        return {
            "x_star": [np.asarray(x).tolist() for x in self.x_star],
            "f_star": self.f_star,
            "u_star": np.asarray(self.u_star).tolist(),
            "y_star": np.asarray(self.y_star).tolist(),
            "v_star": [np.asarray(v).tolist() for v in self.v_star],
            "z_star": [np.asarray(z).tolist() for z in self.z_star],
            "residuals": self.residuals,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d):
        arr = lambda xs: [np.array(x, dtype=float) for x in xs]  # noqa: E731
        return cls(arr(d["x_star"]), float(d["f_star"]), np.array(d["u_star"], dtype=float),
                   np.array(d["y_star"], dtype=float), arr(d["v_star"]), arr(d["z_star"]),
                   d.get("residuals", {}), d.get("iterations", 0))


def save_reference(ref, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ref.to_dict(), fh, indent=1)


def load_reference(path):
    with open(path, encoding="utf-8") as fh:
        return ReferenceSolution.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# stacked super-agent

class _BlockSmooth:
    def __init__(self, parts, dims):
        self.parts = parts
        self.offsets = np.cumsum([0] + list(dims))
        self.dim = int(self.offsets[-1])
        self.lipschitz = max(p.lipschitz for p in parts)

    def _blocks(self, x):
        return [x[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def value(self, x):
        return sum(p.value(xi) for p, xi in zip(self.parts, self._blocks(x)))

    def grad(self, x):
        return np.concatenate([p.grad(xi) for p, xi in zip(self.parts, self._blocks(x))])


class _BlockNonsmooth(_BlockSmooth):
    def __init__(self, parts, dims):
        self.parts = parts
        self.offsets = np.cumsum([0] + list(dims))

    def value(self, x):
        return sum(p.value(xi) for p, xi in zip(self.parts, self._blocks(x)))

    def prox(self, v, t):
        return np.concatenate([p.prox(vi, t) for p, vi in zip(self.parts, self._blocks(v))])

    def subgradient(self, x):
        return np.concatenate([p.subgradient(xi) for p, xi in zip(self.parts, self._blocks(x))])


class _SumConstraint:
    """``sum_i g_i(x_i)`` as a function of the stacked vector."""

    def __init__(self, parts, dims, q):
        self.parts = parts
        self.offsets = np.cumsum([0] + list(dims))
        self.q = q
        self.differentiable = all(p.differentiable for p in parts)

    def _blocks(self, x):
        return [x[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def value(self, x):
        return np.sum([p.value(xi) for p, xi in zip(self.parts, self._blocks(x))], axis=0)

    def jacobian(self, x):
        return np.hstack([p.jacobian(xi) for p, xi in zip(self.parts, self._blocks(x))])


def stack_agents(instance):
    """Single agent equivalent to the whole network (``N = 1`` view)."""
    agents = instance.agents
    dims = instance.dims
    smooth_parts = [ag.smooth for ag in agents]
    if all(isinstance(s, QuadraticFunction) for s in smooth_parts):
        smooth = QuadraticFunction(block_diag(*[s.Q for s in smooth_parts]),
                                   np.concatenate([s.r for s in smooth_parts]))
    else:
        smooth = _BlockSmooth(smooth_parts, dims)
    ns = [ag.nonsmooth for ag in agents]
    if all(isinstance(h, ZeroFunction) for h in ns):
        nonsmooth = ZeroFunction()
    elif all(isinstance(h, L1Norm) for h in ns) and len({h.weight for h in ns}) == 1:
        nonsmooth = L1Norm(ns[0].weight)
    else:
        nonsmooth = _BlockNonsmooth(ns, dims)
    constraint = None
    if instance.q:
        constraint = _SumConstraint([ag.constraint for ag in agents], dims, instance.q)
    A = np.hstack([ag.A for ag in agents])
    return AgentProblem(smooth, nonsmooth, A, instance.total_b(), constraint,
                        mu=instance.mu, L_g=instance.L_g)


# --------------------------------------------------------------------------
# solvers

def solve_centralized(instance, tol=1e-10, rho=1.0, max_outer=2000, inner=None, x0=None):
    """Centralized optimum and multipliers by the method of multipliers.

    Parameters
    ----------
    instance : ProblemInstance
    tol : float
        Stop when the multiplier change, the coupled equality residual and
        the positive part of the coupled inequality are all below ``tol``.
    rho : float
        Initial penalty; it is increased tenfold (up to 1e6) whenever the
        constraint violation fails to drop by a factor 4.
    max_outer : int
        Outer iteration budget.
    inner : InnerSolveParams, optional
        Defaults to ``tol / 10`` with a generous iteration budget.  The
        tolerance is scaled by ``max(1, rho)`` at each outer iteration.

    Returns
    -------
    ReferenceSolution
    """
    inner = inner or InnerSolveParams(tol=min(1e-11, tol / 10), max_iter=200000)
    big = stack_agents(instance)
    u = np.zeros(instance.p)
    y = np.zeros(instance.q)
    x = np.zeros(big.dim) if x0 is None else instance.stack(instance.split(x0))
    zeros_p, zeros_q = np.zeros(instance.p), np.zeros(instance.q)
    viol_prev = np.inf
    history = []
    for it in range(1, max_outer + 1):
        # gradient magnitudes grow with the penalty, so does the attainable residual
        params = replace(inner, tol=inner.tol * max(1.0, rho))
        res = minimize_augmented_lagrangian(big, u, y, zeros_p, zeros_q, rho, params, x0=x)
        if not res.converged:
            raise ReferenceError(f"inner solve failed at outer iteration {it} "
                                 f"(residual {res.residual:.3e})")
        x = res.x
        eq = big.A @ x - big.b
        gx = big.g(x)
        u_new = u + rho * eq
        y_new = np.maximum(y + rho * gx, 0.0)
        change = np.linalg.norm(u_new - u) + np.linalg.norm(y_new - y)
        viol = max(np.linalg.norm(eq), float(np.max(np.maximum(gx, 0.0), initial=0.0)))
        u, y = u_new, y_new
        history.append(viol)
        if change <= tol and viol <= tol:
            break
        if viol > 0.25 * viol_prev and rho < 1e6:
            rho = min(10.0 * rho, 1e6)
        viol_prev = viol
        if len(history) > 200 and viol > 1e3 * tol and min(history[-50:]) > 0.9 * min(history[:-50]):
            raise ReferenceError(f"constraint violation plateaued at {viol:.3e}; instance may be infeasible")
    else:
        raise ReferenceError(f"no convergence in {max_outer} outer iterations "
                             f"(violation {viol:.3e}, multiplier change {change:.3e})")

    blocks = instance.split(x)
    gvals = [ag.g(xi) for ag, xi in zip(instance.agents, blocks)]
    g_mean = np.mean(gvals, axis=0) if instance.q else np.zeros(0)
    ref = ReferenceSolution(
        x_star=blocks,
        f_star=float(sum(ag.f(xi) for ag, xi in zip(instance.agents, blocks))),
        u_star=u,
        y_star=y,
        v_star=[ag.A @ xi - ag.b for ag, xi in zip(instance.agents, blocks)],
        z_star=[gv - g_mean for gv in gvals],
        iterations=it,
    )
    ref.residuals = kkt_residuals(instance, ref)
    return ref


def solve_kkt_small(instance, return_multiplier=False):
    """Dense KKT solve for quadratic objectives with equality coupling only.

    Solves ``[H A'; A 0][x; u] = [-r; sum b]`` with ``H = blkdiag(Q_i)``.
    """
    for ag in instance.agents:
        if not isinstance(ag.smooth, QuadraticFunction):
            raise ValueError("solve_kkt_small needs quadratic smooth parts")
        if not (isinstance(ag.nonsmooth, ZeroFunction)
                or (isinstance(ag.nonsmooth, L1Norm) and ag.nonsmooth.weight == 0)):
            raise ValueError("solve_kkt_small needs a zero nonsmooth part")
    if instance.q:
        raise ValueError("solve_kkt_small handles equality coupling only")
    H = block_diag(*[ag.smooth.Q for ag in instance.agents])
    r = np.concatenate([ag.smooth.r for ag in instance.agents])
    A = np.hstack([ag.A for ag in instance.agents])
    n, p = H.shape[0], A.shape[0]
    K = np.block([[H, A.T], [A, np.zeros((p, p))]])
    rhs = np.concatenate([-r, instance.total_b()])
    if np.linalg.cond(K) > 1e14:
        raise SingularSystemError("KKT matrix is singular to working precision")
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from None
    x, u = sol[:n], sol[n:]
    return (x, u) if return_multiplier else x


def kkt_residuals(instance, ref):
    """Residuals of the local and global KKT conditions at ``ref``."""
    out = {"stationarity": 0.0, "local_equality": 0.0, "complementarity": 0.0,
           "local_inequality": 0.0, "zero_sum_v": 0.0, "zero_sum_z": 0.0,
           "coupled_equality": 0.0, "coupled_inequality": 0.0}
    for ag, x, v, z in zip(instance.agents, ref.x_star, ref.v_star, ref.z_star):
        out["stationarity"] = max(out["stationarity"], stationarity_residual(ag, x, ref.u_star, ref.y_star))
        out["local_equality"] = max(out["local_equality"], float(np.linalg.norm(ag.A @ x - ag.b - v)))
        if instance.q:
            slack = ag.g(x) - z
            out["complementarity"] = max(out["complementarity"], abs(float(ref.y_star @ slack)))
            out["local_inequality"] = max(out["local_inequality"], float(np.max(np.maximum(slack, 0.0))))
    out["zero_sum_v"] = float(np.linalg.norm(np.sum(ref.v_star, axis=0)))
    if instance.q:
        out["zero_sum_z"] = float(np.linalg.norm(np.sum(ref.z_star, axis=0)))
    eq = np.sum([ag.A @ x - ag.b for ag, x in zip(instance.agents, ref.x_star)], axis=0)
    out["coupled_equality"] = float(np.linalg.norm(eq))
    if instance.q:
        gs = np.sum([ag.g(x) for ag, x in zip(instance.agents, ref.x_star)], axis=0)
        out["coupled_inequality"] = float(np.max(np.maximum(gs, 0.0)))
    return out


# --------------------------------------------------------------------------
# dual gap

def optimal_dual_values(instance, ref, inner=None):
    """``phi_i(zeta*)`` for every agent (cached on ``ref``)."""
    if ref.phi_star is None:
        inner = inner or InnerSolveParams()
        ref.phi_star = [
            solve_dual_subproblem(ag, ref.zeta_star(), v, z, inner, x0=x)[0]
            for ag, x, v, z in zip(instance.agents, ref.x_star, ref.v_star, ref.z_star)
        ]
    return ref.phi_star


def dual_gap(instance, ref, zetas, inner=None, x_warm=None):
    """``sum_i (phi_i(zeta*) - phi_i(zeta_i))`` with the clamping policy.

    Values in ``[-10 tol, 0)`` are treated as inner-solve noise and returned
    as 0; anything more negative raises ``ValueError``.
    """
    inner = inner or InnerSolveParams()
    phi_star = optimal_dual_values(instance, ref, inner)
    x_warm = x_warm if x_warm is not None else ref.x_star
    total = 0.0
    for ag, zeta, v, z, ps, xw in zip(instance.agents, zetas, ref.v_star, ref.z_star, phi_star, x_warm):
        phi, _, _ = solve_dual_subproblem(ag, zeta, v, z, inner, x0=xw)
        total += ps - phi
    if total < 0:
        if total < -10 * inner.tol:
            raise ValueError(f"dual gap {total:.3e} is negative beyond inner-solve noise")
        log.debug("clamping dual gap %.3e to 0", total)
        total = 0.0
    return float(total)
