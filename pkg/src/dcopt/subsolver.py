"""
Inner composite solver.

Both the primal step of the distributed method and the evaluation of the
local dual function reduce to

    min_x  S(x) + h(x)

with ``h`` the agent's nonsmooth part (proximable) and ``S`` smooth.  For
the primal step ``S`` is the agent's smooth part plus the equality terms of
the augmented Lagrangian and the squared-hinge inequality penalty; for the
dual function it is the plain Lagrangian.  Both are minimized by an
accelerated proximal gradient method with backtracking and function-value
restart.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = [
    "InnerSolveParams",
    "InnerResult",
    "DualPoint",
    "InnerSolveError",
    "NonsmoothConstraintError",
    "minimize_augmented_lagrangian",
    "augmented_lagrangian_value",
    "stationarity_residual",
    "lagrangian_value",
    "dual_function_value",
    "dual_gradient",
    "solve_dual_subproblem",
]

log = logging.getLogger(__name__)


class InnerSolveError(RuntimeError):
    """The inner minimization did not reach its tolerance."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class NonsmoothConstraintError(ValueError):
    """Squared-hinge penalty of a nondifferentiable constraint with the fallback disabled."""


@dataclass
class InnerSolveParams:
    """Tolerance and budget of the inner solver.

    ``tol`` is the target for the unit-step prox-gradient residual.  The
    subgradient fallback for nondifferentiable constraints is off by
    default.
    """

    tol: float = 1e-9
    max_iter: int = 5000
    subgradient_fallback: bool = False
    record_history: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class InnerResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    method: str = "apg"
    history: list = field(default=None, repr=False)


class DualPoint(NamedTuple):
    u: np.ndarray
    y: np.ndarray


# --------------------------------------------------------------------------
# smooth models

class _SmoothModel:
    """Smooth part of the augmented Lagrangian (``hinge``) or Lagrangian (``linear``).

    The equality terms are folded into a single quadratic when the agent's
    smooth part is quadratic.
    """

    def __init__(self, agent, lin_mult, quad_weight, target, ineq_mode, ineq_mult, rho, z):
        self.agent = agent
        A = agent.A
        # equality part: <lin_mult, A x - target> + quad_weight/2 ||A x - target||^2
        self.quadratic = getattr(agent.smooth, "hessian", None) is not None
        self.quad_weight = quad_weight
        if self.quadratic:
            self.H = agent.smooth.hessian + quad_weight * agent.AtA if quad_weight else agent.smooth.hessian
            self.lin = agent.smooth.r + A.T @ (lin_mult - quad_weight * target)
            self.const = -lin_mult @ target + 0.5 * quad_weight * (target @ target)
        else:
            self.lin_mult, self.target = lin_mult, target
        self.con = agent.constraint if agent.q else None
        self.mode = ineq_mode
        self.mult = ineq_mult
        self.rho = rho
        self.z = z
        if self.con is not None:
            self._vj = getattr(self.con, "value_and_jacobian", None)
            if self.mode == "hinge":
                self.offset = ineq_mult - rho * z
                self.hinge_const = -(ineq_mult @ ineq_mult) / (2 * rho)

    def _ineq(self, x, need_grad):
        con = self.con
        if need_grad:
            if self._vj is not None:
                gv, J = self._vj(x)
            else:
                gv, J = con.value(x), con.jacobian(x)
        else:
            gv, J = con.value(x), None
        if self.mode == "hinge":
            hp = np.maximum(self.offset + self.rho * gv, 0.0)
            val = (hp @ hp) / (2 * self.rho) + self.hinge_const
            return val, (J.T @ hp if need_grad else None)
        val = self.mult @ (gv - self.z)
        return val, (J.T @ self.mult if need_grad else None)

    def value(self, x):
        if self.quadratic:
            val = 0.5 * (x @ (self.H @ x)) + self.lin @ x + self.const
        else:
            e = self.agent.A @ x - self.target
            val = self.agent.smooth.value(x) + self.lin_mult @ e + 0.5 * self.quad_weight * (e @ e)
        if self.con is not None:
            val += self._ineq(x, False)[0]
        return val

    def value_grad(self, x):
        if self.quadratic:
            Hx = self.H @ x
            val = 0.5 * (x @ Hx) + self.lin @ x + self.const
            grad = Hx + self.lin
        else:
            A = self.agent.A
            e = A @ x - self.target
            val = self.agent.smooth.value(x) + self.lin_mult @ e + 0.5 * self.quad_weight * (e @ e)
            grad = self.agent.smooth.grad(x) + A.T @ (self.lin_mult + self.quad_weight * e)
        if self.con is not None:
            iv, ig = self._ineq(x, True)
            val += iv
            grad = grad + ig
        return val, grad

    def lipschitz_guess(self, x0):
        agent = self.agent
        if self.quadratic:
            L = _power_lipschitz(agent, self.H, self.quad_weight)
        else:
            L = agent.smooth.lipschitz + self.quad_weight * agent.A_norm ** 2
        if self.con is not None:
            J = self.con.jacobian(x0)
            if self.mode == "hinge":
                h = np.maximum(self.offset + self.rho * self.con.value(x0), 0.0)
                L += self.rho * float(np.sum(J * J)) + 2.0 * float(h.sum())
            else:
                L += 2.0 * float(np.sum(np.abs(self.mult)))
        return max(L, 1e-12)


def _power_lipschitz(agent, H, weight):
    """Largest eigenvalue of ``Q + weight A'A`` by power iteration, cached per weight."""
    cache = agent.__dict__.setdefault("_lipschitz_cache", {})
    L = cache.get(weight)
    if L is None:
        v = np.ones(H.shape[0]) / np.sqrt(H.shape[0])
        L = 0.0
        for _ in range(200):
            w = H @ v
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break
            L_new, v = v @ w, w / nw
            if abs(L_new - L) <= 1e-8 * L_new:
                L = L_new
                break
            L = L_new
        # small margin; backtracking covers any remaining underestimate
        L = 1.01 * L
        cache[weight] = L
    return L


def _al_model(agent, p_mix, q_mix, v, z, rho):
    return _SmoothModel(agent, p_mix, rho, agent.b + v, "hinge", q_mix, rho, z)


def _lagrangian_model(agent, u, y, v_ref, z_ref):
    return _SmoothModel(agent, u, 0.0, agent.b + v_ref, "linear", y, 0.0, z_ref)


# --------------------------------------------------------------------------
# core methods

def _unit_residual(prox, x, grad):
    return float(np.linalg.norm(x - prox(x - grad, 1.0)))


def _apg(model, nonsmooth, x0, params, verify=None):
    """Accelerated proximal gradient with backtracking and restart-on-increase."""
    prox = nonsmooth.prox
    hval = nonsmooth.value
    tol = params.tol
    x = np.array(x0, dtype=float)
    fx, gx = model.value_grad(x)
    Fx = fx + hval(x)
    history = [Fx] if params.record_history else None

    res = _unit_residual(prox, x, gx)
    if res <= tol and (verify is None or verify(x) <= tol):
        return InnerResult(x, 0, res, True, history=history)

    step = 1.0 / model.lipschitz_guess(x)
    y, fy, gy = x, fx, gx
    t = 1.0
    best = (res, x)
    for it in range(1, params.max_iter + 1):
        while True:
            xn = prox(y - step * gy, step)
            d = xn - y
            dd = d @ d
            fn, gn = model.value_grad(xn)
            if dd == 0.0:
                break
            if abs(fn - fy) > 1e-10 * max(abs(fn), abs(fy), 1.0):
                ok = fn - fy - gy @ d <= dd / (2.0 * step) + 1e-13 * (1.0 + abs(fy))
            else:
                # value differences below float resolution: Lipschitz test on gradients
                dg = gn - gy
                ok = (dg @ dg) * step * step <= dd
            if ok:
                break
            step *= 0.5
        Fn = fn + hval(xn)
        # restart on objective increase; the gradient test keeps working once
        # objective differences drop below float resolution
        if t > 1.0 and (Fn > Fx + 1e-12 * (1.0 + abs(Fx)) or (y - xn) @ (xn - x) > 0):
            t = 1.0
            y, fy, gy = x, fx, gx
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        x_prev = x
        x, fx, gx, Fx = xn, fn, gn, Fn
        if history is not None:
            history.append(Fn)
        if np.sqrt(dd) * min(1.0, 1.0 / step) <= tol or it % 25 == 0:
            res = _unit_residual(prox, x, gx)
            if res < best[0]:
                best = (res, x)
            if res <= tol and (verify is None or verify(x) <= tol):
                return InnerResult(x, it, res, True, history=history)
        beta = (t - 1.0) / t_new
        t = t_new
        if beta == 0.0:
            y, fy, gy = x, fx, gx
        else:
            y = x + beta * (x - x_prev)
            fy, gy = model.value_grad(y)
    res, xb = best
    return InnerResult(xb, params.max_iter, res, False, history=history)


def _subgradient_method(model, nonsmooth, x0, params):
    """Proximal subgradient method with steps ``t0 / sqrt(k + 1)``, best iterate kept."""
    x = np.array(x0, dtype=float)
    t0 = 1.0 / model.lipschitz_guess(x)
    fx, gx = model.value_grad(x)
    best_F, best_x = fx + nonsmooth.value(x), x
    budget = 10 * params.max_iter
    window = max(params.max_iter // 10, 10)
    last_improved = 0
    it = 0
    for it in range(1, budget + 1):
        x = nonsmooth.prox(x - (t0 / np.sqrt(it)) * gx, t0 / np.sqrt(it))
        fx, gx = model.value_grad(x)
        F = fx + nonsmooth.value(x)
        if F < best_F - params.tol * (1.0 + abs(best_F)):
            last_improved = it
        if F < best_F:
            best_F, best_x = F, x
        if it - last_improved >= window:
            break
    _, g_best = model.value_grad(best_x)
    res = _unit_residual(nonsmooth.prox, best_x, g_best)
    return InnerResult(best_x, it, res, it < budget, method="subgradient")


def _solve(model, agent, x0, params, verify=None):
    if agent.q and not agent.constraint.differentiable:
        if not params.subgradient_fallback:
            raise NonsmoothConstraintError(
                f"constraint {type(agent.constraint).__name__} is not differentiable; "
                "enable subgradient_fallback to use the subgradient method")
        return _subgradient_method(model, agent.nonsmooth, x0, params)
    return _apg(model, agent.nonsmooth, x0, params, verify)


# --------------------------------------------------------------------------
# public operations

def _vec(a, n):
    a = np.zeros(n) if a is None else np.atleast_1d(np.asarray(a, dtype=float))
    if a.size != n:
        raise ValueError(f"expected a vector of size {n}, got {a.size}")
    return a


def minimize_augmented_lagrangian(agent, p_mix, q_mix, v, z, rho, params=None, x0=None):
    """Minimize the local augmented Lagrangian over ``x``.

    Parameters
    ----------
    agent : AgentProblem
    p_mix, q_mix : array_like
        Mixed equality and inequality multipliers (``q_mix`` may have any sign).
    v, z : array_like
        Current allocations.
    rho : float
        Penalty parameter, positive.
    params : InnerSolveParams, optional
    x0 : array_like, optional
        Warm start; zero by default.

    Returns
    -------
    InnerResult
        ``converged`` is ``False`` when the budget ran out; ``x`` is then
        the iterate with the smallest residual seen.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    params = params or InnerSolveParams()
    p_mix, v = _vec(p_mix, agent.p), _vec(v, agent.p)
    q_mix, z = _vec(q_mix, agent.q), _vec(z, agent.q)
    x0 = _vec(x0, agent.dim)
    model = _al_model(agent, p_mix, q_mix, v, z, rho)

    def verify(x):
        u = p_mix + rho * (agent.A @ x - agent.b - v)
        y = np.maximum(q_mix + rho * (agent.g(x) - z), 0.0)
        return stationarity_residual(agent, x, u, y)

    return _solve(model, agent, x0, params, verify)


def augmented_lagrangian_value(agent, x, p_mix, q_mix, v, z, rho):
    """Direct evaluation of the local augmented Lagrangian."""
    e = agent.A @ x - agent.b - v
    hp = np.maximum(q_mix + rho * (agent.g(x) - z), 0.0)
    return float(agent.f(x) + p_mix @ e + 0.5 * rho * (e @ e)
                 + (hp @ hp) / (2 * rho) - (q_mix @ q_mix) / (2 * rho))


def stationarity_residual(agent, x, u, y):
    """Unit-step prox-gradient residual of the Lagrangian at ``(u, y)``.

    Zero iff ``x`` minimizes ``f(x) + <u, A x> + <y, g(x)>``.
    """
    x = np.asarray(x, dtype=float)
    grad = agent.smooth.grad(x) + agent.A.T @ np.asarray(u, dtype=float)
    if agent.q:
        grad = grad + agent.g_jacobian(x).T @ np.asarray(y, dtype=float)
    return _unit_residual(agent.nonsmooth.prox, x, grad)


def lagrangian_value(agent, x, u, y, v_ref, z_ref):
    val = agent.f(x) + u @ (agent.A @ x - agent.b - v_ref)
    if agent.q:
        val += y @ (agent.g(x) - z_ref)
    return float(val)


def solve_dual_subproblem(agent, zeta, v_ref=None, z_ref=None, params=None, x0=None):
    """Minimize the Lagrangian at ``zeta``; returns ``(value, x_hat, InnerResult)``.

    Negative inequality multipliers are clamped to zero first.
    """
    params = params or InnerSolveParams()
    u = _vec(zeta[0], agent.p)
    y = np.maximum(_vec(zeta[1], agent.q), 0.0)
    v_ref, z_ref = _vec(v_ref, agent.p), _vec(z_ref, agent.q)
    model = _lagrangian_model(agent, u, y, v_ref, z_ref)
    result = _solve(model, agent, _vec(x0, agent.dim), params)
    if not result.converged:
        raise InnerSolveError(
            f"dual subproblem stopped at residual {result.residual:.3e} after {result.iterations} iterations",
            result)
    return lagrangian_value(agent, result.x, u, y, v_ref, z_ref), result.x, result


def dual_function_value(agent, zeta, v_ref=None, z_ref=None, params=None, x0=None):
    """Local dual function value and its unique minimizer."""
    value, x, _ = solve_dual_subproblem(agent, zeta, v_ref, z_ref, params, x0)
    return value, x


def dual_gradient(agent, zeta, v_ref=None, z_ref=None, params=None, x0=None):
    """Gradient of the local dual function, ``(A x - b - v_ref, g(x) - z_ref)``."""
    v_ref, z_ref = _vec(v_ref, agent.p), _vec(z_ref, agent.q)
    _, x, _ = solve_dual_subproblem(agent, zeta, v_ref, z_ref, params, x0)
    return agent.A @ x - agent.b - v_ref, agent.g(x) - z_ref
