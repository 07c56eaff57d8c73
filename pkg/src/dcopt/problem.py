"""
Constraint-coupled problem instances.

Each agent ``i`` owns

    f_i(x) = smooth_i(x) + nonsmooth_i(x),
    A_i (p x d_i), b_i (p,), g_i : R^{d_i} -> R^q,

and the network solves

    min  sum_i f_i(x_i)
    s.t. sum_i A_i x_i = sum_i b_i,   sum_i g_i(x_i) <= 0.

The smooth part exposes value/gradient, the nonsmooth part value and a
proximal operator, and the inequality a value and a (sub)gradient per
component (the rows of ``jacobian``).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QuadraticFunction",
    "ZeroFunction",
    "L1Norm",
    "SquaredDistanceConstraint",
    "L1DistanceConstraint",
    "AgentProblem",
    "ProblemInstance",
    "make_paper_instance",
    "make_quadratic_equality_instance",
    "spectral_norm",
    "smoothness_constant",
    "agent_smoothness_constants",
    "evaluate_objective",
    "coupling_residuals",
    "check_strong_convexity",
    "check_subgradient_bound",
    "check_slater",
    "save_instance",
    "load_instance",
    "instance_to_dict",
    "instance_from_dict",
]

log = logging.getLogger(__name__)

INSTANCE_FORMAT = "dcopt-instance/1"


# --------------------------------------------------------------------------
# oracles

class QuadraticFunction:
    """``0.5 x'Qx + r'x`` with symmetric ``Q``."""

    kind = "quadratic"

    def __init__(self, Q, r):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        r = np.atleast_1d(np.asarray(r, dtype=float))
        if Q.shape != (r.size, r.size):
            raise ValueError(f"Q shape {Q.shape} incompatible with r of size {r.size}")
        self.Q = 0.5 * (Q + Q.T)
        self.r = r
        eig = np.linalg.eigvalsh(self.Q)
        self.modulus = float(eig[0])
        self.lipschitz = float(eig[-1])

    @property
    def dim(self):
        return self.r.size

    @property
    def hessian(self):
        return self.Q

    def value(self, x):
        return 0.5 * x @ self.Q @ x + self.r @ x

    def grad(self, x):
        return self.Q @ x + self.r

    def to_dict(self):
        return {"type": self.kind, "Q": self.Q.tolist(), "r": self.r.tolist()}


class ZeroFunction:
    """The zero function; its prox is the identity."""

    kind = "zero"

    def value(self, x):
        return 0.0

    def prox(self, v, t):
        return v

    def subgradient(self, x):
        return np.zeros_like(x)

    def to_dict(self):
        return {"type": self.kind}


class L1Norm:
    """``weight * ||x||_1``."""

    kind = "l1"

    def __init__(self, weight=1.0):
        if weight < 0:
            raise ValueError("weight must be nonnegative")
        self.weight = float(weight)

    def value(self, x):
        return self.weight * np.abs(x).sum()

    def prox(self, v, t):
        s = t * self.weight
        return np.sign(v) * np.maximum(np.abs(v) - s, 0.0)

    def subgradient(self, x):
        return self.weight * np.sign(x)

    def to_dict(self):
        return {"type": self.kind, "weight": self.weight}


class SquaredDistanceConstraint:
    """``g(x) = ||x - center||^2 - radius^2`` (one component)."""

    kind = "squared_distance"
    differentiable = True
    q = 1

    def __init__(self, center, radius):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.radius = float(radius)

    def value(self, x):
        d = x - self.center
        return np.array([d @ d - self.radius ** 2])

    def jacobian(self, x):
        return 2.0 * (x - self.center)[None, :]

    def gradient_bound(self, operating_radius):
        """Bound on ``||grad g||`` over the ball ``||x|| <= operating_radius``."""
        return 2.0 * (operating_radius + np.linalg.norm(self.center))

    def to_dict(self):
        return {"type": self.kind, "center": self.center.tolist(), "radius": self.radius}


class L1DistanceConstraint:
    """``g(x) = ||x - center||_1 - radius``; nonsmooth, subgradients bounded by sqrt(d)."""

    kind = "l1_distance"
    differentiable = False
    q = 1

    def __init__(self, center, radius):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.radius = float(radius)

    def value(self, x):
        return np.array([np.abs(x - self.center).sum() - self.radius])

    def jacobian(self, x):
        return np.sign(x - self.center)[None, :]

    def gradient_bound(self, operating_radius=None):
        return float(np.sqrt(self.center.size))

    def to_dict(self):
        return {"type": self.kind, "center": self.center.tolist(), "radius": self.radius}


_SMOOTH = {"quadratic": lambda d: QuadraticFunction(d["Q"], d["r"])}
_NONSMOOTH = {"zero": lambda d: ZeroFunction(), "l1": lambda d: L1Norm(d["weight"])}
_CONSTRAINTS = {
    "squared_distance": lambda d: SquaredDistanceConstraint(d["center"], d["radius"]),
    "l1_distance": lambda d: L1DistanceConstraint(d["center"], d["radius"]),
}


# --------------------------------------------------------------------------
# problem containers

@dataclass
class AgentProblem:
    """Private data of one agent.

    ``constraint`` is ``None`` when the agent has no inequality contribution
    (``q = 0``).  ``mu`` is the strong convexity modulus of ``smooth +
    nonsmooth`` and ``L_g`` bounds the constraint subgradients on the
    operating region.
    """

    smooth: object
    nonsmooth: object
    A: np.ndarray
    b: np.ndarray
    constraint: object = None
    mu: float = 1.0
    L_g: float = 0.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if self.A.shape[0] != self.b.size:
            raise ValueError(f"A has {self.A.shape[0]} rows but b has size {self.b.size}")
        if self.A.shape[1] != self.smooth.dim:
            raise ValueError(f"A has {self.A.shape[1]} columns, smooth part has dim {self.smooth.dim}")
        self.AtA = self.A.T @ self.A
        self._A_norm = None

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def p(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return 0 if self.constraint is None else self.constraint.q

    @property
    def A_norm(self) -> float:
        if self._A_norm is None:
            self._A_norm = spectral_norm(self.A)
        return self._A_norm

    def f(self, x):
        return float(self.smooth.value(x) + self.nonsmooth.value(x))

    def g(self, x):
        if self.constraint is None:
            return np.zeros(0)
        return self.constraint.value(x)

    def g_jacobian(self, x):
        if self.constraint is None:
            return np.zeros((0, self.dim))
        return self.constraint.jacobian(x)

    def f_subgradient(self, x):
        return self.smooth.grad(x) + self.nonsmooth.subgradient(x)


@dataclass
class ProblemInstance:
    """The agents' data plus global dimensions and constants."""

    agents: list
    p: int
    q: int
    mu: float
    L_g: float
    slater: list = None
    operating_radius: float = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, ag in enumerate(self.agents):
            if ag.p != self.p:
                raise ValueError(f"agent {i} has p={ag.p}, instance p={self.p}")
            if ag.q != self.q:
                raise ValueError(f"agent {i} has q={ag.q}, instance q={self.q}")

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def dims(self) -> list:
        return [ag.dim for ag in self.agents]

    def split(self, x):
        """Accept a stacked vector or a list of blocks; return a list of blocks."""
        if isinstance(x, (list, tuple)):
            blocks = [np.asarray(xi, dtype=float) for xi in x]
            if [xi.size for xi in blocks] != self.dims:
                raise ValueError(f"block sizes {[xi.size for xi in blocks]} do not match {self.dims}")
            return blocks
        x = np.asarray(x, dtype=float)
        if x.size != sum(self.dims):
            raise ValueError(f"stacked vector of size {x.size}, expected {sum(self.dims)}")
        return np.split(x, np.cumsum(self.dims)[:-1])

    def stack(self, blocks):
        return np.concatenate([np.asarray(xi, dtype=float) for xi in blocks])

    def total_b(self):
        return np.sum([ag.b for ag in self.agents], axis=0)


# --------------------------------------------------------------------------
# generators

def _rng(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def make_paper_instance(n_agents, p, q=1, seed=0, *, mu=1.0, l1_weight=1.0,
                        anchor_scale=0.1, operating_radius=None):
    """Random instance of the quadratic + l1 family with a ball-sum constraint.

    Per agent: ``d_i`` uniform in 1..5, ``Q_i = M'M + mu I`` with standard
    normal ``M``, ``r_i`` and ``A_i`` standard normal, ``a_i`` normal with
    standard deviation ``anchor_scale``, ``b_i = A_i a_i`` and ``c_i``
    uniform in [1, 2].  The inequality is
    ``g_i(x) = ||x - a_i||^2 - c_i^2`` (``q = 1``) and ``x~ = a`` is a
    Slater point.  With ``q = 0`` there is no inequality and with
    ``l1_weight = 0`` the objective is purely quadratic.

    The subgradient bound is only valid on the ball ``||x_i|| <= R``;
    ``L_g = 2 (R + max_i ||a_i||)``.  ``R`` defaults to
    ``max_i ||a_i|| + max_i c_i``.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if q not in (0, 1):
        raise ValueError("this family has at most one inequality component (q in {0, 1})")
    rng = _rng(seed)
    raw = []
    for _ in range(n_agents):
        d = int(rng.integers(1, 6))
        M = rng.standard_normal((d, d))
        Q = M.T @ M + mu * np.eye(d)
        r = rng.standard_normal(d)
        A = rng.standard_normal((p, d))
        a = anchor_scale * rng.standard_normal(d)
        c = rng.uniform(1.0, 2.0)
        raw.append((Q, r, A, a, c))

    max_anchor = max(np.linalg.norm(a) for *_, a, _ in raw)
    if operating_radius is None:
        operating_radius = max_anchor + max(c for *_, c in raw)
    L_g = 2.0 * (operating_radius + max_anchor) if q else 0.0

    agents = []
    for Q, r, A, a, c in raw:
        smooth = QuadraticFunction(Q, r)
        nonsmooth = L1Norm(l1_weight) if l1_weight > 0 else ZeroFunction()
        constraint = SquaredDistanceConstraint(a, c) if q else None
        agents.append(AgentProblem(smooth, nonsmooth, A, A @ a, constraint, mu=mu, L_g=L_g))
    meta = {"generator": "paper", "n_agents": n_agents, "p": p, "q": q, "seed": seed,
            "mu": mu, "l1_weight": l1_weight, "anchor_scale": anchor_scale,
            "operating_radius": operating_radius}
    return ProblemInstance(agents, p, q, mu, L_g, slater=[a for *_, a, _ in raw],
                           operating_radius=float(operating_radius), meta=meta)


def make_quadratic_equality_instance(n_agents, centers, b):
    """``f_i(x) = 0.5 ||x - c_i||^2``, ``A_i = I``, ``b_i = b / n``.

    The optimum is ``x_i* = c_i + (b - sum_j c_j) / n`` with multiplier
    ``u* = -(b - sum_j c_j) / n``.
    """
    centers = [np.atleast_1d(np.asarray(c, dtype=float)) for c in centers]
    if len(centers) != n_agents:
        raise ValueError(f"expected {n_agents} centers, got {len(centers)}")
    d = centers[0].size
    if any(c.size != d for c in centers):
        raise ValueError("all centers must share the same dimension")
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if b.size != d:
        raise ValueError(f"b has size {b.size}, centers have dimension {d}")
    agents = [AgentProblem(QuadraticFunction(np.eye(d), -c), ZeroFunction(), np.eye(d), b / n_agents,
                           None, mu=1.0, L_g=0.0)
              for c in centers]
    slater = [c + (b - np.sum(centers, axis=0)) / n_agents for c in centers]
    meta = {"generator": "quadratic_equality", "n_agents": n_agents,
            "centers": [c.tolist() for c in centers], "b": b.tolist()}
    return ProblemInstance(agents, d, 0, 1.0, 0.0, slater=slater, meta=meta)


# --------------------------------------------------------------------------
# constants and evaluation

def spectral_norm(A, max_iter=200, rtol=1e-10):
    """Largest singular value of ``A`` by power iteration on ``A'A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0 or not np.any(A):
        return 0.0
    G = A.T @ A
    v = np.ones(G.shape[0]) + np.linspace(0.0, 0.5, G.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector in the null space; restart from a coordinate
            v = np.zeros_like(v)
            v[np.argmax(np.abs(G).sum(axis=0))] = 1.0
            continue
        lam_new = v @ w
        v = w / nw
        if abs(lam_new - lam) <= rtol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


def agent_smoothness_constants(instance):
    """Per-agent dual smoothness constants ``(||A_i||^2 + q L_g^2) / mu``."""
    return [(ag.A_norm ** 2 + instance.q * instance.L_g ** 2) / instance.mu
            for ag in instance.agents]


def smoothness_constant(instance):
    """Dual gradient Lipschitz constant ``L = max_i L_i``."""
    if instance.mu <= 0:
        raise ValueError("strong convexity modulus must be positive")
    return max(agent_smoothness_constants(instance))


def evaluate_objective(instance, x):
    return float(sum(ag.f(xi) for ag, xi in zip(instance.agents, instance.split(x))))


def coupling_residuals(instance, x):
    """``(sum_i A_i x_i - sum_i b_i, sum_i g_i(x_i))``."""
    blocks = instance.split(x)
    eq = np.zeros(instance.p)
    ineq = np.zeros(instance.q)
    for ag, xi in zip(instance.agents, blocks):
        eq += ag.A @ xi - ag.b
        ineq += ag.g(xi)
    return eq, ineq


# --------------------------------------------------------------------------
# assumption checks (sampling based)

def check_strong_convexity(instance, n_samples=200, seed=0, scale=None, slack=1e-9):
    """Sample pairs and test ``f(y) >= f(x) + <s, y - x> + mu/2 ||y - x||^2``.

    Returns ``(passed, worst_violation)``.  A nonpositive ``mu`` fails
    outright.
    """
    if not instance.mu > 0:
        return False, float("inf")
    rng = _rng([seed, 1])
    scale = scale or instance.operating_radius or 1.0
    worst = 0.0
    for ag in instance.agents:
        for _ in range(n_samples):
            x = scale * rng.standard_normal(ag.dim)
            y = scale * rng.standard_normal(ag.dim)
            s = ag.f_subgradient(x)
            gap = ag.f(y) - ag.f(x) - s @ (y - x) - 0.5 * instance.mu * (y - x) @ (y - x)
            worst = max(worst, -gap / (1.0 + abs(ag.f(y))))
    return worst <= slack, worst


def check_subgradient_bound(instance, n_samples=200, seed=0):
    """Sample the operating ball and test ``||s|| <= L_g`` for each component.

    Returns ``(passed, max_norm)``.
    """
    if instance.q == 0:
        return True, 0.0
    rng = _rng([seed, 2])
    R = instance.operating_radius if instance.operating_radius is not None else 1.0
    largest = 0.0
    for ag in instance.agents:
        for _ in range(n_samples):
            direction = rng.standard_normal(ag.dim)
            direction /= np.linalg.norm(direction)
            x = R * rng.uniform() ** (1.0 / ag.dim) * direction
            J = ag.g_jacobian(x)
            largest = max(largest, float(np.max(np.linalg.norm(J, axis=1))))
    return largest <= instance.L_g * (1 + 1e-12), largest


def check_slater(instance, tol=1e-9):
    """Evaluate the recorded Slater point.

    Returns ``(passed, eq_residual_norm, ineq_value)``; ``passed`` is
    ``False`` when no certificate is recorded.
    """
    if instance.slater is None:
        return False, float("nan"), np.full(instance.q, np.nan)
    eq, ineq = coupling_residuals(instance, instance.slater)
    eq_norm = float(np.linalg.norm(eq))
    scale = 1.0 + float(np.linalg.norm(instance.total_b()))
    passed = eq_norm <= tol * scale and bool(np.all(ineq < 0))
    return passed, eq_norm, ineq


# --------------------------------------------------------------------------
# serialization

def instance_to_dict(instance):
    agents = []
    for ag in instance.agents:
        agents.append({
            "dim": ag.dim,
            "smooth": ag.smooth.to_dict(),
            "nonsmooth": ag.nonsmooth.to_dict(),
            "A": ag.A.tolist(),
            "b": ag.b.tolist(),
            "constraint": None if ag.constraint is None else ag.constraint.to_dict(),
            "mu": ag.mu,
            "L_g": ag.L_g,
        })
    return {
        "format": INSTANCE_FORMAT,
        "n_agents": instance.n_agents,
        "p": instance.p,
        "q": instance.q,
        "mu": instance.mu,
        "L_g": instance.L_g,
        "operating_radius": instance.operating_radius,
        "slater": None if instance.slater is None else [np.asarray(s).tolist() for s in instance.slater],
        "meta": instance.meta,
        "agents": agents,
    }


def instance_from_dict(data):
    if data.get("format") != INSTANCE_FORMAT:
        raise ValueError(f"unsupported instance format {data.get('format')!r}")
    agents = []
    for a in data["agents"]:
        try:
            smooth = _SMOOTH[a["smooth"]["type"]](a["smooth"])
            nonsmooth = _NONSMOOTH[a["nonsmooth"]["type"]](a["nonsmooth"])
            constraint = None
            if a["constraint"] is not None:
                constraint = _CONSTRAINTS[a["constraint"]["type"]](a["constraint"])
        except KeyError as exc:
            raise ValueError(f"unknown oracle type {exc}") from None
        A = np.array(a["A"], dtype=float).reshape(data["p"], a["dim"])
        agents.append(AgentProblem(smooth, nonsmooth, A, a["b"], constraint, mu=a["mu"], L_g=a["L_g"]))
    slater = None if data["slater"] is None else [np.array(s, dtype=float) for s in data["slater"]]
    return ProblemInstance(agents, data["p"], data["q"], data["mu"], data["L_g"], slater=slater,
                           operating_radius=data["operating_radius"], meta=data.get("meta", {}))


def save_instance(instance, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(instance_to_dict(instance), fh, indent=1)


def load_instance(path):
    with open(path, encoding="utf-8") as fh:
        return instance_from_dict(json.load(fh))
