"""
Synchronous lock-step execution of the distributed method.

Each round has three phases separated by barriers:

* local: every agent minimizes its augmented Lagrangian and forms ``(u, y)``;
* synchronize: agents send ``u`` and ``y`` along the edges of the next
  graph and combine what they receive with their row of ``W``;
* allocate: every agent moves its ``(v, z)`` share.

Only the two dual payload kinds may travel over the network.  Every message
is checked against the round's edge set as it is delivered, and the
aggregated log is kept on the trace for :func:`audit_messages`.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as _metrics
from .agent import allocation_update, init_state, local_update, mix_duals, mixing_disagreement
from .reference import dual_gap
from .subsolver import InnerSolveError, InnerSolveParams

__all__ = [
    "DUAL_KINDS",
    "ZERO_SUM_HARD_CAP",
    "Message",
    "MessageLog",
    "RecordPolicy",
    "RunTrace",
    "AuditReport",
    "InvariantViolation",
    "run",
    "audit_messages",
    "write_trace",
]

log = logging.getLogger(__name__)

DUAL_KINDS = ("dual_equality", "dual_inequality")
ZERO_SUM_HARD_CAP = 1e-6


class InvariantViolation(RuntimeError):
    """An invariant that holds by construction was broken (implementation bug)."""


@dataclass(frozen=True)
class Message:
    round: int
    sender: int
    receiver: int
    kind: str
    payload: np.ndarray


class MessageLog:
    """Aggregated record of every delivered message.

    Keeps per-edge counts by kind, per-round totals and the list of
    violations (wrong kind, edge outside the round's graph, wrong payload
    size, duplicate or missing message on an edge).
    """

    def __init__(self, n_agents, p, q):
        self.n_agents = n_agents
        self.p = p
        self.q = q
        self.edge_counts = defaultdict(Counter)
        self.edge_scalars = Counter()
        self.rounds = []  # (round, messages, scalars, edges)
        self.violations = []

    def _violate(self, k, sender, receiver, kind, reason):
        self.violations.append({"round": k, "from": sender, "to": receiver, "kind": kind, "reason": reason})

    def record_round(self, k, digraph, messages):
        edges = digraph.edges
        kinds = DUAL_KINDS if self.q else DUAL_KINDS[:1]
        sizes = {"dual_equality": self.p, "dual_inequality": self.q}
        seen = Counter()
        scalars = 0
        for m in messages:
            size = int(np.size(m.payload))
            scalars += size
            self.edge_counts[(m.sender, m.receiver)][m.kind] += 1
            self.edge_scalars[(m.sender, m.receiver)] += size
            if m.kind not in DUAL_KINDS:
                self._violate(k, m.sender, m.receiver, m.kind, "non-dual payload")
            elif size != sizes[m.kind]:
                self._violate(k, m.sender, m.receiver, m.kind, f"payload size {size} != {sizes[m.kind]}")
            if (m.sender, m.receiver) not in edges:
                self._violate(k, m.sender, m.receiver, m.kind, "edge not in round graph")
            if m.round != k:
                self._violate(k, m.sender, m.receiver, m.kind, f"message tagged round {m.round}")
            seen[(m.sender, m.receiver, m.kind)] += 1
        for (j, i, kind), c in seen.items():
            if c > 1 and kind in DUAL_KINDS:
                self._violate(k, j, i, kind, f"{c} messages on one edge")
        for j, i in edges:
            for kind in kinds:
                if seen[(j, i, kind)] == 0:
                    self._violate(k, j, i, kind, "missing message")
        self.rounds.append((k, len(messages), scalars, len(edges)))


@dataclass
class RecordPolicy:
    """Which rounds get a metrics row.

    Every round up to ``full_until``, then every ``every``-th round; the
    last round is always recorded.  ``full_until=None`` records every
    round.  The dual gap is evaluated on every ``dual_gap_every``-th
    recorded round (0 disables it).
    """

    full_until: int = 1000
    every: int = 10
    dual_gap_every: int = 10

    def __post_init__(self):
        if self.every < 1:
            raise ValueError("every must be >= 1")
        if self.dual_gap_every < 0:
            raise ValueError("dual_gap_every must be >= 0")

    def records(self, k, last):
        if k == last or self.full_until is None or k <= self.full_until:
            return True
        return k % self.every == 0


@dataclass
class RunTrace:
    records: list
    log: MessageLog
    final_states: list
    params: dict
    wall_time: float = 0.0
    rounds_completed: int = 0
    failure: dict = None
    max_zero_sum_ratio: float = 0.0
    zero_sum_history: np.ndarray = None
    running_average_gap: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def ok(self):
        return self.failure is None

    @property
    def zero_sum_ok(self):
        """Every completed round kept the zero-sum ratio within ``ZERO_SUM_TOL``."""
        return self.max_zero_sum_ratio <= _metrics.ZERO_SUM_TOL

    def metric(self, name):
        """``(ks, values)`` for the rounds where ``name`` is present."""
        pairs = [(r.k, getattr(r, name)) for r in self.records if getattr(r, name) is not None]
        if not pairs:
            return np.zeros(0, dtype=int), np.zeros(0)
        ks, vals = zip(*pairs)
        return np.array(ks), np.array(vals)


@dataclass
class AuditReport:
    passed: bool
    violations: list
    rounds_checked: int
    messages: int
    scalars: int
    count_mismatches: list


def _per_agent(values, n, name):
    if values is None:
        return [None] * n
    values = list(values)
    if len(values) != n:
        raise ValueError(f"{name} needs one entry per agent")
    return values


def run(instance, graphs, params, inner=None, reference=None, seed=None, *, x0=None, u0=None,
        y0=None, record=None, average_gap_at=None, threads=1, message_hook=None, phase_hook=None,
        state_hook=None):
    """Run ``params.rounds`` rounds and return the trace.

    Parameters
    ----------
    instance : ProblemInstance
    graphs : GraphSequence
        Round ``k`` mixes with ``graphs.weights(k + 1)``.
    params : RunParams
    inner : InnerSolveParams, optional
    reference : ReferenceSolution, optional
        Enables the reference-dependent metrics and the dual gaps.
    seed : int, optional
        Echoed only; all randomness lives in the instance and graph seeds.
    x0, u0, y0 : list, optional
        Per-agent initial warm start and duals (zero by default).
    record : RecordPolicy, optional
    average_gap_at : iterable of int, optional
        Horizons ``K`` at which the gap of the running dual average
        ``(1/K) sum_{k<K} zeta^k`` is evaluated.  Needs ``reference``.
    threads : int
        Worker threads for the local phase; results do not depend on it.
    message_hook : callable, optional
        ``message_hook(k, messages) -> messages`` applied before delivery
        (fault injection in tests).
    phase_hook : callable, optional
        ``phase_hook(phase, k)`` called at each barrier.
    state_hook : callable, optional
        ``state_hook(k, states)`` called after round ``k`` completes with
        the live agent states (read-only use expected).

    Returns
    -------
    RunTrace
        ``trace.failure`` is set and the records stop early when an inner
        solve fails or the zero-sum tripwire fires.
    """
    n = instance.n_agents
    if graphs.n_agents != n:
        raise ValueError(f"graph sequence has {graphs.n_agents} agents, instance has {n}")
    inner = inner or InnerSolveParams()
    record = record or RecordPolicy()
    K = params.rounds
    avg_at = sorted({int(a) for a in (average_gap_at or ()) if 1 <= int(a) <= K})
    if avg_at and reference is None:
        raise ValueError("running-average gaps need a reference solution")

    agents = instance.agents
    x0, u0, y0 = (_per_agent(a, n, nm) for a, nm in ((x0, "x0"), (u0, "u0"), (y0, "y0")))
    states = [init_state(ag, u, y, x) for ag, u, y, x in zip(agents, u0, y0, x0)]
    msg_log = MessageLog(n, instance.p, instance.q)
    echo = {
        "instance": dict(instance.meta),
        "graph": graphs.config(),
        "run": params.to_dict(),
        "inner": {"tol": inner.tol, "max_iter": inner.max_iter,
                  "subgradient_fallback": inner.subgradient_fallback},
        "record": {"full_until": record.full_until, "every": record.every,
                   "dual_gap_every": record.dual_gap_every},
        "seed": seed,
    }
    trace = RunTrace([], msg_log, states, echo, zero_sum_history=np.zeros(K + 1))
    trace.warnings.extend(params.warnings)
    radius = instance.operating_radius
    outside = set()

    u_sum = [np.zeros(instance.p) for _ in range(n)]
    y_sum = [np.zeros(instance.q) for _ in range(n)]
    n_recorded = 0

    def record_round(k):
        nonlocal n_recorded
        gap = None
        if reference is not None and record.dual_gap_every and (
                n_recorded % record.dual_gap_every == 0 or k == K):
            gap = dual_gap(instance, reference, [(s.u, s.y) for s in states], inner,
                           x_warm=[s.x for s in states])
        m = _metrics.compute_round_metrics(states, instance, reference, k, dual_gap=gap)
        m.check()
        trace.records.append(m)
        n_recorded += 1

    pool = ThreadPoolExecutor(max_workers=threads) if threads and threads > 1 else None
    t_start = time.perf_counter()
    try:
        record_round(0)
        for k in range(K):
            # running dual sums include zeta^0 .. zeta^k
            for i, s in enumerate(states):
                u_sum[i] += s.u
                y_sum[i] += s.y
            if k + 1 in avg_at:
                zbar = [(us / (k + 1), ys / (k + 1)) for us, ys in zip(u_sum, y_sum)]
                trace.running_average_gap[k + 1] = dual_gap(instance, reference, zbar, inner)

            # local phase
            if phase_hook:
                phase_hook("local", k)
            jobs = list(zip(states, agents))
            try:
                if pool is not None:
                    updates = list(pool.map(lambda sa: local_update(sa[0], sa[1], params.rho, inner, k),
                                            jobs))
                else:
                    updates = [local_update(s, ag, params.rho, inner, k) for s, ag in jobs]
            except InnerSolveError as exc:
                trace.failure = {"round": k, "kind": "inner_solve", "message": str(exc)}
                log.error("round %d: %s", k, exc)
                break
            for i, (s, upd) in enumerate(zip(states, updates)):
                s.x, s.u, s.y = upd.x, upd.u, upd.y
                if radius is not None and i not in outside:
                    norm = float(np.linalg.norm(s.x))
                    if norm > radius:
                        # the subgradient bound behind L is only valid inside the ball
                        outside.add(i)
                        trace.warnings.append(
                            f"agent {i} left the operating ball at round {k + 1} "
                            f"(||x|| = {norm:.4g} > R = {radius:.4g})")
                        log.warning(trace.warnings[-1])

            # synchronize with the next graph
            if phase_hook:
                phase_hook("synchronize", k)
            g_round = graphs.round(k + 1)
            snapshot = [(s.u.copy(), s.y.copy()) for s in states]
            outbox = []
            for j, i in sorted(g_round.digraph.edges):
                outbox.append(Message(k + 1, j, i, "dual_equality", snapshot[j][0]))
                if instance.q:
                    outbox.append(Message(k + 1, j, i, "dual_inequality", snapshot[j][1]))
            if message_hook is not None:
                outbox = list(message_hook(k + 1, outbox))
            msg_log.record_round(k + 1, g_round.digraph, outbox)
            inbox_u = [[None] * n for _ in range(n)]
            inbox_y = [[None] * n for _ in range(n)]
            for m in outbox:
                if m.kind == "dual_equality":
                    inbox_u[m.receiver][m.sender] = m.payload
                elif m.kind == "dual_inequality":
                    inbox_y[m.receiver][m.sender] = m.payload
            W = g_round.weights
            gaps = [(i, j) for i in range(n) for j in np.flatnonzero(W[i] > 0)
                    if inbox_u[i][j] is None or (instance.q and inbox_y[i][j] is None)]
            if gaps:
                i, j = gaps[0]
                trace.failure = {"round": k + 1, "kind": "invariant",
                                 "message": f"agent {i} has no dual from in-neighbor {j}"}
                log.error(trace.failure["message"])
                break
            disagreements = []
            for i, s in enumerate(states):
                if not instance.q:
                    inbox_y[i] = [np.zeros(0) if u is not None else None for u in inbox_u[i]]
                s.p_mix, s.q_mix = mix_duals(inbox_u[i], inbox_y[i], W, i)
                disagreements.append(mixing_disagreement(inbox_u[i], inbox_y[i], W, i))

            # allocate
            if phase_hook:
                phase_hook("allocate", k)
            for s, dis in zip(states, disagreements):
                s.v, s.z = allocation_update(s, params.gamma, dis)

            ratio = _metrics.zero_sum_ratio(states)
            trace.zero_sum_history[k + 1] = ratio
            trace.max_zero_sum_ratio = max(trace.max_zero_sum_ratio, ratio)
            trace.rounds_completed = k + 1
            if ratio > ZERO_SUM_HARD_CAP:
                trace.failure = {"round": k + 1, "kind": "invariant",
                                 "message": f"zero-sum residual ratio {ratio:.3e} above {ZERO_SUM_HARD_CAP:g}"}
                log.error(trace.failure["message"])
                break
            if any(np.any(s.y < 0) for s in states):
                trace.failure = {"round": k + 1, "kind": "invariant", "message": "negative inequality multiplier"}
                break
            if record.records(k + 1, K):
                record_round(k + 1)
            if state_hook is not None:
                state_hook(k + 1, states)
    finally:
        if pool is not None:
            pool.shutdown()
    trace.wall_time = time.perf_counter() - t_start
    if not trace.zero_sum_ok:
        trace.warnings.append(f"zero-sum ratio reached {trace.max_zero_sum_ratio:.3e} "
                              f"(tolerance {_metrics.ZERO_SUM_TOL:g})")
    trend = _metrics.objective_trend_warning(trace.records)
    if trend:
        trace.warnings.append(trend)
        log.warning(trend)
    trace.zero_sum_history = trace.zero_sum_history[: trace.rounds_completed + 1]
    trace.final_states = states
    return trace


def audit_messages(trace):
    """Check the message log: dual kinds only, graph edges only, one message per edge and kind.

    Also checks that each round carried exactly ``(p + q) |E_k|`` scalars.
    """
    lg = trace.log
    mismatches = []
    for k, n_msg, scalars, n_edges in lg.rounds:
        expected = (lg.p + lg.q) * n_edges
        if scalars != expected:
            mismatches.append({"round": k, "scalars": scalars, "expected": expected})
    violations = list(lg.violations)
    return AuditReport(
        passed=not violations and not mismatches,
        violations=violations,
        rounds_checked=len(lg.rounds),
        messages=sum(r[1] for r in lg.rounds),
        scalars=sum(r[2] for r in lg.rounds),
        count_mismatches=mismatches,
    )


def _state_dict(s):
    return {name: np.asarray(getattr(s, name)).tolist()
            for name in ("x", "u", "y", "p_mix", "q_mix", "v", "z")}


def write_trace(trace, out_dir):
    """Write the trace files into ``out_dir`` (created if needed)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _metrics.write_csv(trace.records, out / "metrics.csv")
    if any(r.primal_errors for r in trace.records):
        _metrics.write_primal_errors_csv(trace.records, out / "primal_errors.csv", len(trace.final_states))

    lg = trace.log
    with open(out / "messages_audit.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from", "to", "kind", "count", "scalars"])
        for (j, i) in sorted(lg.edge_counts):
            counts = lg.edge_counts[(j, i)]
            for kind in sorted(counts):
                size = lg.p if kind == "dual_equality" else lg.q if kind == "dual_inequality" else ""
                total = counts[kind] * size if size != "" else ""
                w.writerow([j, i, kind, counts[kind], total])

    report = audit_messages(trace)
    with open(out / "audit_violations.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "from", "to", "kind", "reason"])
        for v in report.violations:
            w.writerow([v["round"], v["from"], v["to"], v["kind"], v["reason"]])
        for m in report.count_mismatches:
            w.writerow([m["round"], "", "", "", f"{m['scalars']} scalars, expected {m['expected']}"])

    with open(out / "running_average_gap.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "gap"])
        for K in sorted(trace.running_average_gap):
            w.writerow([K, _metrics.format_number(trace.running_average_gap[K])])

    params = dict(trace.params)
    params["warnings"] = list(trace.warnings)
    params["rounds_completed"] = trace.rounds_completed
    params["failure"] = trace.failure
    params["max_zero_sum_ratio"] = trace.max_zero_sum_ratio
    params["zero_sum_ok"] = trace.zero_sum_ok
    params["audit_passed"] = report.passed
    params["wall_time_s"] = trace.wall_time
    with open(out / "params.json", "w", encoding="utf-8") as fh:
        json.dump(params, fh, indent=2)
    with open(out / "final_state.json", "w", encoding="utf-8") as fh:
        json.dump({"rounds_completed": trace.rounds_completed,
                   "agents": [_state_dict(s) for s in trace.final_states]}, fh)
    return out
