"""
Per-round diagnostics and the CSV trace format.

Round ``k`` metrics are taken on the state after ``k`` completed rounds
(``k = 0`` is the initial state).  Columns of ``metrics.csv``:

    k, obj_gap, eq_feas, ineq_feas, zerosum_v, zerosum_z,
    dual_consensus, dual_gap, max_stationarity, primal_err_max

Reference-dependent columns (``obj_gap``, ``primal_err_max``, ``dual_gap``)
are left empty when no reference is available.  Numbers are written with 17
significant digits in scientific notation, which round-trips float64 exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .subsolver import stationarity_residual

__all__ = [
    "METRIC_COLUMNS",
    "RoundMetrics",
    "compute_round_metrics",
    "zero_sum_ratio",
    "fit_rate",
    "objective_trend_warning",
    "ZERO_SUM_TOL",
    "loglog_slope",
    "format_number",
    "write_csv",
    "write_primal_errors_csv",
    "read_metrics_csv",
    "read_primal_errors_csv",
]

ZERO_SUM_TOL = 1e-9

METRIC_COLUMNS = ("k", "obj_gap", "eq_feas", "ineq_feas", "zerosum_v", "zerosum_z",
                  "dual_consensus", "dual_gap", "max_stationarity", "primal_err_max")


@dataclass
class RoundMetrics:
    k: int
    eq_feas: float
    ineq_feas: float
    zerosum_v: float
    zerosum_z: float
    dual_consensus: float
    max_stationarity: float
    obj_gap: float = None
    primal_err_max: float = None
    dual_gap: float = None
    primal_errors: list = field(default_factory=list)

    def row(self):
        return [self.k] + [getattr(self, c) for c in METRIC_COLUMNS[1:]]

    def check(self):
        """Every present entry must be finite and nonnegative."""
        for name in METRIC_COLUMNS[1:]:
            val = getattr(self, name)
            if val is not None and not (math.isfinite(val) and val >= 0):
                raise ValueError(f"round {self.k}: {name} = {val!r}")


def zero_sum_ratio(states):
    """``max(||sum v||, ||sum z||) / (1 + max_i ||v_i||)``."""
    sv = np.linalg.norm(np.sum([s.v for s in states], axis=0))
    sz = np.linalg.norm(np.sum([s.z for s in states], axis=0))
    scale = 1.0 + max(float(np.linalg.norm(s.v)) for s in states)
    return float(max(sv, sz) / scale)


def compute_round_metrics(states, instance, ref=None, k=0, dual_gap=None):
    """Diagnostics for one round.

    Parameters
    ----------
    states : list of AgentState
    instance : ProblemInstance
    ref : ReferenceSolution, optional
        Enables ``obj_gap`` and the primal errors.
    k : int
        Round label.
    dual_gap : float, optional
        Precomputed dual gap, stored as-is.
    """
    agents = instance.agents
    if len(states) != len(agents):
        raise ValueError(f"{len(states)} states for {len(agents)} agents")
    eq = 0.0
    ineq = 0.0
    stat = 0.0
    for s, ag in zip(states, agents):
        eq = max(eq, float(np.linalg.norm(ag.A @ s.x - ag.b - s.v)))
        if ag.q:
            ineq = max(ineq, float(np.max(np.maximum(ag.g(s.x) - s.z, 0.0))))
        stat = max(stat, stationarity_residual(ag, s.x, s.u, s.y))

    U = np.array([s.u for s in states])
    Y = np.array([s.y for s in states])
    Z = np.hstack([U, Y])
    consensus = float(np.max(np.linalg.norm(Z - Z.mean(axis=0), axis=1)))

    zv = float(np.linalg.norm(np.sum([s.v for s in states], axis=0)))
    zz = float(np.linalg.norm(np.sum([s.z for s in states], axis=0)))

    m = RoundMetrics(k=int(k), eq_feas=eq, ineq_feas=ineq, zerosum_v=zv, zerosum_z=zz,
                     dual_consensus=consensus, max_stationarity=stat, dual_gap=dual_gap)
    if ref is not None:
        errs = [float(np.linalg.norm(s.x - xs)) for s, xs in zip(states, ref.x_star)]
        fx = sum(ag.f(s.x) for s, ag in zip(states, agents))
        m.obj_gap = float(abs(fx - ref.f_star))
        m.primal_errors = errs
        m.primal_err_max = max(errs)
    return m


def loglog_slope(ks, values):
    """Least-squares slope of ``log(values)`` against ``log(ks)``."""
    ks = np.asarray(ks, dtype=float)
    values = np.asarray(values, dtype=float)
    if ks.shape != values.shape or ks.size < 2:
        raise ValueError("need at least two matching (k, value) pairs")
    if np.any(values <= 0) or np.any(ks <= 0):
        raise ValueError("log-log fit needs strictly positive k and metric values")
    slope, _ = np.polyfit(np.log(ks), np.log(values), 1)
    return float(slope)


def fit_rate(records, metric, window):
    """Log-log slope of ``metric`` over rounds ``window = (k_lo, k_hi)``.

    ``records`` is a sequence of ``RoundMetrics`` (or anything with ``k``
    and the metric attribute), or a mapping ``k -> value``.  Rounds where the
    metric is absent are skipped.

    Raises
    ------
    ValueError
        If any value in the window is nonpositive or fewer than two
        points remain.
    """
    lo, hi = window
    if isinstance(records, dict):
        pairs = [(k, v) for k, v in records.items() if lo <= k <= hi and v is not None]
    else:
        pairs = [(r.k, getattr(r, metric)) for r in records
                 if lo <= r.k <= hi and getattr(r, metric) is not None]
    if not pairs:
        raise ValueError(f"no {metric} values in window {window}")
    ks, vals = zip(*sorted(pairs))
    bad = [k for k, v in zip(ks, vals) if not v > 0]
    if bad:
        raise ValueError(f"{metric} is nonpositive at rounds {bad[:5]}")
    return loglog_slope(ks, vals)


def objective_trend_warning(records, factor=1e-3):
    """Soft check on the objective gap; returns a warning string or ``None``.

    Passes when the running minimum of ``obj_gap`` ends at or below
    ``factor`` times its first value.  Only primal behaviour is checked
    here, so a miss is reported rather than raised.
    """
    gaps = [r.obj_gap for r in records if r.obj_gap is not None]
    if len(gaps) < 2:
        return None
    best = float(np.min(gaps))
    if best <= factor * gaps[0]:
        return None
    return (f"objective gap running minimum {best:.3e} did not reach "
            f"{factor:g} x initial ({gaps[0]:.3e})")


def format_number(v):
    if v is None:
        return ""
    return f"{float(v):.16e}"


def _open_for_write(path):
    try:
        return open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def write_csv(records, path):
    """Write ``metrics.csv`` (header always present)."""
    path = Path(path)
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([r.k] + [format_number(v) for v in r.row()[1:]])
    return path


def write_primal_errors_csv(records, path, n_agents):
    """Companion file with the per-agent errors ``||x_i - x_i*||``."""
    path = Path(path)
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k"] + [f"agent_{i}" for i in range(n_agents)])
        for r in records:
            if r.primal_errors:
                w.writerow([r.k] + [format_number(e) for e in r.primal_errors])
    return path


def read_metrics_csv(path):
    """Read ``metrics.csv`` back into ``RoundMetrics`` objects."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in reader:
            vals = {c: (float(s) if s != "" else None) for c, s in zip(METRIC_COLUMNS[1:], row[1:])}
            out.append(RoundMetrics(k=int(row[0]), **vals))
    return out


def read_primal_errors_csv(path):
    """``{k: [err_0, ..., err_{N-1}]}``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return {int(row[0]): [float(s) for s in row[1:]] for row in reader}
