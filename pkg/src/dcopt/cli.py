"""
Command-line driver: ``dcopt run|validate|sweep --config FILE``.

Configuration is a JSON document::

    {
      "instance":  {"generator": "paper", "n_agents": 20, "p": 25, "q": 1, "seed": 0,
                    "anchor_scale": 0.1, "operating_radius": null}
                   or {"generator": "quadratic_equality", "centers": [[1], [2], [3]], "b": [9]}
                   or {"file": "instance.json"},
      "graph":     {"n_cycles": 2, "seed": 1},
      "run":       {"rho": "auto", "gamma": "auto", "rounds": 10000},
      "inner":     {"tol": 1e-9, "max_iter": 5000},
      "reference": {"mode": "solve", "tol": 1e-10}      (or "load" + "path", or "none"),
      "record":    {"full_until": 1000, "every": 10, "dual_gap_every": 10,
                    "average_gap_at": [100, 1000, 10000]},
      "output":    {"dir": "out"},
      "threads":   1
    }

Instance and graph seeds are mandatory.  Precedence is flag, then
environment (``DCO_CONFIG``, ``DCO_OUT``, ``DCO_ROUNDS``, ``DCO_THREADS``),
then the file.

Exit codes: 0 success, 1 configuration error, 2 solver failure,
3 invariant abort.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import graph as _graph
from . import metrics as _metrics
from . import problem as _problem
from . import reference as _reference
from . import simulator as _simulator
from .agent import resolve_params
from .subsolver import InnerSolveError, InnerSolveParams

log = logging.getLogger("dcopt")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_INVARIANT = 3

ENV_PREFIX = "DCO_"
SWEEP_PARAMS = ("rho", "rho_factor", "gamma", "rounds", "K", "n_cycles", "inner_tol")

DEFAULT_CONFIG = {
    "instance": {"generator": "paper", "n_agents": 20, "p": 25, "q": 1, "mu": 1.0,
                 "l1_weight": 1.0, "anchor_scale": 0.1, "operating_radius": None},
    "graph": {"n_cycles": 2},
    "run": {"rho": "auto", "gamma": "auto", "rounds": 10000},
    "inner": {"tol": 1e-9, "max_iter": 5000},
    "reference": {"mode": "solve", "tol": 1e-10},
    "record": {"full_until": 1000, "every": 10, "dual_gap_every": 10, "average_gap_at": []},
    "output": {"dir": "out"},
    "threads": 1,
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the field."""


def _merge(base, over):
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path):
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg = _merge(DEFAULT_CONFIG, raw)
    # a file-based instance does not inherit generator defaults
    if "file" in raw.get("instance", {}):
        cfg["instance"] = dict(raw["instance"])
    cfg["_base_dir"] = str(path.resolve().parent)
    return cfg


def _number(section, key, value, *, positive=False, integer=False, allow_auto=False):
    if allow_auto and value in (None, "auto"):
        return None
    try:
        out = int(value) if integer else float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: expected a number, got {value!r}") from None
    if integer and out != value and not isinstance(value, str):
        raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
    if positive and not out > 0:
        raise ConfigError(f"{section}.{key}: must be positive, got {value!r}")
    return out


def validate_config(cfg):
    """Check types and mandatory fields; raise ``ConfigError`` naming the field."""
    inst = cfg.get("instance")
    if not isinstance(inst, dict):
        raise ConfigError("instance: missing section")
    if "file" not in inst:
        gen = inst.get("generator")
        if gen not in ("paper", "quadratic_equality"):
            raise ConfigError(f"instance.generator: unknown generator {gen!r}")
        if gen == "paper":
            if inst.get("seed") is None:
                raise ConfigError("instance.seed: a seed is mandatory")
            for key in ("n_agents", "p"):
                _number("instance", key, inst.get(key), positive=True, integer=True)
            if inst.get("q") not in (0, 1):
                raise ConfigError("instance.q: must be 0 or 1")
        else:
            if not inst.get("centers"):
                raise ConfigError("instance.centers: required for quadratic_equality")
            if inst.get("b") is None:
                raise ConfigError("instance.b: required for quadratic_equality")
    g = cfg.get("graph", {})
    if g.get("seed") is None:
        raise ConfigError("graph.seed: a seed is mandatory")
    _number("graph", "n_cycles", g.get("n_cycles"), positive=True, integer=True)
    r = cfg["run"]
    _number("run", "rho", r.get("rho"), positive=True, allow_auto=True)
    _number("run", "gamma", r.get("gamma"), positive=True, allow_auto=True)
    if _number("run", "rounds", r.get("rounds"), integer=True) < 0:
        raise ConfigError("run.rounds: must be nonnegative")
    _number("inner", "tol", cfg["inner"].get("tol"), positive=True)
    _number("inner", "max_iter", cfg["inner"].get("max_iter"), positive=True, integer=True)
    mode = cfg["reference"].get("mode", "solve")
    if mode not in ("solve", "load", "none"):
        raise ConfigError(f"reference.mode: must be solve, load or none, got {mode!r}")
    if mode == "load" and not cfg["reference"].get("path"):
        raise ConfigError("reference.path: required when mode is load")
    rec = cfg["record"]
    if rec.get("full_until") is not None:
        _number("record", "full_until", rec["full_until"], integer=True)
    _number("record", "every", rec.get("every"), positive=True, integer=True)
    _number("record", "dual_gap_every", rec.get("dual_gap_every"), integer=True)
    if int(cfg.get("threads", 1)) < 0:
        raise ConfigError("threads: must be >= 0")
    return cfg


def apply_overrides(cfg, args, env=None):
    """Flags win over ``DCO_*`` environment variables, which win over the file."""
    env = os.environ if env is None else env
    out = copy.deepcopy(cfg)
    rounds = getattr(args, "rounds", None)
    if rounds is None and env.get(ENV_PREFIX + "ROUNDS"):
        rounds = env[ENV_PREFIX + "ROUNDS"]
    if rounds is not None:
        out["run"]["rounds"] = _number("flags", "rounds", rounds, integer=True)
    threads = getattr(args, "threads", None)
    if threads is None and env.get(ENV_PREFIX + "THREADS"):
        threads = env[ENV_PREFIX + "THREADS"]
    if threads is not None:
        out["threads"] = _number("flags", "threads", threads, integer=True)
    out_dir = getattr(args, "out", None) or env.get(ENV_PREFIX + "OUT")
    if out_dir:
        out["output"]["dir"] = out_dir
    return out


def _resolve_path(cfg, p):
    p = Path(p)
    return p if p.is_absolute() else Path(cfg.get("_base_dir", ".")) / p


def build_instance(cfg):
    inst = cfg["instance"]
    if "file" in inst:
        path = _resolve_path(cfg, inst["file"])
        if not path.exists():
            raise ConfigError(f"instance.file: not found: {path}")
        try:
            return _problem.load_instance(path)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"instance.file: {path}: {exc}") from None
    if inst["generator"] == "paper":
        return _problem.make_paper_instance(
            int(inst["n_agents"]), int(inst["p"]), int(inst["q"]), seed=int(inst["seed"]),
            mu=float(inst.get("mu", 1.0)), l1_weight=float(inst.get("l1_weight", 1.0)),
            anchor_scale=float(inst.get("anchor_scale", 0.1)),
            operating_radius=inst.get("operating_radius"))
    try:
        return _problem.make_quadratic_equality_instance(len(inst["centers"]), inst["centers"], inst["b"])
    except ValueError as exc:
        raise ConfigError(f"instance: {exc}") from None


def build_graphs(cfg, n_agents):
    g = cfg["graph"]
    return _graph.GraphSequence(n_agents, int(g["n_cycles"]), int(g["seed"]), g.get("mixing_weights"))


def build_inner(cfg):
    return InnerSolveParams(tol=float(cfg["inner"]["tol"]), max_iter=int(cfg["inner"]["max_iter"]),
                            subgradient_fallback=bool(cfg["inner"].get("subgradient_fallback", False)))


def build_reference(cfg, instance):
    ref_cfg = cfg["reference"]
    mode = ref_cfg.get("mode", "solve")
    if mode == "none":
        return None
    if mode == "load":
        path = _resolve_path(cfg, ref_cfg["path"])
        if not path.exists():
            raise ConfigError(f"reference.path: not found: {path}")
        return _reference.load_reference(path)
    return _reference.solve_centralized(instance, tol=float(ref_cfg.get("tol", 1e-10)))


def resolved_echo(cfg, params):
    """Config with the automatic parameters replaced by their values."""
    echo = {k: copy.deepcopy(v) for k, v in cfg.items() if not k.startswith("_")}
    echo["run"]["rho"] = params.rho
    echo["run"]["gamma"] = params.gamma
    echo["run"]["rounds"] = params.rounds
    return echo


def execute(cfg):
    """Run one configured experiment; returns ``(exit_code, trace_or_None, out_dir)``."""
    validate_config(cfg)
    instance = build_instance(cfg)
    graphs = build_graphs(cfg, instance.n_agents)
    r = cfg["run"]
    params = resolve_params(instance, int(r["rounds"]),
                            rho=_number("run", "rho", r.get("rho"), allow_auto=True),
                            gamma=_number("run", "gamma", r.get("gamma"), allow_auto=True))
    inner = build_inner(cfg)
    out_dir = Path(cfg["output"]["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved_echo(cfg, params), fh, indent=2)

    try:
        ref = build_reference(cfg, instance)
    except (_reference.ReferenceError, InnerSolveError) as exc:
        log.error("reference solve failed: %s", exc)
        return EXIT_SOLVER, None, out_dir
    if ref is not None:
        _reference.save_reference(ref, out_dir / "reference.json")

    rec = cfg["record"]
    policy = _simulator.RecordPolicy(full_until=rec.get("full_until"), every=int(rec["every"]),
                                     dual_gap_every=int(rec["dual_gap_every"]) if ref is not None else 0)
    avg_at = (rec.get("average_gap_at") or []) if ref is not None else []
    threads = int(cfg.get("threads", 1)) or (os.cpu_count() or 1)
    trace = _simulator.run(instance, graphs, params, inner, ref, seed=cfg["instance"].get("seed"),
                           record=policy, average_gap_at=avg_at, threads=threads)
    _simulator.write_trace(trace, out_dir)
    if trace.failure is not None:
        code = EXIT_INVARIANT if trace.failure["kind"] == "invariant" else EXIT_SOLVER
        log.error("run stopped at round %s: %s", trace.failure["round"], trace.failure["message"])
        return code, trace, out_dir
    if not _simulator.audit_messages(trace).passed:
        log.error("message audit failed")
        return EXIT_INVARIANT, trace, out_dir
    return EXIT_OK, trace, out_dir


def _summary_line(trace):
    last = trace.records[-1]
    parts = [f"rounds={trace.rounds_completed}", f"eq_feas={last.eq_feas:.3e}",
             f"ineq_feas={last.ineq_feas:.3e}"]
    if last.obj_gap is not None:
        parts.insert(1, f"obj_gap={last.obj_gap:.3e}")
    parts.append(f"wall={trace.wall_time:.1f}s")
    return " ".join(parts)


def cmd_run(cfg):
    code, trace, out_dir = execute(cfg)
    if trace is not None:
        print(_summary_line(trace))
    print(f"output: {out_dir}")
    return code


def validation_report(instance, graphs, n_graph_rounds=100, seed=0):
    """Assumption checks plus graph validation; returns a dict of named results."""
    rep = {}
    ok, worst = _problem.check_strong_convexity(instance, seed=seed)
    rep["strong_convexity"] = {"passed": bool(ok), "worst_violation": worst}
    ok, largest = _problem.check_subgradient_bound(instance, seed=seed)
    rep["subgradient_bound"] = {"passed": bool(ok), "max_norm": largest, "L_g": instance.L_g}
    ok, eq_norm, ineq = _problem.check_slater(instance)
    rep["slater"] = {"passed": bool(ok), "eq_residual": eq_norm, "ineq_value": np.asarray(ineq).tolist()}
    bad = []
    for k in range(1, n_graph_rounds + 1):
        rnd = graphs.round(k)
        val = _graph.validate_weight_matrix(rnd.weights, rnd.digraph)
        if not (val.passed and rnd.digraph.has_self_loops()
                and _graph.check_strong_connectivity(rnd.digraph)):
            bad.append(k)
    rep["graphs"] = {"passed": not bad, "rounds_checked": n_graph_rounds, "failed_rounds": bad}
    if instance.mu > 0:
        L = _problem.smoothness_constant(instance)
        rho = 0.9 / (2.0 * L) if L > 0 else 1.0
        rep["constants"] = {"L": L, "rho": rho, "gamma": 1.0 / rho}
    else:
        rep["constants"] = {"L": None, "rho": None, "gamma": None}
    rep["passed"] = all(v["passed"] for k, v in rep.items() if isinstance(v, dict) and "passed" in v)
    return rep


def cmd_validate(cfg):
    validate_config(cfg)
    instance = build_instance(cfg)
    graphs = build_graphs(cfg, instance.n_agents)
    rep = validation_report(instance, graphs)
    for name in ("strong_convexity", "subgradient_bound", "slater", "graphs"):
        print(f"{name:18s} {'PASS' if rep[name]['passed'] else 'FAIL'}")
    c = rep["constants"]
    if c["L"] is not None:
        print(f"L = {c['L']:.6g}  rho = {c['rho']:.6g}  gamma = {c['gamma']:.6g}")
    out = cfg["output"].get("dir")
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        with open(Path(out) / "validation.json", "w", encoding="utf-8") as fh:
            json.dump(rep, fh, indent=2)
    return EXIT_OK


def _sweep_point(cfg, param, value, L):
    point = copy.deepcopy(cfg)
    if param == "rho":
        point["run"]["rho"] = float(value)
    elif param == "rho_factor":
        point["run"]["rho"] = float(value) / (2.0 * L)
    elif param == "gamma":
        point["run"]["gamma"] = float(value)
    elif param in ("rounds", "K"):
        point["run"]["rounds"] = int(value)
        point["record"]["average_gap_at"] = sorted(set(point["record"].get("average_gap_at") or []) | {int(value)})
    elif param == "n_cycles":
        point["graph"]["n_cycles"] = int(value)
    elif param == "inner_tol":
        point["inner"]["tol"] = float(value)
    return point


SUMMARY_COLUMNS = ("value", "status", "exit_code", "final_obj_gap", "final_eq_feas", "final_ineq_feas",
                   "dual_gap_slope", "avg_gap_at_K", "K_times_avg_gap")


def cmd_sweep(cfg, param, values):
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"--param: must be one of {', '.join(SWEEP_PARAMS)}")
    if not values:
        raise ConfigError("--values: at least one value is required")
    validate_config(cfg)
    base_out = Path(cfg["output"]["dir"])
    base_out.mkdir(parents=True, exist_ok=True)
    L = _problem.smoothness_constant(build_instance(cfg)) if param == "rho_factor" else None
    rows = []
    for value in values:
        point = _sweep_point(cfg, param, value, L)
        point["output"]["dir"] = str(base_out / f"{param}={value}")
        row = dict.fromkeys(SUMMARY_COLUMNS, "")
        row["value"] = value
        try:
            code, trace, _ = execute(point)
        except (ConfigError, ValueError, InnerSolveError, _reference.ReferenceError) as exc:
            log.error("sweep point %s=%s failed: %s", param, value, exc)
            row.update(status=f"error: {exc}", exit_code=EXIT_CONFIG)
            rows.append(row)
            continue
        row["exit_code"] = code
        row["status"] = "ok" if code == EXIT_OK else (trace.failure or {}).get("message", "failed")
        if trace is not None and trace.records:
            last = trace.records[-1]
            row["final_obj_gap"] = _metrics.format_number(last.obj_gap)
            row["final_eq_feas"] = _metrics.format_number(last.eq_feas)
            row["final_ineq_feas"] = _metrics.format_number(last.ineq_feas)
            gaps = {k: v for k, v in trace.running_average_gap.items() if v > 0}
            if len(gaps) >= 2:
                row["dual_gap_slope"] = _metrics.format_number(_metrics.fit_rate(gaps, "gap", (1, np.inf)))
            if gaps:
                K = max(gaps)
                row["avg_gap_at_K"] = _metrics.format_number(gaps[K])
                row["K_times_avg_gap"] = _metrics.format_number(K * gaps[K])
        rows.append(row)
        print(f"{param}={value}: {row['status']}")
    with open(base_out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"summary: {base_out / 'summary.csv'}")
    return EXIT_OK


def _parse_values(text):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok:
            out.append(int(tok) if tok.lstrip("-").isdigit() else float(tok))
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="dcopt", description="Distributed coupled optimization simulator")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (env DCO_CONFIG)")
        p.add_argument("--out", help="output directory (env DCO_OUT)")
        p.add_argument("--rounds", type=int, help="number of rounds K (env DCO_ROUNDS)")
        p.add_argument("--threads", type=int, help="worker threads, 0 = auto (env DCO_THREADS)")

    common(sub.add_parser("run", help="run one experiment"))
    common(sub.add_parser("validate", help="check assumptions and graph sequence"))
    sw = sub.add_parser("sweep", help="run one experiment per parameter value")
    common(sw)
    sw.add_argument("--param", required=True, help=f"one of {', '.join(SWEEP_PARAMS)}")
    sw.add_argument("--values", required=True, help="comma separated values")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config_path = args.config or os.environ.get(ENV_PREFIX + "CONFIG")
        if not config_path:
            raise ConfigError("--config: a config file is required")
        cfg = apply_overrides(load_config(config_path), args)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "validate":
            return cmd_validate(cfg)
        try:
            values = _parse_values(args.values)
        except ValueError:
            raise ConfigError(f"--values: cannot parse {args.values!r}") from None
        return cmd_sweep(cfg, args.param, values)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InnerSolveError, _reference.ReferenceError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except _simulator.InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
