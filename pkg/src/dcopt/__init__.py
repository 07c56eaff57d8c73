"""Distributed coupled optimization over time-varying directed graphs."""

from .agent import AgentState, RunParams, resolve_params
from .graph import GraphSequence, generate_graph_sequence, validate_weight_matrix
from .metrics import RoundMetrics, compute_round_metrics, fit_rate
from .problem import (
    ProblemInstance,
    load_instance,
    make_paper_instance,
    make_quadratic_equality_instance,
    save_instance,
    smoothness_constant,
)
from .reference import ReferenceSolution, dual_gap, solve_centralized, solve_kkt_small
from .simulator import RecordPolicy, RunTrace, audit_messages, run, write_trace
from .subsolver import InnerSolveParams, minimize_augmented_lagrangian, stationarity_residual

__version__ = "0.1.0"

__all__ = [
    "AgentState",
    "RunParams",
    "resolve_params",
    "GraphSequence",
    "generate_graph_sequence",
    "validate_weight_matrix",
    "RoundMetrics",
    "compute_round_metrics",
    "fit_rate",
    "ProblemInstance",
    "load_instance",
    "make_paper_instance",
    "make_quadratic_equality_instance",
    "save_instance",
    "smoothness_constant",
    "ReferenceSolution",
    "dual_gap",
    "solve_centralized",
    "solve_kkt_small",
    "RecordPolicy",
    "RunTrace",
    "audit_messages",
    "run",
    "write_trace",
    "InnerSolveParams",
    "minimize_augmented_lagrangian",
    "stationarity_residual",
]
