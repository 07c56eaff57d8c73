"""How the penalty parameter rho trades guarantee for speed.

The automatic choice rho = 0.9/(2L) keeps the convergence guarantee, but
L scales with max ||A_i||^2 / mu, which is large for the benchmark family.
The multiplier update then moves slowly.  This script runs a smaller
member of the same family at several multiples of 1/(2L) and reports
the objective and feasibility gaps after a fixed number of rounds.
Factors at or above 1 leave the guaranteed region and the run records
a warning.

Run:  python3 demos/03_step_size.py [rounds]
"""

import logging
import sys

from dcopt import GraphSequence, RecordPolicy, make_paper_instance, resolve_params, run, solve_centralized

# the table below reports the step-size warnings itself
logging.getLogger("dcopt").setLevel(logging.ERROR)

rounds = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
inst = make_paper_instance(8, 6, 1, seed=0)
ref = solve_centralized(inst)
graphs = GraphSequence(8, 2, seed=1)
L = resolve_params(inst, 1).L
print(f"L = {L:.2f}, 1/(2L) = {1 / (2 * L):.3e}, rounds = {rounds}")
print(f"{'factor':>7} {'rho':>10} {'obj gap':>9} {'eq gap':>9} {'ineq gap':>9} {'warned':>6}")
for factor in (0.3, 0.9, 3.0, 10.0):
    params = resolve_params(inst, rounds, rho=factor / (2 * L))
    trace = run(inst, graphs, params, reference=ref, record=RecordPolicy(full_until=0, every=rounds,
                                                                         dual_gap_every=0))
    last = trace.records[-1]
    status = "yes" if params.warnings else "no"
    if not trace.ok:
        print(f"{factor:7.1f} {params.rho:10.3e}  stopped: {trace.failure['message']}")
        continue
    print(f"{factor:7.1f} {params.rho:10.3e} {last.obj_gap:9.2e} {last.eq_feas:9.2e} "
          f"{last.ineq_feas:9.2e} {status:>6}")
