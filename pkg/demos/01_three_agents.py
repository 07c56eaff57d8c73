"""Three agents share one budget: x1 + x2 + x3 = 9.

Each agent privately wants to sit at its own center (1, 2, 3).  The
optimum splits the shortfall evenly, x* = (2, 3, 4), with multiplier
u* = -1.  The agents only exchange dual estimates over a time-varying
ring, yet every local decision converges to the centralized answer.

Run:  python3 demos/01_three_agents.py
"""

import numpy as np

from dcopt import GraphSequence, RecordPolicy, make_quadratic_equality_instance, resolve_params, run
from dcopt.reference import solve_kkt_small

inst = make_quadratic_equality_instance(3, [[1.0], [2.0], [3.0]], [9.0])
x_star = solve_kkt_small(inst)
params = resolve_params(inst, 3000)
print(f"closed-form optimum {x_star}, L = {params.L:.3f}, rho = {params.rho:.4f}, gamma = {params.gamma:.3f}")

checkpoints = {1, 10, 100, 1000, 3000}


def show(k, states):
    if k in checkpoints:
        x = np.concatenate([s.x for s in states])
        u = [float(s.u[0]) for s in states]
        v_sum = sum(float(s.v[0]) for s in states)
        print(f"k={k:5d}  x={np.round(x, 6)}  u={np.round(u, 6)}  "
              f"|x-x*|={np.max(np.abs(x - x_star)):.1e}  sum v={v_sum:+.1e}")


trace = run(inst, GraphSequence(3, 1, seed=0), params, record=RecordPolicy(full_until=0, every=1000),
            state_hook=show)
print("message audit ok:", trace.log.violations == [])
