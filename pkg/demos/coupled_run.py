"""Run the coupled chemotaxis-fluid system, print invariants, then run the dual Picard iteration.

    python3 demos/coupled_run.py
"""

import numpy as np

from parakernel import dual
from parakernel.core import Grid, TimeGrid, sample_field
from parakernel.kssim import KSParams, KSState, run_simulation

g = Grid(2, 1.0, 32)
phi = sample_field(g, {"kind": "random", "seed": 5, "kmax": 2})
eta0 = sample_field(g, {"kind": "gaussian", "center": [0.5, 0.5], "sigma": 0.12, "amplitude": 1.0}).values
c0 = 0.5 + 0.25 * sample_field(g, {"kind": "random", "seed": 6, "kmax": 2}).values
params = KSParams(g, alpha=0.5, phi=phi)
tg = TimeGrid(0.0, 0.1, 32)

# two solutions from nearby initial densities
r1 = run_simulation(params, KSState.from_arrays(g, 0.0, eta0, c0), tg)
r2 = run_simulation(params, KSState.from_arrays(g, 0.0, 0.8 * eta0, c0), tg)
print(f"{r1.steps} steps; mass {r1.diagnostics[0].mass:.6f} -> {r1.diagnostics[-1].mass:.6f}")
print(f"min eta {r1.eta.min():.3e}; |c|_inf {r1.diagnostics[0].c_inf:.4f} -> {r1.diagnostics[-1].c_inf:.4f}")

snap = dual.Snapshots.from_runs(r1, r2, phi)
psi0 = sample_field(g, {"kind": "random", "seed": 7, "kmax": 4}).values
prob = dual.DualProblem(snap, delta=0.01, alpha=0.5, mu=1.0, psi0=psi0)
psi, rep = dual.picard_solve(prob)
print(f"Picard: mu = {rep.mu:g}, {rep.iterations} iterations, ratios {np.round(rep.ratios, 3)}")
eb = dual.energy_budget(psi, prob)
print(f"energy inequality holds at every step: {eb.pointwise_ok}")
