"""
Convergence from random initial conditions
==========================================

Repeat the single-column experiment over many seeds.  Each seed draws new
attitudes and new edge weights; every run should synchronize.
"""

import tempfile
from pathlib import Path

import matplotlib.pyplot as plt

from colsync import ExperimentConfig, IntegratorConfig
from colsync.experiment import run_monte_carlo

out = Path(tempfile.mkdtemp(prefix="colsync_mc_"))
# The threshold is 1e-6, so the solver tolerance has to sit well below it.
cfg = ExperimentConfig(
    mode="monte_carlo",
    k=1,
    num_seeds=40,
    output_dir=str(out),
    integrator=IntegratorConfig(t_final=50.0, rel_tol=1e-8, abs_tol=1e-10),
)
code, agg = run_monte_carlo(cfg, out)
print(f"{agg['num_converged']}/{agg['num_seeds']} converged, results in {out}")

times = [p["converged_at"] for p in agg["per_seed"] if p["converged_at"] is not None]
plt.hist(times, bins=15)
plt.xlabel("convergence time t*")
plt.ylabel("seeds")
plt.show()
