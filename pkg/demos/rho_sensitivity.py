"""How the accelerated method reacts to its penalty rho on the 40-area ring.

    python3 demos/rho_sensitivity.py [outdir]
"""

import sys
from pathlib import Path

from dsse_admm.cli import plot_residuals
from dsse_admm.grid import GridConfig, make_instance
from dsse_admm.solver import SolverParams, solve_aadmm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)
grid, problems, _ = make_instance(GridConfig("ring", 10))

paths = []
for rho in (0.5, 1, 2, 4, 8):
    rep = solve_aadmm(problems, grid.registry, SolverParams(rho, max_iter=5000))
    print(f"rho={rho:<4g} iterations={rep.iterations:5d}  final r={rep.primal_history[-1]:.2e}")
    p = out / f"rho{rho:g}.csv"
    rep.to_csv(p)
    paths.append(p)

plot_residuals(paths, out / "rho_sensitivity.png", title="A-ADMM, 40-area ring")
