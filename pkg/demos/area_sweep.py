"""Best-parameter iteration counts versus number of areas.

Each size is swept over the default penalty grid and the parameter with the
fewest iterations is kept, once for ADMM (mu) and once for A-ADMM (rho).

    python3 demos/area_sweep.py [areas...]
"""

import sys

from dsse_admm.cli import DEFAULT_GRID, ExperimentSpec, run_sweep

areas = [int(a) for a in sys.argv[1:]] or [4, 20, 40, 80]
spec = ExperimentSpec(topology="ring", areas=areas, mu=list(DEFAULT_GRID), rho=list(DEFAULT_GRID), workers=4)
_, table = run_sweep(spec)

print(f"{'areas':>5} {'mu':>5} {'ADMM':>6} {'rho':>5} {'A-ADMM':>7}")
for r in table:
    print(f"{r['areas']:>5} {r['mu']:>5} {r['admm_iterations']:>6} {r['rho']:>5} {r['aadmm_iterations']:>7}")
