"""Multi-area DC state estimation with ergodic and accelerated consensus ADMM."""

from dsse_admm.grid import (
    AreaProblem,
    Grid,
    GridConfig,
    SharedBusRegistry,
    build_grid,
    build_measurements,
    grid_for_areas,
    load_grid,
    make_instance,
    save_grid,
    true_state,
)

__version__ = "0.1.0"
