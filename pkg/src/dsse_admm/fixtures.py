"""Small seeded instances used by the test-suite, the verifier and the demos."""

from __future__ import annotations

import numpy as np

from dsse_admm.grid import (
    Area,
    Branch,
    Bus,
    Grid,
    GridConfig,
    build_grid,
    build_measurements,
    single_block_grid,
    true_state,
)

# 6 buses; areas {0,1,2,3} and {2,3,4,5} share buses 2, 3 and both meter branch 2-3
TWO_AREA_STATE = np.array([0.0, -0.12, -0.31, -0.27, -0.44, -0.52])


def two_area_grid() -> Grid:
    buses = [Bus(0, 0, True)] + [Bus(i, 0) for i in range(1, 6)]
    pairs = [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3), (2, 4), (3, 4), (3, 5), (4, 5)]
    branches = [Branch(i, j) for i, j in pairs]
    areas = [Area(0, (0, 1), (2, 3)), Area(1, (4, 5), (2, 3))]
    return Grid(tuple(buses), tuple(branches), tuple(areas), reference=0)


def two_area_instance(seed: int = 7, noise_std: float = 0.01):
    grid = two_area_grid()
    problems = build_measurements(grid, TWO_AREA_STATE, GridConfig(noise_std=noise_std, seed=seed))
    return grid, problems, TWO_AREA_STATE.copy()


def block_instance(num_areas: int, seed: int = 0, noise_std: float = 0.01):
    """4 areas: one block; 8: two-block chain; 12+: ring of ``num_areas // 4`` blocks."""
    if num_areas == 4:
        grid = single_block_grid()
    elif num_areas == 8:
        grid = build_grid(GridConfig("chain", 2))
    elif num_areas % 4 == 0 and num_areas >= 12:
        grid = build_grid(GridConfig("ring", num_areas // 4))
    else:
        raise ValueError(f"no block fixture with {num_areas} areas")
    state = true_state(grid, seed)
    problems = build_measurements(grid, state, GridConfig(noise_std=noise_std, seed=seed))
    return grid, problems, state


def instance(num_areas: int, seed: int = 0, noise_std: float = 0.01):
    if num_areas == 2:
        return two_area_instance(seed=seed, noise_std=noise_std)
    return block_instance(num_areas, seed=seed, noise_std=noise_std)
