import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsse_admm import analysis
from dsse_admm.grid import (
    Area,
    Branch,
    Bus,
    Grid,
    GridConfig,
    InvalidConfig,
    InvalidGrid,
    ParseError,
    SharedBusRegistry,
    Unobservable,
    build_block,
    build_grid,
    build_measurements,
    grid_to_dict,
    load_grid,
    make_instance,
    read_measurements,
    save_grid,
    single_block_grid,
    true_state,
    write_measurements,
)


def test_block_has_standard_ieee14_shape():
    buses, branches, areas = build_block(0)
    assert len(buses) == 14
    assert len(branches) == 20
    assert len({b.key for b in branches}) == 20
    assert len(areas) == 4
    assert set().union(*(set(a.buses) for a in areas)) == set(range(14))


def test_block_is_deterministic_and_offset():
    assert build_block(0) == build_block(0)
    buses, branches, _ = build_block(3)
    assert min(b.id for b in buses) == 42
    assert all(b.block == 3 for b in buses)


def test_block_area_split_matches_data_file():
    # 1-based groups {1..5}, {4,5,6,11,12,13}, {6,9,10,11,14}, {4,7,8,9,10}; 0-based below
    _, _, areas = build_block(0)
    sets = [set(a.buses) for a in areas]
    assert {0, 1, 2, 3, 4} <= sets[0]
    assert {3, 4, 5, 10, 11, 12} <= sets[1]
    assert {5, 8, 9, 10, 13} <= sets[2]
    assert {3, 6, 7, 8, 9} <= sets[3]


def test_block_area_graph_connected():
    g = single_block_grid()
    assert g.is_connected()
    assert len(g.areas) == 4


def test_ring_and_chain_sizes():
    ring = build_grid(GridConfig("ring", 10))
    chain = build_grid(GridConfig("chain", 10))
    assert len(ring.areas) == len(chain.areas) == 40
    assert ring.num_buses == 140
    assert len(ring.tie_branches()) == 10
    assert len(chain.tie_branches()) == 9
    assert len(chain.inter_block_links()) == len(ring.inter_block_links()) - 1


@pytest.mark.parametrize("topology, n", [("ring", 1), ("ring", 2), ("chain", 1), ("star", 4), ("ring", 0)])
def test_invalid_configs(topology, n):
    with pytest.raises(InvalidConfig):
        build_grid(GridConfig(topology, n))


def test_negative_noise_rejected():
    with pytest.raises(InvalidConfig):
        GridConfig(noise_std=-1.0).validate()


@pytest.mark.parametrize("topology, n", [("ring", 3), ("ring", 7), ("chain", 2), ("chain", 5)])
def test_grid_invariants(topology, n):
    g = build_grid(GridConfig(topology, n))
    assert sum(b.is_reference for b in g.buses) == 1
    assert set().union(*(set(a.buses) for a in g.areas)) == set(range(g.num_buses))
    assert g.is_connected()
    for br in g.tie_branches():
        for t in (br.from_bus, br.to_bus):
            assert sum(t in a.buses for a in g.areas) >= 2
    for c in g.registry:
        assert c.k < c.l
        assert c.bus in g.areas[c.k].buses and c.bus in g.areas[c.l].buses
    for a in g.areas:
        assert not set(a.internal) & set(a.boundary)
        for b in a.boundary:
            assert any(b in o.buses for o in g.areas if o.id != a.id)


def test_registry_neighbors_follow_couplings():
    g = build_grid(GridConfig("ring", 3))
    for a in g.areas:
        expected = sorted({c.l if c.k == a.id else c.k for c in g.registry if a.id in (c.k, c.l)})
        assert g.registry.neighbors(a.id) == expected


def test_registry_for_area_signs():
    g = single_block_grid()
    for a in g.areas:
        for idx, c, sign in g.registry.for_area(a.id):
            assert g.registry.couplings[idx] == c
            assert sign == (1 if c.k == a.id else -1)


def test_grid_rejects_duplicate_branch():
    buses = (Bus(0, 0, True), Bus(1, 0, False))
    with pytest.raises(InvalidGrid):
        Grid(buses, (Branch(0, 1), Branch(1, 0)), (Area(0, (0, 1), ()),), 0)


def test_grid_rejects_self_loop_and_bad_susceptance():
    buses = (Bus(0, 0, True), Bus(1, 0, False))
    with pytest.raises(InvalidGrid):
        Grid(buses, (Branch(1, 1),), (Area(0, (0, 1), ()),), 0)
    with pytest.raises(InvalidGrid):
        Grid(buses, (Branch(0, 1, -2.0),), (Area(0, (0, 1), ()),), 0)


# --- measurements ---------------------------------------------------------


def test_flow_sensor_reading():
    buses = (Bus(0, 0, True), Bus(1, 0, False))
    g = Grid(buses, (Branch(1, 0),), (Area(0, (0, 1), ()),), 0)
    (p,) = build_measurements(g, np.array([0.0, 1.0]), GridConfig(noise_std=0.0))
    flows = [z for s, z in zip(p.sensors, p.z) if s.kind == "flow"]
    assert flows == [1.0]


def test_measurement_rows_structure():
    g, problems, _ = make_instance(GridConfig("ring", 3))
    ref_rows = 0
    for p in problems:
        for s, row in zip(p.sensors, p.H):
            if s.kind == "injection":
                assert abs(row.sum()) < 1e-12
            elif s.kind == "flow":
                nz = row[row != 0]
                assert nz.size == 2 and nz[0] == -nz[1]
            else:
                assert np.count_nonzero(row) == 1
                ref_rows += 1
        assert p.H.shape[0] == len(p.sensors)
        assert [s.kind for s in p.sensors].count("injection") == p.n_internal
    assert ref_rows == 1


def test_noiseless_measurements_are_exact():
    g = build_grid(GridConfig("ring", 3))
    x = true_state(g)
    problems = build_measurements(g, x, GridConfig(noise_std=0.0))
    for p in problems:
        np.testing.assert_array_equal(p.z, p.H @ x[list(p.buses)])
    np.testing.assert_allclose(analysis.centralized_solve(g, problems), x, atol=1e-10, rtol=0)


def test_same_seed_same_measurements():
    a = make_instance(GridConfig("ring", 4, seed=11))[1]
    b = make_instance(GridConfig("ring", 4, seed=11))[1]
    c = make_instance(GridConfig("ring", 4, seed=12))[1]
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p.z, q.z)
    assert any(not np.array_equal(p.z, q.z) for p, q in zip(a, c))


def test_true_state_is_dc_power_flow():
    g = single_block_grid()
    x = true_state(g, seed=0)
    assert x[g.reference] == 0.0
    # recompute injections from the angles; they must balance to zero
    p = np.zeros(g.num_buses)
    for br in g.branches:
        f = br.susceptance * (x[br.from_bus] - x[br.to_bus])
        p[br.from_bus] += f
        p[br.to_bus] -= f
    assert abs(p.sum()) < 1e-12
    assert p[0] > 0  # slack generator exports


def test_reference_must_be_zero():
    g = single_block_grid()
    x = true_state(g)
    x[g.reference] = 0.5
    with pytest.raises(ValueError):
        build_measurements(g, x)


def test_unobservable_area_detected():
    # bus 2 is internal to area 0 but has no incident branch: zero injection column
    buses = (Bus(0, 0, True), Bus(1, 0, False), Bus(2, 0, False))
    g = Grid(buses, (Branch(0, 1),), (Area(0, (0, 1, 2), ()),), 0)
    with pytest.raises(Unobservable):
        build_measurements(g, np.zeros(3))


def test_measurement_csv_round_trip(tmp_path):
    _, problems, _ = make_instance(GridConfig("ring", 3))
    path = tmp_path / "m.csv"
    write_measurements(problems, path)
    rows = read_measurements(path)
    assert len(rows) == sum(p.z.size for p in problems)
    assert rows[0][3] == problems[0].z[0]
    assert {r[1] for r in rows} == {"injection", "flow", "reference"}


# --- files ----------------------------------------------------------------


def test_grid_file_round_trip(tmp_path):
    g = build_grid(GridConfig("ring", 10))
    path = tmp_path / "ring.json"
    save_grid(g, path)
    h = load_grid(path)
    assert h == g
    assert h.registry == g.registry


def test_grid_file_field_names(tmp_path):
    path = tmp_path / "g.json"
    save_grid(single_block_grid(), path)
    assert set(json.loads(path.read_text())) == {"buses", "branches", "areas", "reference"}


def test_grid_file_duplicate_branch(tmp_path):
    doc = grid_to_dict(single_block_grid())
    doc["branches"].append(dict(doc["branches"][0]))
    path = tmp_path / "dup.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ParseError, match="duplicate"):
        load_grid(path)


def test_grid_file_empty(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    with pytest.raises(ParseError):
        load_grid(path)


def test_grid_file_syntax_error_has_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n "buses": [\n')
    with pytest.raises(ParseError, match=r"bad.json:\d+"):
        load_grid(path)


def test_grid_file_missing_field(tmp_path):
    doc = grid_to_dict(single_block_grid())
    del doc["reference"]
    path = tmp_path / "g.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ParseError, match="reference"):
        load_grid(path)


def test_grid_file_custom_susceptance(tmp_path):
    doc = grid_to_dict(single_block_grid())
    doc["branches"][0]["susceptance"] = 2.5
    path = tmp_path / "g.json"
    path.write_text(json.dumps(doc))
    assert load_grid(path).branches[0].susceptance == 2.5


@settings(max_examples=15, deadline=None)
@given(topology=st.sampled_from(["ring", "chain"]), n=st.integers(3, 8), seed=st.integers(0, 2**32 - 1))
def test_generated_instances_are_observable_and_connected(topology, n, seed):
    g, problems, x = make_instance(GridConfig(topology, n, seed=seed))
    assert g.is_connected()
    assert len(problems) == 4 * n
    assert x[g.reference] == 0.0
    H, _ = analysis.stacked_system(problems, g.num_buses)
    assert np.linalg.matrix_rank(H) == g.num_buses


def test_registry_equality_and_len():
    r = SharedBusRegistry.from_areas(single_block_grid().areas)
    assert r == single_block_grid().registry
    assert len(r) == len(list(r))
