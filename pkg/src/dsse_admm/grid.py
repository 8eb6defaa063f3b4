"""Network model, area decomposition and synthetic DC measurement generation.

A grid is a set of buses joined by branches and covered by overlapping
areas.  A bus that belongs to a single area is *internal* to it; a bus that
belongs to two or more areas is a *boundary* bus and every pair of areas
sharing it is tied together by one consensus coupling.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BLOCK_SIZE = 14
AREAS_PER_BLOCK = 4


class InvalidConfig(ValueError):
    pass


class InvalidGrid(ValueError):
    pass


class ParseError(ValueError):
    pass


class Unobservable(ValueError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    block: int = 0
    is_reference: bool = False


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    susceptance: float = 1.0

    @property
    def key(self) -> tuple[int, int]:
        return (min(self.from_bus, self.to_bus), max(self.from_bus, self.to_bus))


@dataclass(frozen=True)
class Area:
    id: int
    internal: tuple[int, ...]
    boundary: tuple[int, ...]

    @property
    def buses(self) -> tuple[int, ...]:
        """Global bus ids in local state order (internal first)."""
        return self.internal + self.boundary

    @cached_property
    def local_index(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.buses)}

    @property
    def size(self) -> int:
        return len(self.internal) + len(self.boundary)


@dataclass(frozen=True)
class Coupling:
    k: int
    l: int
    bus: int


class SharedBusRegistry:
    """Ordered list of ``(k, l, bus)`` couplings, ``k < l``.

    Each coupling owns one consensus scalar and one dual scalar.  Area ``k``
    (the lower index) is the owner; the dual seen by area ``l`` is the
    negated owner dual, so a single scalar carries both multipliers.
    """

    def __init__(self, couplings: Iterable[Coupling]):
        self.couplings: tuple[Coupling, ...] = tuple(couplings)
        for c in self.couplings:
            if not c.k < c.l:
                raise InvalidGrid(f"coupling {c} must have k < l")
        if len(set(self.couplings)) != len(self.couplings):
            raise InvalidGrid("duplicate coupling in registry")

    @classmethod
    def from_areas(cls, areas: Sequence[Area]) -> "SharedBusRegistry":
        owners: dict[int, list[int]] = {}
        for a in areas:
            for b in a.buses:
                owners.setdefault(b, []).append(a.id)
        out = []
        for bus, ks in owners.items():
            for k, l in combinations(sorted(ks), 2):
                out.append(Coupling(k, l, bus))
        out.sort(key=lambda c: (c.k, c.l, c.bus))
        return cls(out)

    def __len__(self) -> int:
        return len(self.couplings)

    def __iter__(self):
        return iter(self.couplings)

    def __eq__(self, other) -> bool:
        return isinstance(other, SharedBusRegistry) and self.couplings == other.couplings

    def for_area(self, k: int) -> list[tuple[int, Coupling, int]]:
        """``(coupling index, coupling, sign)`` for every coupling touching area ``k``."""
        return [
            (i, c, 1 if c.k == k else -1)
            for i, c in enumerate(self.couplings)
            if k in (c.k, c.l)
        ]

    def neighbors(self, k: int) -> list[int]:
        nb = {c.l if c.k == k else c.k for c in self.couplings if k in (c.k, c.l)}
        return sorted(nb)


@dataclass(frozen=True)
class GridConfig:
    topology: str = "ring"
    num_blocks: int = 10
    noise_std: float = 0.01
    seed: int = 0
    susceptance_default: float = 1.0

    def validate(self) -> None:
        if self.topology not in ("ring", "chain"):
            raise InvalidConfig(f"unknown topology {self.topology!r}")
        if self.topology == "ring" and self.num_blocks < 3:
            raise InvalidConfig("ring topology needs at least 3 blocks")
        if self.topology == "chain" and self.num_blocks < 2:
            raise InvalidConfig("chain topology needs at least 2 blocks")
        if self.noise_std < 0:
            raise InvalidConfig("noise_std must be nonnegative")
        if self.susceptance_default <= 0:
            raise InvalidConfig("susceptance_default must be positive")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must fit in 64 bits")


@dataclass(frozen=True)
class Grid:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    areas: tuple[Area, ...]
    reference: int
    registry: SharedBusRegistry = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "areas", tuple(self.areas))
        self._validate()
        object.__setattr__(self, "registry", SharedBusRegistry.from_areas(self.areas))

    def _validate(self) -> None:
        ids = [b.id for b in self.buses]
        if ids != list(range(len(ids))):
            raise InvalidGrid("bus ids must be 0..n-1 in order")
        refs = [b.id for b in self.buses if b.is_reference]
        if refs != [self.reference]:
            raise InvalidGrid(f"exactly one reference bus expected, got {refs}")
        seen = set()
        for br in self.branches:
            if br.from_bus == br.to_bus:
                raise InvalidGrid(f"self-loop branch at bus {br.from_bus}")
            if not (0 <= br.from_bus < len(ids) and 0 <= br.to_bus < len(ids)):
                raise InvalidGrid(f"branch {br.key} references unknown bus")
            if br.susceptance <= 0:
                raise InvalidGrid(f"branch {br.key} susceptance must be positive")
            if br.key in seen:
                raise InvalidGrid(f"duplicate branch {br.key}")
            seen.add(br.key)
        if [a.id for a in self.areas] != list(range(len(self.areas))):
            raise InvalidGrid("area ids must be 0..K-1 in order")
        count: dict[int, int] = {}
        for a in self.areas:
            if a.size < 1:
                raise InvalidGrid(f"area {a.id} is empty")
            if set(a.internal) & set(a.boundary):
                raise InvalidGrid(f"area {a.id}: internal and boundary overlap")
            if len(set(a.buses)) != a.size:
                raise InvalidGrid(f"area {a.id}: repeated bus")
            for b in a.buses:
                count[b] = count.get(b, 0) + 1
        if set(count) != set(ids):
            raise InvalidGrid("areas must cover every bus")
        for a in self.areas:
            for b in a.boundary:
                if count[b] < 2:
                    raise InvalidGrid(f"area {a.id}: boundary bus {b} not shared")
            for b in a.internal:
                if count[b] != 1:
                    raise InvalidGrid(f"area {a.id}: internal bus {b} is shared")

    @property
    def num_buses(self) -> int:
        return len(self.buses)

    @property
    def num_blocks(self) -> int:
        return max(b.block for b in self.buses) + 1

    def tie_branches(self) -> list[Branch]:
        """Branches joining buses of different blocks."""
        blk = [b.block for b in self.buses]
        return [br for br in self.branches if blk[br.from_bus] != blk[br.to_bus]]

    def area_blocks(self) -> dict[int, int]:
        """Home block of each area (majority vote; an area may hold a foreign tie terminal)."""
        out = {}
        for a in self.areas:
            counts = Counter(self.buses[b].block for b in a.buses)
            out[a.id] = min(counts, key=lambda x: (-counts[x], x))
        return out

    def inter_block_links(self) -> set[tuple[int, int]]:
        """Block pairs joined by at least one consensus coupling."""
        blk = self.area_blocks()
        return {
            (min(blk[c.k], blk[c.l]), max(blk[c.k], blk[c.l]))
            for c in self.registry
            if blk[c.k] != blk[c.l]
        }

    def area_graph(self) -> dict[int, list[int]]:
        return {a.id: self.registry.neighbors(a.id) for a in self.areas}

    def is_connected(self) -> bool:
        adj = self.area_graph()
        if not adj:
            return True
        seen = {0}
        stack = [0]
        while stack:
            k = stack.pop()
            for l in adj[k]:
                if l not in seen:
                    seen.add(l)
                    stack.append(l)
        return len(seen) == len(adj)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _BlockTable:
    branches: tuple[tuple[int, int], ...]
    areas: tuple[tuple[int, ...], ...]
    tie_out: int
    tie_in: int
    injections: np.ndarray  # p.u. net injection per bus, balanced
    loads: np.ndarray


def _block_table() -> _BlockTable:
    raw = json.loads(resources.files("dsse_admm.data").joinpath("ieee14_block.json").read_text())
    return _BlockTable(
        branches=tuple((i - 1, j - 1) for i, j in raw["branches"]),
        areas=tuple(tuple(b - 1 for b in grp) for grp in raw["areas"]),
        tie_out=raw["tie_out_bus"] - 1,
        tie_in=raw["tie_in_bus"] - 1,
        injections=_injections(raw),
        loads=_vector(raw["load_mw"]) / raw["base_mva"],
    )


def _vector(table: dict) -> np.ndarray:
    out = np.zeros(BLOCK_SIZE)
    for bus, mw in table.items():
        out[int(bus) - 1] = mw
    return out


def _injections(raw: dict) -> np.ndarray:
    return (_vector(raw["generation_mw"]) - _vector(raw["load_mw"])) / raw["base_mva"]


_TABLE = _block_table()


def _cover_branches(area_sets: list[set[int]], branches: Sequence[Branch]) -> None:
    """Make every branch lie inside at least one area.

    A branch whose terminals sit in no common area gets each terminal copied
    into the first area holding the other terminal, so both ends become
    shared boundary buses and the branch flow is observable locally.
    """
    for br in branches:
        a, b = br.from_bus, br.to_bus
        if any(a in s and b in s for s in area_sets):
            continue
        home_a = next(i for i, s in enumerate(area_sets) if a in s)
        home_b = next(i for i, s in enumerate(area_sets) if b in s)
        area_sets[home_a].add(b)
        area_sets[home_b].add(a)


def _classify(area_sets: Sequence[set[int]], first_id: int = 0) -> list[Area]:
    count: dict[int, int] = {}
    for s in area_sets:
        for b in s:
            count[b] = count.get(b, 0) + 1
    areas = []
    for i, s in enumerate(area_sets):
        internal = tuple(sorted(b for b in s if count[b] == 1))
        boundary = tuple(sorted(b for b in s if count[b] > 1))
        areas.append(Area(first_id + i, internal, boundary))
    return areas


def _block_parts(block_index: int, susceptance: float) -> tuple[list[Bus], list[Branch], list[set[int]]]:
    off = BLOCK_SIZE * block_index
    buses = [Bus(off + i, block_index) for i in range(BLOCK_SIZE)]
    branches = [Branch(off + i, off + j, susceptance) for i, j in _TABLE.branches]
    sets = [{off + b for b in grp} for grp in _TABLE.areas]
    _cover_branches(sets, branches)
    return buses, branches, sets


def build_block(block_index: int, susceptance: float = 1.0) -> tuple[list[Bus], list[Branch], list[Area]]:
    """One IEEE 14-bus block split into four overlapping areas.

    Bus ids are offset by ``14 * block_index``; area ids by ``4 * block_index``.
    """
    if block_index < 0:
        raise ValueError("block_index must be nonnegative")
    buses, branches, sets = _block_parts(block_index, susceptance)
    return buses, branches, _classify(sets, AREAS_PER_BLOCK * block_index)


def _assemble(num_blocks: int, ties: Sequence[tuple[int, int]], susceptance: float) -> Grid:
    buses: list[Bus] = []
    branches: list[Branch] = []
    sets: list[set[int]] = []
    for i in range(num_blocks):
        bb, br, ss = _block_parts(i, susceptance)
        buses += bb
        branches += br
        sets += ss
    tie_branches = [
        Branch(BLOCK_SIZE * i + _TABLE.tie_out, BLOCK_SIZE * j + _TABLE.tie_in, susceptance)
        for i, j in ties
    ]
    branches += tie_branches
    _cover_branches(sets, tie_branches)
    buses[0] = Bus(0, 0, is_reference=True)
    return Grid(tuple(buses), tuple(branches), tuple(_classify(sets)), reference=0)


def build_grid(config: GridConfig) -> Grid:
    """Blocks of the 14-bus case linked into a ring or a chain by single tie lines."""
    config.validate()
    n = config.num_blocks
    ties = [(i, i + 1) for i in range(n - 1)]
    if config.topology == "ring":
        ties.append((n - 1, 0))
    return _assemble(n, ties, config.susceptance_default)


def single_block_grid(susceptance: float = 1.0) -> Grid:
    """A lone 14-bus block (4 areas, no tie lines)."""
    return _assemble(1, [], susceptance)


def grid_for_areas(num_areas: int, topology: str = "ring", susceptance: float = 1.0) -> Grid:
    """Grid with the requested area count; 4 areas means one isolated block."""
    if num_areas % AREAS_PER_BLOCK or num_areas <= 0:
        raise InvalidConfig(f"area count must be a positive multiple of {AREAS_PER_BLOCK}")
    if num_areas == AREAS_PER_BLOCK:
        return single_block_grid(susceptance)
    return build_grid(GridConfig(topology=topology, num_blocks=num_areas // AREAS_PER_BLOCK,
                                 susceptance_default=susceptance))


def true_state(grid: Grid, seed: int = 0, load_jitter: float = 0.05) -> np.ndarray:
    """Ground-truth bus angles from a DC power flow of ``grid``.

    Every block carries the 14-bus base-case loads, each scaled by a seeded
    factor ``1 + load_jitter * N(0, 1)``; the block's bus-1 generator is
    redispatched so the block is balanced.  Angles solve ``B theta = P``
    with the reference angle fixed at 0.  The random stream is derived from
    ``seed`` but distinct from the measurement-noise stream.
    """
    rng = np.random.default_rng([seed, 1])
    n = grid.num_buses
    P = np.zeros(n)
    for blk in range(grid.num_blocks):
        ids = [b.id for b in grid.buses if b.block == blk]
        local = [i - BLOCK_SIZE * blk for i in ids]
        inj = _TABLE.injections[local].copy()
        extra = _TABLE.loads[local] * load_jitter * rng.standard_normal(len(ids))
        inj -= extra
        inj[0] -= inj.sum()
        P[ids] = inj
    B = np.zeros((n, n))
    for br in grid.branches:
        i, j, b = br.from_bus, br.to_bus, br.susceptance
        B[i, i] += b
        B[j, j] += b
        B[i, j] -= b
        B[j, i] -= b
    keep = [i for i in range(n) if i != grid.reference]
    theta = np.zeros(n)
    theta[keep] = np.linalg.solve(B[np.ix_(keep, keep)], P[keep])
    return theta


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sensor:
    kind: str  # "injection" | "flow" | "reference"
    target: tuple[int, ...]

    def label(self) -> str:
        return "-".join(str(t) for t in self.target)


@dataclass
class AreaProblem:
    """Local least-squares data ``z = H v + noise`` of one area.

    ``coupling_index[j]`` is the registry index of the j-th coupling of this
    area, ``coupling_pos[j]`` the local position of its bus and
    ``coupling_sign[j]`` is +1 when this area owns the coupling, -1 otherwise.
    """

    area: int
    buses: tuple[int, ...]
    H: np.ndarray
    z: np.ndarray
    sensors: tuple[Sensor, ...] = ()
    coupling_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    coupling_pos: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    coupling_sign: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_internal: int | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.z = np.asarray(self.z, dtype=float).reshape(-1)
        self.coupling_index = np.asarray(self.coupling_index, dtype=int)
        self.coupling_pos = np.asarray(self.coupling_pos, dtype=int)
        self.coupling_sign = np.asarray(self.coupling_sign, dtype=float)
        if self.H.shape != (self.z.size, len(self.buses)):
            raise ValueError(f"H has shape {self.H.shape}, expected ({self.z.size}, {len(self.buses)})")
        if not (self.coupling_index.size == self.coupling_pos.size == self.coupling_sign.size):
            raise ValueError("coupling arrays must have equal length")
        if self.n_internal is None:
            coupled = set(self.coupling_pos.tolist())
            self.n_internal = sum(1 for i in range(len(self.buses)) if i not in coupled)

    @property
    def n(self) -> int:
        return len(self.buses)

    def objective(self, v: np.ndarray) -> float:
        r = self.z - self.H @ v
        return 0.5 * float(r @ r)


def _rows_for_area(grid: Grid, area: Area) -> tuple[np.ndarray, list[Sensor]]:
    idx = area.local_index
    members = set(area.buses)
    rows: list[np.ndarray] = []
    sensors: list[Sensor] = []
    internal = set(area.internal)
    incident: dict[int, list[Branch]] = {b: [] for b in internal}
    for br in grid.branches:
        for t in (br.from_bus, br.to_bus):
            if t in internal:
                incident[t].append(br)
    for b in area.internal:
        row = np.zeros(area.size)
        for br in incident[b]:
            other = br.to_bus if br.from_bus == b else br.from_bus
            row[idx[b]] += br.susceptance
            row[idx[other]] -= br.susceptance
        rows.append(row)
        sensors.append(Sensor("injection", (b,)))
    for br in grid.branches:
        if br.from_bus in members and br.to_bus in members:
            row = np.zeros(area.size)
            row[idx[br.from_bus]] = br.susceptance
            row[idx[br.to_bus]] = -br.susceptance
            rows.append(row)
            sensors.append(Sensor("flow", (br.from_bus, br.to_bus)))
    ref_owner = min(a.id for a in grid.areas if grid.reference in a.buses)
    if area.id == ref_owner:
        row = np.zeros(area.size)
        row[idx[grid.reference]] = 1.0
        rows.append(row)
        sensors.append(Sensor("reference", (grid.reference,)))
    H = np.vstack(rows) if rows else np.zeros((0, area.size))
    return H, sensors


def build_measurements(grid: Grid, state: np.ndarray, config: GridConfig | None = None) -> list[AreaProblem]:
    """Per-area DC measurement problems for the given true bus angles.

    Each area gets an injection sensor per internal bus, a flow sensor per
    branch lying fully inside it, and the area owning the reference bus a
    pseudo-measurement pinning that angle to zero.  Gaussian noise with
    standard deviation ``config.noise_std`` is drawn from ``config.seed``.
    """
    config = config or GridConfig()
    state = np.asarray(state, dtype=float)
    if state.shape != (grid.num_buses,):
        raise ValueError(f"state must have length {grid.num_buses}")
    if state[grid.reference] != 0.0:
        raise ValueError("reference bus angle must be 0 in the true state")
    rng = np.random.default_rng(config.seed)
    problems = []
    for area in grid.areas:
        H, sensors = _rows_for_area(grid, area)
        cpl = grid.registry.for_area(area.id)
        pos = [area.local_index[c.bus] for _, c, _ in cpl]
        internal_cols = H[:, : len(area.internal)]
        if area.internal and np.linalg.matrix_rank(internal_cols) < len(area.internal):
            raise Unobservable(f"area {area.id}: internal buses are not observable")
        clean = H @ state[list(area.buses)]
        noise = config.noise_std * rng.standard_normal(clean.size) if config.noise_std > 0 else 0.0
        problems.append(
            AreaProblem(
                area=area.id,
                buses=area.buses,
                H=H,
                z=clean + noise,
                sensors=tuple(sensors),
                coupling_index=[i for i, _, _ in cpl],
                coupling_pos=pos,
                coupling_sign=[s for _, _, s in cpl],
                n_internal=len(area.internal),
            )
        )
    return problems


def make_instance(config: GridConfig, num_areas: int | None = None) -> tuple[Grid, list[AreaProblem], np.ndarray]:
    """Grid, measurement problems and true state in one call."""
    if num_areas is not None:
        grid = grid_for_areas(num_areas, config.topology, config.susceptance_default)
    else:
        grid = build_grid(config)
    state = true_state(grid, config.seed)
    return grid, build_measurements(grid, state, config), state


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def grid_to_dict(grid: Grid) -> dict:
    return {
        "buses": [{"id": b.id, "block": b.block} for b in grid.buses],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "susceptance": br.susceptance}
            for br in grid.branches
        ],
        "areas": [
            {"id": a.id, "internal": list(a.internal), "boundary": list(a.boundary)}
            for a in grid.areas
        ],
        "reference": grid.reference,
    }


def grid_from_dict(doc: dict) -> Grid:
    if not isinstance(doc, dict):
        raise ParseError("grid document must be an object")
    for key in ("buses", "branches", "areas", "reference"):
        if key not in doc:
            raise ParseError(f"missing field {key!r}")
    try:
        ref = int(doc["reference"])
        buses = tuple(
            Bus(int(b["id"]), int(b.get("block", 0)), int(b["id"]) == ref) for b in doc["buses"]
        )
        branches = []
        for n, br in enumerate(doc["branches"]):
            try:
                branches.append(Branch(int(br["from"]), int(br["to"]), float(br.get("susceptance", 1.0))))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"branches[{n}]: {exc}") from exc
        areas = []
        for n, a in enumerate(doc["areas"]):
            try:
                areas.append(Area(int(a["id"]), tuple(int(x) for x in a["internal"]),
                                  tuple(int(x) for x in a["boundary"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"areas[{n}]: {exc}") from exc
        return Grid(buses, tuple(branches), tuple(areas), ref)
    except InvalidGrid as exc:
        raise ParseError(str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed grid field: {exc}") from exc


def save_grid(grid: Grid, path: str | Path) -> None:
    Path(path).write_text(json.dumps(grid_to_dict(grid), indent=1) + "\n")


def load_grid(path: str | Path) -> Grid:
    text = Path(path).read_text()
    if not text.strip():
        raise ParseError(f"{path}: empty file")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return grid_from_dict(doc)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def write_measurements(problems: Sequence[AreaProblem], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area", "sensor_type", "target", "value"])
        for p in problems:
            for s, val in zip(p.sensors, p.z):
                w.writerow([p.area, s.kind, s.label(), repr(float(val))])


def read_measurements(path: str | Path) -> list[tuple[int, str, str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["area", "sensor_type", "target", "value"]:
        raise ParseError(f"{path}: bad or missing header")
    out = []
    for n, row in enumerate(rows[1:], start=2):
        try:
            out.append((int(row[0]), row[1], row[2], float(row[3])))
        except (IndexError, ValueError) as exc:
            raise ParseError(f"{path}:{n}: {exc}") from exc
    return out
