"""Problem data model, scenario documents and the robot-coordination generator.

Cells are indexed row-major, ``i = row * width + col``, with row 0 at the
lower edge of the domain (``y = ymin``). Terrain codes are single
characters: ``w`` (water), ``r`` (rough), ``n`` (normal) and the digits
``1``..``9`` for the start area of the species with that id.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Union

import numpy as np

FORMAT_TAG = "mfc-scenario/1"
BASE_TERRAINS = ("w", "r", "n")
START_CODES = tuple(str(d) for d in range(1, 10))


class ScenarioError(ValueError):
    """Raised for invalid problem data; the message names the field and cell."""


class ScenarioSyntaxError(ScenarioError):
    """Raised when a scenario document cannot be parsed at all."""


def _eq_arrays(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        a, b = np.asarray(a), np.asarray(b)
        return a.shape == b.shape and a.dtype.kind == b.dtype.kind and np.array_equal(a, b)
    if isinstance(a, (tuple, list)) and isinstance(b, (tuple, list)):
        return len(a) == len(b) and all(_eq_arrays(x, y) for x, y in zip(a, b))
    return a == b


class _ArrayEq:
    """Field-wise equality that understands numpy arrays (bit-exact)."""

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return all(
            _eq_arrays(getattr(self, f), getattr(other, f))
            for f in self.__dataclass_fields__
        )

    __hash__ = None


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TerrainGrid(_ArrayEq):
    """Rectangular grid of terrain-classified cells."""

    width: int
    height: int
    cell_terrain: np.ndarray
    domain_bounds: tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ScenarioError(f"grid: width and height must be positive, got {self.width}x{self.height}")
        terrain = np.asarray(self.cell_terrain, dtype="<U1").ravel()
        if terrain.size != self.width * self.height:
            raise ScenarioError(
                f"grid.terrain: expected {self.width * self.height} cells, got {terrain.size}"
            )
        bad = ~np.isin(terrain, BASE_TERRAINS + START_CODES)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ScenarioError(f"grid.terrain: unknown code {terrain[i]!r} at cell {self.describe_cell(i)}")
        terrain.setflags(write=False)
        object.__setattr__(self, "cell_terrain", terrain)
        bounds = tuple(float(b) for b in self.domain_bounds)
        if len(bounds) != 4 or not (bounds[1] > bounds[0] and bounds[3] > bounds[2]):
            raise ScenarioError(f"grid.bounds: need xmin < xmax and ymin < ymax, got {bounds}")
        object.__setattr__(self, "domain_bounds", bounds)
        if not (self.dx > 0 and self.dy > 0):
            raise ScenarioError("grid: spacing must be positive")

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def dx(self) -> float:
        xmin, xmax, _, _ = self.domain_bounds
        return (xmax - xmin) / max(self.width - 1, 1)

    @property
    def dy(self) -> float:
        _, _, ymin, ymax = self.domain_bounds
        return (ymax - ymin) / max(self.height - 1, 1)

    def coordinates(self) -> np.ndarray:
        """Cell-center coordinates, shape ``(n_cells, 2)``."""
        xmin, _, ymin, _ = self.domain_bounds
        rows, cols = np.divmod(np.arange(self.n_cells), self.width)
        return np.column_stack([xmin + cols * self.dx, ymin + rows * self.dy])

    def describe_cell(self, i: int) -> str:
        row, col = divmod(int(i), self.width)
        return f"{int(i)} (row {row}, col {col})"

    def class_mask(self, *codes: str) -> np.ndarray:
        return np.isin(self.cell_terrain, codes)

    def start_mask(self, species_id: int | None = None) -> np.ndarray:
        """Cells in the start area of ``species_id`` (any species if None)."""
        if species_id is None:
            return self.class_mask(*START_CODES)
        return self.cell_terrain == str(species_id)

    def terrain_rows(self) -> list[str]:
        codes = self.cell_terrain.reshape(self.height, self.width)
        return ["".join(row) for row in codes]


@dataclass(frozen=True, eq=False)
class SpeciesSpec(_ArrayEq):
    """One agent class: mobility, running cost, capacity and initial mass.

    ``custom_cost`` optionally replaces the quadratic movement cost with
    coordinate lists ``(source, target, cost)``; a tuple of ``horizon``
    such lists gives time-varying dynamics.
    """

    id: int
    allowed_terrains: frozenset
    radius_sq: int
    alpha: float
    deploy_cost: float
    capacity: np.ndarray
    initial_mass: float
    initial_distribution: np.ndarray
    custom_cost: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "allowed_terrains", frozenset(self.allowed_terrains))
        object.__setattr__(self, "capacity", _frozen_array(self.capacity))
        object.__setattr__(self, "initial_distribution", _frozen_array(self.initial_distribution))
        if self.custom_cost is not None:
            steps = tuple(
                (_frozen_array(s, dtype=np.int64), _frozen_array(t, dtype=np.int64), _frozen_array(v))
                for s, t, v in self.custom_cost
            )
            object.__setattr__(self, "custom_cost", steps)

    def allowed_mask(self, grid: TerrainGrid) -> np.ndarray:
        """Cells this species may occupy: allowed terrains plus its own start area."""
        return grid.class_mask(*self.allowed_terrains) | grid.start_mask(self.id)


@dataclass(frozen=True, eq=False)
class Fixed(_ArrayEq):
    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "target", _frozen_array(self.target))


@dataclass(frozen=True, eq=False)
class FixedOnSubset(_ArrayEq):
    target: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "target", _frozen_array(self.target))
        object.__setattr__(self, "mask", _frozen_array(self.mask, dtype=bool))


@dataclass(frozen=True, eq=False)
class LinearWithCapacity(_ArrayEq):
    cost: np.ndarray
    capacity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cost", _frozen_array(self.cost))
        object.__setattr__(self, "capacity", _frozen_array(self.capacity))


@dataclass(frozen=True, eq=False)
class Congestion(_ArrayEq):
    """Barrier ``x / (1 - x)`` on every active cell."""

    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", _frozen_array(self.mask, dtype=bool))


@dataclass(frozen=True, eq=False)
class Free(_ArrayEq):
    pass


MarginalCost = Union[Fixed, FixedOnSubset, LinearWithCapacity, Congestion, Free]
EQUALITY_COSTS = (Fixed, FixedOnSubset)


@dataclass(frozen=True, eq=False)
class Problem(_ArrayEq):
    """Discretized multispecies problem.

    ``total_costs[j]`` acts on the total density at time index ``j`` and
    ``species_costs[j][l]`` on the density of species ``l + 1``. Index 0 of
    ``total_costs`` is always ``Free`` and index 0 of ``species_costs``
    pins the initial distributions.
    """

    grid: TerrainGrid
    species: tuple
    horizon: int
    epsilon: float
    total_costs: tuple
    species_costs: tuple
    dt_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(self.species))
        object.__setattr__(self, "total_costs", tuple(self.total_costs))
        object.__setattr__(self, "species_costs", tuple(tuple(c) for c in self.species_costs))

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def n_cells(self) -> int:
        return self.grid.n_cells

    def initial_stack(self) -> np.ndarray:
        """Initial distributions stacked as an ``(L, N)`` matrix."""
        return np.vstack([s.initial_distribution for s in self.species])

    def running_weight(self, j: int) -> float:
        """Weight applied to soft costs at index ``j`` (terminal costs are unweighted)."""
        return 1.0 if j == self.horizon else self.dt_weight


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


def _first_bad(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0])


def _check_field(grid, values, name, *, nonneg=True, allow_inf=False):
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n_cells,):
        raise ScenarioError(f"{name}: expected {grid.n_cells} values, got shape {values.shape}")
    bad = np.isnan(values) | (np.isinf(values) if not allow_inf else np.isneginf(values))
    if bad.any():
        raise ScenarioError(f"{name}: non-finite value at cell {grid.describe_cell(_first_bad(bad))}")
    if nonneg and (values < 0).any():
        raise ScenarioError(f"{name}: negative value at cell {grid.describe_cell(_first_bad(values < 0))}")


def _check_cost(grid, cost, name):
    if isinstance(cost, Fixed):
        _check_field(grid, cost.target, f"{name}.target")
    elif isinstance(cost, FixedOnSubset):
        _check_field(grid, cost.target, f"{name}.target")
        if cost.mask.shape != (grid.n_cells,):
            raise ScenarioError(f"{name}.mask: expected {grid.n_cells} values")
    elif isinstance(cost, LinearWithCapacity):
        _check_field(grid, cost.cost, f"{name}.cost", nonneg=False)
        _check_field(grid, cost.capacity, f"{name}.capacity", allow_inf=True)
    elif isinstance(cost, Congestion):
        if cost.mask.shape != (grid.n_cells,):
            raise ScenarioError(f"{name}.mask: expected {grid.n_cells} values")
        inside = cost.mask & grid.start_mask()
        if inside.any():
            raise ScenarioError(
                f"{name}.mask: congestion applied inside a start area at cell "
                f"{grid.describe_cell(_first_bad(inside))}"
            )
    elif not isinstance(cost, Free):
        raise ScenarioError(f"{name}: unknown cost type {type(cost).__name__}")


def validate_problem(problem: Problem) -> Problem:
    """Check every invariant of ``problem``; return it unchanged or raise ScenarioError."""
    grid = problem.grid
    if not (problem.epsilon > 0 and math.isfinite(problem.epsilon)):
        raise ScenarioError(f"solver.epsilon: must be positive, got {problem.epsilon}")
    if problem.horizon < 1:
        raise ScenarioError(f"solver.horizon: must be >= 1, got {problem.horizon}")
    if not (problem.dt_weight > 0 and math.isfinite(problem.dt_weight)):
        raise ScenarioError(f"solver.dt_weight: must be positive, got {problem.dt_weight}")
    n_species = problem.n_species
    if n_species < 1:
        raise ScenarioError("species: at least one species is required")
    ids = [s.id for s in problem.species]
    if ids != list(range(1, n_species + 1)):
        raise ScenarioError(f"species: ids must be 1..{n_species} in order, got {ids}")
    for code in START_CODES[n_species:]:
        if (grid.cell_terrain == code).any():
            cell = _first_bad(grid.cell_terrain == code)
            raise ScenarioError(f"grid.terrain: start code {code!r} without species at cell {grid.describe_cell(cell)}")

    for s in problem.species:
        name = f"species[{s.id}]"
        if not s.allowed_terrains <= set(BASE_TERRAINS):
            raise ScenarioError(f"{name}.allowed_terrains: unknown classes {sorted(s.allowed_terrains - set(BASE_TERRAINS))}")
        if s.radius_sq < 0:
            raise ScenarioError(f"{name}.radius_sq: must be >= 0, got {s.radius_sq}")
        if not (s.alpha > 0):
            raise ScenarioError(f"{name}.alpha: must be positive, got {s.alpha}")
        if not (s.deploy_cost >= 0):
            raise ScenarioError(f"{name}.deploy_cost: must be nonnegative, got {s.deploy_cost}")
        if not (s.initial_mass > 0):
            raise ScenarioError(f"{name}.initial_mass: must be positive, got {s.initial_mass}")
        _check_field(grid, s.initial_distribution, f"{name}.initial_distribution")
        _check_field(grid, s.capacity, f"{name}.capacity", allow_inf=True)
        allowed = s.allowed_mask(grid)
        stray = (~allowed) & (s.initial_distribution > 0)
        if stray.any():
            raise ScenarioError(
                f"{name}.initial_distribution: mass on disallowed cell {grid.describe_cell(_first_bad(stray))}"
            )
        mismatch = (~allowed) & (s.capacity != 0)
        if mismatch.any():
            raise ScenarioError(
                f"{name}.capacity: nonzero capacity on disallowed cell {grid.describe_cell(_first_bad(mismatch))}"
            )
        total = float(np.sum(s.initial_distribution))
        if abs(total - s.initial_mass) > 1e-12 * s.initial_mass:
            raise ScenarioError(f"{name}.initial_distribution: sums to {total!r}, initial_mass is {s.initial_mass!r}")
        if s.custom_cost is not None and len(s.custom_cost) not in (1, problem.horizon):
            raise ScenarioError(f"{name}.cost_entries: need 1 or {problem.horizon} steps, got {len(s.custom_cost)}")
        for step in s.custom_cost or ():
            src, dst, val = step
            if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= grid.n_cells):
                raise ScenarioError(f"{name}.cost_entries: cell index out of range")
            if not (np.all(np.isfinite(val)) and np.all(val >= 0)):
                raise ScenarioError(f"{name}.cost_entries: costs must be finite and nonnegative")

    T = problem.horizon
    if len(problem.total_costs) != T + 1 or len(problem.species_costs) != T + 1:
        raise ScenarioError(f"costs: need {T + 1} time indices")
    if not isinstance(problem.total_costs[0], Free):
        raise ScenarioError("costs.total[0]: the initial total marginal carries no cost")
    for ell, (s, c0) in enumerate(zip(problem.species, problem.species_costs[0])):
        if not (isinstance(c0, Fixed) and np.array_equal(c0.target, s.initial_distribution)):
            raise ScenarioError(f"costs.species[{ell + 1}][0]: must fix the initial distribution")
    for j in range(T + 1):
        _check_cost(grid, problem.total_costs[j], f"costs.total[{j}]")
        if len(problem.species_costs[j]) != n_species:
            raise ScenarioError(f"costs.species[*][{j}]: expected {n_species} species")
        for ell, c in enumerate(problem.species_costs[j]):
            _check_cost(grid, c, f"costs.species[{ell + 1}][{j}]")
    return problem


def make_problem(grid, species, horizon, epsilon, total_costs=None, species_costs=None, dt_weight=1.0) -> Problem:
    """Assemble and validate a Problem, filling unspecified indices with ``Free``.

    ``total_costs`` and ``species_costs`` map time index to cost (species
    costs as a per-species sequence) for indices ``1..horizon``.
    """
    total_costs = dict(total_costs or {})
    species_costs = dict(species_costs or {})
    totals = [Free()] + [total_costs.get(j, Free()) for j in range(1, horizon + 1)]
    rows = [tuple(Fixed(s.initial_distribution) for s in species)]
    for j in range(1, horizon + 1):
        rows.append(tuple(species_costs.get(j, [Free()] * len(species))))
    return validate_problem(Problem(grid, tuple(species), horizon, float(epsilon), tuple(totals), tuple(rows), float(dt_weight)))


# --------------------------------------------------------------------------
# Scenario documents
# --------------------------------------------------------------------------


def read_density_csv(path) -> np.ndarray:
    """Read a row-major density CSV; ``#`` lines are comments."""
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            rows.extend(float(v) for v in next(csv.reader([line])))
    return np.array(rows, dtype=float)


def read_coo_csv(path):
    src, dst, val = [], [], []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            a, b, c = next(csv.reader([line]))
            src.append(int(a))
            dst.append(int(b))
            val.append(float(c))
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), np.array(val, dtype=float)


class _Reader:
    def __init__(self, grid: TerrainGrid, base_dir: Path | None):
        self.grid = grid
        self.base_dir = base_dir

    def _file(self, name, ref):
        if self.base_dir is None:
            raise ScenarioError(f"{name}: file reference {ref!r} needs a base directory")
        try:
            return read_density_csv(self.base_dir / ref)
        except OSError as exc:
            raise ScenarioError(f"{name}: cannot read {ref!r}: {exc}") from exc

    def field(self, spec, name) -> np.ndarray:
        n = self.grid.n_cells
        if isinstance(spec, bool) or spec is None:
            raise ScenarioError(f"{name}: expected a number or field object")
        if isinstance(spec, (int, float)):
            return np.full(n, float(spec))
        if isinstance(spec, str) and spec in ("inf", "Infinity"):
            return np.full(n, np.inf)
        if not isinstance(spec, dict):
            raise ScenarioError(f"{name}: expected a number or field object, got {spec!r}")
        if "by_class" in spec:
            out = np.full(n, _num(spec.get("default", 0.0), name))
            for code, value in spec["by_class"].items():
                if code not in BASE_TERRAINS + START_CODES:
                    raise ScenarioError(f"{name}.by_class: unknown class {code!r}")
                out[self.grid.cell_terrain == code] = _num(value, name)
            return out
        if "values" in spec:
            out = np.array([_num(v, name) for v in spec["values"]], dtype=float)
            if out.size != n:
                raise ScenarioError(f"{name}.values: expected {n} values, got {out.size}")
            return out
        if "file" in spec:
            out = self._file(name, spec["file"])
            if out.size != n:
                raise ScenarioError(f"{name}.file: expected {n} values, got {out.size}")
            return out
        raise ScenarioError(f"{name}: field object needs by_class, values or file")

    def mask(self, spec, name) -> np.ndarray:
        n = self.grid.n_cells
        if isinstance(spec, str):
            named = {
                "all": np.ones(n, bool),
                "none": np.zeros(n, bool),
                "start": self.grid.start_mask(),
                "non_start": ~self.grid.start_mask(),
            }
            if spec not in named:
                raise ScenarioError(f"{name}: unknown mask {spec!r}")
            return named[spec]
        if isinstance(spec, dict) and "by_class" in spec:
            out = np.full(n, bool(spec.get("default", False)))
            for code, value in spec["by_class"].items():
                out[self.grid.cell_terrain == code] = bool(value)
            return out
        values = self.field(spec, name)
        if not np.isin(values, (0.0, 1.0)).all():
            raise ScenarioError(f"{name}: mask values must be 0 or 1")
        return values.astype(bool)

    def cost(self, spec, name) -> MarginalCost:
        if not isinstance(spec, dict) or "type" not in spec:
            raise ScenarioError(f"{name}: cost declaration needs a 'type'")
        kind = spec["type"]
        if kind == "free":
            return Free()
        if kind == "fixed":
            return Fixed(self.field(spec["target"], f"{name}.target"))
        if kind == "fixed_on_subset":
            return FixedOnSubset(self.field(spec["target"], f"{name}.target"), self.mask(spec["mask"], f"{name}.mask"))
        if kind == "linear_capacity":
            return LinearWithCapacity(
                self.field(spec.get("cost", 0.0), f"{name}.cost"),
                self.field(spec.get("capacity", "inf"), f"{name}.capacity"),
            )
        if kind == "congestion":
            return Congestion(self.mask(spec.get("mask", "non_start"), f"{name}.mask"))
        raise ScenarioError(f"{name}: unknown cost type {kind!r}")

    def schedule(self, spec, horizon, name) -> list:
        spec = spec or {}
        default = self.cost(spec.get("default", {"type": "free"}), f"{name}.default")
        out = [default] * (horizon + 1)
        for k, rng in enumerate(spec.get("ranges", [])):
            lo, hi = int(rng["from"]), int(rng.get("to", rng["from"]))
            if not 1 <= lo <= hi <= horizon:
                raise ScenarioError(f"{name}.ranges[{k}]: time range {lo}..{hi} outside 1..{horizon}")
            cost = self.cost(rng["cost"], f"{name}.ranges[{k}]")
            for j in range(lo, hi + 1):
                out[j] = cost
        return out


def _num(value, name) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ScenarioError(f"{name}: expected a number, got {value!r}")
    try:
        return float(value)
    except ValueError as exc:
        raise ScenarioError(f"{name}: expected a number, got {value!r}") from exc


def _require(doc, key, name):
    if not isinstance(doc, dict) or key not in doc:
        raise ScenarioError(f"{name}: missing required field {key!r}")
    return doc[key]


def _paint_start_areas(codes: np.ndarray, width: int, height: int, species_docs) -> None:
    owner = {}
    for i in np.flatnonzero(np.isin(codes, START_CODES)):
        owner[int(i)] = codes[i]
    for sdoc in species_docs:
        sid = str(sdoc.get("id"))
        for rect in sdoc.get("start_area", []):
            c0, r0, c1, r1 = (int(v) for v in rect)
            if not (0 <= c0 <= c1 < width and 0 <= r0 <= r1 < height):
                raise ScenarioError(f"species[{sid}].start_area: rectangle {rect} outside grid")
            for r in range(r0, r1 + 1):
                for c in range(c0, c1 + 1):
                    i = r * width + c
                    if owner.get(i, sid) != sid:
                        raise ScenarioError(
                            f"species[{sid}].start_area: cell {i} (row {r}, col {c}) already "
                            f"belongs to the start area of species {owner[i]}"
                        )
                    owner[i] = sid
                    codes[i] = sid


def problem_from_dict(doc: dict, base_dir=None) -> Problem:
    base_dir = Path(base_dir) if base_dir is not None else None
    gdoc = _require(doc, "grid", "document")
    width, height = int(_require(gdoc, "width", "grid")), int(_require(gdoc, "height", "grid"))
    rows = _require(gdoc, "terrain", "grid")
    if isinstance(rows, str):
        rows = rows.split()
    if len(rows) != height or any(len(r) != width for r in rows):
        raise ScenarioError(f"grid.terrain: need {height} rows of {width} codes")
    codes = np.array(list("".join(rows)), dtype="<U1")
    species_docs = _require(doc, "species", "document")
    if not isinstance(species_docs, list):
        raise ScenarioError("species: expected a list of species blocks")
    _paint_start_areas(codes, width, height, species_docs)
    grid = TerrainGrid(width, height, codes, tuple(gdoc.get("bounds", (-1.0, 1.0, -1.0, 1.0))))
    reader = _Reader(grid, base_dir)

    sol = _require(doc, "solver", "document")
    horizon = int(_require(sol, "horizon", "solver"))
    epsilon = _num(_require(sol, "epsilon", "solver"), "solver.epsilon")
    dt_weight = _num(sol.get("dt_weight", 1.0), "solver.dt_weight")

    species = []
    for k, sdoc in enumerate(species_docs):
        name = f"species[{sdoc.get('id', k + 1)}]"
        sid = int(_require(sdoc, "id", name))
        custom = None
        if "cost_file" in sdoc or "cost_entries" in sdoc:
            custom = _read_custom_cost(sdoc, base_dir, name)
        terrains = frozenset(_require(sdoc, "allowed_terrains", name))
        cap_spec = sdoc.get("capacity", "inf")
        capacity = reader.field(cap_spec, f"{name}.capacity")
        if not isinstance(cap_spec, dict):
            # a scalar capacity applies only where the species may go
            allowed = grid.class_mask(*terrains) | grid.start_mask(sid)
            capacity = np.where(allowed, capacity, 0.0)
        species.append(
            SpeciesSpec(
                id=sid,
                allowed_terrains=terrains,
                radius_sq=int(_require(sdoc, "radius_sq", name)),
                alpha=_num(_require(sdoc, "alpha", name), f"{name}.alpha"),
                deploy_cost=_num(sdoc.get("deploy_cost", 0.0), f"{name}.deploy_cost"),
                capacity=capacity,
                initial_mass=_num(_require(sdoc, "initial_mass", name), f"{name}.initial_mass"),
                initial_distribution=reader.field(
                    _require(sdoc, "initial_distribution", name), f"{name}.initial_distribution"
                ),
                custom_cost=custom,
            )
        )
    cdoc = doc.get("costs", {})
    totals = reader.schedule(cdoc.get("total"), horizon, "costs.total")
    totals[0] = Free()
    per_species = []
    sdocs = cdoc.get("species", {})
    for s in species:
        sched = reader.schedule(sdocs.get(str(s.id)), horizon, f"costs.species[{s.id}]")
        sched[0] = Fixed(s.initial_distribution)
        per_species.append(sched)
    rows_by_time = [tuple(per_species[ell][j] for ell in range(len(species))) for j in range(horizon + 1)]
    problem = Problem(grid, tuple(species), horizon, epsilon, tuple(totals), tuple(rows_by_time), dt_weight)
    return validate_problem(problem)


def _read_custom_cost(sdoc, base_dir, name):
    if "cost_entries" in sdoc:
        steps = sdoc["cost_entries"]
        if steps and not isinstance(steps[0][0], list):
            steps = [steps]
        out = []
        for step in steps:
            arr = np.array(step, dtype=float).reshape(-1, 3)
            out.append((arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2]))
        return tuple(out)
    files = sdoc["cost_file"]
    files = [files] if isinstance(files, str) else files
    if base_dir is None:
        raise ScenarioError(f"{name}.cost_file: file reference needs a base directory")
    try:
        return tuple(read_coo_csv(base_dir / f) for f in files)
    except (OSError, ValueError) as exc:
        raise ScenarioError(f"{name}.cost_file: {exc}") from exc


def parse_scenario(text: str, base_dir=None) -> Problem:
    """Parse and validate a scenario document.

    Parameters
    ----------
    text : str
        JSON scenario document (see README for the layout).
    base_dir : path-like, optional
        Directory against which ``{"file": ...}`` references resolve.

    Raises
    ------
    ScenarioSyntaxError
        If the text is not a well-formed document.
    ScenarioError
        If a field violates a problem invariant.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioSyntaxError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ScenarioSyntaxError("top level must be an object")
    fmt = doc.get("format", FORMAT_TAG)
    if fmt != FORMAT_TAG:
        raise ScenarioSyntaxError(f"unsupported format {fmt!r}")
    try:
        return problem_from_dict(doc, base_dir)
    except (KeyError, TypeError, AttributeError) as exc:
        raise ScenarioError(f"malformed document: {exc!r}") from exc


def load_scenario(path) -> Problem:
    path = Path(path)
    return parse_scenario(path.read_text(), base_dir=path.parent)


# rendering -----------------------------------------------------------------


def _num_out(x: float):
    x = float(x)
    if math.isinf(x):
        return "inf"
    return x


def _encode_field(grid: TerrainGrid, values: np.ndarray):
    values = np.asarray(values, dtype=float)
    first = values[0]
    if np.array_equal(values, np.full_like(values, first)):
        return _num_out(first)
    by_class = {}
    for code in np.unique(grid.cell_terrain):
        sel = values[grid.cell_terrain == code]
        if not np.array_equal(sel, np.full_like(sel, sel[0])):
            return {"values": [_num_out(v) for v in values]}
        by_class[str(code)] = _num_out(sel[0])
    return {"by_class": by_class}


def _encode_mask(grid: TerrainGrid, mask: np.ndarray):
    mask = np.asarray(mask, dtype=bool)
    for name in ("all", "none", "start", "non_start"):
        if np.array_equal(mask, _Reader(grid, None).mask(name, "")):
            return name
    by_class = {}
    for code in np.unique(grid.cell_terrain):
        sel = mask[grid.cell_terrain == code]
        if sel.all() != sel.any():
            return {"values": [int(v) for v in mask]}
        by_class[str(code)] = bool(sel[0])
    return {"by_class": by_class}


def _encode_cost(grid, cost):
    if isinstance(cost, Free):
        return {"type": "free"}
    if isinstance(cost, Fixed):
        return {"type": "fixed", "target": _encode_field(grid, cost.target)}
    if isinstance(cost, FixedOnSubset):
        return {
            "type": "fixed_on_subset",
            "target": _encode_field(grid, cost.target),
            "mask": _encode_mask(grid, cost.mask),
        }
    if isinstance(cost, LinearWithCapacity):
        return {
            "type": "linear_capacity",
            "cost": _encode_field(grid, cost.cost),
            "capacity": _encode_field(grid, cost.capacity),
        }
    if isinstance(cost, Congestion):
        return {"type": "congestion", "mask": _encode_mask(grid, cost.mask)}
    raise TypeError(f"unknown cost {cost!r}")


def _encode_schedule(grid, costs) -> dict:
    ranges = []
    j = 1
    while j < len(costs):
        k = j
        while k + 1 < len(costs) and costs[k + 1] == costs[j]:
            k += 1
        if not isinstance(costs[j], Free):
            ranges.append({"from": j, "to": k, "cost": _encode_cost(grid, costs[j])})
        j = k + 1
    return {"default": {"type": "free"}, "ranges": ranges}


def problem_to_dict(problem: Problem) -> dict:
    grid = problem.grid
    species = []
    for s in problem.species:
        block = {
            "id": s.id,
            "allowed_terrains": sorted(s.allowed_terrains),
            "radius_sq": int(s.radius_sq),
            "alpha": float(s.alpha),
            "deploy_cost": float(s.deploy_cost),
            "initial_mass": float(s.initial_mass),
            "initial_distribution": _encode_field(grid, s.initial_distribution),
            "capacity": _encode_field(grid, s.capacity),
        }
        if s.custom_cost is not None:
            block["cost_entries"] = [
                [[int(a), int(b), float(c)] for a, b, c in zip(*step)] for step in s.custom_cost
            ]
        species.append(block)
    return {
        "format": FORMAT_TAG,
        "grid": {
            "width": grid.width,
            "height": grid.height,
            "bounds": list(grid.domain_bounds),
            "terrain": grid.terrain_rows(),
        },
        "species": species,
        "solver": {"epsilon": problem.epsilon, "horizon": problem.horizon, "dt_weight": problem.dt_weight},
        "costs": {
            "total": _encode_schedule(grid, problem.total_costs),
            "species": {
                str(s.id): _encode_schedule(grid, [row[ell] for row in problem.species_costs])
                for ell, s in enumerate(problem.species)
            },
        },
    }


def render_scenario(problem: Problem) -> str:
    """Serialize ``problem`` to a scenario document that parses back bit-exactly."""
    return json.dumps(problem_to_dict(problem), indent=1) + "\n"


def problem_hash(problem: Problem) -> str:
    return hashlib.sha256(render_scenario(problem).encode()).hexdigest()


def write_density_csv(path, values, width, height, time, species) -> None:
    """Write one row-major density field with its ``# width height time species`` header."""
    values = np.asarray(values, dtype=float).reshape(height, width)
    buf = io.StringIO()
    buf.write(f"# {width} {height} {time} {species}\n")
    for row in values:
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    Path(path).write_text(buf.getvalue())


# --------------------------------------------------------------------------
# Robot-coordination example
# --------------------------------------------------------------------------

# Axis-aligned regions as fractions of the unit square [x0, x1) x [y0, y1),
# tested against cell-center fractions (col + 1/2) / side. y grows upward.
ROBOT_REGIONS = {
    "w": (Fraction(0), Fraction(9, 20), Fraction(3, 5), Fraction(1)),
    "r": (Fraction(13, 20), Fraction(1), Fraction(0), Fraction(2, 5)),
    "1": (Fraction(0), Fraction(1, 10), Fraction(0), Fraction(1, 10)),
    "2": (Fraction(1, 10), Fraction(1, 5), Fraction(0), Fraction(1, 10)),
    "3": (Fraction(1, 5), Fraction(3, 10), Fraction(0), Fraction(1, 10)),
}
ROBOT_SPECIES = (
    # id, allowed terrains, radius^2 (in dx^2), alpha, deploy cost
    (1, ("w", "n"), 6, 400.0, 0.2),
    (2, ("r", "n"), 6, 400.0, 0.2),
    (3, ("n",), 9, 100.0, 0.1),
)
ROBOT_EPSILON = 0.2
ROBOT_MASS = 10.0
ROBOT_TERMINAL_MASS = 10.0


def robot_terrain(side: int) -> np.ndarray:
    codes = np.full((side, side), "n", dtype="<U1")
    centers = [Fraction(2 * k + 1, 2 * side) for k in range(side)]
    for code, (x0, x1, y0, y1) in ROBOT_REGIONS.items():
        cols = [k for k, c in enumerate(centers) if x0 <= c < x1]
        rows = [k for k, c in enumerate(centers) if y0 <= c < y1]
        for r in rows:
            codes[r, cols] = code
    return codes.ravel()


def generate_paper_example(grid_side: int = 100, horizon: int = 60) -> Problem:
    """Three robot types covering water, rough and normal terrain.

    Parameters
    ----------
    grid_side : int
        Cells per side of the square domain ``[-1, 1]^2``; at least 10.
    horizon : int
        Number of time steps; the problem has ``horizon + 1`` marginals.
    """
    if grid_side < 10:
        raise ValueError(f"grid_side must be >= 10, got {grid_side}")
    if horizon < 2:
        raise ValueError(f"horizon must be >= 2, got {horizon}")
    grid = TerrainGrid(grid_side, grid_side, robot_terrain(grid_side))
    starts = grid.start_mask()
    species = []
    for sid, terrains, radius_sq, alpha, deploy in ROBOT_SPECIES:
        own = grid.start_mask(sid)
        allowed = grid.class_mask(*terrains) | own
        capacity = np.where(own, 10.0, np.where(allowed, 1.0, 0.0))
        mu0 = np.where(own, ROBOT_MASS / own.sum(), 0.0)
        species.append(SpeciesSpec(sid, frozenset(terrains), radius_sq, alpha, deploy, capacity, ROBOT_MASS, mu0))

    target = np.where(starts, 0.0, ROBOT_TERMINAL_MASS / (~starts).sum())
    total_costs = {j: Congestion(~starts) for j in range(1, horizon)}
    total_costs[horizon] = FixedOnSubset(target, ~starts)
    species_costs = {}
    for j in range(1, horizon + 1):
        row = []
        for s in species:
            if j < horizon:
                c = np.where(grid.start_mask(s.id), 0.0, s.deploy_cost)
            else:
                c = np.zeros(grid.n_cells)
            row.append(LinearWithCapacity(c, s.capacity))
        species_costs[j] = row
    return make_problem(grid, species, horizon, ROBOT_EPSILON, total_costs, species_costs)


__all__ = [
    "Congestion",
    "Fixed",
    "FixedOnSubset",
    "Free",
    "LinearWithCapacity",
    "MarginalCost",
    "Problem",
    "ScenarioError",
    "ScenarioSyntaxError",
    "SpeciesSpec",
    "TerrainGrid",
    "generate_paper_example",
    "load_scenario",
    "make_problem",
    "parse_scenario",
    "problem_hash",
    "read_density_csv",
    "render_scenario",
    "validate_problem",
    "write_density_csv",
]
