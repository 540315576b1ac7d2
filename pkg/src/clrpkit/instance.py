"""Instance data model, synthetic generation, benchmark ingestion and model features.

Nodes are indexed depots first: node ``i < n_depots`` is depot ``i`` and node
``n_depots + j`` is customer ``j``. Every distance is Euclidean, multiplied by
``Instance.distance_multiplier`` (1 for synthetic data, 100 for the Prodhon
benchmark files, whose costs are expressed in hundredths of a distance unit).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np


class Variant(str, Enum):
    CLOSED = "closed"
    OPEN = "open"

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        value = value.lower()
        aliases = {"clrp": "closed", "oclrp": "open"}
        return cls(aliases.get(value, value))


class InstanceError(ValueError):
    """Base class for invalid instance data."""


class MalformedInstanceError(InstanceError):
    def __init__(self, message: str, line: int, path: str | None = None):
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.path = path


class CapacityInfeasibleError(InstanceError):
    pass


class Depot(NamedTuple):
    x: float
    y: float
    capacity: float
    opening_cost: float


class Customer(NamedTuple):
    x: float
    y: float
    demand: float


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Instance:
    """An immutable CLRP/OCLRP instance.

    Arrays are stored read-only so an instance can be shared freely between
    workers. ``normalized`` marks coordinates that already live in the model's
    unit frame (synthetic data and rotated copies); ``features`` leaves those
    untouched instead of re-running min-max scaling.
    """

    depot_xy: np.ndarray
    depot_capacity: np.ndarray
    opening_cost: np.ndarray
    customer_xy: np.ndarray
    demand: np.ndarray
    vehicle_capacity: float
    vehicle_fixed_cost: float
    variant: Variant = Variant.CLOSED
    id: str = ""
    distance_multiplier: float = 1.0
    normalized: bool = False
    integer_costs: int = 0

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "depot_xy", _frozen(self.depot_xy).reshape(-1, 2))
        set_(self, "customer_xy", _frozen(self.customer_xy).reshape(-1, 2))
        set_(self, "depot_capacity", _frozen(self.depot_capacity).reshape(-1))
        set_(self, "opening_cost", _frozen(self.opening_cost).reshape(-1))
        set_(self, "demand", _frozen(self.demand).reshape(-1))
        set_(self, "variant", Variant.parse(self.variant))
        set_(self, "vehicle_capacity", float(self.vehicle_capacity))
        set_(self, "vehicle_fixed_cost", float(self.vehicle_fixed_cost))
        set_(self, "distance_multiplier", float(self.distance_multiplier))
        self.validate()

    def validate(self) -> None:
        m, n = self.n_depots, self.n_customers
        if m < 1 or n < 1:
            raise InstanceError("need at least one depot and one customer")
        if len(self.depot_capacity) != m or len(self.opening_cost) != m:
            raise InstanceError("depot arrays disagree in length")
        if len(self.demand) != n:
            raise InstanceError("customer arrays disagree in length")
        if self.vehicle_capacity <= 0:
            raise InstanceError("vehicle capacity must be positive")
        if self.vehicle_fixed_cost < 0 or np.any(self.opening_cost < 0):
            raise InstanceError("costs must be nonnegative")
        if np.any(self.depot_capacity <= 0):
            raise InstanceError("depot capacities must be positive")
        if np.any(self.demand <= 0) or np.any(self.demand > self.vehicle_capacity):
            raise InstanceError("every demand must lie in (0, vehicle capacity]")
        if self.total_demand > self.depot_capacity.sum():
            raise CapacityInfeasibleError(
                f"total demand {self.total_demand:g} exceeds total depot "
                f"capacity {self.depot_capacity.sum():g}"
            )

    @property
    def n_depots(self) -> int:
        return len(self.depot_xy)

    @property
    def n_customers(self) -> int:
        return len(self.customer_xy)

    @property
    def n_nodes(self) -> int:
        return self.n_depots + self.n_customers

    @property
    def total_demand(self) -> float:
        return float(self.demand.sum())

    @property
    def depots(self) -> tuple[Depot, ...]:
        return tuple(
            Depot(float(x), float(y), float(c), float(o))
            for (x, y), c, o in zip(self.depot_xy, self.depot_capacity, self.opening_cost)
        )

    @property
    def customers(self) -> tuple[Customer, ...]:
        return tuple(Customer(float(x), float(y), float(d)) for (x, y), d in zip(self.customer_xy, self.demand))

    @cached_property
    def coords(self) -> np.ndarray:
        """All node coordinates, depots first."""
        return _frozen(np.vstack([self.depot_xy, self.customer_xy]))

    @cached_property
    def dist(self) -> np.ndarray:
        """Full node-to-node cost matrix (symmetric, zero diagonal)."""
        xy = self.coords
        dx = xy[:, None, 0] - xy[None, :, 0]
        dy = xy[:, None, 1] - xy[None, :, 1]
        return _frozen(np.hypot(dx, dy) * self.distance_multiplier)

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        arrays = ("depot_xy", "depot_capacity", "opening_cost", "customer_xy", "demand")
        scalars = (
            "vehicle_capacity", "vehicle_fixed_cost", "variant", "id",
            "distance_multiplier", "normalized", "integer_costs",
        )
        return all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays) and all(
            getattr(self, s) == getattr(other, s) for s in scalars
        )

    __hash__ = None

    def with_variant(self, variant) -> "Instance":
        return replace(self, variant=Variant.parse(variant))


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenerationConfig:
    """Sampling constants for synthetic instances.

    Coordinates are uniform on the unit square. Depot capacities are drawn as
    ``U(cap_low, cap_high) * total_demand * 2 / n_depots`` and then lifted, if
    necessary, so the total slack is at least ``(n_depots - 1) * max_demand``.
    With that slack the depot-selection mask can never strand an episode.
    """

    demand_low: int = 1
    demand_high: int = 9
    vehicle_capacity: float = 40.0
    cap_low: float = 0.5
    cap_high: float = 1.0
    opening_low: float = 0.2
    opening_high: float = 0.6
    vehicle_fixed_cost: float = 0.1
    enforce_slack: bool = True


DEFAULT_GENERATION = GenerationConfig()

# Scales of the synthetic study: customers -> potential depots.
SCALES = {10: 5, 20: 5, 50: 10, 100: 20}


def generate(
    n_customers: int,
    n_depots: int,
    seed: int,
    variant: "Variant | str" = Variant.CLOSED,
    config: GenerationConfig = DEFAULT_GENERATION,
) -> Instance:
    """Sample a uniform unit-square instance; deterministic in ``seed``."""
    if n_customers < 1 or n_depots < 1:
        raise ValueError("n_customers and n_depots must be >= 1")
    rng = np.random.default_rng(seed)
    depot_xy = rng.random((n_depots, 2))
    customer_xy = rng.random((n_customers, 2))
    demand = rng.integers(config.demand_low, config.demand_high + 1, n_customers).astype(float)
    total = demand.sum()
    cap = np.ceil(rng.uniform(config.cap_low, config.cap_high, n_depots) * total * 2.0 / n_depots)
    if config.enforce_slack:
        deficit = total + (n_depots - 1) * demand.max() - cap.sum()
        if deficit > 0:
            cap += math.ceil(deficit / n_depots)
    opening = rng.uniform(config.opening_low, config.opening_high, n_depots)
    return Instance(
        depot_xy=depot_xy,
        depot_capacity=cap,
        opening_cost=opening,
        customer_xy=customer_xy,
        demand=demand,
        vehicle_capacity=config.vehicle_capacity,
        vehicle_fixed_cost=config.vehicle_fixed_cost,
        variant=Variant.parse(variant),
        id=f"gen-{n_customers}-{n_depots}-{seed}",
        normalized=True,
    )


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from an integer tuple, e.g. (seed, epoch, batch, index)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# Prodhon/Prins benchmark layout
# ---------------------------------------------------------------------------


class _LineReader:
    def __init__(self, text: str, path: str | None):
        self.lines = text.splitlines()
        self.pos = 0
        self.path = path

    def next_tokens(self, what: str) -> tuple[list[str], int]:
        while self.pos < len(self.lines):
            self.pos += 1
            tokens = self.lines[self.pos - 1].split()
            if tokens:
                return tokens, self.pos
        raise MalformedInstanceError(f"unexpected end of file, expected {what}", self.pos + 1, self.path)

    def numbers(self, what: str, count: int) -> tuple[list[float], int]:
        tokens, line = self.next_tokens(what)
        if len(tokens) < count:
            raise MalformedInstanceError(f"expected {count} value(s) for {what}, got {len(tokens)}", line, self.path)
        try:
            return [float(t) for t in tokens[:count]], line
        except ValueError:
            raise MalformedInstanceError(f"non-numeric {what}: {' '.join(tokens)}", line, self.path) from None

    def integer(self, what: str) -> int:
        (value,), line = self.numbers(what, 1)
        if value != int(value) or value < 1:
            raise MalformedInstanceError(f"{what} must be a positive integer", line, self.path)
        return int(value)


BENCHMARK_DISTANCE_MULTIPLIER = 100.0


def parse_benchmark(path, variant: "Variant | str" = Variant.CLOSED) -> Instance:
    """Read a file in the Prodhon/Prins CLRP text layout.

    The layout is: customer count, depot count, depot coordinates, customer
    coordinates, vehicle capacity, depot capacities, customer demands, depot
    opening costs, route fixed cost and a 0/1 integer-costs flag, one record
    per line. Blank lines are skipped.
    """
    path = Path(path)
    reader = _LineReader(path.read_text(), str(path))
    n = reader.integer("customer count")
    m = reader.integer("depot count")
    depot_xy = [reader.numbers("depot coordinates", 2)[0] for _ in range(m)]
    customer_xy = [reader.numbers("customer coordinates", 2)[0] for _ in range(n)]
    q = reader.numbers("vehicle capacity", 1)[0][0]
    cap = [reader.numbers("depot capacity", 1)[0][0] for _ in range(m)]
    demand = [reader.numbers("customer demand", 1)[0][0] for _ in range(n)]
    opening = [reader.numbers("depot opening cost", 1)[0][0] for _ in range(m)]
    fixed = reader.numbers("route fixed cost", 1)[0][0]
    flag = int(reader.numbers("integer-costs flag", 1)[0][0])
    stem = path.stem
    if stem.startswith("coord"):
        stem = stem[len("coord"):]
    try:
        return Instance(
            depot_xy=depot_xy,
            depot_capacity=cap,
            opening_cost=opening,
            customer_xy=customer_xy,
            demand=demand,
            vehicle_capacity=q,
            vehicle_fixed_cost=fixed,
            variant=Variant.parse(variant),
            id=stem,
            distance_multiplier=BENCHMARK_DISTANCE_MULTIPLIER,
            integer_costs=flag,
        )
    except CapacityInfeasibleError:
        raise
    except InstanceError as exc:
        raise MalformedInstanceError(str(exc), reader.pos, str(path)) from None


_BENCHMARK_NAME = re.compile(r"^(?:coord)?(\d+)-(\d+)-\w+$")


def benchmark_scale(name: str) -> tuple[int, int]:
    """(customers, depots) encoded in a benchmark name such as ``50-5-2bis``."""
    match = _BENCHMARK_NAME.match(Path(name).stem if "." in name else name)
    if match is None:
        raise ValueError(f"{name!r} does not follow the customers-depots-tag naming")
    return int(match.group(1)), int(match.group(2))


def write_benchmark(inst: Instance, path) -> None:
    """Write ``inst`` in the benchmark layout (values via ``repr``, so exact)."""
    r = repr
    lines = [str(inst.n_customers), str(inst.n_depots), ""]
    lines += [f"{r(float(x))} {r(float(y))}" for x, y in inst.depot_xy] + [""]
    lines += [f"{r(float(x))} {r(float(y))}" for x, y in inst.customer_xy] + [""]
    lines += [r(inst.vehicle_capacity), ""]
    lines += [r(float(c)) for c in inst.depot_capacity] + [""]
    lines += [r(float(d)) for d in inst.demand] + [""]
    lines += [r(float(o)) for o in inst.opening_cost] + [""]
    lines += [r(inst.vehicle_fixed_cost), "", str(inst.integer_costs), ""]
    Path(path).write_text("\n".join(lines))


# ---------------------------------------------------------------------------
# native format
# ---------------------------------------------------------------------------

NATIVE_FORMAT = "clrpkit-instance/1"


def instance_to_dict(inst: Instance) -> dict:
    return {
        "format": NATIVE_FORMAT,
        "id": inst.id,
        "variant": inst.variant.value,
        "vehicle_capacity": inst.vehicle_capacity,
        "vehicle_fixed_cost": inst.vehicle_fixed_cost,
        "distance_multiplier": inst.distance_multiplier,
        "normalized": inst.normalized,
        "integer_costs": inst.integer_costs,
        "depots": [list(d) for d in inst.depots],
        "customers": [list(c) for c in inst.customers],
    }


def instance_from_dict(data: dict) -> Instance:
    if data.get("format") != NATIVE_FORMAT:
        raise InstanceError(f"unsupported instance format {data.get('format')!r}")
    depots = np.array(data["depots"], dtype=float).reshape(-1, 4)
    customers = np.array(data["customers"], dtype=float).reshape(-1, 3)
    return Instance(
        depot_xy=depots[:, :2],
        depot_capacity=depots[:, 2],
        opening_cost=depots[:, 3],
        customer_xy=customers[:, :2],
        demand=customers[:, 2],
        vehicle_capacity=data["vehicle_capacity"],
        vehicle_fixed_cost=data["vehicle_fixed_cost"],
        variant=data["variant"],
        id=data["id"],
        distance_multiplier=data.get("distance_multiplier", 1.0),
        normalized=data.get("normalized", False),
        integer_costs=data.get("integer_costs", 0),
    )


def save_instance(inst: Instance, path) -> None:
    """JSON with ``repr``-exact floats; round-trips every field bit-for-bit."""
    Path(path).write_text(json.dumps(instance_to_dict(inst), indent=1) + "\n")


def load_instance(path, variant=None) -> Instance:
    """Load a native JSON instance, or fall back to the benchmark layout."""
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("{"):
        inst = instance_from_dict(json.loads(text))
        return inst if variant is None else inst.with_variant(variant)
    return parse_benchmark(path, variant or Variant.CLOSED)


# ---------------------------------------------------------------------------
# model-facing features and isometries
# ---------------------------------------------------------------------------

CCR_EPS = 1e-6
FEATURE_CLIP = 100.0


@dataclass(frozen=True)
class FeatureMatrix:
    depot_rows: np.ndarray  # (m, 4): x, y, CCR, CDR
    customer_rows: np.ndarray  # (n, 3): x, y, demand / q
    normalization_record: dict = field(default_factory=dict)


def normalization(inst: Instance) -> tuple[np.ndarray, float]:
    """Offset and uniform scale mapping raw coordinates into the unit frame."""
    if inst.normalized:
        return np.zeros(2), 1.0
    xy = inst.coords
    lo = xy.min(axis=0)
    span = float((xy.max(axis=0) - lo).max())
    return lo, (span if span > 0 else 1.0)


def features(inst: Instance) -> FeatureMatrix:
    offset, scale = normalization(inst)
    if inst.normalized:
        dxy, cxy = inst.depot_xy.copy(), inst.customer_xy.copy()
    else:
        dxy = (inst.depot_xy - offset) / scale
        cxy = (inst.customer_xy - offset) / scale
    cost_scale = scale * inst.distance_multiplier
    opening = inst.opening_cost / cost_scale
    ccr = inst.depot_capacity / np.where(opening > 0, opening, CCR_EPS)
    cdr = inst.depot_capacity / inst.total_demand
    depot_rows = np.column_stack([dxy, np.clip(ccr, 0, FEATURE_CLIP), np.clip(cdr, 0, FEATURE_CLIP)])
    customer_rows = np.column_stack([cxy, inst.demand / inst.vehicle_capacity])
    record = {
        "offset": offset.tolist(),
        "scale": scale,
        "cost_scale": cost_scale,
        "demand_scale": inst.vehicle_capacity,
        "capacity_scale": inst.total_demand,
    }
    return FeatureMatrix(depot_rows, customer_rows, record)


PIVOT = np.array([0.5, 0.5])

_QUARTER_TURNS = {
    0: ((1.0, 0.0), (0.0, 1.0)),
    90: ((0.0, -1.0), (1.0, 0.0)),
    180: ((-1.0, 0.0), (0.0, -1.0)),
    270: ((0.0, 1.0), (-1.0, 0.0)),
}


def rotation_matrix(omega: float) -> np.ndarray:
    """Counter-clockwise rotation by ``omega`` degrees; exact at quarter turns."""
    turn = omega % 360.0
    if turn in _QUARTER_TURNS:
        return np.array(_QUARTER_TURNS[turn])
    rad = math.radians(omega)
    c, s = math.cos(rad), math.sin(rad)
    return np.array([[c, -s], [s, c]])


def transform(inst: Instance, omega: float = 0.0, flip: bool = False) -> Instance:
    """Rotate (and optionally mirror ``y -> 1 - y``) about the pivot (0.5, 0.5).

    Coordinates are first mapped into the unit frame; the cost multiplier is
    rescaled to compensate so every objective value is preserved.
    """
    offset, scale = normalization(inst)
    if not flip and omega % 360.0 == 0 and inst.normalized:
        return replace(inst)

    rot = rotation_matrix(omega)

    def move(xy):
        p = xy if inst.normalized else (xy - offset) / scale
        if flip:
            p = np.column_stack([p[:, 0], 1.0 - p[:, 1]])
        return (p - PIVOT) @ rot.T + PIVOT

    return replace(
        inst,
        depot_xy=move(inst.depot_xy),
        customer_xy=move(inst.customer_xy),
        distance_multiplier=inst.distance_multiplier * scale,
        normalized=True,
    )


def rotate(inst: Instance, omega: float) -> Instance:
    return transform(inst, omega, flip=False)
