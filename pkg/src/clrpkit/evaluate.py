"""Solution model, objective evaluation, constraint checking and gap metrics."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from .instance import Instance, Variant


class Subtour(NamedTuple):
    depot: int
    customers: tuple[int, ...]


@dataclass(frozen=True)
class Solution:
    """Ordered subtours; depot and customer indices are 0-based within their sets.

    The MILP variables are implicit: an edge of a subtour is an ``x`` entry, a
    depot appearing in any subtour is opened (``y``), and a customer is
    assigned (``z``) to the depot of its subtour.
    """

    subtours: tuple[Subtour, ...]
    variant: Variant = Variant.CLOSED

    def __post_init__(self):
        object.__setattr__(
            self, "subtours", tuple(Subtour(int(d), tuple(int(c) for c in cs)) for d, cs in self.subtours)
        )
        object.__setattr__(self, "variant", Variant.parse(self.variant))

    @property
    def opened_depots(self) -> list[int]:
        return sorted({s.depot for s in self.subtours})

    def canonical(self) -> tuple:
        """Order-independent key; Closed routes are also direction-independent."""
        keys = []
        for depot, cs in self.subtours:
            if self.variant is Variant.CLOSED and cs and cs[-1] < cs[0]:
                cs = cs[::-1]
            keys.append((depot, cs))
        return tuple(sorted(keys))


class SolutionIndexError(IndexError):
    pass


@dataclass(frozen=True)
class CostBreakdown:
    opening_cost: float
    routing_cost: float
    vehicle_cost: float
    total: float

    @classmethod
    def from_parts(cls, opening: float, routing: float, vehicle: float) -> "CostBreakdown":
        return cls(opening, routing, vehicle, opening + routing + vehicle)


def _check_indices(inst: Instance, s: Solution) -> None:
    for k, (depot, cs) in enumerate(s.subtours):
        if not 0 <= depot < inst.n_depots:
            raise SolutionIndexError(f"subtour {k}: depot index {depot} out of range")
        for c in cs:
            if not 0 <= c < inst.n_customers:
                raise SolutionIndexError(f"subtour {k}: customer index {c} out of range")


def route_cost(inst: Instance, depot: int, customers: Sequence[int], variant: Variant | None = None) -> float:
    if not customers:
        return 0.0
    variant = inst.variant if variant is None else variant
    d = inst.dist
    m = inst.n_depots
    cost = d[depot, m + customers[0]]
    for a, b in zip(customers, customers[1:]):
        cost += d[m + a, m + b]
    if variant is Variant.CLOSED:
        cost += d[m + customers[-1], depot]
    return float(cost)


def objective(inst: Instance, s: Solution) -> CostBreakdown:
    """Opening + routing + vehicle cost of ``s`` (variant taken from ``inst``)."""
    _check_indices(inst, s)
    opening = float(sum(inst.opening_cost[i] for i in s.opened_depots))
    routing = 0.0
    n_vehicles = 0
    for depot, cs in s.subtours:
        if cs:
            routing += route_cost(inst, depot, cs)
            n_vehicles += 1
    return CostBreakdown.from_parts(opening, routing, inst.vehicle_fixed_cost * n_vehicles)


@dataclass(frozen=True)
class Violation:
    constraint: int
    indices: tuple
    message: str


@dataclass(frozen=True)
class Verdict:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def constraints(self) -> set[int]:
        return {v.constraint for v in self.violations}


def check_feasible(inst: Instance, s: Solution, tol: float = 1e-9) -> Verdict:
    """Collect every violated model constraint (numbers refer to the MILP)."""
    out: list[Violation] = []
    seen: Counter = Counter()
    depot_load = [0.0] * inst.n_depots
    for k, (depot, cs) in enumerate(s.subtours):
        if not 0 <= depot < inst.n_depots:
            out.append(Violation(3, (k, depot), f"subtour {k} starts at unknown depot {depot}"))
            depot = None
        if not cs:
            out.append(Violation(10, (k,), f"subtour {k} has no customers (depot-to-depot edge)"))
            continue
        inner = Counter(cs)
        for c, count in sorted(inner.items()):
            if count > 1:
                out.append(Violation(5, (k, c), f"customer {c} repeated {count} times in subtour {k}"))
        load = 0.0
        for c in cs:
            if not 0 <= c < inst.n_customers:
                out.append(Violation(2, (k, c), f"subtour {k} visits unknown customer {c}"))
                continue
            load += inst.demand[c]
        seen.update(inner.keys())
        if load > inst.vehicle_capacity + tol:
            out.append(Violation(7, (k,), f"subtour {k} load {load:g} exceeds vehicle capacity {inst.vehicle_capacity:g}"))
        if depot is not None:
            depot_load[depot] += load
    for c in range(inst.n_customers):
        if seen[c] == 0:
            out.append(Violation(2, (c,), f"customer {c} is not visited"))
        elif seen[c] > 1:
            out.append(Violation(2, (c,), f"customer {c} is visited by {seen[c]} subtours"))
    for i, load in enumerate(depot_load):
        if load > inst.depot_capacity[i] + tol:
            out.append(Violation(8, (i,), f"depot {i} load {load:g} exceeds capacity {inst.depot_capacity[i]:g}"))
    n_vehicles = sum(1 for _, cs in s.subtours if cs)
    if n_vehicles > inst.n_customers:
        out.append(Violation(9, (n_vehicles,), f"{n_vehicles} vehicles used, at most {inst.n_customers} allowed"))
    return Verdict(tuple(out))


def gap(cost: float, reference: float) -> float:
    """Relative gap in percent, ``100 * (cost - reference) / reference``."""
    if reference <= 0:
        raise ValueError(f"reference must be positive, got {reference}")
    return 100.0 * (cost - reference) / reference


def format_gap(value: float, digits: int = 2) -> str:
    q = Decimal(1).scaleb(-digits)
    return f"{Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_EVEN)}%"


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------


def format_solution(s: Solution, instance_id: str = "") -> str:
    lines = [f"# instance={instance_id} variant={s.variant.value}"]
    lines += [f"{d}: {' '.join(map(str, cs))}".rstrip() for d, cs in s.subtours]
    return "\n".join(lines) + "\n"


def parse_solution(text: str) -> tuple[Solution, str]:
    instance_id, variant = "", Variant.CLOSED
    subtours = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                key, _, value = token.partition("=")
                if key == "instance":
                    instance_id = value
                elif key == "variant":
                    variant = Variant.parse(value)
            continue
        head, sep, tail = line.partition(":")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'depot: customers'")
        subtours.append((int(head), tuple(int(t) for t in tail.split())))
    return Solution(tuple(subtours), variant), instance_id


@dataclass
class ResultRecord:
    instance_id: str
    method: str
    total: float
    opening: float
    routing: float
    vehicle: float
    gap_vs_reference: float | None = None
    wall_time_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_cost(cls, instance_id: str, method: str, cost: CostBreakdown, wall: float, reference=None):
        g = gap(cost.total, reference) if reference else None
        return cls(instance_id, method, cost.total, cost.opening_cost, cost.routing_cost, cost.vehicle_cost, g, wall)


RECORD_FIELDS = ["instance_id", "method", "total", "opening", "routing", "vehicle", "gap_vs_reference", "wall_time_seconds"]


def write_records(records: Iterable[ResultRecord], csv_path=None, jsonl_path=None) -> None:
    records = list(records)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
            writer.writeheader()
            for r in records:
                row = {k: getattr(r, k) for k in RECORD_FIELDS}
                writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    if jsonl_path is not None:
        with open(jsonl_path, "w") as fh:
            for r in records:
                row = asdict(r)
                if not row["extra"]:
                    row.pop("extra")
                fh.write(json.dumps(row) + "\n")


def read_records_csv(path) -> list[ResultRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            g = row["gap_vs_reference"]
            out.append(
                ResultRecord(
                    row["instance_id"], row["method"], float(row["total"]), float(row["opening"]),
                    float(row["routing"]), float(row["vehicle"]), float(g) if g else None,
                    float(row["wall_time_seconds"]),
                )
            )
    return out


def load_reference_table(path) -> dict[str, float]:
    """Reference costs from a CSV (``instance_id,value`` or with a ``bks`` column)."""
    table = {}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return table
    header = [h.strip().lower() for h in rows[0]]
    if "instance_id" in header:
        key = header.index("instance_id")
        val = header.index("bks") if "bks" in header else header.index("value") if "value" in header else 1
        body = rows[1:]
    else:
        key, val, body = 0, 1, rows
    for row in body:
        if row and row[0].strip() and not row[0].startswith("#"):
            table[row[key].strip()] = float(row[val])
    return table


def write_solution(path, s: Solution, instance_id: str = "") -> None:
    Path(path).write_text(format_solution(s, instance_id))
