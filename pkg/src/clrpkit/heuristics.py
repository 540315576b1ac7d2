"""Classical baselines: a constructive start, iterated local search (ILS) and
simulated annealing (SAH).

Both searches share one move set, each with an O(1) cost delta:

* 2-opt inside a route (segment reversal; in the Open variant a reversal
  touching the route end changes which customer is last),
* relocate one customer within a route, into another route or onto a new
  route at any depot,
* swap two customers of different routes,
* reassign a whole route to another depot,
* close a depot, moving each of its routes to the cheapest other depot.

The inner loops are numba kernels over a flat array state. Vehicle capacity
is always a hard constraint. Depot capacity is hard for ILS and for the
descents SAH runs on new incumbents; the annealing walk itself may exceed it
at ``sa_penalty_per_unit`` per unit of excess.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from numba import njit

from .evaluate import Solution, Subtour, objective
from .instance import CapacityInfeasibleError, Instance, Variant

EPS = 1e-9
_INF = np.inf

# move codes shared by the scans, the proposals and the appliers
TWO_OPT, RELOCATE, RELOCATE_INTRA, NEW_ROUTE, SWAP, REASSIGN, CLOSE = range(7)


class HeuristicMethod(str, Enum):
    ILS = "ils"
    SAH = "sah"


class DeltaMismatchError(AssertionError):
    """An incremental cost disagrees with a full re-evaluation (debug mode)."""


@dataclass(frozen=True)
class HeuristicConfig:
    """Search budget and schedule.

    Attributes:
        method: which search to run.
        max_local_search: ILS perturb-and-descend rounds; for SAH, the cap on
            local-search descents triggered by new incumbents.
        no_improve_limit: ILS stops after this many rounds without a better
            incumbent.
        sa_iterations: SAH temperature levels; each level proposes one move
            per customer.
        sa_penalty_per_unit: SAH cost per unit of depot-capacity excess.
        seed: RNG seed for perturbations and proposals.
        time_limit: optional wall-clock cap in seconds, checked between
            rounds or temperature levels.
        sa_cooling: geometric factor applied after every temperature level.
        sa_acceptance: target acceptance rate of uphill moves at the start,
            used to derive the initial temperature.
        sa_initial_temperature: explicit initial temperature (0 gives pure
            descent); derived from ``sa_acceptance`` when None.
        debug_every: if positive, every this many applied moves the tracked
            cost is compared against a full re-evaluation.
    """

    method: HeuristicMethod = HeuristicMethod.ILS
    max_local_search: int = 100
    no_improve_limit: int = 100
    sa_iterations: int = 1000
    sa_penalty_per_unit: float = 400.0
    seed: int = 0
    time_limit: float | None = None
    sa_cooling: float = 0.98
    sa_acceptance: float = 0.5
    sa_initial_temperature: float | None = None
    debug_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", HeuristicMethod(self.method))
        for name in ("max_local_search", "no_improve_limit", "sa_iterations"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sa_penalty_per_unit < 0:
            raise ValueError("sa_penalty_per_unit must be nonnegative")
        if not 0 < self.sa_cooling <= 1:
            raise ValueError("sa_cooling must lie in (0, 1]")
        if not 0 < self.sa_acceptance < 1:
            raise ValueError("sa_acceptance must lie in (0, 1)")

    @classmethod
    def preset(cls, method: str | HeuristicMethod, preset: str = "fast", **overrides) -> "HeuristicConfig":
        """The fast or slow budget for ``method``, with field overrides."""
        method = HeuristicMethod(method)
        table = {
            (HeuristicMethod.ILS, "fast"): dict(max_local_search=100, no_improve_limit=100),
            (HeuristicMethod.ILS, "slow"): dict(max_local_search=1000, no_improve_limit=100),
            (HeuristicMethod.SAH, "fast"): dict(sa_iterations=1000, max_local_search=1000),
            (HeuristicMethod.SAH, "slow"): dict(sa_iterations=5000, max_local_search=3000),
        }
        try:
            base = table[(method, preset)]
        except KeyError:
            raise ValueError(f"unknown preset {preset!r}") from None
        return cls(method=method, **{**base, **overrides})


@dataclass(frozen=True)
class SearchResult:
    solution: Solution
    cost: float
    best_history: tuple[float, ...]  # incumbent after every round / temperature level
    current_history: tuple[float, ...]  # SAH: penalized cost of the walk per level
    descents: int
    rounds: int


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _capacity_cost_ratio(inst: Instance) -> np.ndarray:
    opening = np.where(inst.opening_cost > 0, inst.opening_cost, 1e-6)
    return inst.depot_capacity / opening


def construct_initial(inst: Instance, seed: int = 0) -> Solution:
    """Feasible start: CCR-ordered depots, nearest assignment, sweep routes.

    Depots open in decreasing capacity/opening-cost order until their
    capacity covers total demand. Customers, largest demand first, go to the
    nearest open depot that can still take them, opening further depots when
    none can. Each depot's customers are cut into routes by angle around the
    depot, then ordered nearest-neighbour from the depot. ``seed`` is kept for
    interface symmetry; the construction is deterministic.
    """
    del seed
    m, n = inst.n_depots, inst.n_customers
    if inst.depot_capacity.sum() < inst.total_demand:
        raise CapacityInfeasibleError("total depot capacity is below total demand")
    order = sorted(range(m), key=lambda i: (-_capacity_cost_ratio(inst)[i], i))
    opened: list[int] = []
    cap = 0.0
    for i in order:
        if cap >= inst.total_demand:
            break
        opened.append(i)
        cap += inst.depot_capacity[i]
    residual = inst.depot_capacity.astype(float).copy()
    dist = inst.dist
    assigned: dict[int, list[int]] = {}
    for j in sorted(range(n), key=lambda j: (-inst.demand[j], j)):
        dem = inst.demand[j]
        fits = [i for i in opened if residual[i] >= dem]
        if not fits:
            extra = [i for i in order if i not in opened and residual[i] >= dem]
            if not extra:
                raise CapacityInfeasibleError(f"customer {j} fits no depot after packing")
            opened.append(extra[0])
            fits = [extra[0]]
        i = min(fits, key=lambda i: (dist[i, m + j], i))
        residual[i] -= dem
        assigned.setdefault(i, []).append(j)

    subtours = []
    for i in sorted(assigned):
        dx, dy = inst.depot_xy[i]
        customers = sorted(
            assigned[i], key=lambda j: (math.atan2(inst.customer_xy[j, 1] - dy, inst.customer_xy[j, 0] - dx), j)
        )
        routes, load = [[]], 0.0
        for j in customers:
            if load + inst.demand[j] > inst.vehicle_capacity:
                routes.append([])
                load = 0.0
            routes[-1].append(j)
            load += inst.demand[j]
        for route in routes:
            subtours.append(Subtour(i, tuple(_nearest_neighbour(inst, i, route))))
    return Solution(tuple(subtours), inst.variant)


def _nearest_neighbour(inst: Instance, depot: int, customers: list[int]) -> list[int]:
    m = inst.n_depots
    left = list(customers)
    out, here = [], depot
    while left:
        nxt = min(left, key=lambda j: (inst.dist[here, m + j], j))
        out.append(nxt)
        left.remove(nxt)
        here = m + nxt
    return out


# ---------------------------------------------------------------------------
# array state
# ---------------------------------------------------------------------------
#
# P = (dist, demand, depot_capacity, opening_cost, q, F, tail, m, n)
#   dist     (m + n + 1)-square; the extra node is a zero-cost sink
#   tail[i]  node that ends a route of depot i: i itself (Closed) or the sink
# S = (path, rlen, rload, dload, dcount, acc)
#   path[r, 0]            depot of route slot r, -1 when the slot is empty
#   path[r, 1:rlen+1]     global node ids (m + customer)
#   path[r, rlen + 1]     tail of the route's depot
#   acc                   [objective, total depot excess]
#
# With the depot and tail stored in the row, every edge a move touches is a
# plain ``dist[path[r, p], path[r, p + 1]]`` lookup, so the deltas need no
# end-of-route branches.


def _problem(inst: Instance):
    N = inst.n_nodes
    dist = np.zeros((N + 1, N + 1))
    dist[:N, :N] = inst.dist
    closed = inst.variant is Variant.CLOSED
    tail = np.arange(inst.n_depots, dtype=np.int64) if closed else np.full(inst.n_depots, N, dtype=np.int64)
    return (
        dist,
        inst.demand.astype(np.float64),
        inst.depot_capacity.astype(np.float64),
        inst.opening_cost.astype(np.float64),
        float(inst.vehicle_capacity),
        float(inst.vehicle_fixed_cost),
        tail,
        inst.n_depots,
        inst.n_customers,
    )


def _state(inst: Instance, s: Solution):
    m, n = inst.n_depots, inst.n_customers
    P = _problem(inst)
    path = np.full((n, n + 2), -1, dtype=np.int64)
    rlen = np.zeros(n, dtype=np.int64)
    r = 0
    for depot, cs in s.subtours:
        if not cs:
            continue
        L = len(cs)
        path[r, 0] = depot
        path[r, 1 : L + 1] = [m + c for c in cs]
        path[r, L + 1] = P[6][depot]
        rlen[r] = L
        r += 1
    S = (path, rlen, np.zeros(n), np.zeros(m), np.zeros(m, dtype=np.int64), np.zeros(2))
    _refresh(P, S)
    return S


def _copy(S):
    return tuple(a.copy() for a in S)


def _solution(inst: Instance, S) -> Solution:
    path, rlen = S[0], S[1]
    m = inst.n_depots
    slots = sorted((int(path[r, 0]), r) for r in range(len(rlen)) if rlen[r] > 0)
    return Solution(
        tuple(Subtour(d, tuple(int(x) - m for x in path[r, 1 : rlen[r] + 1])) for d, r in slots), inst.variant
    )


# ---------------------------------------------------------------------------
# kernels: primitives
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _excess(load, cap):
    return load - cap if load > cap else 0.0


@njit(cache=True, inline="always")
def _shift_excess(dload, Q, a, b, amount):
    """Change of total depot excess when ``amount`` moves from depot a to b."""
    if a == b:
        return 0.0
    return (
        _excess(dload[a] - amount, Q[a]) - _excess(dload[a], Q[a])
        + _excess(dload[b] + amount, Q[b]) - _excess(dload[b], Q[b])
    )


@njit(cache=True, inline="always")
def _score(delta, dex, pen):
    """Search objective of a move; ``pen < 0`` makes depot capacity hard."""
    if pen < 0.0:
        return _INF if dex > EPS else delta
    return delta + pen * dex


@njit(cache=True)
def _route_cost(dist, path, r, L):
    cost = 0.0
    for p in range(L + 1):
        cost += dist[path[r, p], path[r, p + 1]]
    return cost


@njit(cache=True)
def _full_cost(P, S):
    dist, dem, Q, O, q, F, tail, m, n = P
    path, rlen, rload, dload, dcount, acc = S
    used = np.zeros(m, dtype=np.bool_)
    load = np.zeros(m)
    cost = 0.0
    for r in range(n):
        if rlen[r] > 0:
            d = path[r, 0]
            used[d] = True
            cost += F + _route_cost(dist, path, r, rlen[r])
            for p in range(1, rlen[r] + 1):
                load[d] += dem[path[r, p] - m]
    excess = 0.0
    for i in range(m):
        if used[i]:
            cost += O[i]
        excess += _excess(load[i], Q[i])
    return np.array([cost, excess])


@njit(cache=True)
def _refresh(P, S):
    """Rebuild loads, counts and the cost record from the paths."""
    dist, dem, Q, O, q, F, tail, m, n = P
    path, rlen, rload, dload, dcount, acc = S
    dload[:] = 0.0
    dcount[:] = 0
    for r in range(n):
        rload[r] = 0.0
        if rlen[r] == 0:
            path[r, :] = -1
            continue
        for p in range(1, rlen[r] + 1):
            rload[r] += dem[path[r, p] - m]
        d = path[r, 0]
        dload[d] += rload[r]
        dcount[d] += 1
    acc[:] = _full_cost(P, S)


# ---------------------------------------------------------------------------
# kernels: move deltas (return objective delta, depot-excess delta, ok)
#
# Positions are path positions: customers sit at 1..L. An insertion position
# k puts the customer between path[k - 1] and path[k].
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _removal(dist, path, r, p):
    a = path[r, p - 1]
    c = path[r, p]
    b = path[r, p + 1]
    return dist[a, b] - dist[a, c] - dist[c, b]


@njit(cache=True, inline="always")
def _insertion(dist, path, r, k, c):
    a = path[r, k - 1]
    b = path[r, k]
    return dist[a, c] + dist[c, b] - dist[a, b]


@njit(cache=True, inline="always")
def _replace(dist, path, r, p, new):
    a = path[r, p - 1]
    old = path[r, p]
    b = path[r, p + 1]
    return dist[a, new] + dist[new, b] - dist[a, old] - dist[old, b]


@njit(cache=True, inline="always")
def _d_two_opt(P, S, r, i, j):
    """Reverse positions i..j (symmetric distances keep the inner edges)."""
    dist = P[0]
    path = S[0]
    a = path[r, i - 1]
    si = path[r, i]
    sj = path[r, j]
    b = path[r, j + 1]
    return dist[a, sj] + dist[si, b] - dist[a, si] - dist[sj, b], 0.0, True


@njit(cache=True, inline="always")
def _d_relocate(P, S, r1, p, r2, k):
    dist, dem, Q, O, q, F, tail, m, n = P
    path, rlen, rload, dload, dcount, acc = S
    c = path[r1, p]
    dc = dem[c - m]
    if rload[r2] + dc > q + EPS:
        return 0.0, 0.0, False
    d1 = path[r1, 0]
    d2 = path[r2, 0]
    # an emptied route also drops its vehicle and possibly its depot
    delta = _removal(dist, path, r1, p) + _insertion(dist, path, r2, k, c)
    if rlen[r1] == 1:
        delta -= F
        if dcount[d1] == 1 and d1 != d2:
            delta -= O[d1]
    return delta, _shift_excess(dload, Q, d1, d2, dc), True


@njit(cache=True, inline="always")
def _d_relocate_intra(P, S, r, p, k):
    """Move position p to insertion slot k of the route without it (k != p)."""
    dist = P[0]
    path = S[0]
    c = path[r, p]
    a = path[r, k - 1 + (k - 1 >= p)]
    b = path[r, k + (k >= p)]
    return _removal(dist, path, r, p) + dist[a, c] + dist[c, b] - dist[a, b], 0.0, True


@njit(cache=True, inline="always")
def _d_new_route(P, S, r1, p, i):
    dist, dem, Q, O, q, F, tail, m, n = P
    path, rlen, rload, dload, dcount, acc = S
    c = path[r1, p]
    d1 = path[r1, 0]
    delta = _removal(dist, path, r1, p) + F + dist[i, c] + dist[c, tail[i]]
    if dcount[i] == 0:
        delta += O[i]
    if rlen[r1] == 1:
        delta -= F
        if dcount[d1] == 1 and d1 != i:
            delta -= O[d1]
    return delta, _shift_excess(dload, Q, d1, i, dem[c - m]), True


@njit(cache=True, inline="always")
def _d_swap(P, S, r1, p1, r2, p2):
    dist, dem, Q, O, q, F, tail, m, n = P
    path, rlen, rload, dload, dcount, acc = S
    c1 = path[r1, p1]
    c2 = path[r2, p2]
    diff = dem[c1 - m] - dem[c2 - m]
    if rload[r1] - diff > q + EPS or rload[r2] + diff > q + EPS:
        return 0.0, 0.0, False
    delta = _replace(dist, path, r1, p1, c2) + _replace(dist, path, r2, p2, c1)
    return delta, _shift_excess(dload, Q, path[r1, 0], path[r2, 0], diff), True


@njit(cache=True, inline="always")
def _d_reassign(P, S, r, i):
    dist, dem, Q, O, q, F, tail, m, n = P
    path, rlen, rload, dload, dcount, acc = S
    d = path[r, 0]
    s0 = path[r, 1]
    sl = path[r, rlen[r]]
    delta = dist[i, s0] - dist[d, s0] + dist[sl, tail[i]] - dist[sl, tail[d]]
    if dcount[i] == 0:
        delta += O[i]
    if dcount[d] == 1:
        delta -= O[d]
    return delta, _shift_excess(dload, Q, d, i, rload[r]), True


@njit(cache=True)
def _d_close(P, S, i, pen, target):
    """Move every route of depot i to its cheapest other depot, greedily."""
    dist, dem, Q, O, q, F, tail, m, n = P
    path, rlen, rload, dload, dcount, acc = S
    tl = dload.copy()
    tc = dcount.copy()
    delta, dex = -O[i], 0.0
    for r in range(n):
        if rlen[r] == 0 or path[r, 0] != i:
            continue
        s0 = path[r, 1]
        sl = path[r, rlen[r]]
        best, bj, bd, be = _INF, -1, 0.0, 0.0
        for j in range(m):
            if j == i:
                continue
            dd = dist[j, s0] - dist[i, s0] + dist[sl, tail[j]] - dist[sl, tail[i]]
            if tc[j] == 0:
                dd += O[j]
            ex = _shift_excess(tl, Q, i, j, rload[r])
            sc = _score(dd, ex, pen)
            if sc < best:
                best, bj, bd, be = sc, j, dd, ex
        if bj < 0:
            return 0.0, 0.0, False
        tl[i] -= rload[r]
        tl[bj] += rload[r]
        tc[bj] += 1
        delta += bd
        dex += be
        target[r] = bj
    return delta, dex, True


# ---------------------------------------------------------------------------
# kernels: appliers
# ---------------------------------------------------------------------------


@njit(cache=True)
def _take_out(S, r, p, dem, m):
    """Remove position p of route r, keeping loads and counts consistent."""
    path, rlen, rload, dload, dcount, acc = S
    c = path[r, p]
    L = rlen[r]
    for t in range(p, L + 1):
        path[r, t] = path[r, t + 1]
    path[r, L + 1] = -1
    rlen[r] = L - 1
    d = path[r, 0]
    rload[r] -= dem[c - m]
    dload[d] -= dem[c - m]
    if L == 1:
        dcount[d] -= 1
        rload[r] = 0.0
        path[r, 0] = -1
        path[r, 1] = -1
    return c


@njit(cache=True)
def _put_in(S, r, k, c, dem, m):
    path, rlen, rload, dload, dcount, acc = S
    for t in range(rlen[r] + 1, k - 1, -1):
        path[r, t + 1] = path[r, t]
    path[r, k] = c
    rlen[r] += 1
    rload[r] += dem[c - m]
    dload[path[r, 0]] += dem[c - m]


@njit(cache=True)
def _move_route(P, S, r, j):
    """Hand route r (with its load) to depot j."""
    tail = P[6]
    path, rlen, rload, dload, dcount, acc = S
    old = path[r, 0]
    dload[old] -= rload[r]
    dload[j] += rload[r]
    dcount[old] -= 1
    dcount[j] += 1
    path[r, 0] = j
    path[r, rlen[r] + 1] = tail[j]


@njit(cache=True)
def _apply(P, S, kind, a, b, c, d, target):
    """Apply move ``kind`` with integer parameters (a, b, c, d)."""
    dist, dem, Q, O, q, F, tail, m, n = P
    path, rlen, rload, dload, dcount, acc = S
    if kind == TWO_OPT:
        i, j = b, c
        while i < j:
            path[a, i], path[a, j] = path[a, j], path[a, i]
            i += 1
            j -= 1
    elif kind == RELOCATE:
        x = _take_out(S, a, b, dem, m)
        _put_in(S, c, d, x, dem, m)
    elif kind == RELOCATE_INTRA:
        x = _take_out(S, a, b, dem, m)
        _put_in(S, a, c, x, dem, m)
    elif kind == NEW_ROUTE:
        x = _take_out(S, a, b, dem, m)
        e = 0
        while rlen[e] > 0:
            e += 1
        path[e, 0] = c
        path[e, 1] = tail[c]
        dcount[c] += 1
        _put_in(S, e, 1, x, dem, m)
    elif kind == SWAP:
        c1, c2 = path[a, b], path[c, d]
        diff = dem[c1 - m] - dem[c2 - m]
        path[a, b], path[c, d] = c2, c1
        rload[a] -= diff
        rload[c] += diff
        dload[path[a, 0]] -= diff
        dload[path[c, 0]] += diff
    elif kind == REASSIGN:
        _move_route(P, S, a, b)
    elif kind == CLOSE:
        for r in range(n):
            if rlen[r] > 0 and path[r, 0] == a:
                _move_route(P, S, r, target[r])


@njit(cache=True)
def _delta(P, S, kind, a, b, c, d, pen, target):
    if kind == TWO_OPT:
        return _d_two_opt(P, S, a, b, c)
    if kind == RELOCATE:
        return _d_relocate(P, S, a, b, c, d)
    if kind == RELOCATE_INTRA:
        return _d_relocate_intra(P, S, a, b, c)
    if kind == NEW_ROUTE:
        return _d_new_route(P, S, a, b, c)
    if kind == SWAP:
        return _d_swap(P, S, a, b, c, d)
    if kind == REASSIGN:
        return _d_reassign(P, S, a, b)
    return _d_close(P, S, a, pen, target)


@njit(cache=True)
def _commit(P, S, kind, a, b, c, d, delta, dex, target, counter, debug_every):
    acc = S[5]
    _apply(P, S, kind, a, b, c, d, target)
    acc[0] += delta
    acc[1] += dex
    if acc[1] < 0.0:
        acc[1] = 0.0
    counter[0] += 1
    if debug_every > 0 and counter[0] % debug_every == 0:
        full = _full_cost(P, S)
        if abs(full[0] - acc[0]) > 1e-7 * (1.0 + abs(full[0])) or abs(full[1] - acc[1]) > 1e-7 * (1.0 + full[1]):
            raise AssertionError("incremental cost disagrees with full evaluation")


# ---------------------------------------------------------------------------
# kernels: local search (best improvement over the whole move set)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _best_move(P, S, pen, mv, target):
    """Best-scoring move of the full neighbourhood; writes it into ``mv``."""
    dist, dem, Q, O, q, F, tail, m, n = P
    path, rlen, rload, dload, dcount, acc = S
    best = -EPS
    found = False
    for r in range(n):
        L = rlen[r]
        if L == 0:
            continue
        for i in range(1, L + 1):
            for j in range(i + 1, L + 1):
                dl, dx, ok = _d_two_opt(P, S, r, i, j)
                if dl < best:
                    best, found = dl, True
                    mv[0], mv[1], mv[2], mv[3], mv[4] = TWO_OPT, r, i, j, 0
        for p in range(1, L + 1):
            dc = dem[path[r, p] - m]
            if L > 1:
                for k in range(1, L + 1):
                    if k == p:
                        continue
                    dl, dx, ok = _d_relocate_intra(P, S, r, p, k)
                    if dl < best:
                        best, found = dl, True
                        mv[0], mv[1], mv[2], mv[3], mv[4] = RELOCATE_INTRA, r, p, k, 0
                for i in range(m):
                    dl, dx, ok = _d_new_route(P, S, r, p, i)
                    sc = _score(dl, dx, pen)
                    if sc < best:
                        best, found = sc, True
                        mv[0], mv[1], mv[2], mv[3], mv[4] = NEW_ROUTE, r, p, i, 0
            for r2 in range(n):
                if r2 == r or rlen[r2] == 0:
                    continue
                if rload[r2] + dc <= q + EPS:
                    for k in range(1, rlen[r2] + 2):
                        dl, dx, ok = _d_relocate(P, S, r, p, r2, k)
                        sc = _score(dl, dx, pen)
                        if sc < best:
                            best, found = sc, True
                            mv[0], mv[1], mv[2], mv[3], mv[4] = RELOCATE, r, p, r2, k
                if r2 > r:
                    for p2 in range(1, rlen[r2] + 1):
                        dl, dx, ok = _d_swap(P, S, r, p, r2, p2)
                        if not ok:
                            continue
                        sc = _score(dl, dx, pen)
                        if sc < best:
                            best, found = sc, True
                            mv[0], mv[1], mv[2], mv[3], mv[4] = SWAP, r, p, r2, p2
        for i in range(m):
            if i == path[r, 0]:
                continue
            dl, dx, ok = _d_reassign(P, S, r, i)
            sc = _score(dl, dx, pen)
            if sc < best:
                best, found = sc, True
                mv[0], mv[1], mv[2], mv[3], mv[4] = REASSIGN, r, i, 0, 0
    if m > 1:
        scratch = np.empty(n, dtype=np.int64)
        for i in range(m):
            if dcount[i] == 0:
                continue
            dl, dx, ok = _d_close(P, S, i, pen, scratch)
            if not ok:
                continue
            sc = _score(dl, dx, pen)
            if sc < best:
                best, found = sc, True
                mv[0], mv[1], mv[2], mv[3], mv[4] = CLOSE, i, 0, 0, 0
                target[:] = scratch
    return found


@njit(cache=True)
def _local_search(P, S, pen, max_moves, counter, debug_every):
    mv = np.zeros(5, dtype=np.int64)
    target = np.zeros(P[8], dtype=np.int64)
    moves = 0
    while moves < max_moves and _best_move(P, S, pen, mv, target):
        dl, dx, ok = _delta(P, S, mv[0], mv[1], mv[2], mv[3], mv[4], pen, target)
        _commit(P, S, mv[0], mv[1], mv[2], mv[3], mv[4], dl, dx, target, counter, debug_every)
        moves += 1
    return moves


# ---------------------------------------------------------------------------
# kernels: randomness (numba keeps its own generator, seeded here)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _seed(seed):
    np.random.seed(seed)


@njit(cache=True)
def _random_route(rlen):
    live = np.flatnonzero(rlen > 0)
    return live[np.random.randint(len(live))]


@njit(cache=True)
def _perturb(P, S):
    """Double-bridge inside one route, then move random customers to other depots.

    Depot capacity stays hard: a reassignment with no room is skipped.
    """
    dist, dem, Q, O, q, F, tail, m, n = P
    path, rlen, rload, dload, dcount, acc = S
    long_routes = np.flatnonzero(rlen >= 4)
    if len(long_routes) > 0:
        r = long_routes[np.random.randint(len(long_routes))]
        L = rlen[r]
        cuts = np.sort(np.random.choice(np.arange(1, L), 3, replace=False))
        i, j, k = cuts[0], cuts[1], cuts[2]
        old = path[r, 1 : L + 1].copy()
        pos = 1
        for t in range(0, i):
            path[r, pos] = old[t]
            pos += 1
        for t in range(j, k):
            path[r, pos] = old[t]
            pos += 1
        for t in range(i, j):
            path[r, pos] = old[t]
            pos += 1
        for t in range(k, L):
            path[r, pos] = old[t]
            pos += 1
    else:
        r = _random_route(rlen)
        L = rlen[r]
        if L >= 2:
            i = 1 + np.random.randint(L - 1)
            j = i + 1 + np.random.randint(L - i)
            _apply(P, S, TWO_OPT, r, i, j, 0, rlen)
    for _ in range(max(1, n // 10)):
        r = _random_route(rlen)
        p = 1 + np.random.randint(rlen[r])
        d = path[r, 0]
        dc = dem[path[r, p] - m]
        options = [-1]  # route slots that can take the customer, or -1 - depot for a new route
        options.clear()
        for r2 in range(n):
            if r2 == r or rlen[r2] == 0 or rload[r2] + dc > q + EPS:
                continue
            d2 = path[r2, 0]
            if m > 1 and (d2 == d or dload[d2] + dc > Q[d2] + EPS):
                continue
            options.append(r2)
        if rlen[r] > 1:
            for i in range(m):
                if m > 1 and (i == d or dload[i] + dc > Q[i] + EPS):
                    continue
                options.append(-1 - i)
        if len(options) == 0:
            continue
        pick = options[np.random.randint(len(options))]
        if pick >= 0:
            _apply(P, S, RELOCATE, r, p, pick, 1 + np.random.randint(rlen[pick] + 1), rlen)
        else:
            _apply(P, S, NEW_ROUTE, r, p, -1 - pick, 0, rlen)
    _refresh(P, S)


@njit(cache=True)
def _propose(P, S, pen):
    """Random move of a random kind: (kind, a, b, c, d), or kind -1 if none."""
    dist, dem, Q, O, q, F, tail, m, n = P
    path, rlen, rload, dload, dcount, acc = S
    u = np.random.random()
    r = _random_route(rlen)
    L = rlen[r]
    if u < 0.35:
        p = 1 + np.random.randint(L)
        if np.random.random() < 0.2 and L > 1:
            return NEW_ROUTE, r, p, np.random.randint(m), 0
        r2 = _random_route(rlen)
        if r2 == r:
            if L < 2:
                return -1, 0, 0, 0, 0
            k = 1 + np.random.randint(L - 1)
            if k >= p:
                k += 1
            return RELOCATE_INTRA, r, p, k, 0
        return RELOCATE, r, p, r2, 1 + np.random.randint(rlen[r2] + 1)
    if u < 0.6:
        r2 = _random_route(rlen)
        if r2 == r:
            return -1, 0, 0, 0, 0
        return SWAP, r, 1 + np.random.randint(L), r2, 1 + np.random.randint(rlen[r2])
    if u < 0.85:
        if L < 2:
            return -1, 0, 0, 0, 0
        i = 1 + np.random.randint(L - 1)
        j = i + 1 + np.random.randint(L - i)
        return TWO_OPT, r, i, j, 0
    if m < 2:
        return -1, 0, 0, 0, 0
    d = path[r, 0]
    i = np.random.randint(m - 1)
    if i >= d:
        i += 1
    if u < 0.97:
        return REASSIGN, r, i, 0, 0
    return CLOSE, d, 0, 0, 0


@njit(cache=True)
def _sample_uphill(P, S, pen, count):
    """Mean uphill delta of ``count`` random capacity-feasible proposals.

    Moves that exceed a depot are left out: their penalty would dominate the
    mean and start the walk far too hot.
    """
    target = np.zeros(P[8], dtype=np.int64)
    total, hits = 0.0, 0
    for _ in range(count):
        kind, a, b, c, d = _propose(P, S, pen)
        if kind < 0:
            continue
        dl, dx, ok = _delta(P, S, kind, a, b, c, d, pen, target)
        if not ok or dx > EPS:
            continue
        if dl > EPS:
            total += dl
            hits += 1
    return total / hits if hits > 0 else 0.0


@njit(cache=True)
def _anneal_level(P, S, pen, temperature, proposals, counter, debug_every):
    """One temperature level of Metropolis proposals; returns the acceptance count."""
    target = np.zeros(P[8], dtype=np.int64)
    accepted = 0
    for _ in range(proposals):
        kind, a, b, c, d = _propose(P, S, pen)
        if kind < 0:
            continue
        dl, dx, ok = _delta(P, S, kind, a, b, c, d, pen, target)
        if not ok:
            continue
        sc = _score(dl, dx, pen)
        if sc <= 0.0 or (temperature > 0.0 and np.random.random() < math.exp(-sc / temperature)):
            _commit(P, S, kind, a, b, c, d, dl, dx, target, counter, debug_every)
            accepted += 1
    return accepted


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

_HARD = -1.0
_MAX_DESCENT_MOVES = 1_000_000


def penalized_cost(inst: Instance, s: Solution, penalty: float = 400.0) -> float:
    """Objective plus ``penalty`` per unit of depot-capacity excess."""
    load = np.zeros(inst.n_depots)
    for depot, cs in s.subtours:
        load[depot] += inst.demand[list(cs)].sum() if cs else 0.0
    excess = np.maximum(load - inst.depot_capacity, 0.0).sum()
    return objective(inst, s).total + penalty * float(excess)


def local_search(inst: Instance, s: Solution, debug_every: int = 0) -> Solution:
    """Descend from ``s`` to a local optimum of the move set (depot capacity hard)."""
    P = _problem(inst)
    S = _state(inst, s)
    _local_search(P, S, _HARD, _MAX_DESCENT_MOVES, np.zeros(1, dtype=np.int64), debug_every)
    return _solution(inst, S)


def _out_of_time(start: float, cfg: HeuristicConfig) -> bool:
    return cfg.time_limit is not None and time.perf_counter() - start > cfg.time_limit


def _run_ils(inst: Instance, cfg: HeuristicConfig) -> SearchResult:
    start = time.perf_counter()
    P = _problem(inst)
    _seed(cfg.seed)
    counter = np.zeros(1, dtype=np.int64)
    best = _state(inst, construct_initial(inst, cfg.seed))
    _local_search(P, best, _HARD, _MAX_DESCENT_MOVES, counter, cfg.debug_every)
    history = [float(best[5][0])]
    stale = rounds = 0
    descents = 1
    for _ in range(cfg.max_local_search):
        if _out_of_time(start, cfg):
            break
        cand = _copy(best)
        _perturb(P, cand)
        _local_search(P, cand, _HARD, _MAX_DESCENT_MOVES, counter, cfg.debug_every)
        descents += 1
        rounds += 1
        if cand[5][0] < best[5][0] - EPS:
            best, stale = cand, 0
        else:
            stale += 1
        history.append(float(best[5][0]))
        if stale >= cfg.no_improve_limit:
            break
    sol = _solution(inst, best)
    return SearchResult(sol, objective(inst, sol).total, tuple(history), (), descents, rounds)


def _run_sah(inst: Instance, cfg: HeuristicConfig) -> SearchResult:
    start = time.perf_counter()
    P = _problem(inst)
    _seed(cfg.seed)
    counter = np.zeros(1, dtype=np.int64)
    pen = float(cfg.sa_penalty_per_unit)
    current = _state(inst, construct_initial(inst, cfg.seed))
    best = _copy(current)
    if cfg.sa_initial_temperature is None:
        uphill = _sample_uphill(P, current, pen, 20 * inst.n_customers)
        temperature = uphill / math.log(1.0 / cfg.sa_acceptance) if uphill > 0 else 0.0
    else:
        temperature = float(cfg.sa_initial_temperature)
    best_history, current_history = [float(best[5][0])], [float(current[5][0] + pen * current[5][1])]
    descents = rounds = 0
    for _ in range(cfg.sa_iterations):
        if _out_of_time(start, cfg):
            break
        _anneal_level(P, current, pen, temperature, inst.n_customers, counter, cfg.debug_every)
        rounds += 1
        if current[5][1] <= EPS and current[5][0] < best[5][0] - EPS:
            if descents < cfg.max_local_search:
                _local_search(P, current, _HARD, _MAX_DESCENT_MOVES, counter, cfg.debug_every)
                descents += 1
            best = _copy(current)
        temperature *= cfg.sa_cooling
        best_history.append(float(best[5][0]))
        current_history.append(float(current[5][0] + pen * current[5][1]))
    if descents < cfg.max_local_search:
        _local_search(P, best, _HARD, _MAX_DESCENT_MOVES, counter, cfg.debug_every)
        descents += 1
        best_history.append(float(best[5][0]))
    sol = _solution(inst, best)
    return SearchResult(sol, objective(inst, sol).total, tuple(best_history), tuple(current_history), descents, rounds)


def search(inst: Instance, cfg: HeuristicConfig) -> SearchResult:
    """Run the configured method and return the solution with its traces."""
    try:
        if cfg.method is HeuristicMethod.ILS:
            return _run_ils(inst, cfg)
        return _run_sah(inst, cfg)
    except AssertionError as exc:
        raise DeltaMismatchError(str(exc)) from exc


def ils(inst: Instance, cfg: HeuristicConfig | None = None) -> Solution:
    cfg = HeuristicConfig.preset("ils") if cfg is None else cfg
    if cfg.method is not HeuristicMethod.ILS:
        raise ValueError("ils() needs a config with method ILS")
    return search(inst, cfg).solution


def sah(inst: Instance, cfg: HeuristicConfig | None = None) -> Solution:
    cfg = HeuristicConfig.preset("sah") if cfg is None else cfg
    if cfg.method is not HeuristicMethod.SAH:
        raise ValueError("sah() needs a config with method SAH")
    return search(inst, cfg).solution


def solve(inst: Instance, method: str, preset: str = "fast", seed: int = 0, **overrides) -> SearchResult:
    return search(inst, HeuristicConfig.preset(method, preset, seed=seed, **overrides))
