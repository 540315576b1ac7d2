"""Exact enumeration for tiny instances (the ground truth for property tests).

Search order: a set partition of the customers into capacity-feasible blocks,
then a depot for every block, then the best visiting order of each block from
its depot. Subtour order and (Closed) route direction are canonicalised away.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations, permutations

from .evaluate import CostBreakdown, Solution, Subtour, objective
from .instance import Instance, Variant


class BudgetExceededError(RuntimeError):
    pass


@dataclass(frozen=True)
class OracleResult:
    best_solution: Solution
    best_cost: CostBreakdown
    nodes_explored: int


DEFAULT_LIMIT = 5_000_000


def solve_exact(inst: Instance, limit: int = DEFAULT_LIMIT) -> OracleResult:
    n, m = inst.n_customers, inst.n_depots
    dist = inst.dist.tolist()
    demand = inst.demand.tolist()
    q = inst.vehicle_capacity
    closed = inst.variant is Variant.CLOSED
    nodes = 0

    def tick(k=1):
        nonlocal nodes
        nodes += k
        if nodes > limit:
            raise BudgetExceededError(f"oracle explored more than {limit} nodes")

    @lru_cache(maxsize=None)
    def best_route(block: tuple[int, ...], depot: int) -> tuple[float, tuple[int, ...]]:
        best, order = float("inf"), ()
        for perm in permutations(block):
            tick()
            if closed and len(perm) > 1 and perm[0] > perm[-1]:
                continue
            cost = dist[depot][m + perm[0]]
            for a, b in zip(perm, perm[1:]):
                cost += dist[m + a][m + b]
            if closed:
                cost += dist[m + perm[-1]][depot]
            if cost < best:
                best, order = cost, perm
        return best, order

    best_total = float("inf")
    best_key: tuple = ()
    best_subtours: tuple = ()

    def assign(blocks, k, load, opened, cost, chosen):
        nonlocal best_total, best_key, best_subtours
        tick()
        if cost > best_total:
            return
        if k == len(blocks):
            subtours = tuple(sorted(chosen))
            if cost < best_total or (cost == best_total and subtours < best_key):
                best_total, best_key, best_subtours = cost, subtours, subtours
            return
        block = blocks[k]
        dem = sum(demand[c] for c in block)
        for i in range(m):
            if load[i] + dem > inst.depot_capacity[i]:
                continue
            r_cost, order = best_route(block, i)
            extra = r_cost + inst.vehicle_fixed_cost + (0.0 if opened[i] else inst.opening_cost[i])
            load[i] += dem
            was = opened[i]
            opened[i] = True
            chosen.append((i, order))
            assign(blocks, k + 1, load, opened, cost + extra, chosen)
            chosen.pop()
            opened[i] = was
            load[i] -= dem

    def partitions(rest: tuple[int, ...], blocks: list):
        if not rest:
            assign(tuple(blocks), 0, [0.0] * m, [False] * m, 0.0, [])
            return
        head, tail = rest[0], rest[1:]
        # every block containing `head`, built from subsets of the remainder
        for size in range(len(tail) + 1):
            for extra in combinations(tail, size):
                block = (head,) + extra
                if sum(demand[c] for c in block) > q:
                    continue
                remaining = tuple(c for c in tail if c not in extra)
                blocks.append(block)
                partitions(remaining, blocks)
                blocks.pop()

    partitions(tuple(range(n)), [])
    if not best_subtours:
        raise RuntimeError("no feasible solution found")
    solution = Solution(tuple(Subtour(d, cs) for d, cs in best_subtours), inst.variant)
    return OracleResult(solution, objective(inst, solution), nodes)


@dataclass(frozen=True)
class BoundVerdict:
    ok: bool
    candidate_cost: float
    optimum: float

    def __bool__(self):
        return self.ok


def lower_bound_check(inst: Instance, candidate: Solution, tol: float = 1e-9, limit: int = DEFAULT_LIMIT) -> BoundVerdict:
    optimum = solve_exact(inst, limit).best_cost.total
    cost = objective(inst, candidate).total
    return BoundVerdict(cost >= optimum - tol, cost, optimum)
