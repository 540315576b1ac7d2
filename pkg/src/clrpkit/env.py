"""Location-routing MDP: state, indicator-driven masking, transitions and reward.

Two implementations share the same rules. ``reset``/``mask``/``step`` work on
one immutable :class:`EnvState` and are the reference semantics; ``BatchEnv``
advances many trajectories at once with numpy and is what the policy uses
for rollouts. ``tests/test_env.py`` keeps them in lockstep.

Actions are node indices, depots first (see :mod:`clrpkit.instance`).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .evaluate import Solution, Subtour, objective
from .instance import Instance, Variant


class EnvError(RuntimeError):
    pass


class MaskedActionError(EnvError):
    pass


class TerminalStateError(EnvError):
    pass


class NonTerminalStateError(EnvError):
    pass


class DeadEndError(EnvError):
    """A reachable non-terminal state with no allowed action."""


@dataclass(frozen=True)
class EnvState:
    partial: tuple[int, ...]
    vehicle_capacity: float
    route_length: float
    depot_capacity: tuple[float, ...]
    residual_demand: tuple[float, ...]
    indicator: int
    current_depot: int | None
    step: int
    fresh: bool  # departure depot chosen, no customer yet

    @property
    def last_node(self) -> int | None:
        return self.partial[-1] if self.partial else None


def reset(inst: Instance) -> EnvState:
    return EnvState(
        partial=(),
        vehicle_capacity=0.0,
        route_length=0.0,
        depot_capacity=tuple(float(c) for c in inst.depot_capacity),
        residual_demand=tuple(float(d) for d in inst.demand),
        indicator=1,
        current_depot=None,
        step=0,
        fresh=False,
    )


def is_terminal(state: EnvState, inst: Instance) -> bool:
    if any(d > 0 for d in state.residual_demand):
        return False
    return inst.variant is Variant.OPEN or state.indicator == 1


def mask(state: EnvState, inst: Instance) -> np.ndarray:
    """Boolean allow-vector over all nodes (Rules 1-5)."""
    if is_terminal(state, inst):
        raise TerminalStateError("mask requested for a terminal state")
    m = inst.n_depots
    allowed = np.zeros(inst.n_nodes, dtype=bool)
    residual = np.asarray(state.residual_demand)
    if state.indicator == 1:
        d_min = residual[residual > 0].min()
        allowed[:m] = np.asarray(state.depot_capacity) >= d_min
    else:
        depot = state.current_depot
        cap = min(state.vehicle_capacity, state.depot_capacity[depot])
        allowed[m:] = (residual > 0) & (residual <= cap)
        allowed[depot] = not state.fresh
    if not allowed.any():
        raise DeadEndError(f"no allowed action at step {state.step} (indicator={state.indicator})")
    return allowed


def step(state: EnvState, action: int, inst: Instance) -> EnvState:
    action = int(action)
    if not mask(state, inst)[action]:
        raise MaskedActionError(f"action {action} is masked at step {state.step}")
    m = inst.n_depots
    dist = inst.dist
    partial = state.partial + (action,)
    if action >= m:
        j = action - m
        demand = state.residual_demand[j]
        depots = list(state.depot_capacity)
        depots[state.current_depot] -= demand
        residual = list(state.residual_demand)
        residual[j] = 0.0
        return replace(
            state,
            partial=partial,
            vehicle_capacity=state.vehicle_capacity - demand,
            route_length=state.route_length + float(dist[state.last_node, action]),
            depot_capacity=tuple(depots),
            residual_demand=tuple(residual),
            step=state.step + 1,
            fresh=False,
        )
    if state.indicator == 0:
        leg = float(dist[state.last_node, action]) if inst.variant is Variant.CLOSED else 0.0
        return replace(
            state, partial=partial, route_length=state.route_length + leg, indicator=1, step=state.step + 1
        )
    return replace(
        state,
        partial=partial,
        vehicle_capacity=min(inst.vehicle_capacity, state.depot_capacity[action]),
        indicator=0,
        current_depot=action,
        step=state.step + 1,
        fresh=True,
    )


def parse_actions(actions: Sequence[int], n_depots: int, variant: Variant) -> Solution:
    """Split a node sequence into subtours at depot boundaries."""
    subtours: list[Subtour] = []
    depot, route = None, []
    for a in actions:
        a = int(a)
        if a < n_depots:
            if depot is None:
                depot, route = a, []
            else:
                subtours.append(Subtour(depot, tuple(route)))
                depot = None
        else:
            route.append(a - n_depots)
    if depot is not None and route:
        subtours.append(Subtour(depot, tuple(route)))
    return Solution(tuple(subtours), variant)


def extract_solution(state: EnvState, inst: Instance) -> Solution:
    if not is_terminal(state, inst):
        raise NonTerminalStateError("solution requested before termination")
    return parse_actions(state.partial, inst.n_depots, inst.variant)


def reward(state: EnvState, inst: Instance) -> float:
    return -objective(inst, extract_solution(state, inst)).total


def format_trace(state: EnvState) -> str:
    action = state.partial[-1] if state.partial else -1
    return f"{state.step} {state.indicator} {action} {state.vehicle_capacity!r} {state.route_length!r}"


def run(
    inst: Instance,
    choose: Callable[[EnvState, np.ndarray], int],
    trace: Callable[[str], None] | None = None,
) -> EnvState:
    """Drive one episode with ``choose(state, mask) -> action``."""
    state = reset(inst)
    limit = 3 * inst.n_customers + 1
    while not is_terminal(state, inst):
        if state.step > limit:
            raise EnvError("episode exceeded its step bound")
        state = step(state, choose(state, mask(state, inst)), inst)
        if trace is not None:
            trace(format_trace(state))
    return state


class BatchEnv:
    """Vectorised copy of the MDP: ``R`` independent rows over same-shape instances.

    ``rows[r]`` names the instance row ``r`` plays. Finished rows stay frozen;
    their mask allows node 0 only so the policy can run on the full batch.
    """

    def __init__(self, instances: Sequence[Instance], rows: Sequence[int] | None = None):
        self.instances = list(instances)
        first = self.instances[0]
        self.m, self.n = first.n_depots, first.n_customers
        self.variant = first.variant
        for inst in self.instances:
            if (inst.n_depots, inst.n_customers, inst.variant) != (self.m, self.n, self.variant):
                raise ValueError("BatchEnv instances must share size and variant")
        self.rows = np.arange(len(self.instances)) if rows is None else np.asarray(rows, dtype=np.int64)
        R = len(self.rows)
        self._dist = np.ascontiguousarray(np.stack([inst.dist for inst in self.instances]), dtype=np.float64)
        self._q = np.array([inst.vehicle_capacity for inst in self.instances], dtype=np.float64)
        self.residual = np.stack([inst.demand for inst in self.instances]).astype(np.float64)[self.rows]
        self.depot_cap = np.stack([inst.depot_capacity for inst in self.instances]).astype(np.float64)[self.rows]
        self.vcap = np.zeros(R)
        self.length = np.zeros(R)
        self.indicator = np.ones(R, dtype=np.int8)
        self.cur = np.full(R, -1, dtype=np.int64)
        self.fresh = np.zeros(R, dtype=bool)
        self.last = np.full(R, -1, dtype=np.int64)
        self.steps = np.zeros(R, dtype=np.int64)
        self.max_steps = 3 * self.n + 1
        self.actions = np.full((R, self.max_steps), -1, dtype=np.int64)
        self.done = np.zeros(R, dtype=bool)

    def __len__(self) -> int:
        return len(self.rows)

    def take(self, idx) -> "BatchEnv":
        """Copy of the selected rows (shares the immutable instance data)."""
        idx = np.asarray(idx, dtype=np.int64)
        out = object.__new__(BatchEnv)
        out.instances, out.m, out.n, out.variant = self.instances, self.m, self.n, self.variant
        out._dist, out._q, out.max_steps = self._dist, self._q, self.max_steps
        for name in ("rows", "residual", "depot_cap", "vcap", "length", "indicator", "cur",
                     "fresh", "last", "steps", "actions", "done"):
            setattr(out, name, getattr(self, name)[idx].copy())
        return out

    @property
    def all_done(self) -> bool:
        return bool(self.done.all())

    def mask(self) -> np.ndarray:
        allowed = np.empty((len(self.rows), self.m + self.n), dtype=bool)
        stuck = _mask_kernel(
            self.residual, self.depot_cap, self.vcap, self.indicator, self.cur, self.fresh, self.done, self.m, allowed
        )
        if stuck >= 0:
            raise DeadEndError(f"row {stuck}: no allowed action at step {self.steps[stuck]}")
        return allowed

    def step(self, actions: np.ndarray, check: bool = True) -> None:
        actions = np.ascontiguousarray(actions, dtype=np.int64)
        if check:
            allowed = self.mask()
            if not allowed[np.arange(len(actions)), actions].all():
                raise MaskedActionError("masked action in batch step")
        _step_kernel(
            actions, self.rows, self._dist, self._q, self.residual, self.depot_cap, self.vcap, self.length,
            self.indicator, self.cur, self.fresh, self.last, self.steps, self.actions, self.done,
            self.m, self.variant is Variant.CLOSED,
        )

    def instance(self, r: int) -> Instance:
        return self.instances[self.rows[r]]

    def action_sequence(self, r: int) -> tuple[int, ...]:
        return tuple(int(a) for a in self.actions[r, : self.steps[r]])

    def solution(self, r: int) -> Solution:
        if not self.done[r]:
            raise NonTerminalStateError(f"row {r} has not terminated")
        return parse_actions(self.action_sequence(r), self.m, self.variant)


# ---------------------------------------------------------------------------
# compiled kernels for BatchEnv (same rules as ``mask``/``step`` above)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _mask_kernel(residual, depot_cap, vcap, indicator, cur, fresh, done, m, out):
    R, n = residual.shape
    stuck = -1
    for r in range(R):
        out[r, :] = False
        if done[r]:
            out[r, 0] = True
            continue
        found = False
        if indicator[r] == 1:
            d_min = np.inf
            for j in range(n):
                if 0.0 < residual[r, j] < d_min:
                    d_min = residual[r, j]
            for i in range(m):
                if depot_cap[r, i] >= d_min:
                    out[r, i] = True
                    found = True
        else:
            c = cur[r]
            cap = min(vcap[r], depot_cap[r, c])
            for j in range(n):
                d = residual[r, j]
                if d > 0.0 and d <= cap:
                    out[r, m + j] = True
                    found = True
            if not fresh[r]:
                out[r, c] = True
                found = True
        if not found and stuck < 0:
            stuck = r
    return stuck


@njit(cache=True)
def _step_kernel(actions, rows, dist, q, residual, depot_cap, vcap, length, indicator, cur, fresh, last, steps,
                 history, done, m, closed):
    R, n = residual.shape
    for r in range(R):
        if done[r]:
            continue
        a = actions[r]
        prev = last[r] if last[r] >= 0 else 0
        leg = dist[rows[r], prev, a]
        if a >= m:
            j = a - m
            dem = residual[r, j]
            vcap[r] -= dem
            depot_cap[r, cur[r]] -= dem
            residual[r, j] = 0.0
            length[r] += leg
            fresh[r] = False
        elif indicator[r] == 0:
            if closed:
                length[r] += leg
            indicator[r] = 1
        else:
            vcap[r] = min(q[rows[r]], depot_cap[r, a])
            cur[r] = a
            indicator[r] = 0
            fresh[r] = True
        history[r, steps[r]] = a
        steps[r] += 1
        last[r] = a
        served = True
        for j in range(n):
            if residual[r, j] > 0.0:
                served = False
                break
        done[r] = served and (not closed or indicator[r] == 1)
