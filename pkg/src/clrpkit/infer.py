"""Decoding strategies: greedy, instance augmentation and simulation-based beam search.

All three run without gradients through the numpy decoder. Every returned
cost is evaluated on the instance the caller passed in, so augmented
solutions found on rotated or flipped copies are charged in original
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .env import BatchEnv
from .evaluate import Solution, objective
from .instance import Instance, transform
from .policy import AttentionPolicy, NumpyDecoder, run_batch


class Solved(NamedTuple):
    solution: Solution
    cost: float


@dataclass(frozen=True)
class AugmentConfig:
    """Isometric copies to solve: ``g`` rotations, each optionally also flipped.

    Attributes:
        g: number of rotation angles, ``i * 360 / g`` for ``i < g``.
        include_flips: also solve the y-mirrored copy of every rotation.
        trajectories: rollouts per copy. Trajectory 0 is plain greedy; the
            others force distinct first customers.
        sample: draw actions instead of taking the argmax.
        seed: generator seed when sampling.
    """

    g: int = 4
    include_flips: bool = True
    trajectories: int = 1
    sample: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.g < 1:
            raise ValueError("g must be at least 1")
        if self.trajectories < 1:
            raise ValueError("trajectories must be at least 1")


@dataclass(frozen=True)
class BeamConfig:
    beam_width: int = 4
    expansion_factor: int = 4

    def __post_init__(self):
        if self.beam_width < 1 or self.expansion_factor < 1:
            raise ValueError("beam width and expansion factor must be at least 1")


def augmentation_angles(g: int) -> list[float]:
    """Rotation angles in degrees: ``i * 360 / g`` for ``i = 0 .. g-1``."""
    if g < 1:
        raise ValueError("g must be at least 1")
    return [i * 360.0 / g for i in range(g)]


def augmentation_transforms(aug: AugmentConfig) -> list[tuple[float, bool]]:
    flips = (False, True) if aug.include_flips else (False,)
    return [(angle, flip) for flip in flips for angle in augmentation_angles(aug.g)]


def _best(inst: Instance, candidates) -> Solved:
    """Cheapest candidate on ``inst``; ties go to the smallest canonical form."""
    scored = [(objective(inst, s).total, s.canonical(), s) for s in candidates]
    cost, _, sol = min(scored, key=lambda x: (x[0], x[1]))
    return Solved(sol, cost)


def solve_greedy(inst: Instance, model: AttentionPolicy) -> Solved:
    with torch.no_grad():
        batch = run_batch(model, [inst], 1, "greedy")
    sol = batch.solution(0, 0)
    return Solved(sol, objective(inst, sol).total)


def _diversified_starts(n_customers: int, count: int) -> np.ndarray:
    """Row 0 unforced, row t forces customer t-1 as the first routing action."""
    count = min(count, n_customers + 1)
    return np.arange(-1, count - 1)


def solve_augmented(inst: Instance, model: AttentionPolicy, aug: AugmentConfig = AugmentConfig()) -> Solved:
    """Best solution over all transformed copies and diversified trajectories.

    The plain greedy solution on the original instance is always a
    candidate, so the result is never worse than :func:`solve_greedy`.
    """
    greedy = solve_greedy(inst, model)
    transforms = augmentation_transforms(aug)
    starts = _diversified_starts(inst.n_customers, aug.trajectories)
    if len(transforms) == 1 and transforms[0] == (0.0, False) and len(starts) == 1 and not aug.sample:
        return greedy
    copies = [transform(inst, angle, flip) for angle, flip in transforms]
    forced = np.tile(starts, (len(copies), 1))
    gen = torch.Generator().manual_seed(aug.seed) if aug.sample else None
    with torch.no_grad():
        batch = run_batch(model, copies, len(starts), "sample" if aug.sample else "greedy", gen, forced)
    # node indices are unchanged by the isometries, so solutions transfer as-is
    candidates = [greedy.solution] + [batch.solution(b, t) for b in range(len(copies)) for t in range(len(starts))]
    return _best(inst, candidates)


def _top_actions(logp: np.ndarray, k: int) -> list[int]:
    """Up to ``k`` allowed actions by probability, lowest index first on ties."""
    allowed = np.flatnonzero(np.exp(logp) > 0)
    order = sorted(allowed, key=lambda a: (-logp[a], a))
    return [int(a) for a in order[:k]]


def solve_sbs(inst: Instance, model: AttentionPolicy, beam: BeamConfig = BeamConfig()) -> Solved:
    """Beam search whose children are ranked by a greedy completion.

    Each live beam state expands its ``expansion_factor`` most likely
    actions. Every child is completed greedily; children are ranked by the
    completed cost (ties by action sequence) and the best ``beam_width``
    survive. A finished state stays in the beam with its final cost and is
    not expanded further. The answer is the cheapest completion ever seen,
    seeded with the plain greedy solution.
    """
    best = solve_greedy(inst, model)
    best_key = (best.cost, best.solution.canonical())
    decoder = NumpyDecoder(model)
    with torch.no_grad():
        cache = decoder.prepare(model.encode_instances([inst]))
    d = model.cfg.embed_dim
    env = BatchEnv([inst])
    hidden = np.zeros((1, 1, d))
    scores = [0.0]
    while True:
        live = np.flatnonzero(~env.done)
        if len(live) == 0:
            break
        R = len(env)
        mask = env.mask()
        logp, new_hidden = decoder.decode(
            cache,
            env.last.reshape(1, R),
            (env.vcap / inst.vehicle_capacity).reshape(1, R),
            (env.indicator == 1).reshape(1, R),
            hidden,
            mask.reshape(1, R, -1),
        )
        parents, actions = [], []
        for r in range(R):
            if env.done[r]:
                parents.append(r)
                actions.append(-1)
            else:
                for a in _top_actions(logp[0, r], beam.expansion_factor):
                    parents.append(r)
                    actions.append(a)
        parents = np.array(parents)
        actions = np.array(actions)
        children = env.take(parents)
        child_hidden = np.where(env.done[parents][:, None], hidden[0, parents], new_hidden[0, parents])[None]
        expand = actions >= 0
        step_actions = np.where(expand, actions, 0)
        children.step(step_actions, check=False)

        # greedy completion of every live child, in one batch
        child_cost = np.empty(len(parents))
        sim_rows = np.flatnonzero(~children.done)
        if len(sim_rows):
            with torch.no_grad():
                sim = run_batch(
                    model, [inst], len(sim_rows), "greedy",
                    env=children.take(sim_rows), cache=cache, hidden=child_hidden[:, sim_rows].copy(),
                )
            for k, r in enumerate(sim_rows):
                sol = sim.env.solution(k)
                child_cost[r] = objective(inst, sol).total
                key = (child_cost[r], sol.canonical())
                if key < best_key:
                    best, best_key = Solved(sol, child_cost[r]), key
        for r in np.flatnonzero(children.done):
            if expand[r]:
                sol = children.solution(r)
                child_cost[r] = objective(inst, sol).total
                key = (child_cost[r], sol.canonical())
                if key < best_key:
                    best, best_key = Solved(sol, child_cost[r]), key
            else:
                child_cost[r] = scores[parents[r]]
        ranking = sorted(
            range(len(parents)), key=lambda r: (child_cost[r], children.action_sequence(r))
        )[: beam.beam_width]
        if all(children.done[r] for r in ranking):
            break
        env = children.take(ranking)
        hidden = child_hidden[:, ranking].copy()
        scores = [float(child_cost[r]) for r in ranking]
    return best
