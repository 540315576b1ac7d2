"""Verification harnesses shared by the test suite.

* :func:`fd_gradcheck` compares autograd gradients of the REINFORCE surrogate
  with central finite differences.
* :func:`explore_all_rollouts` walks every allowed action sequence of a tiny
  instance through the reference environment.
* :func:`reference_probabilities` recomputes the policy's action
  distributions with plain loops over heads and states, independently of the
  batched torch and numpy code paths.
* :func:`enumerate_split` is a second exact solver (customer permutation,
  then a split into consecutive routes, then a depot per route) to cross-check
  :mod:`clrpkit.oracle`.
* :func:`build_corpus` regenerates the frozen small-instance corpus:
  ``python3 -m clrpkit.testkit corpus tests/data``.
* :func:`build_benchmark_standins` writes synthetic files in the Prodhon
  layout under the 30 published CLRP instance names:
  ``python3 -m clrpkit.testkit benchmarks tests/data/benchmark``.
"""

from __future__ import annotations

import argparse
import csv
import math
from dataclasses import dataclass, field, replace
from itertools import permutations, product
from pathlib import Path
from typing import Sequence

import mpmath
import numpy as np
import torch

from . import env as mdp
from .evaluate import Solution, Subtour, check_feasible, objective
from .instance import (
    GenerationConfig, Instance, Variant, benchmark_scale, derive_seed, features, generate, load_instance,
    save_instance, write_benchmark,
)
from .oracle import solve_exact
from .policy import AttentionPolicy, Trajectory, surrogate

# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass
class FDCheckReport:
    """Worst relative error of one parameter tensor (or of all, for the summary)."""

    name: str
    max_rel_error: float
    failing: list = field(default_factory=list)  # flat indices above the tolerance
    checked: int = 0
    escalated: int = 0  # entries re-evaluated in exact arithmetic

    @property
    def ok(self) -> bool:
        return not self.failing


def relative_error(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1e-12)


def fd_gradcheck(
    model: AttentionPolicy,
    trajectories: Sequence[Trajectory],
    advantages: Sequence[float],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int = 16,
    seed: int = 0,
    precision: str = "extended",
    escalate: bool = True,
) -> tuple[FDCheckReport, list[FDCheckReport]]:
    """Central differences of the surrogate against autograd, per parameter.

    The analytic side is autograd through the production model. The
    difference quotient evaluates the straight-line oracle surrogate with
    parameters held in ``precision``: ``"double"`` (float64), ``"extended"``
    (``np.longdouble``) or ``"exact"`` (mpmath, ``EXACT_DIGITS`` digits).

    Rounding in the loss, divided by ``2h``, sets a floor on what the check
    can resolve: around 1e-10 absolute in float64 at ``h = 1e-5`` and around
    1e-13 in extended precision, while some GRU entries have gradients near
    1e-10. With ``escalate`` an entry that fails is recomputed in exact
    arithmetic (same ``h``, same formula) and judged by that result; the
    number of escalated entries is reported.

    Tensors with more than ``max_entries`` elements are checked on a seeded
    random subset of that size. Returns the overall report and one report
    per parameter tensor.
    """
    dtypes = {"double": np.float64, "extended": np.longdouble, "exact": object}
    if precision not in dtypes:
        raise ValueError(f"unknown precision {precision!r}")
    model.zero_grad(set_to_none=True)
    with torch.enable_grad():
        loss = surrogate(model, trajectories, advantages)
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite surrogate")
        if loss.requires_grad:
            loss.backward()
    grads = {
        name: np.zeros(p.numel()) if p.grad is None else p.grad.detach().numpy().reshape(-1).copy()
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    points = [decision_points(t.instance, t.actions) for t in trajectories]
    tables: dict = {}

    def difference(kind: str, name: str, i: int) -> float:
        if kind not in tables:
            tables[kind] = parameter_arrays(model, dtypes[kind])
        P = tables[kind]
        flat = P[name].reshape(-1)
        step = mpmath.mpf(h) if kind == "exact" else dtypes[kind](h)
        orig = flat[i]
        values = []
        with mpmath.workdps(EXACT_DIGITS):
            for sign in (1, -1):
                flat[i] = orig + sign * step
                out = reference_surrogate(P, model.cfg, trajectories, advantages, points)
                if not math.isfinite(float(out)):
                    raise FloatingPointError("non-finite surrogate")
                values.append(out)
            flat[i] = orig
            return float((values[0] - values[1]) / (2 * step))

    rng = np.random.default_rng(seed)
    reports = []
    for name, p in model.named_parameters():
        size = p.numel()
        idx = np.arange(size) if size <= max_entries else np.sort(rng.choice(size, max_entries, replace=False))
        rep = FDCheckReport(name, 0.0, [], len(idx))
        for i in idx:
            err = relative_error(float(grads[name][i]), difference(precision, name, i))
            if err >= tol and escalate and precision != "exact":
                rep.escalated += 1
                err = relative_error(float(grads[name][i]), difference("exact", name, i))
            rep.max_rel_error = max(rep.max_rel_error, err)
            if err >= tol:
                rep.failing.append(int(i))
        reports.append(rep)
    overall = FDCheckReport(
        "all",
        max((r.max_rel_error for r in reports), default=0.0),
        [(r.name, i) for r in reports for i in r.failing],
        sum(r.checked for r in reports),
        sum(r.escalated for r in reports),
    )
    return overall, reports


# ---------------------------------------------------------------------------
# exhaustive rollout explorer
# ---------------------------------------------------------------------------


class ExplorationBudgetError(RuntimeError):
    pass


@dataclass
class ExploreReport:
    leaves: int
    feasible_leaves: int
    dead_ends: list  # action prefixes that reached a non-terminal state with no allowed action
    min_cost: float
    best_actions: tuple
    nodes: int

    @property
    def all_feasible(self) -> bool:
        return self.feasible_leaves == self.leaves and not self.dead_ends


def explore_all_rollouts(inst: Instance, budget: int = 2_000_000) -> ExploreReport:
    """Depth-first walk over every allowed action sequence of the reference env."""
    if inst.n_customers > 6 or inst.n_depots > 2:
        raise ValueError("explore_all_rollouts is meant for |J| <= 6 and |I| <= 2")
    leaves = feasible = nodes = 0
    dead: list = []
    best = (math.inf, ())

    def visit(state: mdp.EnvState):
        nonlocal leaves, feasible, nodes, best
        nodes += 1
        if nodes > budget:
            raise ExplorationBudgetError(f"explored more than {budget} states")
        if mdp.is_terminal(state, inst):
            leaves += 1
            sol = mdp.extract_solution(state, inst)
            if check_feasible(inst, sol).ok:
                feasible += 1
            cost = objective(inst, sol).total
            if (cost, state.partial) < best:
                best = (cost, state.partial)
            return
        try:
            allowed = mdp.mask(state, inst)
        except mdp.DeadEndError:
            dead.append(state.partial)
            return
        for a in np.flatnonzero(allowed):
            visit(mdp.step(state, int(a), inst))

    visit(mdp.reset(inst))
    return ExploreReport(leaves, feasible, dead, best[0], best[1], nodes)


# ---------------------------------------------------------------------------
# straight-line forward oracle
# ---------------------------------------------------------------------------
#
# Parameters travel as a plain dict of numpy arrays so the same code runs in
# float64 (to pin the production forward pass), in the platform's extended
# precision, or on object arrays of mpmath numbers (to push finite-difference
# rounding far below the check tolerance).

EXACT_DIGITS = 40
_MP = {name: np.frompyfunc(getattr(mpmath, name), 1, 1) for name in ("exp", "tanh", "sqrt", "log")}


def _op(name, x):
    x = np.asarray(x)
    return _MP[name](x) if x.dtype == object else getattr(np, name)(x)


def _const(value, dtype):
    return mpmath.mpf(value) if dtype == object else dtype.type(value)


def parameter_arrays(model: AttentionPolicy, dtype=np.float64) -> dict:
    """Named parameters as numpy arrays; ``dtype=object`` gives mpmath numbers."""
    out = {}
    for k, v in model.state_dict().items():
        a = v.detach().numpy()
        out[k] = np.vectorize(mpmath.mpf, otypes=[object])(a) if dtype == object else a.astype(dtype)
    return out


def _linear(x, W, b=None):
    y = x @ W.T
    return y if b is None else y + b


def _normalize(x, weight, bias, mode, eps=1e-5):
    axis = -1 if mode == "layer" else 0
    mean = x.mean(axis=axis, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=axis, keepdims=True)
    return (x - mean) / _op("sqrt", var + _const(eps, x.dtype)) * weight + bias


def _softmax(x):
    e = _op("exp", x - x.max())
    return e / e.sum()


def reference_encode(P: dict, cfg, inst: Instance) -> tuple[np.ndarray, np.ndarray]:
    """Node embeddings ``[N, d]`` and graph embedding ``[d]``, one head at a time."""
    dtype = P["W_q.weight"].dtype
    M, d = cfg.n_heads, cfg.embed_dim
    dk = d // M
    scale = _op("sqrt", _const(dk, dtype))
    f = features(inst)
    h = np.vstack([
        _linear(f.depot_rows.astype(dtype), P["depot_embed.weight"], P["depot_embed.bias"]),
        _linear(f.customer_rows.astype(dtype), P["customer_embed.weight"], P["customer_embed.bias"]),
    ])
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        Q = _linear(h, P[pre + "mha.W_query.weight"])
        K = _linear(h, P[pre + "mha.W_key.weight"])
        V = _linear(h, P[pre + "mha.W_val.weight"])
        heads = np.zeros_like(h)
        for m in range(M):
            sl = slice(m * dk, (m + 1) * dk)
            for i in range(len(h)):
                heads[i, sl] = _softmax(K[:, sl] @ Q[i, sl] / scale) @ V[:, sl]
        h = _normalize(h + _linear(heads, P[pre + "mha.W_out.weight"]), P[pre + "norm1.weight"], P[pre + "norm1.bias"], cfg.norm)
        ff = np.maximum(_linear(h, P[pre + "ff.0.weight"], P[pre + "ff.0.bias"]), 0)
        ff = _linear(ff, P[pre + "ff.2.weight"], P[pre + "ff.2.bias"])
        h = _normalize(h + ff, P[pre + "norm2.weight"], P[pre + "norm2.bias"], cfg.norm)
    return h, h.mean(axis=0)


def _sigmoid(x):
    return 1 / (1 + _op("exp", -x))


def _gru_cell(P, x, h):
    d = len(h)
    gi = P["gru.weight_ih"] @ x + P["gru.bias_ih"]
    gh = P["gru.weight_hh"] @ h + P["gru.bias_hh"]
    r = _sigmoid(gi[:d] + gh[:d])
    z = _sigmoid(gi[d : 2 * d] + gh[d : 2 * d])
    n = _op("tanh", gi[2 * d :] + r * gh[2 * d :])
    return (1 - z) * n + z * h


@dataclass(frozen=True)
class DecisionPoint:
    """What the decoder sees before one action: previous node, D_t / q, I, mask."""

    last: int | None
    capacity: float
    indicator: int
    allowed: np.ndarray


def decision_points(inst: Instance, actions: Sequence[int]) -> list[DecisionPoint]:
    """Replay ``actions`` in the reference env and record every decoder input."""
    state = mdp.reset(inst)
    out = []
    for a in actions:
        out.append(DecisionPoint(
            state.last_node, state.vehicle_capacity / inst.vehicle_capacity, state.indicator, mdp.mask(state, inst)
        ))
        state = mdp.step(state, int(a), inst)
    return out


def reference_step_probabilities(P: dict, cfg, inst: Instance, points: Sequence[DecisionPoint]) -> np.ndarray:
    """``[len(points), N]`` action distributions; masked nodes get probability 0."""
    dtype = P["W_q.weight"].dtype
    M, d, C = cfg.n_heads, cfg.embed_dim, _const(cfg.clip, dtype)
    dk = d // M
    h, graph = reference_encode(P, cfg, inst)
    K = _linear(h, P["project_key.weight"])
    V = _linear(h, P["project_val.weight"])
    L = _linear(h, P["project_logit_key.weight"])
    hidden = np.zeros(d, dtype=dtype)
    out = np.zeros((len(points), len(h)), dtype=dtype)
    for t, pt in enumerate(points):
        if pt.last is None:
            h_last, cap = P["placeholder_node"], P["placeholder_capacity"]
        else:
            h_last, cap = h[pt.last], np.array([_const(pt.capacity, dtype)], dtype=dtype)
        query = P["W_q.weight"] @ np.concatenate([graph, h_last, cap])
        if cfg.use_gru and pt.indicator == 1:
            hidden = _gru_cell(P, query, hidden)
            query = hidden
        allowed = np.flatnonzero(pt.allowed)
        glimpse = np.zeros(d, dtype=dtype)
        for m in range(M):
            sl = slice(m * dk, (m + 1) * dk)
            u = K[allowed, sl] @ query[sl] / _op("sqrt", _const(dk, dtype))
            glimpse[sl] = _softmax(u) @ V[allowed, sl]
        glimpse = P["project_out.weight"] @ glimpse
        logits = C * _op("tanh", L[allowed] @ glimpse / _op("sqrt", _const(d, dtype)))
        out[t, allowed] = _softmax(logits)
    return out


def reference_probabilities(model: AttentionPolicy, inst: Instance, actions: Sequence[int]) -> np.ndarray:
    """Float64 action distributions before every step of ``actions``."""
    return reference_step_probabilities(parameter_arrays(model), model.cfg, inst, decision_points(inst, actions))


def reference_surrogate(P: dict, cfg, trajectories: Sequence[Trajectory], advantages: Sequence[float], points=None):
    """``sum_i advantage_i * log p(trajectory_i)`` over policy-chosen steps."""
    dtype = P["W_q.weight"].dtype
    total = _const(0, dtype)
    for k, (traj, adv) in enumerate(zip(trajectories, advantages)):
        if adv == 0:
            continue
        pts = points[k] if points is not None else decision_points(traj.instance, traj.actions)
        probs = reference_step_probabilities(P, cfg, traj.instance, pts)
        lp = _const(0, dtype)
        for t, (a, forced) in enumerate(zip(traj.actions, traj.forced)):
            if not forced:
                lp += _op("log", probs[t, a])
        total += _const(adv, dtype) * lp
    return total


# ---------------------------------------------------------------------------
# second enumeration oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnumerationResult:
    solution: Solution
    cost: float
    candidates: int


def enumerate_split(inst: Instance, max_customers: int = 7) -> EnumerationResult:
    """Exact optimum by permutation -> consecutive split -> depot per route."""
    n, m = inst.n_customers, inst.n_depots
    if n > max_customers:
        raise ValueError(f"enumerate_split refuses more than {max_customers} customers")
    dist = inst.dist
    closed = inst.variant is Variant.CLOSED
    dem = inst.demand.tolist()
    q = inst.vehicle_capacity
    cap = inst.depot_capacity.tolist()

    seg_cost: dict = {}

    def route(seg, i):
        key = (seg, i)
        if key not in seg_cost:
            c = dist[i, m + seg[0]]
            for a, b in zip(seg, seg[1:]):
                c += dist[m + a, m + b]
            if closed:
                c += dist[m + seg[-1], i]
            seg_cost[key] = c
        return seg_cost[key]

    best = (math.inf, ())
    count = 0
    for perm in permutations(range(n)):
        for cuts in product((False, True), repeat=n - 1):
            segs, cur = [], [perm[0]]
            for c, cut in zip(perm[1:], cuts):
                if cut:
                    segs.append(tuple(cur))
                    cur = []
                cur.append(c)
            segs.append(tuple(cur))
            # route order is irrelevant: keep each multiset of routes once
            if any(a[0] > b[0] for a, b in zip(segs, segs[1:])):
                continue
            loads = [sum(dem[c] for c in s) for s in segs]
            if max(loads) > q:
                continue
            for depots in product(range(m), repeat=len(segs)):
                count += 1
                used = [0.0] * m
                for i, ld in zip(depots, loads):
                    used[i] += ld
                if any(u > c for u, c in zip(used, cap)):
                    continue
                opened = set(depots)
                total = sum(inst.opening_cost[i] for i in opened) + inst.vehicle_fixed_cost * len(segs)
                total += sum(route(s, i) for s, i in zip(segs, depots))
                key = tuple(sorted(zip(depots, segs)))
                if (total, key) < best:
                    best = (total, key)
    if not best[1]:
        raise RuntimeError("no feasible solution found")
    sol = Solution(tuple(Subtour(i, s) for i, s in best[1]), inst.variant)
    return EnumerationResult(sol, objective(inst, sol).total, count)


# ---------------------------------------------------------------------------
# frozen small-instance corpus
# ---------------------------------------------------------------------------

CORPUS_SEED = 20_240_601
CORPUS_SIZE = 200
CORPUS_GENERATION = GenerationConfig(vehicle_capacity=15.0)
GOLDEN_FIELDS = ["instance_id", "n_customers", "n_depots", "variant", "oracle_cost"]


def corpus_instance(k: int) -> Instance:
    """Instance ``k``: |J| cycles 3..6, |I| alternates 1/2, variant flips every 8."""
    n = 3 + k % 4
    m = 1 + (k // 4) % 2
    variant = Variant.OPEN if (k // 8) % 2 else Variant.CLOSED
    inst = generate(n, m, derive_seed(CORPUS_SEED, k), variant, CORPUS_GENERATION)
    return replace(inst, id=f"corpus-{k:03d}")


def build_corpus(out_dir, size: int = CORPUS_SIZE) -> list[dict]:
    """Write ``corpus/*.json`` and ``corpus_golden.csv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "corpus").mkdir(parents=True, exist_ok=True)
    rows = []
    for k in range(size):
        inst = corpus_instance(k)
        save_instance(inst, out / "corpus" / f"{inst.id}.json")
        res = solve_exact(inst)
        rows.append({
            "instance_id": inst.id,
            "n_customers": inst.n_customers,
            "n_depots": inst.n_depots,
            "variant": inst.variant.value,
            "oracle_cost": repr(res.best_cost.total),
        })
    with open(out / "corpus_golden.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=GOLDEN_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def load_corpus(data_dir) -> list[tuple[Instance, float]]:
    """Corpus instances with their golden oracle costs, in id order."""
    data = Path(data_dir)
    with open(data / "corpus_golden.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    return [(load_instance(data / "corpus" / f"{r['instance_id']}.json"), float(r["oracle_cost"])) for r in rows]


# ---------------------------------------------------------------------------
# benchmark-layout stand-ins
# ---------------------------------------------------------------------------

BENCHMARK_NAMES = (
    "20-5-1a", "20-5-1b", "20-5-2a", "20-5-2b",
    "50-5-1", "50-5-1b", "50-5-2", "50-5-2b", "50-5-2bis", "50-5-2bbis", "50-5-3", "50-5-3b",
    "100-5-1", "100-5-1b", "100-5-2", "100-5-2b", "100-5-3", "100-5-3b",
    "100-10-1", "100-10-1b", "100-10-2", "100-10-2b", "100-10-3", "100-10-3b",
    "200-10-1", "200-10-1b", "200-10-2", "200-10-2b", "200-10-3", "200-10-3b",
)
BENCHMARK_SEED = 20_040_000


def benchmark_standin(name: str, seed: int = BENCHMARK_SEED) -> Instance:
    """A synthetic instance shaped like the Prodhon set entry ``name``.

    Sizes come from the name. The value ranges follow the public set:
    integer coordinates in [0, 50], demands 11..20, vehicle capacity 70
    (150 for the ``b`` series), route cost 1000 and opening costs of a few
    thousand. Depot capacities leave slack of one largest demand per depot.
    """
    n, m = benchmark_scale(name)
    rng = np.random.default_rng(derive_seed(seed, n, m, sum(map(ord, name))))
    tag = name.split("-")[2]
    q = 150.0 if tag.endswith("b") or tag.endswith("bbis") else 70.0
    demand = rng.integers(11, 21, n).astype(float)
    total = demand.sum()
    cap = np.ceil(rng.uniform(0.5, 1.0, m) * total * 2.0 / m)
    deficit = total + (m - 1) * demand.max() - cap.sum()
    if deficit > 0:
        cap += math.ceil(deficit / m)
    return Instance(
        depot_xy=rng.integers(0, 51, (m, 2)).astype(float),
        depot_capacity=cap,
        opening_cost=rng.integers(5_000, 15_001, m).astype(float),
        customer_xy=rng.integers(0, 51, (n, 2)).astype(float),
        demand=demand,
        vehicle_capacity=q,
        vehicle_fixed_cost=1000.0,
        id=name,
        distance_multiplier=100.0,
    )


def build_benchmark_standins(out_dir, names: Sequence[str] = BENCHMARK_NAMES) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in names:
        path = out / f"coord{name}.dat"
        write_benchmark(benchmark_standin(name), path)
        paths.append(path)
    return paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python3 -m clrpkit.testkit")
    sub = parser.add_subparsers(dest="command", required=True)
    corpus = sub.add_parser("corpus", help="regenerate the frozen small-instance corpus")
    corpus.add_argument("out_dir")
    corpus.add_argument("--size", type=int, default=CORPUS_SIZE)
    bench = sub.add_parser("benchmarks", help="write the benchmark-layout stand-in files")
    bench.add_argument("out_dir")
    args = parser.parse_args(argv)
    if args.command == "corpus":
        rows = build_corpus(args.out_dir, args.size)
        print(f"wrote {len(rows)} instances to {args.out_dir}")
    else:
        paths = build_benchmark_standins(args.out_dir)
        print(f"wrote {len(paths)} benchmark files to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
