import csv
import math

import numpy as np
import pytest

from clrpkit.instance import benchmark_scale, generate
from clrpkit.oracle import solve_exact
from clrpkit.policy import rollout
from clrpkit.testkit import (
    BENCHMARK_NAMES, ExplorationBudgetError, benchmark_standin, build_corpus, enumerate_split,
    explore_all_rollouts, fd_gradcheck,
)

from conftest import DATA, hand_instance, two_customer_instance


@pytest.mark.parametrize("variant,route_cost", [("closed", 2 + math.sqrt(2)), ("open", 1 + math.sqrt(2))])
def test_explorer_leaf_count_by_hand(variant, route_cost):
    # two visiting orders, each either as one shared route or as two separate routes
    rep = explore_all_rollouts(two_customer_instance(variant, q=10.0))
    assert rep.leaves == 4 and rep.all_feasible
    assert rep.min_cost == pytest.approx(1.0 + 0.5 + route_cost)


def test_explorer_tight_capacity_and_single_customer():
    rep = explore_all_rollouts(two_customer_instance(q=1.0))
    assert rep.leaves == 2 and rep.min_cost == pytest.approx(6.0)
    assert explore_all_rollouts(hand_instance()).leaves == 1


@pytest.mark.parametrize("k", range(12))
def test_explorer_minimum_is_oracle(k):
    inst = generate(2 + k % 3, 1 + k % 2, 900 + k, "open" if k % 2 else "closed")
    rep = explore_all_rollouts(inst)
    assert rep.all_feasible
    assert rep.min_cost == pytest.approx(solve_exact(inst).best_cost.total, abs=1e-9)


def test_explorer_limits():
    with pytest.raises(ValueError):
        explore_all_rollouts(generate(7, 2, 0))
    with pytest.raises(ExplorationBudgetError):
        explore_all_rollouts(generate(5, 2, 0), budget=10)


def test_enumerator_guard():
    with pytest.raises(ValueError):
        enumerate_split(generate(9, 2, 0))


def _trajectories(model, n=2):
    return [rollout(generate(4, 2, 70 + k), model, mode="sample", seed=k) for k in range(n)]


def test_fd_zero_advantage_gives_zero_gradients(tiny_model):
    overall, per = fd_gradcheck(tiny_model, _trajectories(tiny_model), [0.0, 0.0], max_entries=2, precision="double")
    assert overall.ok and overall.max_rel_error == 0.0
    assert all(r.checked > 0 for r in per)


def test_fd_truncation_error_is_second_order(tiny_model):
    # halving h divides the central-difference error by about four on smooth tensors
    trajs = _trajectories(tiny_model)
    per_h = []
    for h in (0.02, 0.01):
        _, per = fd_gradcheck(tiny_model, trajs, [1.0, -1.0], h=h, tol=math.inf, max_entries=1,
                              seed=2, escalate=False)
        per_h.append({r.name: r.max_rel_error for r in per})
    ratios = [per_h[0][k] / per_h[1][k] for k in per_h[0] if per_h[1][k] > 1e-9]
    assert 3.5 < float(np.median(ratios)) < 4.5


def test_corpus_regeneration_matches_golden(tmp_path):
    rows = build_corpus(tmp_path, size=24)
    with open(DATA / "corpus_golden.csv", newline="") as f:
        golden = list(csv.DictReader(f))[:24]
    assert [{k: str(v) for k, v in r.items()} for r in rows] == golden
    for row in rows:
        name = f"{row['instance_id']}.json"
        assert (tmp_path / "corpus" / name).read_bytes() == (DATA / "corpus" / name).read_bytes()


def test_benchmark_standins_match_names():
    assert len(BENCHMARK_NAMES) == 30
    for name in BENCHMARK_NAMES[::7]:
        inst = benchmark_standin(name)
        assert (inst.n_customers, inst.n_depots) == benchmark_scale(name)
        assert inst.vehicle_capacity == (150.0 if name.endswith("b") or name.endswith("bbis") else 70.0)
        assert inst.demand.sum() <= inst.depot_capacity.sum()
