import json

import numpy as np
import pytest
import torch

from clrpkit.evaluate import (
    ResultRecord, Solution, SolutionIndexError, check_feasible, format_gap, format_solution, gap,
    load_reference_table, objective, parse_solution, read_records_csv, route_cost, write_records,
)
from clrpkit.instance import Instance, generate
from clrpkit.oracle import solve_exact
from clrpkit.policy import TINY_CONFIG, AttentionPolicy, run_batch

from conftest import hand_instance


def test_hand_instance_closed_and_open():
    sol = Solution([(0, (0,))], "closed")
    cost = objective(hand_instance(), sol)
    assert (cost.opening_cost, cost.routing_cost, cost.vehicle_cost, cost.total) == (1.0, 2.0, 0.5, 3.5)
    open_cost = objective(hand_instance("open"), Solution([(0, (0,))], "open"))
    assert open_cost.total == 2.5


def test_objective_matches_oracle_on_its_own_solution():
    inst = generate(5, 2, 9)
    res = solve_exact(inst)
    assert objective(inst, res.best_solution).total == res.best_cost.total


def test_duplicate_customer_violates_assignment():
    inst = generate(4, 2, 1)
    s = Solution([(0, (0, 3)), (1, (1, 2, 3))])
    assert 2 in check_feasible(inst, s).constraints()


def test_vehicle_overflow_violates_capacity():
    inst = Instance([[0, 0]], [100.0], [1.0], [[0, 1], [1, 0]], [21.0, 20.0], 40.0, 0.0)
    verdict = check_feasible(inst, Solution([(0, (0, 1))]))
    assert not verdict.ok
    assert 7 in verdict.constraints()


def test_depot_overflow_and_missing_customer():
    inst = Instance([[0, 0], [1, 1]], [3.0, 10.0], [1.0, 1.0], [[0, 1], [1, 0], [1, 1]], [2.0, 2.0, 2.0], 5.0, 0.0)
    verdict = check_feasible(inst, Solution([(0, (0,)), (0, (1,))]))
    assert 8 in verdict.constraints()
    assert 2 in verdict.constraints()  # customer 2 never visited
    assert len(verdict.violations) >= 2  # collected, not fail-fast


def test_out_of_range_index():
    bad = Solution([(0, (4,))])
    with pytest.raises(SolutionIndexError):
        objective(hand_instance(), bad)
    assert not check_feasible(hand_instance(), bad).ok


def test_check_feasible_is_pure():
    inst = generate(6, 2, 3)
    s = Solution([(0, (0, 1, 2)), (1, (3, 4, 5, 5))])
    assert check_feasible(inst, s) == check_feasible(inst, s)


@pytest.mark.parametrize("seed", range(10))
def test_objective_invariances(seed):
    inst = generate(8, 3, seed)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(8)
    s = Solution([(0, tuple(perm[:3])), (1, tuple(perm[3:6])), (2, tuple(perm[6:]))])
    base = objective(inst, s).total
    reversed_one = Solution([(0, tuple(perm[:3][::-1]))] + list(s.subtours[1:]))
    assert objective(inst, reversed_one).total == pytest.approx(base, abs=1e-12)
    shuffled = Solution(list(s.subtours)[::-1])
    assert objective(inst, shuffled).total == pytest.approx(base, abs=1e-12)
    open_cost = objective(inst.with_variant("open"), Solution(s.subtours, "open")).total
    assert open_cost <= base


def test_fixed_cost_once_per_nonempty_subtour():
    inst = generate(6, 2, 4)
    s = Solution([(0, (0, 1)), (0, (2, 3)), (1, (4, 5))])
    assert objective(inst, s).vehicle_cost == pytest.approx(3 * inst.vehicle_fixed_cost)


def test_route_cost_open_skips_return():
    inst = hand_instance()
    assert route_cost(inst, 0, (0,)) == 2.0
    assert route_cost(inst, 0, (0,), variant="open") == 1.0


def test_rollout_solutions_feasible_on_many_instances():
    model = AttentionPolicy(TINY_CONFIG, seed=1)
    for variant in ("closed", "open"):
        instances = [generate(10, 5, 500 + k, variant) for k in range(500)]
        with torch.no_grad():
            batch = run_batch(model, instances, 1, "greedy")
        assert all(check_feasible(instances[b], batch.solution(b, 0)).ok for b in range(len(instances)))


def test_gap_values_from_the_benchmark_table():
    assert format_gap(gap(56045, 54793)) == "2.28%"
    assert format_gap(gap(41709, 39104)) == "6.66%"
    assert format_gap(gap(123.0, 123.0)) == "0.00%"
    with pytest.raises(ValueError):
        gap(1.0, 0.0)


def test_solution_text_round_trip():
    s = Solution([(2, (4, 0, 1)), (0, (3,))], "open")
    back, iid = parse_solution(format_solution(s, "abc"))
    assert back == s and iid == "abc"


def test_records_round_trip(tmp_path):
    inst = hand_instance()
    rec = ResultRecord.from_cost(inst.id, "oracle", objective(inst, Solution([(0, (0,))])), 0.25, 3.0)
    write_records([rec], tmp_path / "r.csv", tmp_path / "r.jsonl")
    back = read_records_csv(tmp_path / "r.csv")[0]
    assert back.total == 3.5 and back.gap_vs_reference == pytest.approx(100 * 0.5 / 3.0)
    assert json.loads((tmp_path / "r.jsonl").read_text())["method"] == "oracle"


def test_reference_table_formats(tmp_path):
    (tmp_path / "a.csv").write_text("instance_id,bks,note\nx,10,y\n# skipped\n")
    (tmp_path / "b.csv").write_text("x,12\n")
    assert load_reference_table(tmp_path / "a.csv") == {"x": 10.0}
    assert load_reference_table(tmp_path / "b.csv") == {"x": 12.0}
