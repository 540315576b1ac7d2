import numpy as np
import pytest
import torch

from clrpkit.evaluate import check_feasible, objective
from clrpkit.infer import (
    AugmentConfig, BeamConfig, augmentation_angles, augmentation_transforms, solve_augmented, solve_greedy, solve_sbs,
)
from clrpkit.instance import generate, transform
from clrpkit.oracle import solve_exact
from clrpkit.policy import run_batch


def test_angles():
    assert augmentation_angles(4) == [0.0, 90.0, 180.0, 270.0]
    assert augmentation_angles(1) == [0.0]
    with pytest.raises(ValueError):
        augmentation_angles(0)
    assert len(augmentation_transforms(AugmentConfig(g=4, include_flips=True))) == 8


def test_degenerate_augmentation_is_greedy(tiny_model):
    for k in range(10):
        inst = generate(10, 5, k)
        aug = solve_augmented(inst, tiny_model, AugmentConfig(g=1, include_flips=False, trajectories=1))
        greedy = solve_greedy(inst, tiny_model)
        assert aug.solution == greedy.solution and aug.cost == greedy.cost


@pytest.mark.parametrize("variant", ["closed", "open"])
def test_augmentation_never_worse_than_greedy(tiny_model, variant):
    for k in range(25):
        inst = generate(10, 5, 100 + k, variant)
        aug = solve_augmented(inst, tiny_model, AugmentConfig(g=4, include_flips=True, trajectories=3))
        assert check_feasible(inst, aug.solution).ok
        assert aug.cost <= solve_greedy(inst, tiny_model).cost + 1e-12


def test_solutions_transfer_between_copies(tiny_model):
    inst = generate(10, 5, 7)
    for angle, flip in augmentation_transforms(AugmentConfig(g=4)) + [(33.0, False), (201.5, True)]:
        copy = transform(inst, angle, flip)
        with torch.no_grad():
            sol = run_batch(tiny_model, [copy], 1, "greedy").solution(0, 0)
        assert abs(objective(copy, sol).total - objective(inst, sol).total) < 1e-9


def test_sampled_augmentation_reproducible(tiny_model):
    inst = generate(10, 5, 2)
    cfg = AugmentConfig(g=2, trajectories=4, sample=True, seed=3)
    assert solve_augmented(inst, tiny_model, cfg) == solve_augmented(inst, tiny_model, cfg)


def test_unit_beam_is_greedy(tiny_model):
    for k in range(10):
        inst = generate(8, 3, 200 + k, "open" if k % 2 else "closed")
        assert solve_sbs(inst, tiny_model, BeamConfig(1, 1)).cost == solve_greedy(inst, tiny_model).cost


@pytest.mark.parametrize("beam,expand", [(1, 2), (2, 1), (2, 3), (4, 4)])
def test_beam_never_worse_than_greedy(tiny_model, beam, expand):
    for k in range(10):
        inst = generate(10, 5, 300 + k, "open" if k % 2 else "closed")
        res = solve_sbs(inst, tiny_model, BeamConfig(beam, expand))
        assert check_feasible(inst, res.solution).ok
        assert res.cost <= solve_greedy(inst, tiny_model).cost + 1e-12
        assert res.cost == pytest.approx(objective(inst, res.solution).total, abs=1e-12)


def test_beam_deterministic(tiny_model):
    inst = generate(10, 5, 5)
    assert solve_sbs(inst, tiny_model) == solve_sbs(inst, tiny_model)


def test_unbounded_beam_not_worse_than_unit_beam(tiny_model):
    # a beam wider than every frontier keeps the unit beam's states at each depth
    for k in range(8):
        inst = generate(3, 2, 400 + k)
        wide = solve_sbs(inst, tiny_model, BeamConfig(10_000, 2))
        narrow = solve_sbs(inst, tiny_model, BeamConfig(1, 2))
        assert wide.cost <= narrow.cost + 1e-12


def test_decoders_above_oracle(tiny_model):
    for k in range(10):
        inst = generate(4 + k % 3, 2, 500 + k, "open" if k % 2 else "closed")
        optimum = solve_exact(inst).best_cost.total
        for res in (solve_greedy(inst, tiny_model), solve_augmented(inst, tiny_model), solve_sbs(inst, tiny_model)):
            assert res.cost >= optimum - 1e-9


def test_beam_improves_trained_policy_on_average(smoke_run):
    instances = [generate(10, 5, 20_000 + k) for k in range(100)]
    greedy = np.mean([solve_greedy(i, smoke_run.model).cost for i in instances])
    sbs = np.mean([solve_sbs(i, smoke_run.model).cost for i in instances])
    assert sbs < greedy
