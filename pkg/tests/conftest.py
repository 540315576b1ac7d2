from pathlib import Path

import numpy as np
import pytest
import torch

from clrpkit.instance import Instance
from clrpkit.policy import TINY_CONFIG, AttentionPolicy
from clrpkit.testkit import load_corpus
from clrpkit.train import SMOKE_CONFIG, SMOKE_POLICY, evaluate_greedy, heldout_instances, train

DATA = Path(__file__).parent / "data"


def hand_instance(variant="closed", **overrides) -> Instance:
    """One depot at (0,0) with O=1, Q=10; one customer at (0,1) with D=1; q=5, F=0.5."""
    fields = dict(
        depot_xy=[[0.0, 0.0]],
        depot_capacity=[10.0],
        opening_cost=[1.0],
        customer_xy=[[0.0, 1.0]],
        demand=[1.0],
        vehicle_capacity=5.0,
        vehicle_fixed_cost=0.5,
        variant=variant,
        id="hand-1-1",
    )
    fields.update(overrides)
    return Instance(**fields)


def two_customer_instance(variant="closed", q=1.0) -> Instance:
    """Depot (0,0) O=1 Q=10; customers (1,0) and (0,1) with D=1; F=0.5."""
    return Instance(
        depot_xy=[[0.0, 0.0]],
        depot_capacity=[10.0],
        opening_cost=[1.0],
        customer_xy=[[1.0, 0.0], [0.0, 1.0]],
        demand=[1.0, 1.0],
        vehicle_capacity=q,
        vehicle_fixed_cost=0.5,
        variant=variant,
        id="hand-1-2",
    )


@pytest.fixture(scope="session")
def corpus():
    return load_corpus(DATA)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return AttentionPolicy(TINY_CONFIG, seed=3)


class SmokeRun:
    def __init__(self):
        heldout = heldout_instances(SMOKE_CONFIG)
        untrained = AttentionPolicy(SMOKE_POLICY, seed=SMOKE_CONFIG.seed)
        self.untrained_cost = evaluate_greedy(untrained, heldout)
        self.model, self.history = train(SMOKE_CONFIG, SMOKE_POLICY)
        self.model.eval()
        self.trained_cost = evaluate_greedy(self.model, heldout)
        self.improvement = 1.0 - self.trained_cost / self.untrained_cost


@pytest.fixture(scope="session")
def smoke_run():
    """The smoke-preset training run, shared by every test that needs a trained policy."""
    return SmokeRun()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
