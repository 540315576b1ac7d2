import json
import struct

import numpy as np
import pytest
import torch

from clrpkit.instance import generate
from clrpkit.infer import solve_greedy
from clrpkit.policy import TINY_CONFIG, AttentionPolicy
from clrpkit.train import (
    MAGIC, CheckpointCorruptError, CheckpointVersionError, TrainConfig, checkpoint_bytes, lr_at, make_optimizer,
    parse_checkpoint, load_checkpoint, save_checkpoint, shared_baseline, smoke_config, train, train_epoch,
)

TINY_TRAIN = TrainConfig(epochs=1, instances_per_epoch=16, batch_size=8, n_customers=5, n_depots=2,
                         lr_initial=1e-3, lr_late=1e-3, optimizer="adam", seed=4)


def _params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def test_shared_baseline_hand_values():
    b, adv = shared_baseline([-3.0, -5.0])
    assert b == -4.0 and adv.tolist() == [1.0, -1.0]
    assert shared_baseline([-2.0] * 5)[1].tolist() == [0.0] * 5
    with pytest.raises(ValueError):
        shared_baseline([])


def test_advantages_sum_to_zero(rng):
    for _ in range(200):
        rewards = -rng.uniform(1, 50, rng.integers(1, 101))
        assert abs(shared_baseline(rewards)[1].sum()) < 1e-12


def test_learning_rate_switch():
    cfg = TrainConfig()
    assert lr_at(cfg, 0) == lr_at(cfg, 699) == 1e-4
    assert lr_at(cfg, 700) == lr_at(cfg, 999) == 1e-5


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_zero_learning_rate_keeps_parameters(optimizer):
    model = AttentionPolicy(TINY_CONFIG, seed=0)
    before = _params(model)
    cfg = TrainConfig(**{**TINY_TRAIN.to_dict(), "lr_initial": 0.0, "lr_late": 0.0, "optimizer": optimizer})
    train_epoch(model, cfg, 0)
    after = _params(model)
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_single_trajectory_gives_no_update():
    model = AttentionPolicy(TINY_CONFIG, seed=0)
    before = _params(model)
    cfg = TrainConfig(**{**TINY_TRAIN.to_dict(), "max_trajectories": 1, "optimizer": "sgd", "lr_initial": 1.0})
    _, stats = train_epoch(model, cfg, 0)
    assert stats.mean_abs_advantage == 0.0
    assert all(torch.equal(before[k], v) for k, v in _params(model).items())


def test_epoch_updates_and_centres_advantages():
    model = AttentionPolicy(TINY_CONFIG, seed=0)
    before = _params(model)
    _, stats = train_epoch(model, TINY_TRAIN, 0)
    assert stats.max_advantage_sum < 1e-12
    assert stats.mean_abs_advantage > 0 and stats.grad_norm > 0
    assert any(not torch.equal(before[k], v) for k, v in _params(model).items())


def test_training_reproducible():
    a, _ = train(TINY_TRAIN, TINY_CONFIG)
    b, _ = train(TINY_TRAIN, TINY_CONFIG)
    pa, pb = _params(a), _params(b)
    assert all(torch.equal(pa[k], pb[k]) for k in pa)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    cfg = smoke_config(seed=9)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.trajectories == 10
    assert isinstance(make_optimizer(AttentionPolicy(TINY_CONFIG), TrainConfig()), torch.optim.SGD)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    model = AttentionPolicy(TINY_CONFIG, seed=7)
    save_checkpoint(model, 12, tmp_path / "a.ckpt", {"note": "x"})
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert ck.step == 12 and ck.metadata == {"note": "x"}
    save_checkpoint(ck.model, ck.step, tmp_path / "b.ckpt", ck.metadata)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    inst = generate(10, 5, 3)
    assert solve_greedy(inst, model).cost == solve_greedy(inst, ck.model).cost


def test_checkpoint_corruption_detected():
    data = checkpoint_bytes(AttentionPolicy(TINY_CONFIG, seed=1), 3)
    for cut in (0, 5, len(data) // 2, len(data) - 1):
        with pytest.raises(CheckpointCorruptError):
            parse_checkpoint(data[:cut])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x01
    with pytest.raises(CheckpointCorruptError):
        parse_checkpoint(bytes(flipped))
    with pytest.raises(CheckpointCorruptError):
        parse_checkpoint(b"NOTACKPT" + data[8:])


def test_checkpoint_version_mismatch():
    import hashlib

    data = checkpoint_bytes(AttentionPolicy(TINY_CONFIG, seed=1), 3)
    body = bytearray(data[:-32])
    body[len(MAGIC) : len(MAGIC) + 4] = struct.pack("<I", 99)
    with pytest.raises(CheckpointVersionError):
        parse_checkpoint(bytes(body) + hashlib.sha256(bytes(body)).digest())


def test_zero_epochs_writes_initial_checkpoint(tmp_path):
    cfg = TrainConfig(**{**TINY_TRAIN.to_dict(), "epochs": 0})
    train(cfg, TINY_CONFIG, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["final.ckpt"]
    ck = load_checkpoint(tmp_path / "final.ckpt")
    assert ck.step == 0
    fresh = AttentionPolicy(TINY_CONFIG, seed=cfg.seed)
    assert all(torch.equal(v, fresh.state_dict()[k]) for k, v in ck.model.state_dict().items())


def test_resume_continues_epoch_counter(tmp_path):
    cfg = TrainConfig(**{**TINY_TRAIN.to_dict(), "checkpoint_every": 1})
    train(cfg, TINY_CONFIG, tmp_path / "run")
    assert load_checkpoint(tmp_path / "run" / "final.ckpt").step == 1
    _, history = train(cfg, TINY_CONFIG, tmp_path / "run", resume=tmp_path / "run" / "final.ckpt")
    assert [s.epoch for s in history] == [1]
    assert load_checkpoint(tmp_path / "run" / "final.ckpt").step == 2
    assert (tmp_path / "run" / "epoch_00002.ckpt").exists()
    log = [json.loads(line) for line in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()]
    assert [row["epoch"] for row in log] == [0, 1]
    assert (tmp_path / "run" / "train_log.csv").read_text().startswith("epoch,mean_cost")


def test_smoke_run_reduces_cost_and_centres_advantages(smoke_run):
    assert all(s.max_advantage_sum < 1e-12 for s in smoke_run.history)
    assert smoke_run.trained_cost < smoke_run.untrained_cost
    assert np.isfinite([s.grad_norm for s in smoke_run.history]).all()
