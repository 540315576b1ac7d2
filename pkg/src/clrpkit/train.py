"""REINFORCE with a per-instance shared baseline, the epoch loop and checkpoints.

Every instance is rolled out ``min(|J|, max_trajectories)`` times. Trajectory
``j`` samples its first depot, is then forced to visit customer ``j`` first,
and samples the rest. The mean reward of an instance's trajectories is the
baseline for all of them, so the advantages of one instance sum to zero.

Checkpoint layout (all integers little-endian)::

    b"CLRPCKPT"  uint32 format version  uint32 header length  header JSON
    raw float64 tensors in header order  sha256 of everything before it

The header is JSON with sorted keys and holds the policy config, the
training step, free-form metadata and every tensor's name and shape.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .instance import Instance, Variant, derive_seed, generate
from .policy import DTYPE, AttentionPolicy, PolicyConfig, run_batch


@dataclass(frozen=True)
class TrainConfig:
    """Training schedule and instance stream.

    Attributes:
        epochs: number of epochs to run.
        instances_per_epoch: fresh instances drawn per epoch.
        batch_size: instances per gradient step.
        max_trajectories: cap on trajectories per instance; the count used
            is ``min(n_customers, max_trajectories)``.
        lr_initial: learning rate before ``lr_switch_epoch``.
        lr_late: learning rate from ``lr_switch_epoch`` on.
        lr_switch_epoch: first epoch that uses ``lr_late``.
        seed: root of the instance stream and the sampling generators.
        n_customers: customers per training instance.
        n_depots: depots per training instance.
        variant: closed or open routes.
        optimizer: ``"sgd"`` or ``"adam"``.
        checkpoint_every: save a checkpoint every this many epochs (0: only
            the final one).
    """

    epochs: int = 10
    instances_per_epoch: int = 1000
    batch_size: int = 64
    max_trajectories: int = 100
    lr_initial: float = 1e-4
    lr_late: float = 1e-5
    lr_switch_epoch: int = 700
    seed: int = 0
    n_customers: int = 10
    n_depots: int = 5
    variant: Variant = Variant.CLOSED
    optimizer: str = "sgd"
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        for name in ("instances_per_epoch", "batch_size", "max_trajectories", "n_customers", "n_depots"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_initial < 0 or self.lr_late < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.lr_switch_epoch < 0 or self.checkpoint_every < 0:
            raise ValueError("lr_switch_epoch and checkpoint_every must be nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def trajectories(self) -> int:
        return min(self.n_customers, self.max_trajectories)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


# Desk-scale smoke run: 10x5 CLRP, 3 epochs of 200 instances, i.e. twelve
# gradient steps. Adam with a much larger step than the long-run schedule,
# since twelve SGD steps at 1e-4 barely move the weights.
SMOKE_CONFIG = TrainConfig(
    epochs=3, instances_per_epoch=200, batch_size=64, lr_initial=3e-3, lr_late=3e-3, optimizer="adam", seed=0
)
SMOKE_POLICY = PolicyConfig(embed_dim=32, n_layers=2, n_heads=4, ff_dim=64)


def shared_baseline(rewards: Sequence[float]) -> tuple[float, np.ndarray]:
    """Mean reward and the per-trajectory advantages ``R_i - mean``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("shared_baseline needs at least one reward")
    b = float(rewards.mean())
    return b, rewards - b


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr_initial if epoch < cfg.lr_switch_epoch else cfg.lr_late


def make_optimizer(model: AttentionPolicy, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr_initial)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr_initial)


def epoch_instances(cfg: TrainConfig, epoch: int, batch: int) -> list[Instance]:
    """Instances of one batch, each seeded by ``(seed, epoch, batch, index)``."""
    start = batch * cfg.batch_size
    size = min(cfg.batch_size, cfg.instances_per_epoch - start)
    return [
        generate(cfg.n_customers, cfg.n_depots, derive_seed(cfg.seed, epoch, batch, k), cfg.variant)
        for k in range(size)
    ]


@dataclass
class EpochStats:
    epoch: int
    mean_cost: float
    mean_abs_advantage: float
    grad_norm: float
    lr: float
    wall_time: float
    max_advantage_sum: float  # largest |sum of advantages| over instances and steps

    def to_dict(self) -> dict:
        return asdict(self)


def train_step(
    model: AttentionPolicy,
    optimizer: torch.optim.Optimizer,
    instances: Sequence[Instance],
    n_traj: int,
    generator: torch.Generator,
) -> tuple[float, float, float, float]:
    """One gradient step on a batch; returns (mean cost, mean |adv|, grad norm, max |sum adv|)."""
    n = instances[0].n_customers
    forced = np.tile(np.arange(n_traj) % n, (len(instances), 1))
    model.train()
    with torch.enable_grad():
        batch = run_batch(model, instances, n_traj, "sample", generator, forced)
        costs = batch.costs()
        adv = np.empty_like(costs)
        for b in range(len(instances)):
            adv[b] = shared_baseline(-costs[b])[1]
        loss = -(torch.from_numpy(adv) * batch.log_prob).mean()
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
    sq = 0.0
    for p in model.parameters():
        if p.grad is not None:
            if not torch.isfinite(p.grad).all():
                raise FloatingPointError("non-finite gradient")
            sq += float((p.grad * p.grad).sum())
    optimizer.step()
    return float(costs.mean()), float(np.abs(adv).mean()), math.sqrt(sq), float(np.abs(adv.sum(axis=1)).max())


def train_epoch(
    model: AttentionPolicy, cfg: TrainConfig, epoch: int, optimizer: torch.optim.Optimizer | None = None
) -> tuple[AttentionPolicy, EpochStats]:
    """Run one epoch of the instance stream; the model is updated in place."""
    start = time.perf_counter()
    optimizer = make_optimizer(model, cfg) if optimizer is None else optimizer
    lr = lr_at(cfg, epoch)
    for group in optimizer.param_groups:
        group["lr"] = lr
    n_batches = math.ceil(cfg.instances_per_epoch / cfg.batch_size)
    costs, advs, norms, sums, weights = [], [], [], [], []
    for b in range(n_batches):
        instances = epoch_instances(cfg, epoch, b)
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, epoch, b, 1 << 20))
        c, a, g, s = train_step(model, optimizer, instances, cfg.trajectories, gen)
        costs.append(c)
        advs.append(a)
        norms.append(g)
        sums.append(s)
        weights.append(len(instances))
    w = np.asarray(weights, dtype=float)
    stats = EpochStats(
        epoch=epoch,
        mean_cost=float(np.average(costs, weights=w)),
        mean_abs_advantage=float(np.average(advs, weights=w)),
        grad_norm=float(np.mean(norms)),
        lr=lr,
        wall_time=time.perf_counter() - start,
        max_advantage_sum=float(max(sums)),
    )
    return model, stats


def evaluate_greedy(model: AttentionPolicy, instances: Sequence[Instance], chunk: int = 100) -> float:
    """Mean greedy cost over ``instances``."""
    model.eval()
    total = 0.0
    with torch.no_grad():
        for k in range(0, len(instances), chunk):
            total += float(run_batch(model, instances[k : k + chunk], 1, "greedy").costs().sum())
    return total / len(instances)


def heldout_instances(cfg: TrainConfig, count: int = 100, seed: int = 10_000) -> list[Instance]:
    """Evaluation set drawn from a seed stream disjoint from training."""
    return [generate(cfg.n_customers, cfg.n_depots, derive_seed(seed, k), cfg.variant) for k in range(count)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CLRPCKPT"
FORMAT_VERSION = 1
_DIGEST = 32


class CheckpointError(RuntimeError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: AttentionPolicy
    step: int
    metadata: dict = field(default_factory=dict)


def checkpoint_bytes(model: AttentionPolicy, step: int, metadata: dict | None = None) -> bytes:
    state = model.state_dict()
    names = sorted(state)
    header = {
        "metadata": metadata or {},
        "policy_config": model.cfg.to_dict(),
        "step": int(step),
        "tensors": [[name, list(state[name].shape)] for name in names],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head]
    for name in names:
        parts.append(state[name].detach().to(DTYPE).contiguous().numpy().astype("<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: AttentionPolicy, step: int, path, metadata: dict | None = None) -> None:
    """Write atomically: a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, step, metadata))
    os.replace(tmp, path)


def parse_checkpoint(data: bytes) -> Checkpoint:
    fixed = len(MAGIC) + 8
    if len(data) < fixed + _DIGEST or not data.startswith(MAGIC):
        raise CheckpointCorruptError("not a checkpoint or truncated")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError("checksum mismatch")
    version, head_len = struct.unpack("<II", data[len(MAGIC) : fixed])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    try:
        header = json.loads(body[fixed : fixed + head_len])
        model = AttentionPolicy(PolicyConfig(**header["policy_config"]), seed=None)
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"bad header: {exc}") from exc
    offset = fixed + head_len
    state = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(body):
            raise CheckpointCorruptError(f"tensor {name} runs past the end of the file")
        arr = np.frombuffer(body[offset:end], dtype="<f8").reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float64))
        offset = end
    if offset != len(body):
        raise CheckpointCorruptError("trailing bytes after the last tensor")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointCorruptError(str(exc)) from exc
    return Checkpoint(model, int(header["step"]), header["metadata"])


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

LOG_FIELDS = ["epoch", "mean_cost", "lr", "grad_norm", "wall_time", "mean_abs_advantage", "max_advantage_sum"]


def _append_log(out_dir: Path, stats: EpochStats) -> None:
    csv_path = out_dir / "train_log.csv"
    new = not csv_path.exists()
    row = stats.to_dict()
    with open(csv_path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_FIELDS, extrasaction="ignore")
        if new:
            writer.writeheader()
        writer.writerow(row)
    with open(out_dir / "train_log.jsonl", "a") as f:
        f.write(json.dumps({k: row[k] for k in LOG_FIELDS}) + "\n")


def train(
    cfg: TrainConfig,
    policy_cfg: PolicyConfig = PolicyConfig(),
    out_dir=None,
    resume=None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> tuple[AttentionPolicy, list[EpochStats]]:
    """Train for ``cfg.epochs`` epochs, writing logs and checkpoints to ``out_dir``.

    With ``resume`` the model and the epoch counter come from that
    checkpoint; ``cfg.epochs`` more epochs are run. The checkpoint step is the
    number of completed epochs. Optimizer moments are not stored and restart
    from zero on resume.
    """
    if resume is not None:
        ck = load_checkpoint(resume)
        model, first = ck.model, ck.step
    else:
        model, first = AttentionPolicy(policy_cfg, seed=cfg.seed), 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = {"train_config": cfg.to_dict()}
    if out is not None and cfg.epochs == 0:
        save_checkpoint(model, first, out / "final.ckpt", meta)
    optimizer = make_optimizer(model, cfg)
    history = []
    for epoch in range(first, first + cfg.epochs):
        model, stats = train_epoch(model, cfg, epoch, optimizer)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        if out is not None:
            _append_log(out, stats)
            done = epoch + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(model, done, out / f"epoch_{done:05d}.ckpt", meta)
            if done == first + cfg.epochs:
                save_checkpoint(model, done, out / "final.ckpt", meta)
    return model, history


def smoke_config(**overrides) -> TrainConfig:
    return replace(SMOKE_CONFIG, **overrides)
