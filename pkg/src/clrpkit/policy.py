"""Heterogeneous-query attention policy.

The encoder embeds depots (x, y, CCR, CDR) and customers (x, y, demand/q)
with separate projections followed by self-attention layers. The decoder
builds a context ``[graph embedding, last node embedding, remaining
capacity]`` and projects it with ``W_q``. During a routing decision that
projection is the query. During a location decision (indicator 1) it is fed
to a GRU whose hidden state becomes the query. Scores come from a masked
multi-head glimpse followed by ``C * tanh`` compatibilities.

Everything runs in float64. A batch is laid out as ``[B instances, T
trajectories]`` so keys and values never need to be gathered per row.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .env import BatchEnv, EnvState, parse_actions
from .evaluate import Solution, objective
from .instance import FeatureMatrix, Instance, features

DTYPE = torch.float64
MASK_VALUE = -1e9


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 64
    n_layers: int = 3
    n_heads: int = 8
    ff_dim: int = 128
    clip: float = 10.0
    norm: str = "layer"  # "layer" or "batch"
    use_gru: bool = True

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.norm not in ("layer", "batch"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


FULL_SCALE_CONFIG = PolicyConfig(embed_dim=256, n_layers=6, n_heads=16, ff_dim=512)
TINY_CONFIG = PolicyConfig(embed_dim=32, n_layers=2, n_heads=4, ff_dim=64)


class Normalization(nn.Module):
    """Per-node normalisation over features, or batch statistics over all nodes."""

    def __init__(self, dim: int, mode: str = "layer", eps: float = 1e-5):
        super().__init__()
        self.mode, self.eps = mode, eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x):
        dims = (-1,) if self.mode == "layer" else (0, 1)
        mean = x.mean(dim=dims, keepdim=True)
        var = x.var(dim=dims, keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.W_query = nn.Linear(dim, dim, bias=False)
        self.W_key = nn.Linear(dim, dim, bias=False)
        self.W_val = nn.Linear(dim, dim, bias=False)
        self.W_out = nn.Linear(dim, dim, bias=False)

    def _heads(self, x):
        B, N, d = x.shape
        return x.view(B, N, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, h):
        B, N, d = h.shape
        q, k, v = self._heads(self.W_query(h)), self._heads(self.W_key(h)), self._heads(self.W_val(h))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // self.n_heads), dim=-1)
        return self.W_out((attn @ v).transpose(1, 2).reshape(B, N, d))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        d = cfg.embed_dim
        self.mha = MultiHeadAttention(d, cfg.n_heads)
        self.norm1 = Normalization(d, cfg.norm)
        self.ff = nn.Sequential(nn.Linear(d, cfg.ff_dim), nn.ReLU(), nn.Linear(cfg.ff_dim, d))
        self.norm2 = Normalization(d, cfg.norm)

    def forward(self, h):
        h = self.norm1(h + self.mha(h))
        return self.norm2(h + self.ff(h))


@dataclass
class EmbeddingCache:
    """Per-instance decoder inputs computed once per episode batch."""

    node: torch.Tensor  # [B, N, d]
    graph: torch.Tensor  # [B, d]
    glimpse_key: torch.Tensor  # [B, M, N, dk]
    glimpse_val: torch.Tensor  # [B, M, N, dk]
    logit_key: torch.Tensor  # [B, N, d]


class AttentionPolicy(nn.Module):
    def __init__(self, cfg: PolicyConfig = PolicyConfig(), seed: int | None = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.depot_embed = nn.Linear(4, d)
        self.customer_embed = nn.Linear(3, d)
        self.layers = nn.ModuleList([EncoderLayer(cfg) for _ in range(cfg.n_layers)])
        self.W_q = nn.Linear(2 * d + 1, d, bias=False)
        self.project_key = nn.Linear(d, d, bias=False)
        self.project_val = nn.Linear(d, d, bias=False)
        self.project_logit_key = nn.Linear(d, d, bias=False)
        self.project_out = nn.Linear(d, d, bias=False)
        self.gru = nn.GRUCell(d, d)
        self.placeholder_node = nn.Parameter(torch.empty(d))
        self.placeholder_capacity = nn.Parameter(torch.empty(1))
        self.to(DTYPE)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int | None = 0) -> None:
        """Uniform in +-1/sqrt(fan_in); normalisation affines start at (1, 0)."""
        gen = torch.Generator().manual_seed(seed) if seed is not None else None

        def fill(p, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=gen))

        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    for p in module.parameters():
                        fill(p, module.in_features)
                elif isinstance(module, nn.GRUCell):
                    for p in module.parameters():
                        fill(p, module.input_size)
                elif isinstance(module, Normalization):
                    module.weight.fill_(1.0)
                    module.bias.zero_()
            fill(self.placeholder_node, self.cfg.embed_dim)
            fill(self.placeholder_capacity, 1)

    # -- encoder ---------------------------------------------------------

    def encode(self, depot_rows: torch.Tensor, customer_rows: torch.Tensor):
        """``[B, m, 4]`` and ``[B, n, 3]`` -> node embeddings ``[B, N, d]``, graph ``[B, d]``."""
        h = torch.cat([self.depot_embed(depot_rows), self.customer_embed(customer_rows)], dim=1)
        for layer in self.layers:
            h = layer(h)
        if not torch.isfinite(h).all():
            raise FloatingPointError("non-finite node embeddings")
        return h, h.mean(dim=1)

    def precompute(self, node: torch.Tensor, graph: torch.Tensor) -> EmbeddingCache:
        B, N, d = node.shape
        M = self.cfg.n_heads

        def heads(x):
            return x.view(B, N, M, d // M).transpose(1, 2)

        return EmbeddingCache(
            node, graph, heads(self.project_key(node)), heads(self.project_val(node)), self.project_logit_key(node)
        )

    def encode_instances(self, instances: Sequence[Instance]) -> EmbeddingCache:
        feats = [features(inst) for inst in instances]
        depot = torch.tensor(np.stack([f.depot_rows for f in feats]), dtype=DTYPE)
        cust = torch.tensor(np.stack([f.customer_rows for f in feats]), dtype=DTYPE)
        return self.precompute(*self.encode(depot, cust))

    # -- decoder ---------------------------------------------------------

    def decode(self, cache: EmbeddingCache, last, capacity, indicator, hidden, mask):
        """Masked log-probabilities ``[B, T, N]`` and the new GRU state."""
        logits, hidden = self.scores(cache, last, capacity, indicator, hidden, mask)
        logits = logits.masked_fill(~mask, MASK_VALUE)
        return torch.log_softmax(logits, dim=-1), hidden

    def scores(self, cache: EmbeddingCache, last, capacity, indicator, hidden, mask):
        """Clipped scores before masking, for every row.

        Args:
            last: ``[B, T]`` long, previous node (-1 before the first action).
            capacity: ``[B, T]`` remaining vehicle capacity divided by q.
            indicator: ``[B, T]`` bool, True for a location decision.
            hidden: ``[B, T, d]`` GRU state.
            mask: ``[B, T, N]`` bool allow-mask.

        Returns:
            scores in ``[-C, C]`` of shape ``[B, T, N]`` and the new GRU state.
        """
        B, T = last.shape
        d, M = self.cfg.embed_dim, self.cfg.n_heads
        dk = d // M
        first = (last < 0).unsqueeze(-1)
        idx = last.clamp(min=0).unsqueeze(-1).expand(B, T, d)
        h_last = torch.where(first, self.placeholder_node, cache.node.gather(1, idx))
        cap = torch.where(first, self.placeholder_capacity, capacity.unsqueeze(-1))
        context = torch.cat([cache.graph.unsqueeze(1).expand(B, T, d), h_last, cap], dim=-1)
        routing_query = self.W_q(context)
        if self.cfg.use_gru:
            loc = indicator.unsqueeze(-1)
            gru_out = self.gru(routing_query.reshape(B * T, d), hidden.reshape(B * T, d)).view(B, T, d)
            query = torch.where(loc, gru_out, routing_query)
            hidden = torch.where(loc, gru_out, hidden)
        else:
            query = routing_query

        qh = query.view(B, T, M, dk).transpose(1, 2)  # [B, M, T, dk]
        compat = qh @ cache.glimpse_key.transpose(-1, -2) / math.sqrt(dk)  # [B, M, T, N]
        compat = compat.masked_fill(~mask.unsqueeze(1), MASK_VALUE)
        glimpse = torch.softmax(compat, dim=-1) @ cache.glimpse_val  # [B, M, T, dk]
        glimpse = self.project_out(glimpse.transpose(1, 2).reshape(B, T, d))
        scores = glimpse @ cache.logit_key.transpose(-1, -2) / math.sqrt(d)  # [B, T, N]
        logits = self.cfg.clip * torch.tanh(scores)
        if not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite logits")
        return logits, hidden


@dataclass
class NumpyCache:
    """Per-episode arrays for :class:`NumpyDecoder` (keys pre-transposed)."""

    graph_query: np.ndarray  # [B, d]
    node_query: np.ndarray  # [B, N, d]
    placeholder_query: np.ndarray  # [d]
    capacity_weight: np.ndarray  # [d]
    glimpse_key: np.ndarray  # [B, M, dk, N]
    glimpse_val: np.ndarray  # [B, M, N, dk]
    logit_key: np.ndarray  # [B, d, N]


class NumpyDecoder:
    """Inference-only copy of :meth:`AttentionPolicy.decode` on numpy arrays.

    Rollouts without gradients spend most of their time in per-step framework
    overhead on tiny tensors; this mirror of the same equations is several
    times faster there. ``tests/test_policy.py`` pins it to the torch path.
    """

    def __init__(self, model: AttentionPolicy):
        def arr(t):
            return np.ascontiguousarray(t.detach().numpy())

        self.cfg = model.cfg
        self.W_q = arr(model.W_q.weight.T)
        self.W_out = arr(model.project_out.weight.T)
        self.W_ih = arr(model.gru.weight_ih.T)
        self.W_hh = arr(model.gru.weight_hh.T)
        self.b_ih = arr(model.gru.bias_ih)
        self.b_hh = arr(model.gru.bias_hh)
        self.placeholder_node = arr(model.placeholder_node)
        self.placeholder_capacity = arr(model.placeholder_capacity)[0]

    def prepare(self, cache: EmbeddingCache) -> "NumpyCache":
        """Numpy copy of a torch cache with the context projection split per term.

        ``[graph, node, capacity] @ W_q`` is linear, so the graph and node
        terms are projected once per episode and each step only gathers.
        """
        d = self.cfg.embed_dim
        node = cache.node.detach().numpy()
        graph = cache.graph.detach().numpy()
        W_graph, W_node, w_cap = self.W_q[:d], self.W_q[d : 2 * d], self.W_q[2 * d]
        return NumpyCache(
            graph_query=graph @ W_graph,
            node_query=node @ W_node,
            placeholder_query=self.placeholder_node @ W_node + self.placeholder_capacity * w_cap,
            capacity_weight=w_cap,
            glimpse_key=cache.glimpse_key.detach().numpy().transpose(0, 1, 3, 2).copy(),
            glimpse_val=cache.glimpse_val.detach().numpy(),
            logit_key=cache.logit_key.detach().numpy().transpose(0, 2, 1).copy(),
        )

    def _gru(self, x, h):
        d = self.cfg.embed_dim
        gi = x @ self.W_ih + self.b_ih
        gh = h @ self.W_hh + self.b_hh
        rz = 1.0 / (1.0 + np.exp(-(gi[:, : 2 * d] + gh[:, : 2 * d])))
        n = np.tanh(gi[:, 2 * d :] + rz[:, :d] * gh[:, 2 * d :])
        return n + rz[:, d:] * (h - n)

    def decode(self, cache: EmbeddingCache, last, capacity, indicator, hidden, mask):
        """Same contract as :meth:`AttentionPolicy.decode`, numpy in and out."""
        B, T = last.shape
        d, M = self.cfg.embed_dim, self.cfg.n_heads
        dk = d // M
        first = last < 0
        query = cache.node_query[np.arange(B)[:, None], np.where(first, 0, last)]
        query += cache.graph_query[:, None]
        query += capacity[..., None] * cache.capacity_weight
        if first.any():
            query[first] = cache.graph_query[np.nonzero(first)[0]] + cache.placeholder_query
        hidden = hidden.copy()
        if self.cfg.use_gru:
            loc = np.flatnonzero(indicator.reshape(-1))
            if len(loc):
                flat_q, flat_h = query.reshape(B * T, d), hidden.reshape(B * T, d)
                out = self._gru(flat_q[loc], flat_h[loc])
                flat_q[loc] = out
                flat_h[loc] = out
        qh = query.reshape(B, T, M, dk).transpose(0, 2, 1, 3)
        compat = (qh @ cache.glimpse_key) / math.sqrt(dk)  # [B, M, T, N]
        # exponentiate before masking: exp of the huge negative fill is slow
        weights = np.exp(compat - compat.max(axis=-1, keepdims=True)) * mask[:, None]
        total = weights.sum(axis=-1, keepdims=True)
        if not total.all():
            # every allowed score underflowed next to a masked one; redo exactly
            shifted = np.where(mask[:, None], compat, -np.inf)
            weights = np.exp(shifted - shifted.max(axis=-1, keepdims=True))
            total = weights.sum(axis=-1, keepdims=True)
        attn = weights / total
        glimpse = (attn @ cache.glimpse_val).transpose(0, 2, 1, 3).reshape(B, T, d) @ self.W_out
        logits = self.cfg.clip * np.tanh((glimpse @ cache.logit_key) / math.sqrt(d))
        if not np.isfinite(logits).all():
            raise FloatingPointError("non-finite logits")
        # logits lie in [-C, C], so shifting by C can neither overflow nor vanish
        lse = self.cfg.clip + np.log((np.exp(logits - self.cfg.clip) * mask).sum(axis=-1, keepdims=True))
        return np.where(mask, logits, MASK_VALUE) - lse, hidden


# ---------------------------------------------------------------------------
# batched rollouts
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    actions: tuple[int, ...]
    log_probs: tuple[float, ...]
    forced: tuple[bool, ...]
    reward: float
    instance: Instance
    solution: Solution | None = None

    @property
    def log_prob(self) -> float:
        return float(sum(lp for lp, f in zip(self.log_probs, self.forced) if not f))


@dataclass
class RolloutBatch:
    env: BatchEnv
    log_prob: torch.Tensor  # [B, T], sum over policy-chosen steps
    step_log_probs: torch.Tensor  # [B, T, steps]
    forced: np.ndarray  # [B, T, steps] bool
    B: int
    T: int
    hidden: object = None  # final GRU state, torch or numpy like the decoder that ran

    def costs(self) -> np.ndarray:
        out = np.empty((self.B, self.T))
        for b in range(self.B):
            for t in range(self.T):
                r = b * self.T + t
                out[b, t] = objective(self.env.instance(r), self.env.solution(r)).total
        return out

    def solution(self, b: int, t: int) -> Solution:
        return self.env.solution(b * self.T + t)

    def trajectory(self, b: int, t: int) -> Trajectory:
        r = b * self.T + t
        n = int(self.env.steps[r])
        sol = self.env.solution(r)
        inst = self.env.instance(r)
        return Trajectory(
            self.env.action_sequence(r),
            tuple(float(x) for x in self.step_log_probs[b, t, :n]),
            tuple(bool(x) for x in self.forced[b, t, :n]),
            -objective(inst, sol).total,
            inst,
            sol,
        )


def _pick(flat_logp, mode, generator, env, flat_actions):
    """Next action per row from ``[R, N]`` log-probabilities (numpy)."""
    if mode == "greedy":
        return flat_logp.argmax(axis=-1)
    if mode == "sample":
        # inverse CDF; masked entries have probability exactly 0 so they are never hit
        probs = np.exp(flat_logp)
        cdf = np.cumsum(probs, axis=-1)
        u = torch.rand(len(cdf), generator=generator, dtype=DTYPE).numpy() * cdf[:, -1]
        chosen = np.minimum((cdf <= u[:, None]).sum(axis=-1), cdf.shape[1] - 1)
        rows = np.arange(len(chosen))
        return np.where(probs[rows, chosen] > 0, chosen, flat_logp.argmax(axis=-1))
    if mode == "replay":
        return np.array([seq[s] if s < len(seq) else 0 for seq, s in zip(flat_actions, env.steps)], dtype=np.int64)
    raise ValueError(f"unknown mode {mode!r}")


def run_batch(
    model: AttentionPolicy,
    instances: Sequence[Instance],
    n_traj: int = 1,
    mode: str = "greedy",
    generator: torch.Generator | None = None,
    forced_first: np.ndarray | None = None,
    actions: Sequence[Sequence[Sequence[int]]] | None = None,
    env: BatchEnv | None = None,
    cache: EmbeddingCache | None = None,
    hidden=None,
    max_steps: int | None = None,
) -> RolloutBatch:
    """Roll ``n_traj`` trajectories per instance to termination.

    ``mode`` is ``"greedy"`` (argmax, lowest index on ties), ``"sample"`` or
    ``"replay"`` (teacher forcing with ``actions[b][t]``). ``forced_first``
    (``[B, T]`` customer indices, -1 for none) overrides the first routing
    action when that customer is allowed.

    With grad mode on, the torch decoder runs and ``log_prob`` carries the
    graph. Otherwise the numpy mirror runs; ``cache`` and ``hidden`` may then
    be numpy (see :class:`NumpyDecoder`). ``max_steps`` stops early, leaving
    the env mid-episode, and the final GRU state is kept on ``.hidden``.
    """
    B, T = len(instances), n_traj
    if mode not in ("greedy", "sample", "replay"):
        raise ValueError(f"unknown mode {mode!r}")
    if env is None:
        env = BatchEnv(instances, np.repeat(np.arange(B), T))
    fast = not torch.is_grad_enabled()
    if cache is None:
        cache = model.encode_instances(instances)
    decoder = NumpyDecoder(model) if fast else None
    if fast and isinstance(cache, EmbeddingCache):
        cache = decoder.prepare(cache)
    d = model.cfg.embed_dim
    if hidden is None:
        hidden = np.zeros((B, T, d)) if fast else torch.zeros(B, T, d, dtype=DTYPE)
    elif fast and isinstance(hidden, torch.Tensor):
        hidden = hidden.detach().numpy().copy()
    q = env._q[env.rows]
    R = B * T
    r_all = np.arange(R)
    flat_actions = None
    if actions is not None:
        flat_actions = [list(actions[b][t]) for b in range(B) for t in range(T)]
    ff = None if forced_first is None else np.asarray(forced_first).reshape(-1)
    step_lp, forced_steps = [], []
    n_steps = 0
    while not env.all_done and (max_steps is None or n_steps < max_steps):
        mask = env.mask()
        last = env.last.reshape(B, T)
        cap = (env.vcap / q).reshape(B, T)
        ind = (env.indicator == 1).reshape(B, T)
        if fast:
            logp, hidden = decoder.decode(cache, last, cap, ind, hidden, mask.reshape(B, T, -1))
            flat = logp.reshape(R, -1)
            chosen = _pick(flat, mode, generator, env, flat_actions)
        else:
            logp, hidden = model.decode(
                cache, torch.from_numpy(last), torch.from_numpy(cap), torch.from_numpy(ind), hidden,
                torch.from_numpy(mask).view(B, T, -1),
            )
            flat = logp.view(R, -1)
            chosen = _pick(flat.detach().numpy(), mode, generator, env, flat_actions)
        chosen = np.array(chosen, dtype=np.int64)
        forced = np.zeros(R, dtype=bool)
        if ff is not None:
            cand = (~env.done) & (env.steps == 1) & (ff >= 0)
            if cand.any():
                r = np.flatnonzero(cand)
                r = r[mask[r, env.m + ff[r]]]
                chosen[r] = env.m + ff[r]
                forced[r] = True
        if not mask[r_all, chosen].all():
            raise ValueError("chosen action is masked")
        live = ~env.done
        if fast:
            lp = np.where(live, flat[r_all, chosen], 0.0)
        else:
            lp = flat.gather(1, torch.from_numpy(chosen).unsqueeze(-1)).squeeze(-1)
            lp = torch.where(torch.from_numpy(live), lp, torch.zeros_like(lp))
        step_lp.append(lp.reshape(B, T))
        forced_steps.append(forced.reshape(B, T))
        env.step(chosen, check=False)
        n_steps += 1
    forced_arr = np.stack(forced_steps, axis=-1) if forced_steps else np.zeros((B, T, 0), dtype=bool)
    if fast:
        steps = torch.from_numpy(np.stack(step_lp, axis=-1)) if step_lp else torch.zeros(B, T, 0, dtype=DTYPE)
    else:
        steps = torch.stack(step_lp, dim=-1) if step_lp else torch.zeros(B, T, 0, dtype=DTYPE)
    counted = torch.from_numpy(~forced_arr)
    total = torch.where(counted, steps, torch.zeros_like(steps)).sum(dim=-1)
    return RolloutBatch(env, total, steps, forced_arr, B, T, hidden)


# ---------------------------------------------------------------------------
# single-instance API
# ---------------------------------------------------------------------------


@dataclass
class DecoderState:
    gru_hidden: torch.Tensor
    last_node_embedding: torch.Tensor | None = None
    indicator: int = 1


def encode(feat: FeatureMatrix, params: AttentionPolicy, cfg: PolicyConfig | None = None):
    """Node embeddings ``[N, d]`` and graph embedding ``[d]`` for one instance."""
    depot = torch.tensor(feat.depot_rows, dtype=DTYPE).unsqueeze(0)
    cust = torch.tensor(feat.customer_rows, dtype=DTYPE).unsqueeze(0)
    h, g = params.encode(depot, cust)
    return h[0], g[0]


def initial_decoder_state(params: AttentionPolicy) -> DecoderState:
    return DecoderState(torch.zeros(params.cfg.embed_dim, dtype=DTYPE))


def decode_step(h, h_bar, env_state: EnvState, dec_state: DecoderState, mask, params: AttentionPolicy, inst: Instance):
    """Probabilities over all nodes for one state, plus the updated decoder state."""
    mask_t = torch.as_tensor(np.asarray(mask, dtype=bool)).view(1, 1, -1)
    if not mask_t.any():
        raise ValueError("all actions are masked")
    cache = params.precompute(h.unsqueeze(0), h_bar.unsqueeze(0))
    last = env_state.last_node if env_state.last_node is not None else -1
    logp, hidden = params.decode(
        cache,
        torch.tensor([[last]]),
        torch.tensor([[env_state.vehicle_capacity / inst.vehicle_capacity]], dtype=DTYPE),
        torch.tensor([[env_state.indicator == 1]]),
        dec_state.gru_hidden.view(1, 1, -1),
        mask_t,
    )
    new_state = DecoderState(hidden.view(-1), h[last] if last >= 0 else None, env_state.indicator)
    return logp.exp().view(-1), new_state


def rollout(
    inst: Instance,
    params: AttentionPolicy,
    cfg: PolicyConfig | None = None,
    mode: str = "greedy",
    seed: int | None = None,
    forced_first: int | None = None,
) -> Trajectory:
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    ff = None if forced_first is None else np.array([[forced_first]])
    with torch.no_grad():
        batch = run_batch(params, [inst], 1, mode, gen, ff)
    return batch.trajectory(0, 0)


def surrogate(params: AttentionPolicy, trajectories: Sequence[Trajectory], advantages: Sequence[float]) -> torch.Tensor:
    """``sum_i advantage_i * log p(trajectory_i)`` recomputed with gradients."""
    total = torch.zeros((), dtype=DTYPE)
    for traj, adv in zip(trajectories, advantages):
        if adv == 0:
            continue
        ff = None
        if any(traj.forced):
            # forcing only ever applies to the first routing action (step 1)
            ff = np.array([[traj.actions[1] - traj.instance.n_depots]])
        batch = run_batch(params, [traj.instance], 1, "replay", forced_first=ff, actions=[[traj.actions]])
        total = total + float(adv) * batch.log_prob[0, 0]
    return total


def gradients(
    trajectories: Sequence[Trajectory],
    advantages: Sequence[float],
    params: AttentionPolicy,
    cfg: PolicyConfig | None = None,
) -> dict[str, torch.Tensor]:
    """Exact gradient of ``sum advantage * log-prob`` for every parameter."""
    params.zero_grad(set_to_none=True)
    with torch.enable_grad():
        loss = surrogate(params, trajectories, advantages)
        named = list(params.named_parameters())
        if loss.requires_grad:
            grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
        else:
            grads = [None] * len(named)
    out = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        out[name] = g
    return out
