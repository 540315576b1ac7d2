import json
import math

import numpy as np
import pytest
import torch

from clrpkit import env as mdp
from clrpkit.env import BatchEnv
from clrpkit.evaluate import check_feasible
from clrpkit.instance import Instance, features, generate
from clrpkit.policy import (
    DTYPE, TINY_CONFIG, AttentionPolicy, NumpyDecoder, PolicyConfig, decode_step, encode, gradients,
    initial_decoder_state, rollout, run_batch,
)
from clrpkit.testkit import fd_gradcheck, parameter_arrays, reference_encode, reference_probabilities

from conftest import DATA

GOLDEN_ZERO_ATTENTION = DATA / "golden_zero_attention.json"


def _zero_attention_model():
    model = AttentionPolicy(TINY_CONFIG, seed=11)
    with torch.no_grad():
        for layer in model.layers:
            layer.mha.W_out.weight.zero_()
    return model


def _feature_tensors(inst):
    f = features(inst)
    return torch.tensor(f.depot_rows, dtype=DTYPE)[None], torch.tensor(f.customer_rows, dtype=DTYPE)[None]


def test_graph_embedding_is_mean(tiny_model):
    h, g = encode(features(generate(10, 5, 1)), tiny_model)
    assert torch.allclose(g, h.mean(dim=0), atol=1e-12)


def test_permutation_equivariance(tiny_model):
    inst = generate(8, 3, 2)
    perm = np.random.default_rng(0).permutation(8)
    permuted = Instance(inst.depot_xy, inst.depot_capacity, inst.opening_cost, inst.customer_xy[perm],
                        inst.demand[perm], inst.vehicle_capacity, inst.vehicle_fixed_cost, normalized=True)
    h, g = encode(features(inst), tiny_model)
    hp, gp = encode(features(permuted), tiny_model)
    assert torch.allclose(hp[3:], h[3:][perm], atol=1e-6)
    assert torch.allclose(hp[:3], h[:3], atol=1e-6)
    assert torch.allclose(gp, g, atol=1e-6)


def test_zero_attention_output_reduces_to_feed_forward():
    model = _zero_attention_model()
    inst = generate(4, 2, 5)
    h, _ = encode(features(inst), model)
    f = features(inst)
    x = np.vstack([
        f.depot_rows @ model.depot_embed.weight.detach().numpy().T + model.depot_embed.bias.detach().numpy(),
        f.customer_rows @ model.customer_embed.weight.detach().numpy().T + model.customer_embed.bias.detach().numpy(),
    ])

    def norm(v):
        return (v - v.mean(-1, keepdims=True)) / np.sqrt(v.var(-1, keepdims=True) + 1e-5)

    for layer in model.layers:
        W1, b1 = layer.ff[0].weight.detach().numpy(), layer.ff[0].bias.detach().numpy()
        W2, b2 = layer.ff[2].weight.detach().numpy(), layer.ff[2].bias.detach().numpy()
        x = norm(x)
        x = norm(x + np.maximum(x @ W1.T + b1, 0) @ W2.T + b2)
    np.testing.assert_allclose(h.detach().numpy(), x, atol=1e-12)
    golden = np.array(json.loads(GOLDEN_ZERO_ATTENTION.read_text())["node_embeddings"])
    np.testing.assert_allclose(h.detach().numpy(), golden, atol=1e-10, rtol=0)


def test_encoder_matches_straight_line_oracle(tiny_model):
    inst = generate(6, 3, 8)
    h, g = encode(features(inst), tiny_model)
    rh, rg = reference_encode(parameter_arrays(tiny_model), tiny_model.cfg, inst)
    np.testing.assert_allclose(h.detach().numpy(), rh, atol=1e-10, rtol=0)
    np.testing.assert_allclose(g.detach().numpy(), rg, atol=1e-10, rtol=0)


def _decode_once(model, inst, mask):
    cache = model.encode_instances([inst])
    d = model.cfg.embed_dim
    return model.decode(
        cache, torch.tensor([[-1]]), torch.zeros(1, 1, dtype=DTYPE), torch.tensor([[True]]),
        torch.zeros(1, 1, d, dtype=DTYPE), torch.as_tensor(mask).view(1, 1, -1),
    )


def test_equal_logits_split_evenly():
    model = AttentionPolicy(TINY_CONFIG, seed=2)
    with torch.no_grad():
        model.project_logit_key.weight.zero_()
    inst = generate(3, 2, 0)
    logp, _ = _decode_once(model, inst, np.array([True, True, False, False, False]))
    np.testing.assert_allclose(logp.exp().view(-1).detach().numpy(), [0.5, 0.5, 0, 0, 0], atol=1e-15)


def test_single_allowed_action_is_certain(tiny_model):
    inst = generate(3, 2, 0)
    logp, _ = _decode_once(tiny_model, inst, np.array([False, True, False, False, False]))
    assert logp.exp().view(-1)[1].item() == 1.0


def test_greedy_tie_breaks_to_lowest_index():
    model = AttentionPolicy(TINY_CONFIG, seed=2)
    with torch.no_grad():
        model.project_logit_key.weight.zero_()
        batch = run_batch(model, [generate(5, 3, 0)], 1, "greedy")
    assert batch.env.action_sequence(0)[0] == 0


def test_probabilities_normalized_and_zero_when_masked(tiny_model):
    inst = generate(7, 3, 4)
    traj = rollout(inst, tiny_model, mode="sample", seed=1)
    probs = reference_probabilities(tiny_model, inst, traj.actions)
    state = mdp.reset(inst)
    for p, a in zip(probs, traj.actions):
        allowed = mdp.mask(state, inst)
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all(p >= 0) and np.all(p[~allowed] == 0)
        state = mdp.step(state, a, inst)


def test_scores_clipped(tiny_model):
    model = AttentionPolicy(PolicyConfig(32, 1, 4, 64, clip=2.0), seed=0)
    with torch.no_grad():
        model.project_logit_key.weight.mul_(1000.0)
        cache = model.encode_instances([generate(6, 2, 1)])
        scores, _ = model.scores(
            cache, torch.tensor([[-1]]), torch.zeros(1, 1, dtype=DTYPE), torch.tensor([[True]]),
            torch.zeros(1, 1, 32, dtype=DTYPE), torch.ones(1, 1, 8, dtype=torch.bool),
        )
    assert scores.abs().max().item() <= 2.0
    assert scores.abs().max().item() > 1.9


def test_adding_constant_keeps_greedy_action(tiny_model):
    with torch.no_grad():
        cache = tiny_model.encode_instances([generate(6, 2, 1)])
        mask = torch.tensor([[[True, False] + [True] * 6]])
        args = (torch.tensor([[-1]]), torch.zeros(1, 1, dtype=DTYPE), torch.tensor([[True]]),
                torch.zeros(1, 1, 32, dtype=DTYPE), mask)
        scores, _ = tiny_model.scores(cache, *args)
        logp, _ = tiny_model.decode(cache, *args)
    shifted = torch.log_softmax((scores + 7.0).masked_fill(~mask, -1e9), dim=-1)
    assert torch.allclose(shifted, logp, atol=1e-12)
    assert shifted.argmax() == logp.argmax()


def test_gru_state_held_during_routing(tiny_model):
    with torch.no_grad():
        cache = tiny_model.encode_instances([generate(6, 2, 1)])
        hidden = torch.randn(1, 2, 32, dtype=DTYPE)
        _, new = tiny_model.decode(
            cache, torch.tensor([[3, 4]]), torch.full((1, 2), 0.5, dtype=DTYPE), torch.tensor([[False, True]]),
            hidden, torch.ones(1, 2, 8, dtype=torch.bool),
        )
    assert torch.equal(new[0, 0], hidden[0, 0])
    assert not torch.equal(new[0, 1], hidden[0, 1])


def test_numpy_decoder_pins_torch_decoder(tiny_model):
    instances = [generate(9, 3, 20 + k) for k in range(4)]
    env = BatchEnv(instances, np.repeat(np.arange(4), 3))
    rng = np.random.default_rng(0)
    numpy_decoder = NumpyDecoder(tiny_model)
    with torch.no_grad():
        cache = tiny_model.encode_instances(instances)
        ncache = numpy_decoder.prepare(cache)
        hidden = torch.zeros(4, 3, 32, dtype=DTYPE)
        nhidden = np.zeros((4, 3, 32))
        while not env.all_done:
            mask = env.mask()
            q = np.array([i.vehicle_capacity for i in instances])[env.rows]
            args = (env.last.reshape(4, 3), (env.vcap / q).reshape(4, 3), (env.indicator == 1).reshape(4, 3))
            logp, hidden = tiny_model.decode(cache, *map(torch.from_numpy, args), hidden,
                                             torch.from_numpy(mask).view(4, 3, -1))
            nlogp, nhidden = numpy_decoder.decode(ncache, *args, nhidden, mask.reshape(4, 3, -1))
            allowed = mask.reshape(4, 3, -1)
            np.testing.assert_allclose(nlogp[allowed], logp.numpy()[allowed], atol=1e-12, rtol=0)
            np.testing.assert_allclose(nhidden, hidden.numpy(), atol=1e-12, rtol=0)
            choice = np.array([rng.choice(np.flatnonzero(m)) for m in mask])
            env.step(choice)


@pytest.mark.parametrize("variant", ["closed", "open"])
def test_episode_log_probability_matches_oracle(tiny_model, variant):
    inst = generate(6, 2, 31, variant)
    traj = rollout(inst, tiny_model, mode="sample", seed=3)
    probs = reference_probabilities(tiny_model, inst, traj.actions)
    chosen = probs[np.arange(len(traj.actions)), list(traj.actions)]
    np.testing.assert_allclose(np.exp(traj.log_probs), chosen, atol=1e-10, rtol=0)
    assert abs(traj.log_prob - float(np.log(chosen).sum())) < 1e-9
    with torch.enable_grad():
        grad_batch = run_batch(tiny_model, [inst], 1, "replay", actions=[[traj.actions]])
    assert abs(grad_batch.log_prob.item() - traj.log_prob) < 1e-10


def test_decode_step_agrees_with_reference(tiny_model):
    inst = generate(5, 2, 6)
    h, g = encode(features(inst), tiny_model)
    state, dec = mdp.reset(inst), initial_decoder_state(tiny_model)
    actions = []
    with torch.no_grad():
        while not mdp.is_terminal(state, inst):
            p, dec = decode_step(h, g, state, dec, mdp.mask(state, inst), tiny_model, inst)
            a = int(p.argmax())
            actions.append(a)
            state = mdp.step(state, a, inst)
    assert tuple(actions) == rollout(inst, tiny_model).actions


def test_greedy_rollout_deterministic_and_feasible(tiny_model):
    inst = generate(10, 5, 0)
    a, b = rollout(inst, tiny_model), rollout(inst, tiny_model)
    assert a.actions == b.actions
    assert check_feasible(inst, a.solution).ok


def test_forced_first_customer(tiny_model):
    inst = generate(6, 2, 9)
    traj = rollout(inst, tiny_model, forced_first=4)
    assert traj.actions[1] == 2 + 4 and traj.forced[1] and not traj.forced[0]
    assert traj.log_prob == pytest.approx(sum(lp for k, lp in enumerate(traj.log_probs) if k != 1))


def _trajectories(model, n=4):
    return [rollout(generate(5, 2, 60 + k), model, mode="sample", seed=k) for k in range(n)]


def test_zero_advantages_give_zero_gradients(tiny_model):
    grads = gradients(_trajectories(tiny_model), [0.0] * 4, tiny_model)
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_gradients_linear_in_advantages(tiny_model):
    trajs = _trajectories(tiny_model)
    adv = [0.3, -0.1, -0.5, 0.3]
    g1 = gradients(trajs, adv, tiny_model)
    g3 = gradients(trajs, [2.5 * a for a in adv], tiny_model)
    for name in g1:
        assert torch.allclose(g3[name], 2.5 * g1[name], atol=1e-9, rtol=0)


def test_single_parameter_finite_difference(tiny_model):
    trajs = _trajectories(tiny_model, 2)
    report, per = fd_gradcheck(tiny_model, trajs, [1.0, -1.0], max_entries=1, seed=5)
    assert report.max_rel_error < 1e-4
    assert sum(r.checked for r in per) == sum(1 for _ in tiny_model.parameters())


def test_config_validation():
    with pytest.raises(ValueError):
        PolicyConfig(embed_dim=30, n_heads=4)
    with pytest.raises(ValueError):
        PolicyConfig(norm="group")
    assert PolicyConfig(norm="batch").norm == "batch"


def test_batch_norm_variant_runs():
    model = AttentionPolicy(PolicyConfig(16, 1, 2, 32, norm="batch"), seed=0)
    traj = rollout(generate(5, 2, 0), model)
    assert math.isfinite(traj.log_prob)
