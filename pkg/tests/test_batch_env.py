import numpy as np
import pytest
import torch

from cada.batch_env import BatchEnv, replay_trace, run_policy
from cada.env import feasible_actions, reset, solution_cost, step, validate_solution
from cada.problem import VARIANTS, generate_instance

from .oracles import oracle_mask


def mixed_batch(n, seed, count=16):
    return [generate_instance(n, v, seed=[seed, i]) for i, v in enumerate(VARIANTS.values())][:count]


def test_requires_uniform_size():
    with pytest.raises(ValueError):
        BatchEnv([generate_instance(3, VARIANTS["CVRP"], seed=0), generate_instance(4, VARIANTS["CVRP"], seed=0)])


@pytest.mark.parametrize("seed", range(4))
def test_batch_masks_track_reference_env(seed):
    insts = mixed_batch(8, seed)
    env = BatchEnv(insts)
    P = 3
    env.reset(P)
    states = [reset(inst, P) for inst in insts]
    gen = torch.Generator().manual_seed(seed)
    while not env.all_done:
        mask = env.mask()
        for b, inst in enumerate(insts):
            for p in range(P):
                s = states[b][p]
                want = [True] + [False] * inst.n if s.done else feasible_actions(s, inst).tolist()
                assert mask[b, p].tolist() == want
        a = torch.multinomial(mask.view(-1, mask.shape[-1]).double(), 1, generator=gen).view(len(insts), P)
        env.step(a)
        for b, inst in enumerate(insts):
            for p in range(P):
                if not states[b][p].done:
                    states[b][p] = step(states[b][p], int(a[b, p]), inst)
    seqs = env.sequences()
    costs = env.costs()
    for b, inst in enumerate(insts):
        for p in range(P):
            assert seqs[b][p] == states[b][p].partial_solution
            assert validate_solution(inst, seqs[b][p]) == []
            assert float(costs[b, p]) == pytest.approx(solution_cost(inst, seqs[b][p]), abs=1e-9)


def test_features_zero_inactive_columns():
    insts = mixed_batch(6, 0)
    feats = BatchEnv(insts).node_features()
    assert feats.shape == (16, 7, 7)
    for b, inst in enumerate(insts):
        if not inst.variant.time_window:
            assert torch.all(feats[b, :, 4:] == 0)
        if not inst.variant.backhaul:
            assert torch.all(feats[b, :, 3] == 0)


def test_start_nodes_are_distinct_customers():
    insts = mixed_batch(7, 1)
    env = BatchEnv(insts)
    env.reset(7)
    starts = env.start_nodes(7)
    for b in range(len(insts)):
        first = env.mask()[b, 0, 1:]
        feasible = (torch.nonzero(first).flatten() + 1).tolist()
        assert sorted(set(starts[b].tolist())) == feasible


def test_run_policy_and_trace_agree():
    insts = mixed_batch(5, 2)
    env = run_policy(BatchEnv(insts), lambda m: m.double().argmax(-1), n_starts=2)
    acts = env.action_tensor()
    tr = replay_trace(BatchEnv(insts), acts, forced_first=False)
    assert tr["mask"].shape == (16, 2 * acts.shape[-1], 6)
    assert torch.equal(tr["action"].view(16, -1, 2).permute(0, 2, 1), acts)
    for b, inst in enumerate(insts):
        seq = env.sequences()[b][0]
        assert oracle_mask(inst, [0]) == tr["mask"][b, 0].tolist()
        assert validate_solution(inst, seq) == []


def test_context_features():
    inst = generate_instance(5, VARIANTS["OVRPL"], seed=0)
    env = BatchEnv([inst])
    env.reset(1)
    ctx = env.context()[0, 0].tolist()
    assert ctx[:3] == [1.0, 1.0, 0.0]
    assert ctx[3] == pytest.approx(inst.dist_limit, rel=1e-6)
    assert ctx[4] == 1.0
    cvrp = BatchEnv([generate_instance(5, VARIANTS["CVRP"], seed=0)])
    cvrp.reset(1)
    assert cvrp.context()[0, 0, 3].item() == 3.0
