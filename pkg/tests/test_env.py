import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cada.env import (
    InfeasibleAction,
    MalformedSequence,
    Solution,
    decompose_routes,
    feasible_actions,
    make_solution,
    reset,
    reward,
    rollout_sequence,
    solution_cost,
    step,
    validate_solution,
)
from cada.problem import CVRP, VARIANTS, Instance, generate_instance

from .oracles import oracle_mask, random_reachable_state


def line_instance(variant=CVRP, demands=(0, 3), capacity=10, **kw):
    n = len(demands) - 1
    coords = np.array([[0.0, 0.0]] + [[0.3 * (i + 1), 0.0] for i in range(n)])
    return Instance(coords, np.array(demands), capacity, variant, **kw)


def tw_instance(**over):
    fields = dict(
        coords=np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]]),
        demands=np.array([0, 2, 2]),
        capacity=10,
        variant=VARIANTS["VRPTW"],
        tw_start=np.array([0.0, 1.5, 0.1]),
        tw_end=np.array([4.6, 2.0, 1.0]),
        service=np.array([0.0, 0.16, 0.16]),
    )
    fields.update(over)
    return Instance(**fields)


def test_reset_gives_identical_fresh_states():
    inst = generate_instance(6, VARIANTS["VRPBLTW"], seed=0)
    states = reset(inst, 4)
    assert len(states) == 4
    assert all(s == states[0] for s in states)
    assert states[0] is not states[1]
    s = states[0]
    assert s.clock == 0 and s.linehaul_used == 0 and s.backhaul_used == 0
    assert s.route_len_left == inst.dist_limit


def test_fresh_mask_excludes_depot():
    for spec in VARIANTS.values():
        inst = generate_instance(8, spec, seed=3)
        (s,) = reset(inst)
        mask = feasible_actions(s, inst)
        assert not mask[0]
        assert mask.tolist() == oracle_mask(inst, [0])


def test_only_depot_after_all_visited():
    inst = line_instance(demands=(0, 1, 1))
    (s,) = reset(inst)
    s = step(step(s, 1, inst), 2, inst)
    assert feasible_actions(s, inst).tolist() == [True, False, False]


def test_late_clock_masks_customer():
    inst = tw_instance(tw_end=np.array([4.6, 1.0, 4.0]))
    (s,) = reset(inst)
    s.clock = 4.5
    assert not feasible_actions(s, inst)[1]


def test_backhaul_waits_for_linehauls():
    inst = line_instance(VARIANTS["VRPB"], demands=(0, 4, -3))
    (s,) = reset(inst)
    assert feasible_actions(s, inst).tolist() == [False, True, False]
    with pytest.raises(InfeasibleAction) as err:
        step(s, 2, inst)
    assert err.value.rule == 4
    s = step(s, 1, inst)
    assert feasible_actions(s, inst)[2]


def test_capacity_rule_is_integer_exact():
    inst = line_instance(demands=(0, 6, 4, 1), capacity=10)
    (s,) = reset(inst)
    s = step(step(s, 1, inst), 2, inst)  # exactly full
    assert s.linehaul_used == 10
    with pytest.raises(InfeasibleAction) as err:
        step(s, 3, inst)
    assert err.value.rule == 5


def test_load_increments_by_normalised_demand():
    inst = line_instance(demands=(0, 4), capacity=40)
    (s,) = reset(inst)
    s2 = step(s, 1, inst)
    assert s2.load_linehaul_used - s.load_linehaul_used == pytest.approx(0.1, abs=1e-15)
    assert s.load_linehaul_used == 0  # untouched


def test_wait_then_serve():
    inst = tw_instance(coords=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.5]]))
    (s,) = reset(inst)
    s = step(s, 1, inst)
    assert s.clock == pytest.approx(1.66, abs=1e-12)


def test_depot_resets_vehicle():
    inst = generate_instance(5, VARIANTS["VRPBL"], seed=2)
    (s,) = reset(inst)
    first = int(np.flatnonzero(feasible_actions(s, inst))[0])
    s = step(s, first, inst)
    s = step(s, 0, inst)
    assert s.linehaul_used == s.backhaul_used == 0
    assert s.clock == 0 and s.route_len_left == inst.dist_limit


def test_open_route_ends_without_return():
    inst = line_instance(VARIANTS["OVRP"], demands=(0, 1))
    (s,) = reset(inst)
    s = step(s, 1, inst)
    assert s.done and s.partial_solution == [0, 1, 0]


@pytest.mark.parametrize("name, want", [("CVRP", -0.6), ("OVRP", -0.3)])
def test_reward_single_customer(name, want):
    inst = line_instance(VARIANTS[name], demands=(0, 2))
    sol = make_solution(inst, [0, 1, 0])
    assert reward(sol, inst) == pytest.approx(want, abs=1e-15)
    assert reward(sol, inst) == -sol.cost


def test_decompose_routes():
    assert decompose_routes([0, 1, 2, 0, 3, 0]) == [[0, 1, 2, 0], [0, 3, 0]]
    assert decompose_routes([0, 1, 0]) == [[0, 1, 0]]
    seq = [0, 4, 0, 2, 3, 0, 1, 0]
    assert len(decompose_routes(seq)) == sum(1 for a, b in zip(seq, seq[1:]) if a == 0 and b != 0)
    with pytest.raises(MalformedSequence):
        decompose_routes([0, 0, 1, 0])
    with pytest.raises(MalformedSequence):
        decompose_routes([1, 0])


def test_validator_flags_revisit_and_unvisited():
    inst = line_instance(demands=(0, 1, 1))
    kinds = {v.kind for v in validate_solution(inst, [0, 1, 0, 1, 0])}
    assert {"revisit", "unvisited"} <= kinds


def test_validator_flags_backhaul_order():
    inst = line_instance(VARIANTS["VRPB"], demands=(0, 2, -3))
    assert [v.kind for v in validate_solution(inst, [0, 2, 1, 0])] == ["backhaul order"]
    assert validate_solution(inst, [0, 1, 2, 0]) == []


def test_validator_flags_each_constraint():
    inst = line_instance(demands=(0, 6, 6), capacity=10)
    assert [v.kind for v in validate_solution(inst, [0, 1, 2, 0])] == ["capacity"]
    assert [v.kind for v in validate_solution(inst, [0, 1, 0, 2])] == ["unclosed route"]
    assert validate_solution(inst, [0, 9, 0])[0].kind == "structure"
    lim = line_instance(VARIANTS["VRPL"], demands=(0, 1, 1), dist_limit=1.0)
    assert [v.kind for v in validate_solution(lim, [0, 1, 2, 0])] == ["distance limit"]
    tw = tw_instance()
    kinds = {v.kind for v in validate_solution(tw, [0, 2, 1, 0])}
    assert validate_solution(tw, [0, 2, 0, 1, 0]) == []
    assert kinds <= {"time window", "horizon"}


def test_solution_text_round_trip(tmp_path):
    inst = generate_instance(6, CVRP, seed=4)
    seq = rollout_sequence(inst, lambda s, m: int(np.flatnonzero(m)[0]))
    sol = make_solution(inst, seq)
    sol.save(tmp_path / "s.txt")
    back = Solution.load(tmp_path / "s.txt")
    assert back.sequence == sol.sequence and back.cost == sol.cost


def test_all_linehaul_vrpb_masks_like_cvrp():
    rng = np.random.default_rng(0)
    for _ in range(50):
        base = generate_instance(7, CVRP, seed=int(rng.integers(1 << 31)))
        other = base.with_variant(VARIANTS["VRPB"])
        s = random_reachable_state(base, rng, lambda st: feasible_actions(st, base))
        assert feasible_actions(s, base).tolist() == feasible_actions(s, other).tolist()


@settings(max_examples=120, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 10), name=st.sampled_from(sorted(VARIANTS)))
def test_masked_rollouts_validate_and_masks_never_empty(seed, n, name):
    inst = generate_instance(n, VARIANTS[name], seed=seed)
    rng = np.random.default_rng(seed)

    def policy(state, mask):
        assert mask.any()
        assert mask.tolist() == oracle_mask(inst, state.partial_solution)
        return int(rng.choice(np.flatnonzero(mask)))

    seq = rollout_sequence(inst, policy)
    assert validate_solution(inst, seq) == []
    assert reward(seq, inst) == pytest.approx(-solution_cost(inst, seq), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 12))
def test_single_customer_round_trips_are_feasible(seed, n):
    inst = generate_instance(n, VARIANTS["VRPTW"], seed=seed)
    seq = [0]
    for c in range(1, n + 1):
        seq += [c, 0]
    assert validate_solution(inst, seq) == []
