import csv

import numpy as np
import pytest
import torch

from cada.baselines import exact_solve
from cada.env import make_solution, validate_solution
from cada.evaluation import (
    ALL_PROMPTS,
    augment8,
    best_solutions,
    edge_is_legal,
    evaluate,
    gap,
    prompt_augment,
    surplus_time,
    attention_stats,
)
from cada.model import CaDA, ModelConfig
from cada.problem import CVRP, VARIANTS, Instance, generate_instance


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return CaDA(ModelConfig(d_h=16, heads=4, layers=2, d_a=32)).eval()


def test_identity_transform_first():
    inst = generate_instance(6, VARIANTS["VRPLTW"], seed=0)
    views = augment8(inst)
    assert len(views) == 8
    assert views[0] == inst


def test_transforms_are_isometries():
    inst = generate_instance(9, CVRP, seed=1)
    for view in augment8(inst):
        assert np.abs(view.dist - inst.dist).max() <= 1e-12
        assert view.coords.min() >= 0 and view.coords.max() <= 1
    assert len({view.coords.tobytes() for view in augment8(inst)}) == 8


def test_fixed_solution_keeps_cost_and_feasibility():
    for i, spec in enumerate(VARIANTS.values()):
        inst = generate_instance(7, spec, seed=[2, i])
        seq = exact_solve(inst).solution.sequence
        base = make_solution(inst, seq).cost
        for view in augment8(inst):
            assert validate_solution(view, seq) == []
            assert make_solution(view, seq).cost == pytest.approx(base, abs=1e-9)


def test_prompt_grid():
    assert ALL_PROMPTS.shape == (32, 5)
    assert len({tuple(r) for r in ALL_PROMPTS.tolist()}) == 32


def test_prompt_augmentation(model, monkeypatch):
    inst = generate_instance(6, VARIANTS["VRPBTW"], seed=4)
    calls = []
    original = model.rollout

    def counting(*a, **kw):
        calls.append(kw.get("prompt"))
        return original(*a, **kw)

    monkeypatch.setattr(model, "rollout", counting)
    best = prompt_augment(inst, model)
    assert len(calls) == 32
    monkeypatch.undo()
    true_prompt = best_solutions(model, [inst])[0]
    assert best.cost <= true_prompt.cost + 1e-12
    for p in ALL_PROMPTS:
        sol = best_solutions(model, [inst], prompts=p[None])[0]
        assert validate_solution(inst, sol.sequence) == []
        assert best.cost <= sol.cost + 1e-12


def test_more_augmentation_never_worse(model):
    insts = [generate_instance(6, v, seed=[3, i]) for i, v in enumerate(VARIANTS.values())]
    plain = best_solutions(model, insts)
    aug = best_solutions(model, insts, aug8=True)
    both = best_solutions(model, insts, aug8=True, prompts=ALL_PROMPTS)
    for inst, a, b, c in zip(insts, plain, aug, both):
        assert b.cost <= a.cost
        assert c.cost <= b.cost
        assert validate_solution(inst, c.sequence) == []


def test_gap_against_exact(model):
    insts = [generate_instance(6, VARIANTS["VRPL"], seed=s) for s in range(10)]
    refs = [exact_solve(i).cost for i in insts]
    assert gap(3.0, 3.0) == 0
    report = evaluate(insts, model, references=refs)
    (row,) = report.rows
    assert row["variant"] == "VRPL" and row["n"] == 6
    assert all(o >= r - 1e-12 for o, r in zip(report.per_instance["VRPL"], refs))
    assert row["gap"] >= 0
    assert report.to_csv().splitlines()[0] == "variant,n,mean_obj,gap,time_s"
    self_report = evaluate(insts, model, references=report.per_instance["VRPL"])
    assert self_report.rows[0]["gap"] == 0


def test_surplus_time_value():
    inst = Instance(
        np.array([[0.0, 0.0], [0.0, 0.0], [0.5, 0.0]]),
        np.array([0, 1, 1]),
        10,
        VARIANTS["VRPTW"],
        tw_start=np.array([0.0, 0.5, 1.0]),
        tw_end=np.array([4.6, 0.7, 3.94]),
        service=np.array([0.0, 0.16, 0.16]),
    )
    assert surplus_time(inst, 1, 2) == pytest.approx(2.62, abs=1e-12)
    assert edge_is_legal(inst, 1, 2)


def test_attention_tables(model, tmp_path):
    insts = [generate_instance(5, VARIANTS["VRPTW"], seed=s) for s in range(3)]
    depot_csv, tw_csv = attention_stats(model, insts, tmp_path)
    rows = list(csv.reader(open(depot_csv)))
    assert rows[0] == ["layer", "head", "instance", "customer", "weight"]
    assert len(rows) - 1 == 3 * 2 * 4 * 5
    tw_rows = list(csv.reader(open(tw_csv)))
    assert tw_rows[0] == ["p_value", "weight"]
    assert len(tw_rows) - 1 == 3 * 2 * 4 * 5 * 4
