"""Inference-time evaluation: geometric and prompt augmentation, gaps, attention diagnostics."""
from __future__ import annotations

import csv
import itertools
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .batch_env import BatchEnv
from .env import Solution, make_solution, solution_cost
from .model import CaDA
from .problem import Instance

# (x, y) -> image under the 8 symmetries of the unit square
_DIHEDRAL = (
    lambda x, y: (x, y),
    lambda x, y: (1 - x, y),
    lambda x, y: (x, 1 - y),
    lambda x, y: (1 - x, 1 - y),
    lambda x, y: (y, x),
    lambda x, y: (1 - y, x),
    lambda x, y: (y, 1 - x),
    lambda x, y: (1 - y, 1 - x),
)

ALL_PROMPTS = torch.tensor(list(itertools.product((0.0, 1.0), repeat=5)))


def augment8(instance: Instance) -> list[Instance]:
    x, y = instance.coords[:, 0], instance.coords[:, 1]
    return [instance.with_coords(np.stack(f(x, y), axis=1)) for f in _DIHEDRAL]


@torch.no_grad()
def best_solutions(
    model: CaDA,
    instances: Sequence[Instance],
    aug8: bool = False,
    prompts: Optional[torch.Tensor] = None,
    k: Optional[int] = None,
    n_starts: Optional[int] = None,
    chunk: int = 128,
) -> list[Solution]:
    """Best greedy solution per instance over POMO starts, augmentations and prompts.

    Masking always follows each instance's own variant; ``prompts`` only
    changes the encoder input. Candidates are ranked by their cost on the
    original instance, so the identity view alone reproduces the plain result
    bit for bit and adding views can never make the answer worse.
    """
    model.eval()
    views = [augment8(inst) if aug8 else [inst] for inst in instances]
    flat = [(i, v) for i, vs in enumerate(views) for v in vs]
    best: list[Optional[tuple[float, list[int]]]] = [None] * len(instances)
    prompt_list = [None] if prompts is None else list(prompts)
    for prompt in prompt_list:
        for lo in range(0, len(flat), chunk):
            part = flat[lo : lo + chunk]
            env = BatchEnv([v for _, v in part])
            costs, _ = model.rollout(
                env, "greedy", n_starts or env.n, prompt=None if prompt is None else prompt[None], k=k
            )
            idx = costs.argmin(1)
            seqs = env.sequences()
            for row, (i, _) in enumerate(part):
                seq = seqs[row][int(idx[row])]
                c = solution_cost(instances[i], seq)
                if best[i] is None or c < best[i][0]:
                    best[i] = (c, seq)
    return [make_solution(inst, b[1]) for inst, b in zip(instances, best)]


def prompt_augment(instance: Instance, model: CaDA, aug8: bool = False, k: Optional[int] = None) -> Solution:
    """Best solution over all 32 binary prompt vectors."""
    return best_solutions(model, [instance], aug8=aug8, prompts=ALL_PROMPTS, k=k)[0]


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    per_instance: dict[str, list[float]] = field(default_factory=dict)
    solutions: dict[str, list[Solution]] = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["variant,n,mean_obj,gap,time_s"]
        for r in self.rows:
            gap = "" if r["gap"] is None else repr(r["gap"])
            lines.append(f"{r['variant']},{r['n']},{r['mean_obj']!r},{gap},{r['time_s']:.3f}")
        return "\n".join(lines) + "\n"


def gap(obj: float, ref: float) -> float:
    return (obj - ref) / ref


def evaluate(
    dataset: Sequence[Instance],
    model: CaDA,
    aug8: bool = False,
    prompt32: bool = False,
    k: Optional[int] = None,
    references: Optional[Sequence[Optional[float]]] = None,
    n_starts: Optional[int] = None,
    cost_fn=None,
) -> EvalReport:
    """Evaluate a dataset grouped by (variant, n).

    ``references`` aligns with ``dataset``; entries may be None. ``cost_fn``
    optionally re-scores a solution (e.g. on original CVRPLib coordinates).
    """
    groups: dict[tuple[str, int], list[int]] = {}
    for i, inst in enumerate(dataset):
        groups.setdefault((inst.variant.name, inst.n), []).append(i)
    report = EvalReport()
    for (name, n), idx in groups.items():
        t0 = time.time()
        sols = best_solutions(
            model, [dataset[i] for i in idx], aug8=aug8, prompts=ALL_PROMPTS if prompt32 else None, k=k, n_starts=n_starts
        )
        elapsed = time.time() - t0
        objs = [cost_fn(dataset[i], s) if cost_fn else s.cost for i, s in zip(idx, sols)]
        gaps = []
        if references is not None:
            gaps = [gap(o, references[i]) for i, o in zip(idx, objs) if references[i] is not None]
        report.rows.append(
            {
                "variant": name,
                "n": n,
                "mean_obj": float(np.mean(objs)),
                "gap": float(np.mean(gaps)) if gaps else None,
                "time_s": elapsed,
            }
        )
        report.per_instance[name] = objs
        report.solutions[name] = sols
    return report


# ---------------------------------------------------------------------------
# attention diagnostics


def surplus_time(inst: Instance, i: int, j: int) -> float:
    """Slack left when leaving i at its window start and serving j before its window closes."""
    return (inst.tw_end[j] - inst.tw_start[i]) - inst.dist[i, j] - (inst.service[i] + inst.service[j])


def edge_is_legal(inst: Instance, i: int, j: int) -> bool:
    return inst.tw_start[i] + inst.service[i] + inst.dist[i, j] <= inst.tw_end[j] - inst.service[j]


@torch.no_grad()
def attention_stats(model: CaDA, instances: Sequence[Instance], out_dir) -> tuple[Path, Path]:
    """Write global-branch attention tables ``attn_depot.csv`` and ``attn_tw.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    depot_path, tw_path = out / "attn_depot.csv", out / "attn_tw.csv"
    model.eval()
    with open(depot_path, "w", newline="") as fd, open(tw_path, "w", newline="") as ft:
        wd, wt = csv.writer(fd), csv.writer(ft)
        wd.writerow(["layer", "head", "instance", "customer", "weight"])
        wt.writerow(["p_value", "weight"])
        for b, inst in enumerate(instances):
            record: dict = {}
            model.encode_env(BatchEnv([inst]), record=record)
            n = inst.n
            if inst.variant.time_window:
                pairs = [(i, j) for i in range(1, n + 1) for j in range(1, n + 1) if i != j]
                p_vals = [surplus_time(inst, i, j) for i, j in pairs]
            for layer, attn in enumerate(record["global"]):
                a = attn[0].numpy()  # (heads, tokens, tokens); prompt token, if any, is last
                for h in range(a.shape[0]):
                    for i in range(1, n + 1):
                        wd.writerow([layer, h, b, i, repr(float(a[h, i, 0]))])
                    if inst.variant.time_window:
                        for (i, j), p in zip(pairs, p_vals):
                            wt.writerow([repr(float(p)), repr(float(a[h, i, j]))])
    return depot_path, tw_path
