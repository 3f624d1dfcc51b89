"""Command-line entry point: ``cada <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import baselines
from .env import Solution, make_solution, validate_solution
from .io_utils import atomic_write_text, read_kv
from .problem import VARIANTS, VariantSpec, generate_dataset, load_instances, save_instances

CONFIG_ENV = "CADA_CONFIG"


class CliError(RuntimeError):
    pass


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(None), help="RNG seed")
    parser.add_argument("--config", default=d(None), help=f"key = value config file (default: ${CONFIG_ENV})")
    parser.add_argument("--profile", choices=("desk", "paper"), default=d("desk"))
    parser.add_argument("--csv", action="store_true", default=d(False), help="machine-readable CSV output")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cada", description="Cross-problem neural VRP solver")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a random dataset")
    p.add_argument("--variant", default="CVRP", help="variant name or 'all'")
    p.add_argument("-n", "--n", type=int, default=20, dest="n")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", parents=[common], help="evaluate a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset file, or CVRPLib .vrp file / directory")
    p.add_argument("--refs", help="reference-cost CSV (instance_id,cost,optimal_flag); ids are row indices or CVRPLib names")
    _aug_flags(p)
    p.add_argument("--out", help="write the report CSV here")

    p = sub.add_parser("solve", parents=[common], help="solve one instance and print the solution")
    p.add_argument("instance")
    p.add_argument("--method", choices=("model", "nn", "heuristic", "exact"), default="heuristic")
    p.add_argument("--model")
    _aug_flags(p)
    p.add_argument("--out", help="write the solution file here")

    p = sub.add_parser("validate", parents=[common], help="check a solution against an instance")
    p.add_argument("instance")
    p.add_argument("solution")

    p = sub.add_parser("baseline", parents=[common], help="reference costs with exact or heuristic solvers")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("exact", "heuristic", "nn"), default="heuristic")
    p.add_argument("--out", required=True)

    p = sub.add_parser("cvrplib", parents=[common], help="run a model on CVRPLib instance files")
    p.add_argument("files", nargs="+")
    p.add_argument("--model", required=True)
    p.add_argument("--bks", help="best-known costs CSV (instance_id,cost,optimal_flag)")
    _aug_flags(p)

    p = sub.add_parser("attn-stats", parents=[common], help="dump encoder attention tables")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _aug_flags(p):
    p.add_argument("--k", type=int, help="override the sparse top-k at inference")
    p.add_argument("--prompt-aug", type=int, choices=(1, 32), default=1, help="32 = best over all prompts")
    p.add_argument("--aug8", action="store_true", help="best over the 8 square symmetries")
    p.add_argument("--n-starts", type=int, help="POMO starts (default: n)")


def _config(args) -> dict[str, str]:
    path = args.config or os.environ.get(CONFIG_ENV)
    return read_kv(path) if path else {}


def _load_model(path):
    from .trainer import load_model

    return load_model(path)


def _emit(args, header, rows):
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(header)
        w.writerows(rows)
        sys.stdout.write(buf.getvalue())
    else:
        for row in rows:
            print("  ".join(f"{h}={v}" for h, v in zip(header, row)))


def cmd_generate(args):
    variants = list(VARIANTS.values()) if args.variant.lower() == "all" else [VariantSpec.from_name(args.variant)]
    rng = np.random.default_rng(args.seed)
    insts = []
    for v in variants:
        insts += generate_dataset(args.count, args.n, v, seed=rng)
    save_instances(args.out, insts)
    print(f"wrote {len(insts)} instances to {args.out}", file=sys.stderr)


def cmd_train(args):
    from .trainer import load_profile, train

    overrides = _config(args)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    mc, tc = load_profile(args.profile, overrides)
    rows = train(mc, tc, args.out, resume=args.resume, progress=None if args.csv else lambda r: print(r, flush=True))
    if args.csv:
        _emit(args, ["epoch", "variant", "mean_cost", "loss", "lr"], [[r[k] for k in ("epoch", "variant", "mean_cost", "loss", "lr")] for r in rows])


def _cvrplib_files(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        return sorted(p.glob("*.vrp"))
    return [p] if p.suffix.lower() == ".vrp" else []


def cmd_eval(args):
    files = _cvrplib_files(args.data)
    if files:
        return _eval_cvrplib(args, files, args.refs)
    from .evaluation import evaluate

    model = _load_model(args.model)
    data = load_instances(args.data)
    refs = None
    if args.refs:
        table = baselines.read_reference_costs(args.refs)
        refs = [table[str(i)][0] if str(i) in table else None for i in range(len(data))]
    report = evaluate(data, model, aug8=args.aug8, prompt32=args.prompt_aug == 32, k=args.k, references=refs, n_starts=args.n_starts)
    text = report.to_csv()
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)


def cmd_solve(args):
    insts = load_instances(args.instance)
    if not insts:
        raise CliError("instance file is empty")
    inst = insts[0]
    if args.method == "model":
        if not args.model:
            raise CliError("--method model needs --model")
        from .evaluation import ALL_PROMPTS, best_solutions

        prompts = ALL_PROMPTS if args.prompt_aug == 32 else None
        sol = best_solutions(_load_model(args.model), [inst], aug8=args.aug8, prompts=prompts, k=args.k, n_starts=args.n_starts)[0]
    elif args.method == "exact":
        res = baselines.exact_solve(inst)
        if res.solution is None:
            raise CliError("instance is infeasible")
        sol = res.solution
    elif args.method == "nn":
        sol = baselines.nn_construct(inst)
    else:
        sol = baselines.heuristic_solve(inst).solution
    if args.out:
        sol.save(args.out)
    sys.stdout.write(sol.to_text())


def cmd_validate(args):
    inst = load_instances(args.instance)[0]
    sol = Solution.load(args.solution)
    problems = [str(p) for p in validate_solution(inst, sol.sequence)]
    if problems:
        print("\n".join(problems))
        return 1
    cost = make_solution(inst, sol.sequence).cost
    if abs(cost - sol.cost) > 1e-6 * max(1.0, abs(cost)):
        print(f"cost mismatch: file says {sol.cost!r}, recomputed {cost!r}")
        return 1
    print(f"ok cost {cost!r}")
    return 0


def cmd_baseline(args):
    data = load_instances(args.data)
    rows = []
    for i, inst in enumerate(data):
        if args.method == "exact":
            res = baselines.exact_solve(inst)
        elif args.method == "nn":
            res = baselines.BaselineResult(baselines.nn_construct(inst), False)
        else:
            res = baselines.heuristic_solve(inst)
        rows.append((str(i), res.cost, res.optimal))
    baselines.write_reference_costs(args.out, rows)
    _emit(args, ["instance_id", "cost", "optimal_flag"], [[r[0], repr(r[1]), int(r[2])] for r in rows])


def cmd_cvrplib(args):
    files = [f for path in args.files for f in (_cvrplib_files(path) or [Path(path)])]
    return _eval_cvrplib(args, files, args.bks)


def _eval_cvrplib(args, files, bks_path):
    """Score CVRPLib files with nearest-integer Euclidean lengths on the original coordinates."""
    from .cvrplib import cvrplib_to_instance, parse_cvrplib, rounded_cost
    from .evaluation import ALL_PROMPTS, best_solutions, gap

    model = _load_model(args.model)
    bks = baselines.read_reference_costs(bks_path) if bks_path else {}
    prompts = ALL_PROMPTS if args.prompt_aug == 32 else None
    rows, gaps = [], []
    for path in files:
        parsed = parse_cvrplib(path)
        inst, record = cvrplib_to_instance(parsed)
        t0 = time.perf_counter()
        sol = best_solutions(model, [inst], aug8=args.aug8, prompts=prompts, k=args.k, n_starts=args.n_starts)[0]
        elapsed = time.perf_counter() - t0
        obj = rounded_cost(record, sol.sequence)
        ref = bks.get(parsed.name, (None,))[0]
        g = gap(obj, ref) if ref else None
        if g is not None:
            gaps.append(g)
        rows.append([parsed.name, inst.n, obj, "" if ref is None else repr(ref), "" if g is None else repr(g), f"{elapsed:.3f}"])
    _emit(args, ["instance", "n", "obj", "bks", "gap", "time_s"], rows)
    if gaps and not args.csv:
        print(f"mean gap {np.mean(gaps):.4%} over {len(gaps)} instances")


def cmd_attn_stats(args):
    from .evaluation import attention_stats

    model = _load_model(args.model)
    paths = attention_stats(model, load_instances(args.data), args.out)
    for p in paths:
        print(p)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "solve": cmd_solve,
    "validate": cmd_validate,
    "baseline": cmd_baseline,
    "cvrplib": cmd_cvrplib,
    "attn-stats": cmd_attn_stats,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        return COMMANDS[args.command](args) or 0
    except (CliError, ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
