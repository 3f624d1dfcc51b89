"""Reference solvers: exact enumeration for tiny instances and a construction + 2-opt heuristic."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .env import InfeasibleInstance, Solution, feasible_actions, make_solution, reset, step, validate_solution
from .problem import Instance

EXACT_MAX_N = 8
_TOL = 1e-9


@dataclass
class BaselineResult:
    solution: Optional[Solution]
    optimal: bool
    nodes_explored: int = 0

    @property
    def cost(self) -> float:
        return self.solution.cost if self.solution is not None else float("inf")


def _feasible_routes(inst: Instance) -> tuple[list[tuple[tuple[int, ...], float]], int]:
    """Every feasible single route as (customers, cost), plus the number of search nodes.

    Feasibility follows the per-route semantics of :func:`validate_solution`.
    A prefix that breaks a monotone constraint (load, window, backhaul order,
    travelled length) is pruned; depot-return checks are applied at the end only.
    """
    v = inst.variant
    n = inst.n
    d = inst.dist.tolist()
    dem = [int(x) for x in inst.demands]
    cap = inst.capacity
    tw = v.time_window
    if tw:
        e, l, s = inst.tw_start.tolist(), inst.tw_end.tolist(), inst.service.tolist()
    rho = inst.dist_limit if v.duration_limit else None
    closed = not v.open_route
    found = []
    counter = 0

    def end_ok(last, t, length):
        if closed:
            if tw and t + d[last][0] > inst.horizon + _TOL:
                return False
            if rho is not None and length + d[last][0] > rho + _TOL:
                return False
        return True

    def extend(route, used, last, t, length, lin, back, seen_back):
        nonlocal counter
        counter += 1
        if route and end_ok(last, t, length):
            found.append((tuple(route), length + (d[last][0] if closed else 0.0)))
        for c in range(1, n + 1):
            if used >> c & 1:
                continue
            q = dem[c]
            nl, nb = (lin + q, back) if q >= 0 else (lin, back - q)
            if nl > cap or nb > cap:
                continue
            if v.backhaul and q >= 0 and seen_back:
                continue
            arrive = t + d[last][c]
            nlen = length + d[last][c]
            if tw:
                if arrive + s[c] > l[c] + _TOL:
                    continue
                nt = max(arrive, e[c]) + s[c]
            else:
                nt = arrive
            if rho is not None and nlen > rho + _TOL:
                continue
            route.append(c)
            extend(route, used | 1 << c, c, nt, nlen, nl, nb, seen_back or q < 0)
            route.pop()

    extend([], 0, 0, 0.0, 0.0, 0, 0, False)
    return found, counter


def _best_routes_held_karp(inst: Instance) -> tuple[dict[int, tuple[float, tuple[int, ...]]], int]:
    """Cheapest feasible route per customer subset when no time windows apply.

    Without time windows every remaining constraint depends on the subset
    (loads), on consecutive pairs (backhaul order) or on the length being
    minimised (duration limit), so a path DP over (subset, last) is exact.
    """
    v = inst.variant
    n = inst.n
    d = inst.dist.tolist()
    dem = [int(x) for x in inst.demands]
    cap = inst.capacity
    rho = inst.dist_limit if v.duration_limit else None
    closed = not v.open_route
    full = 1 << n
    lin = [0] * full
    back = [0] * full
    for mask in range(1, full):
        low = (mask & -mask).bit_length()  # customer index of the lowest set bit
        rest = mask & (mask - 1)
        q = dem[low]
        lin[mask] = lin[rest] + max(q, 0)
        back[mask] = back[rest] + max(-q, 0)
    INF = float("inf")
    path = [[INF] * (n + 1) for _ in range(full)]
    prev = [[0] * (n + 1) for _ in range(full)]
    work = 0
    for c in range(1, n + 1):
        path[1 << (c - 1)][c] = d[0][c]
    out = {}
    for mask in range(1, full):
        if lin[mask] > cap or back[mask] > cap:
            continue
        best = (INF, 0)
        for last in range(1, n + 1):
            length = path[mask][last]
            if length == INF:
                continue
            total = length + (d[last][0] if closed else 0.0)
            if (rho is None or total <= rho + _TOL) and total < best[0]:
                best = (total, last)
            for c in range(1, n + 1):
                bit = 1 << (c - 1)
                if mask & bit:
                    continue
                if v.backhaul and dem[last] < 0 and dem[c] >= 0:
                    continue
                work += 1
                cand = length + d[last][c]
                if cand < path[mask | bit][c]:
                    path[mask | bit][c] = cand
                    prev[mask | bit][c] = last
        if best[0] < INF:
            route, m, last = [], mask, best[1]
            while last:
                route.append(last)
                m, last = m ^ (1 << (last - 1)), prev[m][last]
            out[mask] = (best[0], tuple(reversed(route)))
    return out, work


def exact_solve(inst: Instance) -> BaselineResult:
    """Provably optimal solution for n <= 8 by route enumeration plus set-partition DP."""
    n = inst.n
    if n > EXACT_MAX_N:
        raise ValueError(f"exact_solve is limited to n <= {EXACT_MAX_N} (got {n})")
    if inst.variant.time_window:
        best_route: dict[int, tuple[float, tuple[int, ...]]] = {}
        routes, explored = _feasible_routes(inst)
        for route, cost in routes:
            key = 0
            for c in route:
                key |= 1 << (c - 1)
            cur = best_route.get(key)
            if cur is None or cost < cur[0] - 1e-15:
                best_route[key] = (cost, route)
    else:
        best_route, explored = _best_routes_held_karp(inst)
    full = (1 << n) - 1
    INF = float("inf")
    best = [INF] * (full + 1)
    choice = [0] * (full + 1)
    best[0] = 0.0
    for mask in range(1, full + 1):
        low = mask & -mask
        sub = mask
        # every sub-route set that covers the lowest customer of mask
        while sub:
            if sub & low and sub in best_route:
                c = best_route[sub][0] + best[mask ^ sub]
                if c < best[mask]:
                    best[mask] = c
                    choice[mask] = sub
            sub = (sub - 1) & mask
    if best[full] == INF:
        return BaselineResult(None, True, explored)
    seq = [0]
    mask = full
    while mask:
        sub = choice[mask]
        seq += list(best_route[sub][1]) + [0]
        mask ^= sub
    sol = make_solution(inst, seq)
    problems = validate_solution(inst, seq)
    if problems:  # the enumeration and the validator disagree; never return silently
        raise AssertionError(f"exact solver produced an invalid solution: {problems[0]}")
    return BaselineResult(sol, True, explored)


def nn_construct(inst: Instance) -> Solution:
    """Nearest feasible neighbour; return to the depot when no customer qualifies."""
    (state,) = reset(inst, 1)
    d = inst.dist
    while not state.done:
        mask = feasible_actions(state, inst)
        cand = np.flatnonzero(mask[1:]) + 1
        if len(cand):
            action = int(cand[np.argmin(d[state.last_node, cand])])
        elif mask[0]:
            action = 0
        else:
            raise InfeasibleInstance(f"no feasible move from {state.partial_solution}")
        state = step(state, action, inst)
    return make_solution(inst, state.partial_solution)


def two_opt(sol: Solution, inst: Instance, max_moves: Optional[int] = None) -> Solution:
    """Intra-route segment reversals, accepted only if strictly cheaper and still feasible."""
    max_moves = 10 * inst.n if max_moves is None else max_moves
    seq = list(sol.sequence)
    cost = make_solution(inst, seq).cost
    moves = 0
    improved = True
    while improved and moves < max_moves:
        improved = False
        depots = [p for p, x in enumerate(seq) if x == 0]
        bounds = list(zip(depots, depots[1:] + [len(seq)]))
        for lo, hi in bounds:
            # customers occupy positions lo+1 .. hi-1
            for i in range(lo + 1, hi - 1):
                for j in range(i + 1, hi):
                    cand = seq[:i] + seq[i : j + 1][::-1] + seq[j + 1 :]
                    c = make_solution(inst, cand).cost
                    if c < cost - 1e-12 and not validate_solution(inst, cand):
                        seq, cost = cand, c
                        moves += 1
                        improved = True
                        break
                if improved or moves >= max_moves:
                    break
            if improved or moves >= max_moves:
                break
    return make_solution(inst, seq)


def heuristic_solve(inst: Instance) -> BaselineResult:
    return BaselineResult(two_opt(nn_construct(inst), inst), False)


# ---------------------------------------------------------------------------
# reference-cost files


def write_reference_costs(path, rows: Iterable[tuple[str, float, bool]]) -> None:
    from .io_utils import atomic_write_text

    lines = ["instance_id,cost,optimal_flag"]
    lines += [f"{iid},{cost!r},{int(bool(opt))}" for iid, cost, opt in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_reference_costs(path) -> dict[str, tuple[float, bool]]:
    with open(Path(path), newline="") as fh:
        return {
            row["instance_id"]: (float(row["cost"]), row["optimal_flag"].strip() in ("1", "true", "True"))
            for row in csv.DictReader(fh)
        }
