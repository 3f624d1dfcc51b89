"""Single-trajectory construction MDP, feasibility masking and an independent validator.

This is the reference, one-state-at-a-time implementation. The vectorised
version used by the neural policy lives in :mod:`cada.batch_env` and is checked
against the same brute-force oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .problem import RHO_MAX, Instance


class InfeasibleAction(ValueError):
    """Raised when stepping with an action the mask forbids."""

    def __init__(self, action: int, rule: int, reason: str):
        super().__init__(f"action {action} violates rule {rule}: {reason}")
        self.action = action
        self.rule = rule


class InfeasibleInstance(RuntimeError):
    """No action is feasible from a non-terminal state."""


class MalformedSequence(ValueError):
    pass


@dataclass
class State:
    actions: list[int]
    visited: list[bool]  # index 0 (depot) is always False
    linehaul_used: int  # raw demand units delivered on the current route
    backhaul_used: int
    capacity: int
    clock: float
    route_len_left: float
    open_flag: bool
    done: bool = False

    @property
    def last_node(self) -> int:
        return self.actions[-1] if self.actions else 0

    @property
    def partial_solution(self) -> list[int]:
        # the initial depot departure is implicit
        return [0] + self.actions

    @property
    def load_linehaul_used(self) -> float:
        return self.linehaul_used / self.capacity

    @property
    def load_backhaul_used(self) -> float:
        return self.backhaul_used / self.capacity

    @property
    def remaining_linehaul(self) -> float:
        return 1.0 - self.load_linehaul_used

    @property
    def remaining_backhaul(self) -> float:
        return 1.0 - self.load_backhaul_used

    def context(self) -> list[float]:
        """The five scalar features fed to the decoder: c^l, c^b, z, l, o."""
        return [
            self.remaining_linehaul,
            self.remaining_backhaul,
            self.clock,
            self.route_len_left,
            1.0 if self.open_flag else 0.0,
        ]

    def copy(self) -> "State":
        return State(
            actions=list(self.actions),
            visited=list(self.visited),
            linehaul_used=self.linehaul_used,
            backhaul_used=self.backhaul_used,
            capacity=self.capacity,
            clock=self.clock,
            route_len_left=self.route_len_left,
            open_flag=self.open_flag,
            done=self.done,
        )


def _route_limit(instance: Instance) -> float:
    return instance.dist_limit if instance.variant.duration_limit else RHO_MAX


def reset(instance: Instance, n_starts: int = 1) -> list[State]:
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    return [
        State(
            actions=[],
            visited=[False] * (instance.n + 1),
            linehaul_used=0,
            backhaul_used=0,
            capacity=instance.capacity,
            clock=0.0,
            route_len_left=_route_limit(instance),
            open_flag=instance.variant.open_route,
        )
        for _ in range(n_starts)
    ]


def _check(state: State, instance: Instance, i: int) -> Optional[tuple[int, str]]:
    """Return (rule, reason) if moving to node i is forbidden, else None."""
    v = instance.variant
    last = state.last_node
    if i == 0:
        if last == 0:
            return 1, "depot self-loop"
        return None
    if state.visited[i]:
        return 1, "customer already visited"
    d = instance.dist
    travel = d[last, i]
    if not v.open_route:
        if v.time_window and state.clock + travel + instance.service[i] + d[i, 0] > instance.horizon:
            return 2, "cannot return to depot before horizon"
        if v.duration_limit and state.route_len_left < travel + d[i, 0]:
            return 2, "route length limit on return"
    elif v.duration_limit and state.route_len_left < travel:
        return 2, "route length limit"
    if v.time_window and state.clock + travel + instance.service[i] > instance.tw_end[i]:
        return 3, "time window closes before service ends"
    dem = int(instance.demands[i])
    if v.backhaul and dem < 0:
        pending = any(
            instance.demands[j] > 0 and not state.visited[j] for j in range(1, instance.n + 1)
        )
        if pending:
            return 4, "linehaul customers still unserved"
    if dem > 0 and dem > state.capacity - state.linehaul_used:
        return 5, "linehaul demand exceeds remaining capacity"
    if dem < 0 and -dem > state.capacity - state.backhaul_used:
        return 5, "backhaul demand exceeds remaining capacity"
    return None


def feasible_actions(state: State, instance: Instance) -> np.ndarray:
    return np.array([_check(state, instance, i) is None for i in range(instance.n + 1)])


def step(state: State, action: int, instance: Instance) -> State:
    """Return the successor state; ``state`` is left untouched."""
    if state.done:
        raise ValueError("episode already finished")
    bad = _check(state, instance, action)
    if bad is not None:
        raise InfeasibleAction(action, *bad)
    v = instance.variant
    s = state.copy()
    travel = float(instance.dist[state.last_node, action])
    s.actions.append(action)
    if action == 0:
        s.linehaul_used = 0
        s.backhaul_used = 0
        s.clock = 0.0
        s.route_len_left = _route_limit(instance)
        s.done = all(s.visited[1:])
        return s
    s.visited[action] = True
    dem = int(instance.demands[action])
    if dem > 0:
        s.linehaul_used += dem
    else:
        s.backhaul_used += -dem
    if v.time_window:
        s.clock = max(s.clock + travel, float(instance.tw_start[action])) + float(
            instance.service[action]
        )
    else:
        s.clock = s.clock + travel
    if v.duration_limit:
        s.route_len_left = s.route_len_left - travel
    if v.open_route and all(s.visited[1:]):
        s.actions.append(0)
        s.done = True
    return s


# ---------------------------------------------------------------------------
# solutions


@dataclass
class Solution:
    sequence: list[int]
    cost: float
    routes: list[list[int]] = field(default_factory=list)

    def to_text(self) -> str:
        return f"cost {self.cost!r}\nseq {' '.join(map(str, self.sequence))}\n"

    @classmethod
    def from_text(cls, text: str) -> "Solution":
        cost, seq = None, None
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "cost":
                cost = float(parts[1])
            elif parts[0] == "seq":
                seq = [int(p) for p in parts[1:]]
        if seq is None:
            raise ValueError("solution file lacks a 'seq' line")
        return cls(seq, cost if cost is not None else float("nan"), decompose_routes(seq))

    def save(self, path) -> None:
        from .io_utils import atomic_write_text

        atomic_write_text(path, self.to_text())

    @classmethod
    def load(cls, path) -> "Solution":
        return cls.from_text(Path(path).read_text())


def decompose_routes(sequence: Sequence[int]) -> list[list[int]]:
    """Split a depot-delimited sequence into sub-routes.

    Closed sub-routes keep both depot ends; a final route without a trailing depot
    (open-route style) is returned as-is.
    """
    seq = list(sequence)
    if not seq or seq[0] != 0:
        raise MalformedSequence("sequence must start at the depot")
    routes, cur = [], [0]
    for pos, node in enumerate(seq[1:], 1):
        if node == 0:
            if len(cur) == 1:
                raise MalformedSequence(f"consecutive depots at position {pos}")
            cur.append(0)
            routes.append(cur)
            cur = [0]
        else:
            cur.append(node)
    if len(cur) > 1:
        routes.append(cur)
    return routes


def solution_cost(instance: Instance, sequence: Sequence[int]) -> float:
    d = instance.dist
    open_route = instance.variant.open_route
    total = 0.0
    for a, b in zip(sequence[:-1], sequence[1:]):
        if open_route and b == 0:
            continue
        total += float(d[a, b])
    return total


def make_solution(instance: Instance, sequence: Sequence[int]) -> Solution:
    seq = [int(x) for x in sequence]
    return Solution(seq, solution_cost(instance, seq), decompose_routes(seq))


def reward(solution: Solution | Sequence[int], instance: Instance) -> float:
    seq = solution.sequence if isinstance(solution, Solution) else solution
    return -solution_cost(instance, seq)


@dataclass(frozen=True)
class Violation:
    kind: str
    position: int
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind} at position {self.position}: {self.detail}"


def validate_solution(instance: Instance, sequence: Sequence[int], tol: float = 1e-9) -> list[Violation]:
    """Re-simulate ``sequence`` route by route and list every constraint violation.

    An empty list means the sequence is a complete feasible solution.
    """
    out: list[Violation] = []
    v = instance.variant
    n = instance.n
    seq = list(sequence)
    if not seq or seq[0] != 0:
        return [Violation("structure", 0, "sequence must start at the depot")]
    for pos, node in enumerate(seq):
        if not 0 <= node <= n:
            out.append(Violation("structure", pos, f"node {node} out of range"))
    if out:
        return out
    for pos in range(1, len(seq)):
        if seq[pos] == 0 and seq[pos - 1] == 0:
            out.append(Violation("structure", pos, "consecutive depots"))
    if not v.open_route and seq[-1] != 0:
        out.append(Violation("unclosed route", len(seq) - 1, "closed route must end at the depot"))

    seen: dict[int, int] = {}
    for pos, node in enumerate(seq):
        if node == 0:
            continue
        if node in seen:
            out.append(Violation("revisit", pos, f"customer {node} first visited at {seen[node]}"))
        else:
            seen[node] = pos
    for c in range(1, n + 1):
        if c not in seen:
            out.append(Violation("unvisited", len(seq), f"customer {c} never visited"))

    d = instance.dist
    demands = instance.demands
    cap = instance.capacity
    # split into routes by index, without relying on decompose_routes
    starts = [p for p, node in enumerate(seq) if node == 0]
    for r, start in enumerate(starts):
        end = starts[r + 1] if r + 1 < len(starts) else len(seq)
        customers = seq[start + 1 : end]
        if not customers:
            continue
        delivered = picked = 0
        seen_backhaul = False
        t = 0.0
        length = 0.0
        prev = 0
        for offset, c in enumerate(customers):
            pos = start + 1 + offset
            q = int(demands[c])
            if q >= 0:
                delivered += q
                if v.backhaul and seen_backhaul:
                    out.append(Violation("backhaul order", pos, f"linehaul {c} after a backhaul"))
            else:
                picked -= q
                seen_backhaul = True
            arrive = t + d[prev, c]
            length += d[prev, c]
            if v.time_window:
                if arrive + instance.service[c] > instance.tw_end[c] + tol:
                    out.append(Violation("time window", pos, f"customer {c} served past {instance.tw_end[c]:.6g}"))
                t = max(arrive, instance.tw_start[c]) + instance.service[c]
            else:
                t = arrive
            prev = c
        last = start + len(customers)
        if delivered > cap:
            out.append(Violation("capacity", last, f"linehaul load {delivered} > {cap}"))
        if picked > cap:
            out.append(Violation("capacity", last, f"backhaul load {picked} > {cap}"))
        if not v.open_route:
            t += d[prev, 0]
            length += d[prev, 0]
            if v.time_window and t > instance.horizon + tol:
                out.append(Violation("horizon", last, f"returns at {t:.6g} > {instance.horizon}"))
        if v.duration_limit and length > instance.dist_limit + tol:
            out.append(Violation("distance limit", last, f"route length {length:.6g} > {instance.dist_limit:.6g}"))
    return out


def rollout_sequence(instance: Instance, policy) -> list[int]:
    """Drive one episode with ``policy(state, mask) -> action``."""
    (state,) = reset(instance, 1)
    while not state.done:
        mask = feasible_actions(state, instance)
        if not mask.any():
            raise InfeasibleInstance(f"no feasible action after {state.partial_solution}")
        state = step(state, policy(state, mask), instance)
    return state.partial_solution
