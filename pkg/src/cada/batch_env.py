"""Vectorised construction environment for batches of trajectories.

Shapes: ``B`` instances, ``P`` trajectories per instance, ``N1 = n + 1`` nodes.
All instances in a batch share the customer count; variants may differ per
instance. Time and distance bookkeeping is float64 and performed in the same
operation order as :mod:`cada.env`, so masks agree bit-for-bit.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

from .env import InfeasibleInstance, make_solution
from .problem import RHO_MAX, Instance, encode_variant


class BatchEnv:
    def __init__(self, instances: Sequence[Instance], device="cpu"):
        if not instances:
            raise ValueError("empty batch")
        n = instances[0].n
        if any(inst.n != n for inst in instances):
            raise ValueError("all instances in a batch need the same customer count")
        self.instances = list(instances)
        self.n = n
        self.B = len(instances)
        f64 = dict(dtype=torch.float64, device=device)
        self.device = device

        def stack(get):
            return torch.as_tensor(np.stack([get(i) for i in instances]), **f64)

        zeros = np.zeros(n + 1)
        self.coords = stack(lambda i: i.coords)
        self.dist = stack(lambda i: i.dist)
        self.demand = torch.as_tensor(
            np.stack([i.demands for i in instances]), dtype=torch.long, device=device
        )
        self.capacity = torch.tensor([i.capacity for i in instances], dtype=torch.long, device=device)
        self.open_route = torch.tensor([i.variant.open_route for i in instances], device=device)
        self.backhaul = torch.tensor([i.variant.backhaul for i in instances], device=device)
        self.limit = torch.tensor([i.variant.duration_limit for i in instances], device=device)
        self.tw = torch.tensor([i.variant.time_window for i in instances], device=device)
        self.tw_start = stack(lambda i: i.tw_start if i.variant.time_window else zeros)
        self.tw_end = stack(lambda i: i.tw_end if i.variant.time_window else zeros)
        self.service = stack(lambda i: i.service if i.variant.time_window else zeros)
        self.horizon = torch.tensor([i.horizon for i in instances], **f64)
        self.rho = torch.tensor(
            [i.dist_limit if i.variant.duration_limit else RHO_MAX for i in instances], **f64
        )
        self.variant_vec = torch.as_tensor(
            np.stack([encode_variant(i.variant) for i in instances]), dtype=torch.float32, device=device
        )

    # ------------------------------------------------------------------ features

    def node_features(self) -> torch.Tensor:
        """Per-node rows ``[x, y, linehaul, backhaul, e, l, s]`` (B, N1, 7), float32.

        Demands are divided by capacity; inactive attributes are zero.
        """
        dem = self.demand.to(torch.float64) / self.capacity[:, None].to(torch.float64)
        tw = self.tw[:, None].to(torch.float64)
        feats = torch.stack(
            [
                self.coords[..., 0],
                self.coords[..., 1],
                dem.clamp(min=0),
                (-dem).clamp(min=0),
                self.tw_start * tw,
                self.tw_end * tw,
                self.service * tw,
            ],
            dim=-1,
        )
        return feats.to(torch.float32)

    # ------------------------------------------------------------------ dynamics

    def reset(self, n_starts: int) -> None:
        if n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        B, P, N1 = self.B, n_starts, self.n + 1
        dev = self.device
        self.P = P
        self.last = torch.zeros(B, P, dtype=torch.long, device=dev)
        self.visited = torch.zeros(B, P, N1, dtype=torch.bool, device=dev)
        self.lin_used = torch.zeros(B, P, dtype=torch.long, device=dev)
        self.back_used = torch.zeros(B, P, dtype=torch.long, device=dev)
        self.clock = torch.zeros(B, P, dtype=torch.float64, device=dev)
        self.len_left = self.rho[:, None].expand(B, P).clone()
        self.done = torch.zeros(B, P, dtype=torch.bool, device=dev)
        self.actions: list[torch.Tensor] = []
        self._bidx = torch.arange(B, device=dev)[:, None].expand(B, P)

    def mask(self) -> torch.Tensor:
        """Boolean (B, P, N1) tensor of feasible actions; finished rows allow only the depot."""
        travel = self.dist[self._bidx, self.last]  # (B, P, N1)
        back = self.dist[:, None, :, 0]  # (B, 1, N1)
        clock = self.clock[..., None]
        left = self.len_left[..., None]
        service = self.service[:, None, :]
        closed = ~self.open_route[:, None, None]
        tw = self.tw[:, None, None]
        lim = self.limit[:, None, None]
        dem = self.demand[:, None, :]

        bad = self.visited.clone()
        bad |= closed & tw & (clock + travel + service + back > self.horizon[:, None, None])
        bad |= closed & lim & (left < travel + back)
        bad |= ~closed & lim & (left < travel)
        bad |= tw & (clock + travel + service > self.tw_end[:, None, :])
        pending = ((dem > 0) & ~self.visited).any(-1, keepdim=True)
        bad |= self.backhaul[:, None, None] & (dem < 0) & pending
        cap = self.capacity[:, None, None]
        bad |= (dem > 0) & (dem > cap - self.lin_used[..., None])
        bad |= (dem < 0) & (-dem > cap - self.back_used[..., None])

        feasible = ~bad
        feasible[..., 0] = self.last != 0
        feasible[self.done] = False
        feasible[..., 0] |= self.done
        return feasible

    def step(self, action: torch.Tensor) -> None:
        a = action.to(torch.long)
        active = ~self.done
        travel = self.dist[self._bidx, self.last, a]
        is_depot = a == 0
        cust = active & ~is_depot
        dem = self.demand.gather(1, a)
        self.visited |= torch.zeros_like(self.visited).scatter_(2, a[..., None], cust[..., None])
        self.lin_used = torch.where(cust & (dem > 0), self.lin_used + dem, self.lin_used)
        self.back_used = torch.where(cust & (dem < 0), self.back_used - dem, self.back_used)

        tw = self.tw[:, None]
        arrive = self.clock + travel
        served = torch.maximum(arrive, self.tw_start.gather(1, a)) + self.service.gather(1, a)
        new_clock = torch.where(tw, served, arrive)
        lim = self.limit[:, None]
        new_left = torch.where(lim, self.len_left - travel, self.len_left)

        depot_step = active & is_depot
        self.clock = torch.where(cust, new_clock, torch.where(depot_step, torch.zeros_like(self.clock), self.clock))
        rho = self.rho[:, None].expand_as(self.len_left)
        self.len_left = torch.where(cust, new_left, torch.where(depot_step, rho, self.len_left))
        self.lin_used = torch.where(depot_step, torch.zeros_like(self.lin_used), self.lin_used)
        self.back_used = torch.where(depot_step, torch.zeros_like(self.back_used), self.back_used)

        all_visited = self.visited[..., 1:].all(-1)
        open_ = self.open_route[:, None]
        finished = active & all_visited & (is_depot | open_)
        self.done = self.done | finished
        self.last = torch.where(active, a, self.last)
        self.actions.append(torch.where(active, a, torch.zeros_like(a)))

    def context(self) -> torch.Tensor:
        """Decoder state features ``[c^l, c^b, z, l, o]`` (B, P, 5), float32."""
        cap = self.capacity[:, None].to(torch.float64)
        feats = torch.stack(
            [
                1.0 - self.lin_used / cap,
                1.0 - self.back_used / cap,
                self.clock,
                self.len_left,
                self.open_route[:, None].expand_as(self.clock).to(torch.float64),
            ],
            dim=-1,
        )
        return feats.to(torch.float32)

    def start_nodes(self, n_starts: int) -> torch.Tensor:
        """Distinct forced first customers per trajectory (POMO multistart).

        Starts are drawn from the customers feasible in the initial state, in
        index order, cycling when fewer than ``n_starts`` are feasible.
        """
        first = self.mask()[:, 0, 1:]  # (B, n)
        out = torch.empty(self.B, n_starts, dtype=torch.long, device=self.device)
        for b in range(self.B):
            cand = torch.nonzero(first[b]).flatten() + 1
            if len(cand) == 0:
                raise InfeasibleInstance("no customer is feasible from the depot")
            reps = -(-n_starts // len(cand))
            out[b] = cand.repeat(reps)[:n_starts]
        return out

    @property
    def all_done(self) -> bool:
        return bool(self.done.all())

    # ------------------------------------------------------------------ results

    def action_tensor(self) -> torch.Tensor:
        return torch.stack(self.actions, dim=-1) if self.actions else torch.zeros(self.B, self.P, 0, dtype=torch.long)

    def costs(self) -> torch.Tensor:
        """Total travel cost (B, P) in float64; open routes skip edges into the depot."""
        acts = self.action_tensor()
        seq = torch.cat([torch.zeros_like(acts[..., :1]), acts], dim=-1)
        src, dst = seq[..., :-1], seq[..., 1:]
        bidx = torch.arange(self.B, device=self.device)[:, None, None]
        legs = self.dist[bidx, src, dst]
        legs = torch.where(self.open_route[:, None, None] & (dst == 0), torch.zeros_like(legs), legs)
        return legs.sum(-1)

    def sequences(self) -> list[list[list[int]]]:
        """Depot-delimited node sequences, trailing padding trimmed to one depot."""
        acts = self.action_tensor().cpu().numpy()
        out = []
        for b in range(self.B):
            row = []
            for p in range(self.P):
                seq = [0] + [int(x) for x in acts[b, p]]
                while len(seq) > 1 and seq[-1] == 0 and seq[-2] == 0:
                    seq.pop()
                row.append(seq)
            out.append(row)
        return out

    def solutions(self):
        return [
            [make_solution(inst, seq) for seq in row]
            for inst, row in zip(self.instances, self.sequences())
        ]


def replay_trace(env: BatchEnv, actions: torch.Tensor, forced_first: bool) -> dict[str, torch.Tensor]:
    """Step ``env`` through a recorded action history and keep what the decoder saw.

    Returns tensors with the decode steps folded into the trajectory axis
    (B, P*T, ...): ``last``, ``context``, ``mask``, ``action`` and ``active``
    (False for padding after a trajectory finished). With ``forced_first`` the
    first column is a POMO start and is excluded from the trace.
    """
    B, P, T = actions.shape
    env.reset(P)
    cols = range(T)
    if forced_first:
        env.step(actions[..., 0])
        cols = range(1, T)
    keep = {"last": [], "context": [], "mask": [], "action": [], "active": []}
    for t in cols:
        keep["last"].append(env.last.clone())
        keep["context"].append(env.context())
        keep["mask"].append(env.mask())
        keep["action"].append(actions[..., t])
        keep["active"].append(~env.done)
        env.step(actions[..., t])
    return {key: torch.cat(v, dim=1) for key, v in keep.items()}


def run_policy(env: BatchEnv, choose, n_starts: int = 1, starts: Optional[torch.Tensor] = None, max_steps: Optional[int] = None):
    """Drive ``env`` to completion with ``choose(mask) -> actions``."""
    env.reset(n_starts)
    if starts is not None:
        env.step(starts)
    limit = max_steps or 4 * (env.n + 1) + 4
    for _ in range(limit):
        if env.all_done:
            return env
        mask = env.mask()
        if not mask.any(-1).all():
            raise InfeasibleInstance("empty action mask")
        env.step(choose(mask))
    if not env.all_done:
        raise RuntimeError("episode did not terminate")
    return env
