"""Prompt-conditioned dual-branch encoder and autoregressive decoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import tensor_ad as ad
from .batch_env import BatchEnv, run_policy
from .env import InfeasibleInstance, State
from .problem import Instance, encode_variant

NODE_FEATURES = ("x", "y", "linehaul", "backhaul", "tw_start", "tw_end", "service")
CONTEXT_FEATURES = ("remaining_linehaul", "remaining_backhaul", "clock", "route_len_left", "open")
SPARSE_FUNCTIONS = ("topk", "topk_literal", "softmax", "entmax15", "sparsemax")


@dataclass
class ModelConfig:
    d_h: int = 128
    heads: int = 8
    layers: int = 6
    d_a: int = 512
    k: Optional[int] = None  # None -> ceil(n / 2) for the instance at hand
    xi: float = 10.0
    prompt_position: str = "global"  # "global" | "sparse"
    sparse_function: str = "topk"
    use_prompt: bool = True  # False zeroes the prompt embedding

    def __post_init__(self):
        if self.d_h % self.heads:
            raise ValueError("d_h must be divisible by heads")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        if self.prompt_position not in ("global", "sparse"):
            raise ValueError(f"bad prompt_position {self.prompt_position!r}")
        if self.sparse_function not in SPARSE_FUNCTIONS:
            raise ValueError(f"bad sparse_function {self.sparse_function!r}")

    def k_for(self, n: int) -> int:
        return self.k if self.k is not None else math.ceil(n / 2)

    def to_kv(self) -> dict[str, str]:
        return {k: ("none" if v is None else str(v)) for k, v in asdict(self).items()}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in kv.items():
            if key not in types:
                continue
            t = types[key]
            if raw.lower() == "none":
                out[key] = None
            elif "bool" in str(t):
                out[key] = raw.lower() in ("1", "true", "yes")
            elif "int" in str(t):
                out[key] = int(raw)
            elif "float" in str(t):
                out[key] = float(raw)
            else:
                out[key] = raw
        return cls(**out)


def _uniform_(t: torch.Tensor, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.init.uniform_(t, -bound, bound)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(_uniform_(torch.empty(d_in, d_out), d_in))
        self.bias = nn.Parameter(_uniform_(torch.empty(d_out), d_in)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class MHA(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.wq = Linear(d, d, bias=False)
        self.wk = Linear(d, d, bias=False)
        self.wv = Linear(d, d, bias=False)
        self.wp = Linear(d, d, bias=False)

    def split(self, x):
        *lead, t, d = x.shape
        return x.view(*lead, t, self.heads, d // self.heads).transpose(-2, -3)

    def forward(self, x, y, kind="softmax", k=None, record=None):
        q, kk, v = self.split(self.wq(x)), self.split(self.wk(y)), self.split(self.wv(y))
        scores = q @ kk.transpose(-1, -2) / math.sqrt(q.shape[-1])
        attn = ad.attention_weights(scores, kind, k)
        if record is not None:
            record.append(attn.detach())
        z = (attn @ v).transpose(-2, -3).flatten(-2)
        return self.wp(z)


class SwiGLU(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.w1 = Linear(d, hidden)
        self.w2 = Linear(d, hidden)
        self.w3 = Linear(hidden, d, bias=False)

    def forward(self, x):
        return ad.swiglu(x, self.w1.weight, self.w1.bias, self.w2.weight, self.w2.bias, self.w3.weight)


class RMSNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))

    def forward(self, x):
        return ad.rmsnorm(x, self.gain)


class Block(nn.Module):
    """Attention + SwiGLU with post-residual RMSNorm; shared by both branches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MHA(cfg.d_h, cfg.heads)
        self.norm1 = RMSNorm(cfg.d_h)
        self.ffn = SwiGLU(cfg.d_h, cfg.d_a)
        self.norm2 = RMSNorm(cfg.d_h)

    def forward(self, x, kind="softmax", k=None, record=None):
        h = self.norm1(x + self.attn(x, x, kind, k, record))
        return self.norm2(h + self.ffn(h))


class PromptMLP(nn.Module):
    def __init__(self, d_h: int):
        super().__init__()
        self.wa = Linear(5, d_h)
        self.norm = nn.LayerNorm(d_h)
        self.wb = Linear(d_h, d_h)

    def forward(self, v):
        return self.wb(self.norm(self.wa(v)))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.prompt = PromptMLP(cfg.d_h)
        self.depot_embed = Linear(len(NODE_FEATURES), cfg.d_h)
        self.node_embed = Linear(len(NODE_FEATURES), cfg.d_h)
        self.global_layers = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.sparse_layers = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.fuse_s = nn.ModuleList(Linear(cfg.d_h, cfg.d_h) for _ in range(cfg.layers))
        self.fuse_g = nn.ModuleList(Linear(cfg.d_h, cfg.d_h) for _ in range(cfg.layers))

    def embed_prompt(self, v: torch.Tensor) -> torch.Tensor:
        p = self.prompt(v)
        return p if self.cfg.use_prompt else torch.zeros_like(p)

    def init_node_embed(self, feats: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.depot_embed(feats[..., :1, :]), self.node_embed(feats[..., 1:, :])], dim=-2)

    def global_layer(self, i, h, p, record=None):
        """One global-branch layer; returns (nodes, prompt). ``p`` may be None."""
        x = h if p is None else torch.cat([h, p], dim=-2)
        out = self.global_layers[i](x, "softmax", None, record)
        if p is None:
            return out, None
        return out[..., :-1, :], out[..., -1:, :]

    def sparse_layer(self, i, h, k, p=None, record=None):
        x = h if p is None else torch.cat([h, p], dim=-2)
        out = self.sparse_layers[i](x, self.cfg.sparse_function, k, record)
        if p is None:
            return out, None
        return out[..., :-1, :], out[..., -1:, :]

    def fuse(self, i, hg, hs):
        return hg + self.fuse_s[i](hs), hs + self.fuse_g[i](hg)

    def forward(self, feats, v, k, record: Optional[dict] = None):
        """feats (B, N1, 7), v (B, 5) -> (node embeddings (B, N1, d_h), prompt (B, 1, d_h))."""
        h = self.init_node_embed(feats)
        p = self.embed_prompt(v)[..., None, :]
        hg = hs = h
        on_global = self.cfg.prompt_position == "global"
        for i in range(self.cfg.layers):
            rg = [] if record is not None else None
            rs = [] if record is not None else None
            if on_global:
                hg, p = self.global_layer(i, hg, p, rg)
                hs, _ = self.sparse_layer(i, hs, k, None, rs)
            else:
                hg, _ = self.global_layer(i, hg, None, rg)
                hs, p = self.sparse_layer(i, hs, k, p, rs)
            hg, hs = self.fuse(i, hg, hs)
            if record is not None:
                record.setdefault("global", []).extend(rg)
                record.setdefault("sparse", []).extend(rs)
        return hg, p


@dataclass
class Encoding:
    nodes: torch.Tensor  # (B, N1, d_h)
    prompt: torch.Tensor  # (B, 1, d_h)
    glimpse_k: torch.Tensor
    glimpse_v: torch.Tensor
    logit_k: torch.Tensor


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.context = Linear(cfg.d_h + len(CONTEXT_FEATURES), cfg.d_h, bias=False)
        self.glimpse = MHA(cfg.d_h, cfg.heads)
        self.logit_key = Linear(cfg.d_h, cfg.d_h, bias=False)

    def precompute(self, nodes, prompt) -> Encoding:
        g = self.glimpse
        return Encoding(nodes, prompt, g.split(g.wk(nodes)), g.split(g.wv(nodes)), self.logit_key(nodes))

    def logits(self, enc: Encoding, last: torch.Tensor, ctx: torch.Tensor, mask: torch.Tensor):
        """last (B, P), ctx (B, P, 5), mask (B, P, N1) -> compatibilities with -inf on infeasible nodes."""
        B, P = last.shape
        h_last = enc.nodes.gather(1, last[..., None].expand(B, P, enc.nodes.shape[-1]))
        hc = self.context(torch.cat([h_last, ctx], dim=-1))
        g = self.glimpse
        q = g.split(g.wq(hc))  # (B, heads, P, dk)
        dk = q.shape[-1]
        scores = q @ enc.glimpse_k.transpose(-1, -2) / math.sqrt(dk)  # (B, heads, P, N1)
        scores = scores.masked_fill(~mask[:, None], ad.NEG_INF)
        attn = ad.softmax(scores)
        glimpse = g.wp((attn @ enc.glimpse_v).transpose(1, 2).flatten(-2))  # (B, P, d_h)
        u = glimpse @ enc.logit_k.transpose(-1, -2) / math.sqrt(dk)
        u = self.cfg.xi * torch.tanh(u)
        return u.masked_fill(~mask, ad.NEG_INF)


class CaDA(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)

    # -------------------------------------------------------------- encoding

    def encode_env(self, env: BatchEnv, prompt: Optional[torch.Tensor] = None, k: Optional[int] = None, record=None) -> Encoding:
        dtype = next(self.parameters()).dtype
        feats = env.node_features().to(dtype)
        v = (env.variant_vec if prompt is None else prompt.expand(env.B, 5)).to(dtype)
        nodes, p = self.encoder(feats, v, k or self.cfg.k_for(env.n), record)
        return self.decoder.precompute(nodes, p)

    def encode(self, instance: Instance, v=None, k=None) -> Encoding:
        env = BatchEnv([instance])
        prompt = None if v is None else torch.as_tensor(np.asarray(v, dtype=np.float32))[None]
        return self.encode_env(env, prompt, k)

    # -------------------------------------------------------------- decoding

    def decode_step(self, enc: Encoding, state: State, instance: Instance) -> torch.Tensor:
        """Action probabilities (n+1,) for one reference-environment state."""
        from .env import feasible_actions

        mask = torch.as_tensor(feasible_actions(state, instance))[None, None]
        if not mask.any():
            raise InfeasibleInstance("no feasible action")
        dtype = enc.nodes.dtype
        last = torch.tensor([[state.last_node]])
        ctx = torch.tensor([[state.context()]], dtype=dtype)
        u = self.decoder.logits(enc, last, ctx, mask)
        return ad.softmax(u)[0, 0]

    def rollout(
        self,
        env: BatchEnv,
        mode: str = "greedy",
        n_starts: Optional[int] = None,
        prompt: Optional[torch.Tensor] = None,
        k: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
        record=None,
        actions: Optional[torch.Tensor] = None,
    ):
        """Decode every instance in ``env``; returns (costs (B, P), summed log-probs (B, P)).

        With ``n_starts`` set, the first customer of each trajectory is forced to a
        distinct node (POMO); otherwise a single free trajectory per instance.
        ``actions`` (B, P, T) replays a recorded action history (as returned by
        ``env.action_tensor()``) instead of choosing, which makes the log-prob a
        smooth function of the parameters for finite-difference checks.
        """
        if mode not in ("greedy", "sample"):
            raise ValueError(f"bad mode {mode!r}")
        enc = self.encode_env(env, prompt, k, record)
        dtype = enc.nodes.dtype
        if n_starts:
            env.reset(n_starts)
            env.step(env.start_nodes(n_starts) if actions is None else actions[..., 0])
        else:
            env.reset(1 if actions is None else actions.shape[1])
        logp = torch.zeros(env.B, env.P, dtype=dtype)
        for _ in range(4 * (env.n + 1) + 4):
            if env.all_done:
                break
            mask = env.mask()
            if not mask.any(-1).all():
                raise InfeasibleInstance("empty action mask")
            u = self.decoder.logits(enc, env.last, env.context().to(dtype), mask)
            lp = torch.log_softmax(u, dim=-1)
            if actions is not None:
                a = actions[..., len(env.actions)]
            elif mode == "greedy":
                a = u.argmax(-1)
            else:
                probs = lp.detach().exp().view(-1, u.shape[-1])
                a = torch.multinomial(probs, 1, generator=generator).view(env.B, env.P)
            chosen = lp.gather(-1, a[..., None]).squeeze(-1)
            logp = logp + torch.where(env.done, torch.zeros_like(chosen), chosen)
            env.step(a)
        else:
            raise RuntimeError("decoding did not terminate")
        return env.costs(), logp

    def replay_logp(self, env: BatchEnv, trace: dict, prompt=None, k=None):
        """Summed log-probs (B, P) of a trace from :func:`cada.batch_env.replay_trace`.

        All decode steps go through the decoder in one batched call, so this is
        much cheaper than ``rollout(..., actions=...)`` when the same
        trajectories are re-scored many times (finite differences). Both give
        the same value.
        """
        enc = self.encode_env(env, prompt, k)
        u = self.decoder.logits(enc, trace["last"], trace["context"].to(enc.nodes.dtype), trace["mask"])
        lp = torch.log_softmax(u, dim=-1).gather(-1, trace["action"][..., None]).squeeze(-1)
        lp = torch.where(trace["active"], lp, torch.zeros_like(lp))
        return lp.view(env.B, -1, env.P).sum(1)

    def solve(self, instances: Sequence[Instance], n_starts: Optional[int] = None, **kw):
        """Greedy best-of-starts solutions for a list of same-size instances."""
        env = BatchEnv(instances)
        with torch.no_grad():
            costs, _ = self.rollout(env, "greedy", n_starts, **kw)
        best = costs.argmin(1)
        sols = env.solutions()
        return [row[int(b)] for row, b in zip(sols, best)]

    # -------------------------------------------------------------- persistence

    def save(self, path) -> None:
        from .io_utils import atomic_write_text, format_kv

        ad.save_tensors(path, self.state_dict())
        atomic_write_text(str(path) + ".cfg", format_kv(self.cfg.to_kv()))

    @classmethod
    def load(cls, path) -> "CaDA":
        from .io_utils import read_kv

        cfg = ModelConfig.from_kv(read_kv(str(path) + ".cfg"))
        model = cls(cfg)
        model.load_state_dict(ad.load_tensors(path))
        return model
