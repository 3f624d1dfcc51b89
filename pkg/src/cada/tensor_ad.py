"""Differentiable primitives used by the encoder/decoder, on top of torch autograd.

Besides the forward ops this module holds the gradient-checking oracle
(central finite differences) and the flat binary checkpoint format.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

RMS_EPS = 1e-6
NEG_INF = float("-inf")


class UsageError(RuntimeError):
    pass


class EmptySupportError(ValueError):
    pass


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Row softmax; ``-inf`` entries get exactly zero weight.

    A row that is entirely ``-inf`` has no support and raises.
    """
    # torch.softmax subtracts the row max internally; an all -inf row comes back as NaN
    out = torch.softmax(x, dim=dim)
    if torch.isnan(out).any() and torch.isneginf(x).all(dim=dim).any():
        raise EmptySupportError("softmax over a row with no finite entries")
    return out


def rmsnorm(x: torch.Tensor, gain: torch.Tensor, eps: float = RMS_EPS) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * gain


def swiglu(x, w1, b1, w2, b2, w3) -> torch.Tensor:
    """Gated feed-forward: ``(sigmoid(x W1 + b1) * SiLU(x W2 + b2)) W3``."""
    d_in = x.shape[-1]
    if w1.shape[0] != d_in or w2.shape[0] != d_in or w1.shape != w2.shape or w3.shape[0] != w1.shape[1]:
        raise ValueError(
            f"swiglu shape mismatch: x[..., {d_in}], W1{tuple(w1.shape)}, W2{tuple(w2.shape)}, W3{tuple(w3.shape)}"
        )
    gate = torch.sigmoid(x @ w1 + b1)
    a = x @ w2 + b2
    return (gate * (a * torch.sigmoid(a))) @ w3


def topk_keep(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean mask of the ``min(k, n)`` largest entries per row; ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = scores.shape[-1]
    if k >= n:
        return torch.ones_like(scores, dtype=torch.bool)
    order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices
    keep = torch.zeros_like(scores, dtype=torch.bool)
    return keep.scatter_(-1, order[..., :k], True)


def topk_mask(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Keep each row's top-k entries and replace the rest with ``-inf``."""
    return scores.masked_fill(~topk_keep(scores, k), NEG_INF)


def topk_softmax_literal(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Softmax, zero all but the top-k weights, then softmax again.

    Compatibility variant for ablations; masked entries keep exp(0) mass.
    """
    a = softmax(scores)
    return softmax(a * topk_keep(scores, k))


class _Sparsemax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z):
        zs = torch.sort(z, dim=-1, descending=True).values
        ks = torch.arange(1, z.shape[-1] + 1, dtype=z.dtype, device=z.device)
        cums = zs.cumsum(-1)
        support = 1 + ks * zs > cums
        k_z = support.sum(-1, keepdim=True)
        tau = (cums.gather(-1, k_z - 1) - 1) / k_z.to(z.dtype)
        out = (z - tau).clamp(min=0)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved_tensors
        supp = (out > 0).to(grad.dtype)
        v = (grad * supp).sum(-1, keepdim=True) / supp.sum(-1, keepdim=True)
        return supp * (grad - v)


class _Entmax15(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z):
        z = (z - z.amax(-1, keepdim=True)) / 2
        zs = torch.sort(z, dim=-1, descending=True).values
        ks = torch.arange(1, z.shape[-1] + 1, dtype=z.dtype, device=z.device)
        mean = zs.cumsum(-1) / ks
        mean_sq = (zs**2).cumsum(-1) / ks
        ss = ks * (mean_sq - mean**2)
        delta = ((1 - ss) / ks).clamp(min=0)
        tau = mean - torch.sqrt(delta)
        k_star = (tau <= zs).sum(-1, keepdim=True)
        tau_star = tau.gather(-1, k_star - 1)
        out = (z - tau_star).clamp(min=0) ** 2
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved_tensors
        g = out.sqrt()
        dx = grad * g
        q = dx.sum(-1, keepdim=True) / g.sum(-1, keepdim=True)
        return dx - q * g


def sparsemax(z: torch.Tensor) -> torch.Tensor:
    return _Sparsemax.apply(z)


def entmax15(z: torch.Tensor) -> torch.Tensor:
    return _Entmax15.apply(z)


def attention_weights(scores: torch.Tensor, kind: str = "softmax", k: int | None = None) -> torch.Tensor:
    """Normalise attention logits along the last axis with the chosen sparse function."""
    if kind == "softmax":
        return softmax(scores)
    if kind == "topk":
        return softmax(topk_mask(scores, k))
    if kind == "topk_literal":
        return topk_softmax_literal(scores, k)
    if kind == "sparsemax":
        return sparsemax(scores)
    if kind == "entmax15":
        return entmax15(scores)
    raise ValueError(f"unknown attention function {kind!r}")


# ---------------------------------------------------------------------------
# gradients


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Accumulate d(loss)/d(param) into ``param.grad`` and return them by name.

    Parameters must have been reset (``grad is None``) since the last call.
    """
    if loss.numel() != 1:
        raise UsageError("loss must be a scalar")
    if not loss.requires_grad or loss.grad_fn is None:
        raise UsageError("loss is not attached to a differentiation tape")
    if getattr(loss, "_cada_consumed", False):
        raise UsageError("this loss was already differentiated")
    stale = [name for name, p in params.items() if p.grad is not None]
    if stale:
        raise UsageError(f"gradients not reset before backward: {stale[:3]}")
    loss.backward()
    loss._cada_consumed = True
    return {name: (p.grad if p.grad is not None else torch.zeros_like(p)) for name, p in params.items()}


@torch.no_grad()
def finite_difference_grads(
    fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-6
) -> list[torch.Tensor]:
    """Central-difference gradient of the scalar ``fn()`` w.r.t. every entry of ``params``."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat, gflat = p.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn())
            flat[i] = orig - eps
            lo = float(fn())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def max_relative_error(a: Iterable[torch.Tensor], b: Iterable[torch.Tensor], floor: float = 1e-6) -> float:
    """Largest ``|a - b| / max(|a|, |b|, floor)`` over all entries."""
    worst = 0.0
    for x, y in zip(a, b):
        den = torch.maximum(torch.maximum(x.abs(), y.abs()), torch.full_like(x, floor))
        if x.numel():
            worst = max(worst, float(((x - y).abs() / den).max()))
    return worst


# ---------------------------------------------------------------------------
# checkpoint format

MAGIC = b"CADATNSR"
VERSION = 1


def dumps_tensors(tensors: Mapping[str, torch.Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads_tensors(data: bytes) -> dict[str, torch.Tensor]:
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError("not a tensor checkpoint (bad magic)")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = math.prod(shape)
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        out[name] = torch.from_numpy(arr.copy())
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return out


def save_tensors(path, tensors: Mapping[str, torch.Tensor]) -> None:
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, dumps_tensors(tensors))


def load_tensors(path) -> dict[str, torch.Tensor]:
    return loads_tensors(Path(path).read_bytes())
