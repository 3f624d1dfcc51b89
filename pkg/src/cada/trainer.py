"""REINFORCE with the POMO shared baseline over a rotation of VRP variants."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import tensor_ad as ad
from .batch_env import BatchEnv
from .io_utils import atomic_write_text, format_kv, read_kv
from .model import CaDA, ModelConfig
from .problem import VARIANTS, Instance, VariantSpec, generate_dataset, generate_instance

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "variant", "mean_cost", "loss", "lr"]
VALIDATION_SEED = 20_240_917


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n: int = 20
    batch_size: int = 64
    instances_per_epoch: int = 10_000
    epochs: int = 20
    lr: float = 3e-4
    weight_decay: float = 1e-6
    milestones: list[int] = field(default_factory=lambda: [18, 19])
    gamma: float = 0.1
    grad_clip: float = 1.0
    tasks: list[str] = field(default_factory=lambda: list(VARIANTS))
    n_starts: Optional[int] = None  # None -> n
    val_instances: int = 256
    seed: int = 1234

    def __post_init__(self):
        for name in ("n", "batch_size", "instances_per_epoch", "epochs", "val_instances"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("lr and grad_clip must be positive")
        if any(m >= self.epochs for m in self.milestones):
            raise ValueError("milestones must be < epochs")
        for t in self.tasks:
            VariantSpec.from_name(t)

    @property
    def variants(self) -> list[VariantSpec]:
        return [VariantSpec.from_name(t) for t in self.tasks]


PROFILES = {
    "desk": (
        dict(d_h=64, heads=4, layers=3, d_a=256),
        dict(),
    ),
    "paper": (
        dict(d_h=128, heads=8, layers=6, d_a=512),
        dict(
            n=50,
            batch_size=256,
            instances_per_epoch=100_000,
            epochs=300,
            milestones=[270, 295],
        ),
    ),
}


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def load_profile(profile: str = "desk", overrides: Optional[dict[str, str]] = None) -> tuple[ModelConfig, TrainConfig]:
    """Build configs from a named profile plus flat string overrides (e.g. a config file)."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    mkw, tkw = (dict(x) for x in PROFILES[profile])
    mdef, tdef = ModelConfig(**mkw), TrainConfig(**tkw)
    mnames = {f.name for f in fields(ModelConfig)}
    tnames = {f.name for f in fields(TrainConfig)}
    for key, raw in (overrides or {}).items():
        if key in mnames:
            cur = getattr(mdef, key)
            if raw.lower() == "none":
                mkw[key] = None
            elif cur is None:
                mkw[key] = int(raw)
            else:
                mkw[key] = _coerce(raw, cur)
        elif key in tnames:
            cur = getattr(tdef, key)
            if raw.lower() == "none":
                tkw[key] = None
            elif cur is None:
                tkw[key] = int(raw)
            elif key == "milestones":
                tkw[key] = [int(v) for v in raw.replace(",", " ").split()]
            elif key == "tasks":
                tkw[key] = [v.upper() for v in raw.replace(",", " ").split()]
            else:
                tkw[key] = _coerce(raw, cur)
        else:
            raise ValueError(f"unknown config key {key!r}")
    return ModelConfig(**mkw), TrainConfig(**tkw)


def pomo_advantages(rewards: torch.Tensor) -> torch.Tensor:
    """Reward minus the mean over the trajectories of the same instance (last axis)."""
    if rewards.shape[-1] < 2:
        raise ValueError("need at least two trajectories for a shared baseline")
    return rewards - rewards.mean(-1, keepdim=True)


def surrogate_loss(costs: torch.Tensor, logp: torch.Tensor) -> torch.Tensor:
    adv = pomo_advantages(-costs.detach()).to(logp.dtype)
    return -(adv * logp).mean()


def make_optimizer(model: CaDA, tc: TrainConfig):
    # the multi-step schedule is applied per epoch through lr_at_epoch
    return torch.optim.AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)


def lr_at_epoch(tc: TrainConfig, epoch: int) -> float:
    """Learning rate in effect during 1-based ``epoch``."""
    passed = sum(1 for m in tc.milestones if epoch > m)
    return tc.lr * tc.gamma**passed


def reinforce_step(
    model: CaDA,
    optimizer: torch.optim.Optimizer,
    instances: Sequence[Instance],
    n_starts: int,
    grad_clip: float = 1.0,
    generator: Optional[torch.Generator] = None,
    snapshot_dir: Optional[Path] = None,
) -> dict:
    model.train()
    env = BatchEnv(instances)
    costs, logp = model.rollout(env, "sample", n_starts, generator=generator)
    loss = surrogate_loss(costs, logp)
    if not torch.isfinite(loss):
        if snapshot_dir is not None:
            model.save(Path(snapshot_dir) / "diverged.bin")
        raise TrainingDiverged(
            f"non-finite loss {loss.item()} (cost range {costs.min().item():.4g}..{costs.max().item():.4g})"
        )
    optimizer.zero_grad(set_to_none=True)
    ad.backward(loss, dict(model.named_parameters()))
    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return {"loss": loss.item(), "grad_norm": float(norm), "mean_cost": costs.mean().item()}


def validation_sets(tc: TrainConfig) -> dict[str, list[Instance]]:
    return {
        v.name: generate_dataset(tc.val_instances, tc.n, v, seed=[VALIDATION_SEED, i])
        for i, v in enumerate(VARIANTS.values())
        if v.name in tc.tasks
    }


@torch.no_grad()
def greedy_cost(model: CaDA, instances: Sequence[Instance], n_starts: Optional[int] = None, chunk: int = 128) -> np.ndarray:
    """Best-over-starts greedy cost per instance."""
    model.eval()
    out = []
    for i in range(0, len(instances), chunk):
        env = BatchEnv(instances[i : i + chunk])
        costs, _ = model.rollout(env, "greedy", n_starts or env.n)
        out.append(costs.min(1).values.numpy())
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: CaDA, optimizer, epoch: int, tc: TrainConfig) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    names = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            tensors[f"optim.{n}.exp_avg"] = st["exp_avg"]
            tensors[f"optim.{n}.exp_avg_sq"] = st["exp_avg_sq"]
            tensors[f"optim.{n}.step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
    ad.save_tensors(path, tensors)
    meta = model.cfg.to_kv()
    meta.update({f"train.{k}": _kv_value(v) for k, v in asdict(tc).items()})
    meta["epoch"] = str(epoch)
    atomic_write_text(str(path) + ".cfg", format_kv(meta))


def _kv_value(v) -> str:
    if isinstance(v, list):
        return " ".join(map(str, v))
    return "none" if v is None else str(v)


def load_checkpoint(path) -> tuple[CaDA, int, dict]:
    meta = read_kv(str(path) + ".cfg")
    model = CaDA(ModelConfig.from_kv(meta))
    return model, int(meta.get("epoch", 0)), meta


def load_model(path) -> CaDA:
    """Load a model from either a bare model file or a training checkpoint."""
    tensors = ad.load_tensors(path)
    meta = read_kv(str(path) + ".cfg")
    model = CaDA(ModelConfig.from_kv(meta))
    if any(k.startswith("model.") for k in tensors):
        tensors = {k[6:]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(tensors)
    return model


# ---------------------------------------------------------------------------
# training loop


def train(
    mc: ModelConfig,
    tc: TrainConfig,
    out_dir,
    resume: Optional[str] = None,
    progress: Optional[Callable[[dict], None]] = None,
) -> list[dict]:
    """Train and write ``metrics.csv`` plus one checkpoint per epoch into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(tc.seed)
    model = CaDA(mc)
    optimizer = make_optimizer(model, tc)
    start_epoch = 0
    if resume:
        model, start_epoch, _ = load_checkpoint(resume)
        optimizer = make_optimizer(model, tc)
        load_checkpoint_into(resume, model, optimizer)
        with open(out / "metrics.csv") as fh:
            kept = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= start_epoch]
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
            w.writeheader()
            w.writerows(kept)
    n_starts = tc.n_starts or tc.n
    val = validation_sets(tc)
    metrics_path = out / "metrics.csv"
    rows: list[dict] = []
    if start_epoch == 0:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)
        rows += _validate(model, val, 0, {}, lr_at_epoch(tc, 1), metrics_path, progress)
    batches = math.ceil(tc.instances_per_epoch / tc.batch_size)
    variants = tc.variants
    for epoch in range(start_epoch + 1, tc.epochs + 1):
        lr = lr_at_epoch(tc, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([tc.seed, epoch])
        gen = torch.Generator().manual_seed(tc.seed * 100_003 + epoch)
        losses: dict[str, list[float]] = {}
        t0 = time.time()
        for b in range(batches):
            size = min(tc.batch_size, tc.instances_per_epoch - b * tc.batch_size)
            variant = variants[int(rng.integers(len(variants)))]
            insts = [generate_instance(tc.n, variant, rng) for _ in range(size)]
            stats = reinforce_step(model, optimizer, insts, n_starts, tc.grad_clip, gen, out)
            losses.setdefault(variant.name, []).append(stats["loss"])
        log.info("epoch %d trained in %.1fs", epoch, time.time() - t0)
        rows += _validate(model, val, epoch, losses, lr, metrics_path, progress)
        save_checkpoint(out / f"epoch_{epoch:03d}.bin", model, optimizer, epoch, tc)
    model.save(out / "model.bin")
    return rows


def load_checkpoint_into(path, model: CaDA, optimizer) -> None:
    tensors = ad.load_tensors(path)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    for n, p in model.named_parameters():
        if f"optim.{n}.exp_avg" in tensors:
            optimizer.state[p] = {
                "exp_avg": tensors[f"optim.{n}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"optim.{n}.exp_avg_sq"].clone(),
                "step": torch.tensor(float(tensors[f"optim.{n}.step"][0])),
            }


def _validate(model, val, epoch, losses, lr, metrics_path, progress) -> list[dict]:
    rows = []
    for name, insts in val.items():
        ls = losses.get(name)
        row = {
            "epoch": epoch,
            "variant": name,
            "mean_cost": float(greedy_cost(model, insts).mean()),
            "loss": float(np.mean(ls)) if ls else float("nan"),
            "lr": lr,
        }
        rows.append(row)
        if progress:
            progress(row)
    with open(metrics_path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        for row in rows:
            w.writerow({**row, "mean_cost": repr(row["mean_cost"]), "loss": repr(row["loss"]), "lr": repr(row["lr"])})
    return rows
