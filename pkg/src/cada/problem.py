"""VRP instances, the 16 constraint variants, and random instance generation."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

# Canonical constraint ordering for multi-hot vectors.
CONSTRAINTS = ("capacity", "open_route", "backhaul", "duration_limit", "time_window")

HORIZON = 4.6
RHO_MAX = 3.0
BACKHAUL_PROB = 0.2
MAX_DEMAND = 9


@dataclass(frozen=True)
class VariantSpec:
    open_route: bool = False
    backhaul: bool = False
    duration_limit: bool = False
    time_window: bool = False
    capacity: bool = field(default=True, init=False)

    @property
    def name(self) -> str:
        if not any(self.flags()[1:]):
            return "CVRP"
        return (
            ("O" if self.open_route else "")
            + "VRP"
            + ("B" if self.backhaul else "")
            + ("L" if self.duration_limit else "")
            + ("TW" if self.time_window else "")
        )

    def flags(self) -> tuple[bool, ...]:
        return tuple(getattr(self, c) for c in CONSTRAINTS)

    def bits(self) -> str:
        return "".join("1" if f else "0" for f in self.flags())

    @classmethod
    def from_bits(cls, bits: str) -> "VariantSpec":
        if len(bits) != 5 or set(bits) - {"0", "1"}:
            raise ValueError(f"bad variant bits {bits!r}")
        if bits[0] != "1":
            raise ValueError("capacity flag must be set")
        return cls(*(b == "1" for b in bits[1:]))

    @classmethod
    def from_name(cls, name: str) -> "VariantSpec":
        try:
            return VARIANTS[name.upper()]
        except KeyError:
            raise ValueError(f"unknown variant {name!r}") from None

    def __str__(self) -> str:
        return self.name


def _all_variants() -> dict[str, VariantSpec]:
    out = {}
    for tw, l, b, o in itertools.product((False, True), repeat=4):
        spec = VariantSpec(open_route=o, backhaul=b, duration_limit=l, time_window=tw)
        out[spec.name] = spec
    return out


VARIANTS: dict[str, VariantSpec] = _all_variants()
CVRP = VARIANTS["CVRP"]


def encode_variant(spec: VariantSpec) -> np.ndarray:
    """Multi-hot vector in the order [C, O, B, L, TW]."""
    return np.array([1.0 if f else 0.0 for f in spec.flags()])


def default_capacity(n: int) -> int:
    # 40 at n=50 and 50 at n=100; other sizes follow the same linear rule, capped at 50.
    return min(50, 30 + math.ceil(n / 5))


@dataclass
class Instance:
    coords: np.ndarray  # (n+1, 2), row 0 is the depot
    demands: np.ndarray  # (n+1,) signed ints, demands[0] == 0
    capacity: int
    variant: VariantSpec = CVRP
    tw_start: Optional[np.ndarray] = None
    tw_end: Optional[np.ndarray] = None
    service: Optional[np.ndarray] = None
    horizon: float = HORIZON
    dist_limit: Optional[float] = None
    _dist: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.coords) - 1

    @property
    def dist(self) -> np.ndarray:
        if self._dist is None:
            self._dist = distance_matrix(self.coords)
        return self._dist

    def with_variant(self, variant: VariantSpec) -> "Instance":
        return replace(self, variant=variant, _dist=self._dist)

    def with_coords(self, coords: np.ndarray) -> "Instance":
        return replace(self, coords=np.asarray(coords, dtype=float), _dist=None)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return np.array_equal(a, b)

        return (
            same(self.coords, other.coords)
            and same(self.demands, other.demands)
            and self.capacity == other.capacity
            and self.variant == other.variant
            and same(self.tw_start, other.tw_start)
            and same(self.tw_end, other.tw_end)
            and same(self.service, other.service)
            and self.horizon == other.horizon
            and self.dist_limit == other.dist_limit
        )


def distance_matrix(coords) -> np.ndarray:
    xy = np.asarray(coords, dtype=float)
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def normalize_demands(instance: Instance) -> np.ndarray:
    if instance.capacity <= 0:
        raise ValueError("capacity must be positive")
    return instance.demands / instance.capacity


def gen_demands(n: int, backhaul_active: bool, rng: np.random.Generator) -> np.ndarray:
    """Signed customer demands (length n, depot excluded)."""
    linehaul = rng.integers(1, MAX_DEMAND + 1, size=n)
    if not backhaul_active:
        return linehaul
    backhaul = rng.integers(1, MAX_DEMAND + 1, size=n)
    y = rng.random(n)
    return np.where(y >= BACKHAUL_PROB, linehaul, -backhaul)


def tw_start_upper(d0, service, length, horizon: float = HORIZON):
    """Upper bound of the window-start multiplier: the latest start, in units of d0, that still returns by the horizon."""
    return (horizon - service - length) / d0 - 1.0


def tw_start(d0, e_up, y):
    """Window start interpolated between d0 (y=0) and e_up * d0 (y=1)."""
    return (1.0 + (e_up - 1.0) * y) * d0


def gen_time_windows(coords, rng: np.random.Generator, horizon: float = HORIZON):
    """Return (tw_start, tw_end, service) for all nodes, depot included.

    Customers coincident with the depot have no defined window and raise ValueError.
    """
    xy = np.asarray(coords, dtype=float)
    n = len(xy) - 1
    d0 = np.sqrt(((xy[1:] - xy[0]) ** 2).sum(-1))
    if np.any(d0 <= 0.0):
        raise ValueError("customer coincides with depot")
    service = rng.uniform(0.15, 0.18, size=n)
    length = rng.uniform(0.18, 0.2, size=n)
    e_up = tw_start_upper(d0, service, length, horizon)
    start = tw_start(d0, e_up, rng.random(n))
    end = start + length
    return (
        np.concatenate([[0.0], start]),
        np.concatenate([[horizon], end]),
        np.concatenate([[0.0], service]),
    )


def gen_distance_limit(dist: np.ndarray, rng: np.random.Generator) -> float:
    low = 2.0 * float(np.max(dist[0]))
    return float(rng.uniform(low, RHO_MAX))


def generate_instance(
    n: int,
    spec: VariantSpec = CVRP,
    seed=None,
    capacity: Optional[int] = None,
) -> Instance:
    if n < 1:
        raise ValueError("need at least one customer")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    coords = rng.random((n + 1, 2))
    while True:
        coincident = np.all(coords[1:] == coords[0], axis=1)
        if not coincident.any():
            break
        coords[1:][coincident] = rng.random((int(coincident.sum()), 2))
    demands = np.concatenate([[0], gen_demands(n, spec.backhaul, rng)]).astype(np.int64)
    inst = Instance(
        coords=coords,
        demands=demands,
        capacity=capacity if capacity is not None else default_capacity(n),
        variant=spec,
    )
    if spec.time_window:
        inst.tw_start, inst.tw_end, inst.service = gen_time_windows(coords, rng)
    if spec.duration_limit:
        inst.dist_limit = gen_distance_limit(inst.dist, rng)
    return inst


def generate_dataset(
    count: int, n: int, spec: VariantSpec, seed=None, capacity: Optional[int] = None
) -> list[Instance]:
    rng = np.random.default_rng(seed)
    return [generate_instance(n, spec, rng, capacity) for _ in range(count)]


# ---------------------------------------------------------------------------
# text format

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_instance(inst: Instance) -> str:
    lines = [f"vrp {inst.n} {inst.capacity} {inst.variant.bits()}"]
    tw = inst.variant.time_window
    for i in range(inst.n + 1):
        row = [str(i), _fmt(inst.coords[i, 0]), _fmt(inst.coords[i, 1]), str(int(inst.demands[i]))]
        if tw:
            row += [_fmt(inst.tw_start[i]), _fmt(inst.tw_end[i]), _fmt(inst.service[i])]
        lines.append(" ".join(row))
    if inst.dist_limit is not None:
        lines.append(f"L {_fmt(inst.dist_limit)}")
    return "\n".join(lines) + "\n"


def loads_instances(text: str) -> Iterator[Instance]:
    """Parse one or more concatenated instances."""
    lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    pos = 0
    while pos < len(lines):
        head = lines[pos]
        if head[0] != "vrp" or len(head) != 4:
            raise ValueError(f"line {pos + 1}: expected 'vrp <n> <C> <flags>' header")
        n, cap, variant = int(head[1]), int(head[2]), VariantSpec.from_bits(head[3])
        rows = lines[pos + 1 : pos + 2 + n]
        if len(rows) != n + 1:
            raise ValueError("truncated instance")
        pos += n + 2
        width = 7 if variant.time_window else 4
        if any(len(r) != width for r in rows):
            raise ValueError(f"node rows must have {width} fields")
        if [int(r[0]) for r in rows] != list(range(n + 1)):
            raise ValueError("node indices must be 0..n in order")
        inst = Instance(
            coords=np.array([[float(r[1]), float(r[2])] for r in rows]),
            demands=np.array([int(r[3]) for r in rows], dtype=np.int64),
            capacity=cap,
            variant=variant,
        )
        if variant.time_window:
            inst.tw_start = np.array([float(r[4]) for r in rows])
            inst.tw_end = np.array([float(r[5]) for r in rows])
            inst.service = np.array([float(r[6]) for r in rows])
            inst.horizon = float(inst.tw_end[0])
        if pos < len(lines) and lines[pos][0] == "L":
            inst.dist_limit = float(lines[pos][1])
            pos += 1
        if variant.duration_limit and inst.dist_limit is None:
            raise ValueError("duration-limit variant without 'L' line")
        yield inst


def loads_instance(text: str) -> Instance:
    insts = list(loads_instances(text))
    if len(insts) != 1:
        raise ValueError(f"expected one instance, found {len(insts)}")
    return insts[0]


def save_instances(path, instances: Sequence[Instance]) -> None:
    from .io_utils import atomic_write_text

    atomic_write_text(path, "".join(dumps_instance(i) for i in instances))


def load_instances(path) -> list[Instance]:
    return list(loads_instances(Path(path).read_text()))
