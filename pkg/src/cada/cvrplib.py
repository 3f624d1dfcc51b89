"""TSPLIB-style CVRP benchmark files (CVRPLib sets A, B, F, P, X)."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .problem import CVRP, Instance

MANDATORY = ("DIMENSION", "CAPACITY", "NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION")
_SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION")


class CvrplibParseError(ValueError):
    pass


Number = Union[int, float]


@dataclass
class CvrplibInstance:
    name: str
    dimension: int
    capacity: int
    coords: list[tuple[Number, Number]]  # in file order, node ids 1..dimension
    demands: list[int]
    depot: int  # 1-based node id
    edge_weight_type: str = "EUC_2D"
    header: dict[str, str] = field(default_factory=dict)  # other specification lines
    extra_sections: dict[str, list[str]] = field(default_factory=dict)


def _num(tok: str) -> Number:
    try:
        return int(tok)
    except ValueError:
        return float(tok)


def parse_cvrplib(source) -> CvrplibInstance:
    """Parse a path or the text of a CVRPLib file."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        text = Path(source).read_text()
    else:
        text = source
    lines = text.splitlines()
    header: dict[str, str] = {}
    sections: dict[str, list[tuple[int, str]]] = {}
    current = None
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        word = line.split()[0].rstrip(":")
        if line == "EOF":
            break
        if word.endswith("_SECTION"):
            current = word
            sections[current] = []
            continue
        if ":" in line and not line[0].isdigit() and line[0] != "-":
            key, value = line.split(":", 1)
            header[key.strip()] = value.strip()
            current = None
            continue
        if current is None:
            raise CvrplibParseError(f"line {lineno}: unexpected content {line!r}")
        sections[current].append((lineno, line))
    end_line = len(lines)
    for key in MANDATORY:
        if key not in header and key not in sections:
            raise CvrplibParseError(f"missing mandatory {key} (reached line {end_line})")
    try:
        dim = int(header["DIMENSION"])
        cap = int(header["CAPACITY"])
    except ValueError as exc:
        raise CvrplibParseError(f"bad DIMENSION/CAPACITY: {exc}") from None

    def table(name, width):
        rows = {}
        for lineno, line in sections[name]:
            parts = line.split()
            if len(parts) != width:
                raise CvrplibParseError(f"line {lineno}: {name} expects {width} fields")
            rows[int(parts[0])] = parts[1:]
        if sorted(rows) != list(range(1, dim + 1)):
            raise CvrplibParseError(f"{name}: node ids do not cover 1..{dim}")
        return rows

    coord_rows = table("NODE_COORD_SECTION", 3)
    demand_rows = table("DEMAND_SECTION", 2)
    depots = []
    for lineno, line in sections["DEPOT_SECTION"]:
        for tok in line.split():
            if int(tok) == -1:
                break
            depots.append(int(tok))
    if len(depots) != 1:
        raise CvrplibParseError(f"expected exactly one depot, found {depots}")
    demands = [int(demand_rows[i][0]) for i in range(1, dim + 1)]
    if any(q < 0 for q in demands):
        raise CvrplibParseError("negative demand in a CVRP file")
    if demands[depots[0] - 1] != 0:
        raise CvrplibParseError("depot demand must be 0")
    known = {"NAME", "DIMENSION", "CAPACITY", "EDGE_WEIGHT_TYPE"}
    return CvrplibInstance(
        name=header.get("NAME", "unnamed"),
        dimension=dim,
        capacity=cap,
        coords=[(_num(coord_rows[i][0]), _num(coord_rows[i][1])) for i in range(1, dim + 1)],
        demands=demands,
        depot=depots[0],
        edge_weight_type=header.get("EDGE_WEIGHT_TYPE", "EUC_2D"),
        header={k: v for k, v in header.items() if k not in known},
        extra_sections={k: [ln for _, ln in v] for k, v in sections.items() if k not in _SECTIONS},
    )


def serialize_cvrplib(c: CvrplibInstance) -> str:
    out = [f"NAME : {c.name}"]
    out += [f"{k} : {v}" for k, v in c.header.items()]
    out += [
        f"DIMENSION : {c.dimension}",
        f"EDGE_WEIGHT_TYPE : {c.edge_weight_type}",
        f"CAPACITY : {c.capacity}",
        "NODE_COORD_SECTION",
    ]
    out += [f"{i} {x!r} {y!r}" for i, (x, y) in enumerate(c.coords, 1)]
    out.append("DEMAND_SECTION")
    out += [f"{i} {q}" for i, q in enumerate(c.demands, 1)]
    out += ["DEPOT_SECTION", str(c.depot), "-1"]
    for name, lines in c.extra_sections.items():
        out.append(name)
        out += lines
    out.append("EOF")
    return "\n".join(out) + "\n"


@dataclass
class ScaleRecord:
    offset: tuple[float, float]
    span: float
    original: np.ndarray  # (n+1, 2) original coordinates, depot first
    node_ids: list[int]  # file node id of each instance index


def cvrplib_to_instance(c: CvrplibInstance) -> tuple[Instance, ScaleRecord]:
    """Unit-square CVRP instance (depot first) plus the record needed to score on original coordinates."""
    order = [c.depot] + [i for i in range(1, c.dimension + 1) if i != c.depot]
    xy = np.array([c.coords[i - 1] for i in order], dtype=float)
    lo = xy.min(0)
    span = float((xy.max(0) - lo).max())
    if span <= 0:
        raise ValueError(f"{c.name}: degenerate bounding box")
    inst = Instance(
        coords=(xy - lo) / span,
        demands=np.array([c.demands[i - 1] for i in order], dtype=np.int64),
        capacity=c.capacity,
        variant=CVRP,
    )
    return inst, ScaleRecord((float(lo[0]), float(lo[1])), span, xy, order)


def rounded_cost(record: ScaleRecord, sequence: Sequence[int]) -> int:
    """Tour length with TSPLIB nearest-integer Euclidean edge weights on original coordinates."""
    xy = record.original
    total = 0
    for a, b in zip(sequence[:-1], sequence[1:]):
        total += int(np.hypot(*(xy[a] - xy[b])) + 0.5)
    return total
