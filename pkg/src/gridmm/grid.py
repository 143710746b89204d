"""Power network data model, regional partitioning and JSON I/O.

All electrical quantities are per-unit on ``base_mva``. Branches use the
series-admittance line model ``Y = g + jb`` with no charging susceptance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class NetworkError(ValueError):
    """Raised when a network document is malformed or inconsistent."""


@dataclass(frozen=True)
class Bus:
    id: str
    vmin: float
    vmax: float
    region: str
    is_reference: bool = False


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    g: float
    b: float
    smax: float

    @property
    def name(self) -> str:
        return f"{self.from_bus}->{self.to_bus}"


@dataclass(frozen=True)
class Generator:
    bus: str
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    cost: tuple[float, float, float]  # (c2, c1, c0)


@dataclass(frozen=True)
class Load:
    bus: str
    pd: float
    qd: float


@dataclass(frozen=True)
class PowerNetwork:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    name: str = ""
    _bus_index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_bus_index", {b.id: i for i, b in enumerate(self.buses)})
        validate(self)

    @property
    def region_of(self) -> dict[str, str]:
        return {b.id: b.region for b in self.buses}

    @property
    def regions(self) -> list[str]:
        seen = []
        for b in self.buses:
            if b.region not in seen:
                seen.append(b.region)
        return sorted(seen)

    @property
    def reference_bus(self) -> str:
        return next(b.id for b in self.buses if b.is_reference)

    def bus(self, bus_id: str) -> Bus:
        return self.buses[self._bus_index[bus_id]]

    def bus_position(self, bus_id: str) -> int:
        return self._bus_index[bus_id]

    @property
    def nominal_pd(self) -> list[float]:
        return [ld.pd for ld in self.loads]

    @property
    def nominal_qd(self) -> list[float]:
        return [ld.qd for ld in self.loads]


def validate(net: PowerNetwork) -> None:
    """Check every structural invariant of ``net``; raise NetworkError on the first violation."""
    if not (net.base_mva > 0 and math.isfinite(net.base_mva)):
        raise NetworkError("base_mva must be a positive finite number")
    if not net.buses:
        raise NetworkError("network has no buses")
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        raise NetworkError("duplicate bus ids")
    for b in net.buses:
        if not (0 < b.vmin <= b.vmax):
            raise NetworkError(f"bus {b.id}: need 0 < vmin <= vmax")
        if not b.region:
            raise NetworkError(f"bus {b.id}: empty region")
    nref = sum(b.is_reference for b in net.buses)
    if nref != 1:
        raise NetworkError(f"expected exactly one reference bus, found {nref}")
    known = set(ids)
    for k, br in enumerate(net.branches):
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise NetworkError(f"branch {k} ({br.name}) references missing bus {end!r}")
        if br.from_bus == br.to_bus:
            raise NetworkError(f"branch {k} ({br.name}) is a self-loop")
        if not br.smax > 0:
            raise NetworkError(f"branch {k} ({br.name}): smax must be positive")
        if br.g == 0 and br.b == 0:
            raise NetworkError(f"branch {k} ({br.name}): zero admittance")
    for k, gen in enumerate(net.generators):
        if gen.bus not in known:
            raise NetworkError(f"generator {k} references missing bus {gen.bus!r}")
        if gen.pmin > gen.pmax or gen.qmin > gen.qmax:
            raise NetworkError(f"generator {k}: inverted dispatch bounds")
        if len(gen.cost) != 3 or gen.cost[0] < 0:
            raise NetworkError(f"generator {k}: cost must be (c2>=0, c1, c0)")
    for k, ld in enumerate(net.loads):
        if ld.bus not in known:
            raise NetworkError(f"load {k} references missing bus {ld.bus!r}")
        if not (math.isfinite(ld.pd) and math.isfinite(ld.qd)):
            raise NetworkError(f"load {k}: non-finite demand")


# --------------------------------------------------------------------------- I/O


def network_from_dict(doc: dict, name: str = "") -> PowerNetwork:
    try:
        buses = tuple(
            Bus(
                id=str(b["id"]),
                vmin=float(b["vmin"]),
                vmax=float(b["vmax"]),
                region=str(b["region"]),
                is_reference=bool(b.get("reference", False)),
            )
            for b in doc["buses"]
        )
        branches = tuple(
            Branch(str(e["from"]), str(e["to"]), float(e["g"]), float(e["b"]), float(e["smax"]))
            for e in doc["branches"]
        )
        gens = tuple(
            Generator(
                bus=str(g["bus"]),
                pmin=float(g["pmin"]),
                pmax=float(g["pmax"]),
                qmin=float(g["qmin"]),
                qmax=float(g["qmax"]),
                cost=tuple(float(c) for c in g["cost"]),
            )
            for g in doc.get("generators", [])
        )
        loads = tuple(
            Load(str(d["bus"]), float(d["pd"]), float(d["qd"])) for d in doc.get("loads", [])
        )
        base = float(doc["base_mva"])
    except (KeyError, TypeError) as exc:
        raise NetworkError(f"missing or malformed field: {exc}") from exc
    return PowerNetwork(base, buses, branches, gens, loads, name=name or doc.get("name", ""))


def network_to_dict(net: PowerNetwork) -> dict:
    buses = []
    for b in net.buses:
        row = {"id": b.id, "vmin": b.vmin, "vmax": b.vmax, "region": b.region}
        if b.is_reference:
            row["reference"] = True
        buses.append(row)
    doc = {
        "base_mva": net.base_mva,
        "buses": buses,
        "branches": [
            {"from": e.from_bus, "to": e.to_bus, "g": e.g, "b": e.b, "smax": e.smax}
            for e in net.branches
        ],
        "generators": [
            {"bus": g.bus, "pmin": g.pmin, "pmax": g.pmax, "qmin": g.qmin, "qmax": g.qmax,
             "cost": list(g.cost)}
            for g in net.generators
        ],
        "loads": [{"bus": d.bus, "pd": d.pd, "qd": d.qd} for d in net.loads],
    }
    if net.name:
        doc["name"] = net.name
    return doc


def load_network(path) -> PowerNetwork:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: malformed JSON ({exc})") from exc
    return network_from_dict(doc, name=path.stem)


def save_network(net: PowerNetwork, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")


def fixture_path(name: str) -> Path:
    """Path of a network shipped with the package (``case6_2r``, ``case14_3r``, ``fig1_3r``)."""
    p = Path(__file__).parent / "data" / f"{name}.json"
    if not p.exists():
        raise FileNotFoundError(name)
    return p


def load_fixture(name: str) -> PowerNetwork:
    return load_network(fixture_path(name))


# --------------------------------------------------------------------- regions


@dataclass(frozen=True)
class RegionView:
    """One region's slice of the network plus its interconnections.

    Buses are listed by id, branches/generators/loads by their index in the
    parent network. ``coupling_branches`` keep their network orientation.
    """

    region: str
    net: PowerNetwork = field(repr=False, compare=False)
    local_buses: tuple[str, ...]
    local_branches: tuple[int, ...]
    coupling_branches: tuple[int, ...]
    border_buses: tuple[str, ...]
    neighbor_buses: tuple[str, ...]
    local_generators: tuple[int, ...]
    local_loads: tuple[int, ...]

    @property
    def arcs(self) -> tuple[tuple[int, int], ...]:
        """Directed coupling arcs ``(branch, direction)``; direction 0 is from->to."""
        return tuple((e, d) for e in self.coupling_branches for d in (0, 1))

    @property
    def has_reference(self) -> bool:
        return self.net.reference_bus in self.local_buses

    def arc_bus(self, arc: tuple[int, int]) -> str:
        e, d = arc
        br = self.net.branches[e]
        return br.from_bus if d == 0 else br.to_bus


def partition(net: PowerNetwork) -> list[RegionView]:
    """Split ``net`` into one RegionView per region, sorted by region id."""
    views = []
    region_of = net.region_of
    for k in net.regions:
        local = tuple(b.id for b in net.buses if b.region == k)
        if not local:
            raise NetworkError(f"region {k} has no buses")
        local_set = set(local)
        local_br, coupling, border, neighbor = [], [], [], []
        for e, br in enumerate(net.branches):
            fi, ti = br.from_bus in local_set, br.to_bus in local_set
            if fi and ti:
                local_br.append(e)
            elif fi or ti:
                coupling.append(e)
                inside, outside = (br.from_bus, br.to_bus) if fi else (br.to_bus, br.from_bus)
                if inside not in border:
                    border.append(inside)
                if outside not in neighbor:
                    neighbor.append(outside)
        gens = tuple(i for i, g in enumerate(net.generators) if region_of[g.bus] == k)
        loads = tuple(i for i, d in enumerate(net.loads) if region_of[d.bus] == k)
        border.sort(key=net.bus_position)
        neighbor.sort(key=net.bus_position)
        views.append(
            RegionView(k, net, local, tuple(local_br), tuple(coupling), tuple(border),
                       tuple(neighbor), gens, loads)
        )
    return views


def whole_view(net: PowerNetwork) -> RegionView:
    """A single view spanning the entire network; used for the centralized problem."""
    return RegionView(
        region="*",
        net=net,
        local_buses=tuple(b.id for b in net.buses),
        local_branches=tuple(range(len(net.branches))),
        coupling_branches=(),
        border_buses=(),
        neighbor_buses=(),
        local_generators=tuple(range(len(net.generators))),
        local_loads=tuple(range(len(net.loads))),
    )


def coupling_arcs(views: Sequence[RegionView]) -> list[tuple[int, int]]:
    """Global sorted list of directed coupling arcs across all regions."""
    return sorted({a for v in views for a in v.arcs})


def arc_owners(views: Iterable[RegionView]) -> dict[tuple[int, int], list[str]]:
    owners: dict[tuple[int, int], list[str]] = {}
    for v in views:
        for a in v.arcs:
            owners.setdefault(a, []).append(v.region)
    return owners
