"""Static scenario model: network, vehicle classes, paths and time grid."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping


class ScenarioError(ValueError):
    """Raised when a scenario configuration is inconsistent."""


@dataclass(frozen=True)
class VehicleClass:
    name: str
    pce: float = 1.0


@dataclass(frozen=True)
class Link:
    """A directed link.

    Per-class parameters are tuples indexed by class position. Connector links
    carry no parameters: zero travel time, unbounded capacity and storage.
    """

    id: int | str
    tail: Any
    head: Any
    length: float = 0.0
    speed: tuple[float, ...] = ()
    capacity: tuple[float, ...] = ()
    holding: tuple[float, ...] = ()
    is_connector: bool = False

    def free_flow_time(self, cls: int) -> float:
        """Traversal time in seconds at free-flow speed for class ``cls``."""
        if self.is_connector:
            return 0.0
        return self.length / self.speed[cls] * 3600.0


@dataclass(frozen=True)
class TimeGrid:
    loading_step: float
    interval_length: float
    num_intervals: int

    def __post_init__(self):
        if self.loading_step <= 0 or self.interval_length <= 0:
            raise ScenarioError("time steps must be positive")
        if self.num_intervals < 1:
            raise ScenarioError("need at least one interval")
        ratio = self.interval_length / self.loading_step
        if abs(ratio - round(ratio)) > 1e-9:
            raise ScenarioError("interval_length must be an integer multiple of loading_step")

    @property
    def horizon(self) -> float:
        return self.num_intervals * self.interval_length

    @property
    def steps_per_interval(self) -> int:
        return int(round(self.interval_length / self.loading_step))

    @property
    def num_steps(self) -> int:
        return self.num_intervals * self.steps_per_interval


def interval_of(t: float, grid: TimeGrid) -> int:
    """1-based interval index h with (h-1)*T <= t < h*T."""
    if not (0.0 <= t < grid.horizon):
        raise ValueError(f"time {t} outside horizon [0, {grid.horizon})")
    return int(t // grid.interval_length) + 1


@dataclass(frozen=True)
class Network:
    nodes: tuple
    links: tuple[Link, ...]
    od_pairs: tuple[tuple[Any, Any], ...]
    paths: tuple[tuple[tuple[int | str, ...], ...], ...]
    classes: tuple[VehicleClass, ...]
    link_index: Mapping[Any, int] = field(repr=False, default_factory=dict)

    @property
    def num_links(self) -> int:
        return len(self.links)

    @property
    def num_paths(self) -> int:
        return sum(len(p) for p in self.paths)

    @property
    def num_od(self) -> int:
        return len(self.od_pairs)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def path_list(self) -> list[tuple[int, tuple[int, ...]]]:
        """Global path order as ``(od position, link positions)`` pairs."""
        out = []
        for rs, plist in enumerate(self.paths):
            for p in plist:
                out.append((rs, tuple(self.link_index[a] for a in p)))
        return out

    def path_od(self) -> list[int]:
        return [rs for rs, _ in self.path_list()]

    def class_index(self, name: str) -> int:
        for i, c in enumerate(self.classes):
            if c.name == name:
                return i
        raise KeyError(name)


def _per_class(value, n: int, what: str, link_id) -> tuple[float, ...]:
    if isinstance(value, Mapping):
        raise ScenarioError(f"link {link_id}: {what} must be a list or number")
    if isinstance(value, (int, float)):
        return (float(value),) * n
    vals = tuple(float(v) for v in value)
    if len(vals) != n:
        raise ScenarioError(f"link {link_id}: {what} needs {n} values, got {len(vals)}")
    return vals


def build_network(config: Mapping[str, Any]) -> tuple[Network, TimeGrid]:
    """Validate a scenario config and freeze the index maps.

    ``config`` follows the ScenarioConfig JSON layout documented in the README.
    """
    try:
        g = config["grid"]
        grid = TimeGrid(float(g["loading_step"]), float(g["interval_length"]), int(g["num_intervals"]))
        raw_classes = config.get("classes") or [{"name": "car"}]
        raw_links = config["links"]
        raw_od = config["od_pairs"]
        raw_paths = config["paths"]
    except KeyError as exc:
        raise ScenarioError(f"missing section {exc}") from None

    classes = tuple(
        VehicleClass(str(c["name"]), float(c.get("pce", 1.0))) if isinstance(c, Mapping) else VehicleClass(str(c))
        for c in raw_classes
    )
    if len({c.name for c in classes}) != len(classes):
        raise ScenarioError("duplicate class names")
    nc = len(classes)

    links = []
    link_index: dict[Any, int] = {}
    for rl in raw_links:
        lid = rl["id"]
        if lid in link_index:
            raise ScenarioError(f"duplicate link id {lid}")
        conn = bool(rl.get("connector", False))
        if conn:
            link = Link(lid, rl["from"], rl["to"], float(rl.get("length", 0.0)), is_connector=True)
        else:
            link = Link(
                lid,
                rl["from"],
                rl["to"],
                float(rl["length"]),
                _per_class(rl["speed"], nc, "speed", lid),
                _per_class(rl["capacity"], nc, "capacity", lid),
                _per_class(rl["holding"], nc, "holding", lid),
            )
            if link.length <= 0:
                raise ScenarioError(f"link {lid}: length must be positive")
            for v in (*link.speed, *link.capacity, *link.holding):
                if not (v > 0 and math.isfinite(v)):
                    raise ScenarioError(f"link {lid}: speeds and capacities must be positive")
        link_index[lid] = len(links)
        links.append(link)

    od_pairs = tuple(
        (o["origin"], o["destination"]) if isinstance(o, Mapping) else (o[0], o[1]) for o in raw_od
    )
    if len(set(od_pairs)) != len(od_pairs):
        raise ScenarioError("duplicate OD pairs")

    if isinstance(raw_paths, Mapping):
        # keyed by OD position
        raw_paths = [raw_paths.get(str(rs), raw_paths.get(rs, [])) for rs in range(len(od_pairs))]
    if len(raw_paths) != len(od_pairs):
        raise ScenarioError("paths must list one path set per OD pair")

    paths = []
    for rs, plist in enumerate(raw_paths):
        if not plist:
            raise ScenarioError(f"OD pair {od_pairs[rs]} has no paths")
        o, d = od_pairs[rs]
        seen = set()
        frozen = []
        for p in plist:
            p = tuple(p["links"] if isinstance(p, Mapping) else p)
            if not p:
                raise ScenarioError(f"empty path for OD pair {od_pairs[rs]}")
            for a in p:
                if a not in link_index:
                    raise ScenarioError(f"path references unknown link {a}")
            node = o
            for a in p:
                link = links[link_index[a]]
                if link.tail != node:
                    raise ScenarioError(f"path {list(p)} is disconnected at link {a}")
                node = link.head
            if node != d:
                raise ScenarioError(f"path {list(p)} does not end at destination {d}")
            if p in seen:
                raise ScenarioError(f"duplicate path {list(p)}")
            seen.add(p)
            frozen.append(p)
        paths.append(tuple(frozen))

    nodes = config.get("nodes")
    if nodes is None:
        nodes = []
        for link in links:
            for n in (link.tail, link.head):
                if n not in nodes:
                    nodes.append(n)
    if len(set(nodes)) != len(nodes):
        raise ScenarioError("duplicate node ids")

    net = Network(tuple(nodes), tuple(links), od_pairs, tuple(paths), classes, dict(link_index))
    return net, grid


def load_scenario(path: str | Path) -> tuple[Network, TimeGrid, dict]:
    """Read a ScenarioConfig JSON file; returns the raw dict as well."""
    with open(path) as fh:
        config = json.load(fh)
    net, grid = build_network(config)
    return net, grid, config


def builtin_scenario(name: str) -> dict:
    """Load one of the bundled scenario configs (``seven_link`` or ``two_link``)."""
    path = Path(__file__).parent / "data" / f"{name}.json"
    with open(path) as fh:
        return json.load(fh)

