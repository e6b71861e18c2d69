"""Road-segment graph, soft-weighted shortest paths and hop distances.

Nodes are road segments; an edge ``a -> b`` means ``b`` can be entered
after ``a``.  Entering a segment costs its length times its soft
multiplier, so a path's cost excludes the segment it starts on.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import DanglingRidError, InvalidArgument, ParseError
from .geo import CellId, GeoPoint, HexConfig, bearing_deg, cell_of, haversine_km, midpoint

ROAD_CLASSES = (
    "motorway", "trunk", "primary", "secondary", "tertiary",
    "unclassified", "residential", "service", "motorway_link", "trunk_link",
    "primary_link", "secondary_link", "tertiary_link", "living_street", "pedestrian",
    "track", "road", "busway", "footway", "cycleway",
)

DEFAULT_PREFER = 0.7
DEFAULT_AVOID = 1.5


@dataclass(frozen=True)
class RoadSegment:
    rid: int
    start: GeoPoint
    end: GeoPoint
    name: str | None = None
    length_m: float | None = None
    road_class: str = "residential"
    bearing: float = field(init=False)

    def __post_init__(self):
        if self.start == self.end:
            raise InvalidArgument(f"segment {self.rid} has zero extent")
        if self.road_class not in ROAD_CLASSES:
            raise InvalidArgument(f"segment {self.rid}: unknown road class {self.road_class!r}")
        if self.length_m is None:
            object.__setattr__(self, "length_m", haversine_km(self.start, self.end) * 1000.0)
        elif not (math.isfinite(self.length_m) and self.length_m > 0):
            raise InvalidArgument(f"segment {self.rid}: length_m must be positive")
        object.__setattr__(self, "bearing", bearing_deg(self.start, self.end))

    @property
    def midpoint(self) -> GeoPoint:
        return midpoint(self.start, self.end)


@dataclass(frozen=True)
class SoftWeights:
    prefer_cells: frozenset = frozenset()
    avoid_cells: frozenset = frozenset()
    mu_prefer: float = DEFAULT_PREFER
    mu_avoid: float = DEFAULT_AVOID
    class_bias: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "prefer_cells", frozenset(self.prefer_cells))
        object.__setattr__(self, "avoid_cells", frozenset(self.avoid_cells))
        if not (math.isfinite(self.mu_prefer) and 0 < self.mu_prefer <= 1):
            raise InvalidArgument(f"prefer multiplier must be in (0, 1], got {self.mu_prefer}")
        if not (math.isfinite(self.mu_avoid) and self.mu_avoid >= 1):
            raise InvalidArgument(f"avoid multiplier must be >= 1, got {self.mu_avoid}")
        for cls, mult in self.class_bias.items():
            if not (math.isfinite(mult) and mult > 0):
                raise InvalidArgument(f"class bias for {cls!r} must be positive")

    @property
    def needs_cells(self):
        return bool(self.prefer_cells or self.avoid_cells)

    def multiplier(self, seg: RoadSegment, cell: CellId | None) -> float:
        mu = self.class_bias.get(seg.road_class, 1.0)
        if cell is not None:
            if cell in self.prefer_cells:
                mu *= self.mu_prefer
            if cell in self.avoid_cells:
                mu *= self.mu_avoid
        return mu


class RoadGraph:
    def __init__(self, segments: Iterable[RoadSegment], adjacency: Mapping[int, Sequence[int]]):
        self.segments = {}
        for seg in segments:
            if seg.rid in self.segments:
                raise InvalidArgument(f"duplicate rid {seg.rid}")
            self.segments[seg.rid] = seg
        dangling = set()
        adj = {}
        for rid in self.segments:
            succ = tuple(adjacency.get(rid, ()))
            dangling.update(s for s in succ if s not in self.segments)
            adj[rid] = succ
        dangling.update(r for r in adjacency if r not in self.segments)
        if dangling:
            raise DanglingRidError(dangling)
        self.adjacency = adj
        self._cells = {}
        self._undirected = None

    def __contains__(self, rid):
        return rid in self.segments

    def __getitem__(self, rid) -> RoadSegment:
        return self.segments[rid]

    def __len__(self):
        return len(self.segments)

    def __eq__(self, other):
        if not isinstance(other, RoadGraph):
            return NotImplemented
        return self.segments == other.segments and self.adjacency == other.adjacency

    def require(self, *rids):
        missing = [r for r in rids if r not in self.segments]
        if missing:
            raise InvalidArgument(f"unknown rid(s) {missing}")

    def segment_cell(self, rid, cfg: HexConfig) -> CellId:
        """Dominant cell of a segment: the cell holding its midpoint."""
        cache = self._cells.setdefault(cfg, {})
        cell = cache.get(rid)
        if cell is None:
            cell = cache[rid] = cell_of(self.segments[rid].midpoint, cfg)
        return cell

    def segments_in_cell(self, cfg: HexConfig) -> dict[CellId, list[int]]:
        out = {}
        for rid in sorted(self.segments):
            out.setdefault(self.segment_cell(rid, cfg), []).append(rid)
        return out

    def undirected(self) -> dict[int, tuple[int, ...]]:
        if self._undirected is None:
            und = {rid: set() for rid in self.segments}
            for a, succ in self.adjacency.items():
                for b in succ:
                    und[a].add(b)
                    und[b].add(a)
            self._undirected = {k: tuple(sorted(v)) for k, v in und.items()}
        return self._undirected

    def path_length_m(self, rids: Sequence[int]) -> float:
        return sum(self.segments[r].length_m for r in rids)

    def is_connected_path(self, rids: Sequence[int]) -> bool:
        return all(b in self.adjacency[a] for a, b in zip(rids, rids[1:]))


# -- persistence -------------------------------------------------------------

def _segment_record(seg: RoadSegment, successors):
    return {
        "rid": seg.rid,
        "start_lat": seg.start.lat,
        "start_lon": seg.start.lon,
        "end_lat": seg.end.lat,
        "end_lon": seg.end.lon,
        "name": seg.name,
        "length_m": seg.length_m,
        "road_class": seg.road_class,
        "successors": list(successors),
    }


def load_roadnet(path) -> RoadGraph:
    segments, adjacency = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if "_schema" in rec:
                    continue
                seg = RoadSegment(
                    rid=int(rec["rid"]),
                    start=GeoPoint(rec["start_lat"], rec["start_lon"]),
                    end=GeoPoint(rec["end_lat"], rec["end_lon"]),
                    name=rec.get("name"),
                    length_m=rec.get("length_m"),
                    road_class=rec.get("road_class", "residential"),
                )
                succ = [int(s) for s in rec.get("successors", [])]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(path, lineno, str(exc)) from exc
            segments.append(seg)
            adjacency[seg.rid] = succ
    return RoadGraph(segments, adjacency)


def save_roadnet(g: RoadGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_schema": "roadnet", "version": 1}) + "\n")
        for rid in sorted(g.segments):
            fh.write(json.dumps(_segment_record(g.segments[rid], g.adjacency[rid]), ensure_ascii=False) + "\n")


# -- search -----------------------------------------------------------------

def _edge_costs(g: RoadGraph, w: SoftWeights | None, cfg: HexConfig | None):
    if w is None:
        return lambda rid: g.segments[rid].length_m
    if w.needs_cells and cfg is None:
        raise InvalidArgument("prefer/avoid cells need a HexConfig to locate segments")

    def cost(rid):
        seg = g.segments[rid]
        cell = g.segment_cell(rid, cfg) if w.needs_cells else None
        return seg.length_m * w.multiplier(seg, cell)

    return cost


def path_cost(g: RoadGraph, path: Sequence[int], w: SoftWeights | None = None, cfg: HexConfig | None = None) -> float:
    cost = _edge_costs(g, w, cfg)
    return sum(cost(r) for r in path[1:])


def dijkstra(g: RoadGraph, src: int, dst: int, w: SoftWeights | None = None,
             cfg: HexConfig | None = None) -> tuple[list[int] | None, float]:
    """Cheapest ``src -> dst`` rid path and its cost.

    Returns ``(None, inf)`` when ``dst`` is unreachable.  Equal-cost
    predecessors resolve to the smaller rid.
    """
    g.require(src, dst)
    if src == dst:
        return [src], 0.0
    cost = _edge_costs(g, w, cfg)
    dist = {src: 0.0}
    prev = {}
    done = set()
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == dst:
            break
        for v in g.adjacency[u]:
            if v in done:
                continue
            nd = d + cost(v)
            old = dist.get(v)
            if old is None or nd < old or (nd == old and u < prev[v]):
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    if dst not in done:
        return None, math.inf
    path = [dst]
    while path[-1] != src:
        path.append(prev[path[-1]])
    path.reverse()
    return path, dist[dst]


@dataclass
class ChainResult:
    path: list[int]
    cost: float
    dropped: list[dict] = field(default_factory=list)

    @property
    def failed(self):
        return len(self.path) <= 1 and bool(self.dropped)


def chain_dijkstra(g: RoadGraph, waypoints: Sequence[int], w: SoftWeights | None = None,
                   cfg: HexConfig | None = None) -> ChainResult:
    """Route through ``waypoints`` in order.

    A waypoint that cannot be reached from the current position is
    dropped and the next leg is planned from where the route stands.
    """
    if not waypoints:
        raise InvalidArgument("chain_dijkstra needs at least one waypoint")
    g.require(*waypoints)
    path = [waypoints[0]]
    total = 0.0
    dropped = []
    for i, target in enumerate(waypoints[1:], 1):
        leg, c = dijkstra(g, path[-1], target, w, cfg)
        if leg is None:
            dropped.append({"index": i, "rid": target, "reason": "unreachable", "from": path[-1]})
            continue
        path.extend(leg[1:])
        total += c
    return ChainResult(path, total, dropped)


def hop_distance(g: RoadGraph, a: int, b: int, max_k: int) -> int | None:
    """Hop count between two segments on the undirected view, or None beyond ``max_k``."""
    g.require(a, b)
    if max_k < 0:
        raise InvalidArgument("max_k must be >= 0")
    if a == b:
        return 0
    und = g.undirected()
    seen = {a}
    frontier = deque([(a, 0)])
    while frontier:
        u, d = frontier.popleft()
        if d == max_k:
            continue
        for v in und[u]:
            if v == b:
                return d + 1
            if v not in seen:
                seen.add(v)
                frontier.append((v, d + 1))
    return None
