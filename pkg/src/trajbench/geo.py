"""Geodesic helpers and a self-contained hexagonal cell index.

Cells live on a pointy-top axial hex lattice laid over a local
equirectangular projection around a city origin.  Axial ``r`` grows
southwards, so the neighbour ``(1, -1)`` is north-east of ``(0, 0)``.
"""

from __future__ import annotations

import json
import math
import re
import unicodedata
from dataclasses import dataclass, field
from functools import total_ordering
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DegenerateBearing, InvalidArgument, ParseError, ProjectionDomainError

EARTH_RADIUS_KM = 6371.0088
EARTH_RADIUS_M = EARTH_RADIUS_KM * 1000.0
MAX_PROJECTION_KM = 200.0

COMPASS8 = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")
_SQRT3 = math.sqrt(3.0)

# axial offsets in the fixed order E, NE, NW, W, SW, SE
_NEIGHBOR_OFFSETS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise InvalidArgument(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= lat <= 90.0:
            raise InvalidArgument(f"latitude out of range: {lat}")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", _wrap_lon(lon))


def _wrap_lon(lon):
    wrapped = (lon + 180.0) % 360.0 - 180.0
    # -0.0 and float fuzz at the seam
    return 0.0 if wrapped == 0.0 else wrapped


@total_ordering
@dataclass(frozen=True)
class CellId:
    q: int
    r: int

    def __lt__(self, other):
        if not isinstance(other, CellId):
            return NotImplemented
        return (self.q, self.r) < (other.q, other.r)

    def __str__(self):
        return f"{self.q},{self.r}"


@dataclass(frozen=True)
class HexConfig:
    origin: GeoPoint
    edge_m: float = 174.0

    def __post_init__(self):
        if not (math.isfinite(self.edge_m) and self.edge_m > 0):
            raise InvalidArgument(f"edge_m must be positive, got {self.edge_m}")

    def to_dict(self):
        return {"origin_lat": self.origin.lat, "origin_lon": self.origin.lon, "edge_m": self.edge_m}

    @classmethod
    def from_dict(cls, d):
        return cls(GeoPoint(d["origin_lat"], d["origin_lon"]), float(d.get("edge_m", 174.0)))


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def bearing_deg(a: GeoPoint, b: GeoPoint) -> float:
    """Initial great-circle bearing from ``a`` to ``b`` in [0, 360)."""
    if a == b:
        raise DegenerateBearing(f"bearing undefined for identical points {a}")
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    dlon = lon2 - lon1
    x = math.sin(dlon) * math.cos(lat2)
    y = math.cos(lat1) * math.sin(lat2) - math.sin(lat1) * math.cos(lat2) * math.cos(dlon)
    deg = math.degrees(math.atan2(x, y)) % 360.0
    return 0.0 if deg >= 360.0 else deg


def compass8(bearing: float) -> str:
    if not math.isfinite(bearing):
        raise InvalidArgument(f"non-finite bearing {bearing}")
    return COMPASS8[int(((bearing % 360.0) + 22.5) // 45.0) % 8]


def midpoint(a: GeoPoint, b: GeoPoint) -> GeoPoint:
    """Great-circle midpoint."""
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    bx = math.cos(lat2) * math.cos(lon2 - lon1)
    by = math.cos(lat2) * math.sin(lon2 - lon1)
    lat = math.atan2(math.sin(lat1) + math.sin(lat2), math.hypot(math.cos(lat1) + bx, by))
    lon = lon1 + math.atan2(by, math.cos(lat1) + bx)
    return GeoPoint(math.degrees(lat), math.degrees(lon))


# -- local projection and hex lattice ---------------------------------------

def project(p: GeoPoint, cfg: HexConfig) -> tuple[float, float]:
    """(east_m, north_m) of ``p`` relative to ``cfg.origin``."""
    if haversine_km(p, cfg.origin) > MAX_PROJECTION_KM:
        raise ProjectionDomainError(f"{p} is more than {MAX_PROJECTION_KM} km from the grid origin")
    dlon = _wrap_lon(p.lon - cfg.origin.lon)
    east = EARTH_RADIUS_M * math.radians(dlon) * math.cos(math.radians(cfg.origin.lat))
    north = EARTH_RADIUS_M * math.radians(p.lat - cfg.origin.lat)
    return east, north


def unproject(east: float, north: float, cfg: HexConfig) -> GeoPoint:
    lat = cfg.origin.lat + math.degrees(north / EARTH_RADIUS_M)
    lon = cfg.origin.lon + math.degrees(east / (EARTH_RADIUS_M * math.cos(math.radians(cfg.origin.lat))))
    return GeoPoint(lat, lon)


def _center_xy(q: int, r: int, edge: float) -> tuple[float, float]:
    return edge * _SQRT3 * (q + r / 2.0), -edge * 1.5 * r


def cell_center(c: CellId, cfg: HexConfig) -> GeoPoint:
    return unproject(*_center_xy(c.q, c.r, cfg.edge_m), cfg)


def _cube_round(fq: float, fr: float) -> tuple[int, int]:
    fs = -fq - fr
    q, r, s = round(fq), round(fr), round(fs)
    dq, dr, ds = abs(q - fq), abs(r - fr), abs(s - fs)
    if dq > dr and dq > ds:
        q = -r - s
    elif dr > ds:
        r = -q - s
    return int(q), int(r)


def cell_of_xy(east: float, north: float, edge: float) -> CellId:
    y = -north
    fq = (_SQRT3 / 3.0 * east - y / 3.0) / edge
    fr = (2.0 / 3.0 * y) / edge
    q0, r0 = _cube_round(fq, fr)
    # the true nearest centre is the rounded cell or one of its neighbours;
    # checking all seven settles float ties by smaller (q, r)
    best = None
    for dq, dr in ((0, 0),) + _NEIGHBOR_OFFSETS:
        q, r = q0 + dq, r0 + dr
        cx, cy = _center_xy(q, r, edge)
        key = ((east - cx) ** 2 + (north - cy) ** 2, q, r)
        if best is None or key < best:
            best = key
    return CellId(best[1], best[2])


def cell_of(p: GeoPoint, cfg: HexConfig) -> CellId:
    return cell_of_xy(*project(p, cfg), cfg.edge_m)


def cell_neighbors(c: CellId) -> tuple[CellId, ...]:
    return tuple(CellId(c.q + dq, c.r + dr) for dq, dr in _NEIGHBOR_OFFSETS)


def cell_ring_distance(a: CellId, b: CellId) -> int:
    dq, dr = a.q - b.q, a.r - b.r
    return (abs(dq) + abs(dr) + abs(dq + dr)) // 2


# -- names ------------------------------------------------------------------

_WS = re.compile(r"\s+")


def normalize_name(text: str) -> str:
    """Lowercase, strip diacritics, collapse whitespace."""
    decomposed = unicodedata.normalize("NFKD", text)
    stripped = "".join(ch for ch in decomposed if not unicodedata.combining(ch))
    return _WS.sub(" ", stripped.lower()).strip()


class Gazetteer:
    """Exact normalized-name matcher over a fixed vocabulary.

    Matching is leftmost-longest and non-overlapping, bounded by
    non-word characters on both sides.
    """

    def __init__(self, names: Iterable[str] = ()):
        self.names = frozenset(n for n in (normalize_name(x) for x in names) if n)
        ordered = sorted(self.names, key=lambda n: (-len(n), n))
        if ordered:
            alt = "|".join(re.escape(n) for n in ordered)
            self._pattern = re.compile(rf"(?<!\w)(?:{alt})(?!\w)")
        else:
            self._pattern = None

    def __contains__(self, name):
        return normalize_name(name) in self.names

    def __len__(self):
        return len(self.names)

    def __or__(self, other):
        return Gazetteer(self.names | other.names)

    def finditer(self, normalized: str):
        """``(name, start, end)`` over already-normalized text."""
        if self._pattern is None or not normalized:
            return
        for m in self._pattern.finditer(normalized):
            yield m.group(0), m.start(), m.end()

    def find(self, text: str) -> list[str]:
        """Names mentioned in ``text`` in order of appearance (repeats kept)."""
        return [name for name, _, _ in self.finditer(normalize_name(text))]

    def distinct(self, text: str) -> list[str]:
        return list(dict.fromkeys(self.find(text)))


# -- cell metadata ----------------------------------------------------------

@dataclass(frozen=True)
class CellMeta:
    cell: CellId
    description: str = ""
    poi_names: frozenset = field(default_factory=frozenset)
    road_names: frozenset = field(default_factory=frozenset)
    district: str = ""

    def __post_init__(self):
        object.__setattr__(self, "poi_names", frozenset(filter(None, map(normalize_name, self.poi_names))))
        object.__setattr__(self, "road_names", frozenset(filter(None, map(normalize_name, self.road_names))))

    @property
    def neighbors(self):
        return cell_neighbors(self.cell)

    def vocabulary(self) -> set[str]:
        vocab = set(self.poi_names) | set(self.road_names)
        if self.district:
            vocab.add(normalize_name(self.district))
        return vocab

    def to_record(self):
        return {
            "cell_q": self.cell.q,
            "cell_r": self.cell.r,
            "description": self.description,
            "poi_names": sorted(self.poi_names),
            "road_names": sorted(self.road_names),
            "district": self.district,
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            cell=CellId(int(rec["cell_q"]), int(rec["cell_r"])),
            description=rec.get("description", "") or "",
            poi_names=frozenset(rec.get("poi_names") or ()),
            road_names=frozenset(rec.get("road_names") or ()),
            district=rec.get("district", "") or "",
        )


class CellIndex:
    """Mapping of cells to their metadata, with gazetteer views."""

    def __init__(self, metas: Iterable[CellMeta], cfg: HexConfig):
        self.cfg = cfg
        self._metas = {}
        for m in metas:
            if m.cell in self._metas:
                raise InvalidArgument(f"duplicate cell {m.cell}")
            self._metas[m.cell] = m
        self._gazetteers = {}

    def __contains__(self, cell):
        return cell in self._metas

    def __getitem__(self, cell) -> CellMeta:
        return self._metas[cell]

    def __iter__(self) -> Iterator[CellMeta]:
        return (self._metas[c] for c in sorted(self._metas))

    def __len__(self):
        return len(self._metas)

    def get(self, cell, default=None):
        return self._metas.get(cell, default)

    def cells(self) -> list[CellId]:
        return sorted(self._metas)

    def description(self, cell) -> str:
        meta = self._metas.get(cell)
        return meta.description if meta else ""

    def vocabulary(self, cells: Iterable[CellId]) -> set[str]:
        vocab = set()
        for c in cells:
            meta = self._metas.get(c)
            if meta is not None:
                vocab |= meta.vocabulary()
        return vocab

    def gazetteer(self, kind="all") -> Gazetteer:
        """City-wide gazetteer; ``kind`` is one of all, poi, road, district."""
        if kind not in self._gazetteers:
            names = set()
            for m in self._metas.values():
                if kind in ("all", "poi"):
                    names |= m.poi_names
                if kind in ("all", "road"):
                    names |= m.road_names
                if kind in ("all", "district") and m.district:
                    names.add(m.district)
            self._gazetteers[kind] = Gazetteer(names)
        return self._gazetteers[kind]


def load_cell_meta(path, cfg: HexConfig) -> CellIndex:
    metas = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if "_schema" in rec:
                    continue
                metas.append(CellMeta.from_record(rec))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(path, lineno, str(exc)) from exc
    return CellIndex(metas, cfg)


def save_cell_meta(index: CellIndex, path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_schema": "cells", "version": 1}) + "\n")
        for meta in index:
            fh.write(json.dumps(meta.to_record(), ensure_ascii=False) + "\n")
