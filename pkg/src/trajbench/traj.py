"""Trajectories and their run-length compression into semantic phases."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Hashable, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from .errors import InvalidArgument, ParseError, UnresolvedSegmentError
from .geo import CellId, CellIndex, GeoPoint, HexConfig, cell_of, compass8, normalize_name
from .roadnet import RoadGraph, RoadSegment

ROLES = ("O", "T", "D")
TURN_THRESHOLD_DEG = 30.0


@dataclass(frozen=True)
class Trajectory:
    mm_id: Hashable
    rid_list: tuple
    time_list: tuple

    def __post_init__(self):
        rids = tuple(int(r) for r in self.rid_list)
        times = tuple(float(t) for t in self.time_list)
        if len(rids) != len(times):
            raise InvalidArgument(f"trajectory {self.mm_id}: {len(rids)} rids but {len(times)} timestamps")
        if not rids:
            raise InvalidArgument(f"trajectory {self.mm_id} is empty")
        if any(not math.isfinite(t) for t in times):
            raise InvalidArgument(f"trajectory {self.mm_id}: non-finite timestamp")
        if any(b < a for a, b in zip(times, times[1:])):
            raise InvalidArgument(f"trajectory {self.mm_id}: timestamps decrease")
        object.__setattr__(self, "rid_list", rids)
        object.__setattr__(self, "time_list", times)

    def __len__(self):
        return len(self.rid_list)

    @property
    def duration(self) -> float:
        return self.time_list[-1] - self.time_list[0]

    def to_record(self):
        times = [int(t) if float(t).is_integer() else t for t in self.time_list]
        return {"mm_id": self.mm_id, "rid_list": list(self.rid_list), "time_list": times}

    @classmethod
    def from_record(cls, rec):
        return cls(rec["mm_id"], tuple(rec["rid_list"]), tuple(rec["time_list"]))


def check_resolvable(t: Trajectory, g: RoadGraph) -> None:
    missing = {r for r in t.rid_list if r not in g}
    if missing:
        raise UnresolvedSegmentError(missing)


def trajectory_points(t: Trajectory, g: RoadGraph) -> list[GeoPoint]:
    """Polyline of a trajectory: first segment start, then every segment end."""
    check_resolvable(t, g)
    segs = [g[r] for r in t.rid_list]
    return [segs[0].start] + [s.end for s in segs]


def load_trajectories(path, min_len=2) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if "_schema" in rec:
                    continue
                t = Trajectory.from_record(rec)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(path, lineno, str(exc)) from exc
            if len(t) < min_len:
                raise ParseError(path, lineno, f"trajectory {t.mm_id} has fewer than {min_len} segments")
            out.append(t)
    return out


def save_trajectories(trajs: Sequence[Trajectory], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_schema": "trajectories", "version": 1}) + "\n")
        for t in trajs:
            fh.write(json.dumps(t.to_record()) + "\n")


# -- phases -------------------------------------------------------------------

@dataclass(frozen=True)
class Phase:
    h: CellId
    n: int
    d: str
    dt: float
    role: str
    road_names: tuple = ()
    desc: str = ""


@dataclass(frozen=True)
class PhaseSeq:
    traj_id: Hashable
    phases: tuple
    n_rids: int
    start_time: float
    segment_cells: tuple = field(default=(), repr=False)

    @property
    def n_phases(self):
        return len(self.phases)

    @property
    def total_duration(self):
        return sum(p.dt for p in self.phases)

    @property
    def cells(self) -> list[CellId]:
        return [p.h for p in self.phases]

    def to_json(self):
        """Dictionary in the published compressed-trajectory layout."""
        return {
            "traj_id": self.traj_id,
            "meta": {
                "n_rids": self.n_rids,
                "n_phases": self.n_phases,
                "start_time": format_timestamp(self.start_time),
                "total_duration": format_duration(self.total_duration),
            },
            "phases": [
                {
                    "p": k,
                    "role": p.role,
                    "dir": p.d,
                    "n": p.n,
                    "duration": format_duration(p.dt),
                    "road_names": list(p.road_names),
                    "desc": p.desc,
                }
                for k, p in enumerate(self.phases)
            ],
        }


def format_timestamp(epoch: float) -> str:
    dt = datetime.fromtimestamp(epoch, tz=timezone.utc)
    hour = dt.hour % 12 or 12
    ampm = "AM" if dt.hour < 12 else "PM"
    return f"{dt:%A}, {dt:%b} {dt.day}, {dt.year} at {hour}:{dt.minute:02d} {ampm}"


def format_duration(seconds: float) -> str:
    s = int(round(seconds))
    h, rem = divmod(s, 3600)
    m, sec = divmod(rem, 60)
    if h:
        return f"{h} hr {m} min {sec} sec"
    if m:
        return f"{m} min {sec} sec"
    return f"{sec} sec"


def dominant_cell(seg: RoadSegment, cfg: HexConfig) -> CellId:
    return cell_of(seg.midpoint, cfg)


def circular_mean_deg(bearings: Sequence[float], weights: Sequence[float]) -> float | None:
    """Weighted circular mean in [0, 360), or None for a zero resultant."""
    sx = sum(w * math.sin(math.radians(b)) for b, w in zip(bearings, weights))
    cy = sum(w * math.cos(math.radians(b)) for b, w in zip(bearings, weights))
    if math.hypot(sx, cy) < 1e-12:
        return None
    deg = math.degrees(math.atan2(sx, cy)) % 360.0
    return 0.0 if deg >= 360.0 else deg


def _distinct_names(segs):
    seen, names = set(), []
    for s in segs:
        if s.name:
            key = normalize_name(s.name)
            if key and key not in seen:
                seen.add(key)
                names.append(s.name)
    return tuple(names)


def compress(t: Trajectory, g: RoadGraph, cells: CellIndex | None, cfg: HexConfig) -> PhaseSeq:
    check_resolvable(t, g)
    segs = [g[r] for r in t.rid_list]
    seg_cells = [g.segment_cell(r, cfg) for r in t.rid_list]

    runs = []  # (start index, end index exclusive)
    start = 0
    for i in range(1, len(segs) + 1):
        if i == len(segs) or seg_cells[i] != seg_cells[start]:
            runs.append((start, i))
            start = i

    phases = []
    last = len(runs) - 1
    for k, (i, j) in enumerate(runs):
        members = segs[i:j]
        heading = circular_mean_deg([s.bearing for s in members], [s.length_m for s in members])
        if heading is None:
            heading = members[0].bearing
        # each phase owns the time until the next phase starts
        t_end = t.time_list[j] if k < last else t.time_list[-1]
        if k == 0:
            role = "O"
        elif k == last:
            role = "D"
        else:
            role = "T"
        phases.append(Phase(
            h=seg_cells[i],
            n=j - i,
            d=compass8(heading),
            dt=t_end - t.time_list[i],
            role=role,
            road_names=_distinct_names(members),
            desc=cells.description(seg_cells[i]) if cells is not None else "",
        ))
    return PhaseSeq(t.mm_id, tuple(phases), len(segs), t.time_list[0], tuple(seg_cells))


def save_phase_seqs(seqs: Sequence[PhaseSeq], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ps in seqs:
            fh.write(json.dumps(ps.to_json(), ensure_ascii=False) + "\n")


class PhaseCompressor(TransformerMixin, BaseEstimator):
    """Transformer turning trajectories into phase sequences."""

    def __init__(self, graph=None, cells=None, cfg=None):
        self.graph = graph
        self.cells = cells
        self.cfg = cfg

    def fit(self, X, y=None):
        if self.graph is None or self.cfg is None:
            raise InvalidArgument("PhaseCompressor needs a road graph and a HexConfig")
        return self

    def transform(self, X):
        return [compress(t, self.graph, self.cells, self.cfg) for t in X]


# -- structural features --------------------------------------------------------

def _signed_turn(a: float, b: float) -> float:
    d = (b - a + 180.0) % 360.0 - 180.0
    return 180.0 if d == -180.0 else d


def structural_features(t: Trajectory, g: RoadGraph, cfg: HexConfig) -> dict:
    """Geometry-only summary of a trajectory.

    Returns a JSON-friendly dict with per-step bearing changes, the
    turns above ``TURN_THRESHOLD_DEG``, total duration, ordered road
    names and the per-phase compass headings.
    """
    check_resolvable(t, g)
    segs = [g[r] for r in t.rid_list]
    changes = [round(_signed_turn(a.bearing, b.bearing), 6) for a, b in zip(segs, segs[1:])]
    turns = [{"after_segment": i + 1, "angle": c} for i, c in enumerate(changes) if abs(c) >= TURN_THRESHOLD_DEG]
    ps = compress(t, g, None, cfg)
    start, end = segs[0].start, segs[-1].end
    return {
        "n_segments": len(segs),
        "start": [round(start.lat, 6), round(start.lon, 6)],
        "end": [round(end.lat, 6), round(end.lon, 6)],
        "length_m": round(g.path_length_m(t.rid_list), 1),
        "total_duration_s": t.duration,
        "bearing_changes": changes,
        "turns": turns,
        "road_names": list(_distinct_names(segs)),
        "phase_headings": [p.d for p in ps.phases],
        "start_time": format_timestamp(t.time_list[0]),
    }


def format_structural_features(feats: dict, with_names=True) -> str:
    lines = [
        f"Start: {feats['start'][0]:.6f}, {feats['start'][1]:.6f}",
        f"End: {feats['end'][0]:.6f}, {feats['end'][1]:.6f}",
        f"Departure: {feats['start_time']}",
        f"Segments: {feats['n_segments']}  Length: {feats['length_m']:.0f} m  "
        f"Duration: {format_duration(feats['total_duration_s'])}",
        "Headings: " + " > ".join(feats["phase_headings"]),
    ]
    if feats["turns"]:
        turns = ", ".join(
            f"{'right' if tr['angle'] > 0 else 'left'} {abs(tr['angle']):.0f} deg after segment {tr['after_segment']}"
            for tr in feats["turns"]
        )
    else:
        turns = "none"
    lines.append(f"Turns: {turns}")
    if with_names:
        lines.append("Roads: " + (", ".join(feats["road_names"]) or "unnamed"))
    return "\n".join(lines)
