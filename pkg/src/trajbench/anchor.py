"""Instruction-to-route generation anchored on retrieved training trips.

Three stages: retrieve a similar training trajectory, pull structured
constraints out of the instruction, then route through grounded
waypoints and skeleton segments with a soft-weighted chain search.
DestSP and ConstrSP baselines reuse the same pieces.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ExtractionFailure, InvalidArgument, InvalidState, ProviderError
from .geo import CellId, CellIndex, GeoPoint, HexConfig, cell_center, haversine_km, normalize_name
from .metrics import text_tokens
from .providers import HashEmbedder
from .roadnet import RoadGraph, SoftWeights, chain_dijkstra
from .traj import Trajectory

log = logging.getLogger(__name__)

MODES = ("trajanchor", "destsp-bm25", "destsp-embed", "constrsp")
SPEED_KMH = 30.0
N_DEST = 5
N_PREF_CELLS = 5


# -- BM25 over cell descriptions ------------------------------------------------

class BM25:
    """Okapi BM25 with the Lucene-style non-negative idf."""

    def __init__(self, docs: Sequence[str], k1: float = 1.2, b: float = 0.75):
        self.k1, self.b = k1, b
        self.docs = [text_tokens(d) for d in docs]
        self.tf = []
        df = {}
        for toks in self.docs:
            counts = {}
            for t in toks:
                counts[t] = counts.get(t, 0) + 1
            self.tf.append(counts)
            for t in counts:
                df[t] = df.get(t, 0) + 1
        n = len(self.docs)
        self.idf = {t: math.log((n - f + 0.5) / (f + 0.5) + 1.0) for t, f in df.items()}
        self.avgdl = (sum(len(d) for d in self.docs) / n) if n else 0.0

    def scores(self, query: str) -> np.ndarray:
        out = np.zeros(len(self.docs))
        q = text_tokens(query)
        for i, (toks, counts) in enumerate(zip(self.docs, self.tf)):
            norm = self.k1 * (1 - self.b + self.b * len(toks) / self.avgdl) if self.avgdl else self.k1
            s = 0.0
            for t in q:
                f = counts.get(t)
                if f:
                    s += self.idf[t] * f * (self.k1 + 1) / (f + norm)
            out[i] = s

        return out


# -- instruction index ---------------------------------------------------------------

@dataclass
class TrajIndex:
    ids: list
    vectors: np.ndarray
    start_cells: list
    endpoints: list
    trajectories: dict

    def __len__(self):
        return len(self.ids)


def build_index(train: Sequence[tuple[str, Trajectory]], g: RoadGraph, cfg: HexConfig, embedder=None) -> TrajIndex:
    if not train:
        raise InvalidArgument("cannot build an index from an empty training set")
    embedder = embedder or HashEmbedder()
    instrs = [s for s, _ in train]
    trajs = [t for _, t in train]
    return TrajIndex(
        ids=[t.mm_id for t in trajs],
        vectors=embedder.embed(instrs),
        start_cells=[g.segment_cell(t.rid_list[0], cfg) for t in trajs],
        endpoints=[g[t.rid_list[-1]].end for t in trajs],
        trajectories={t.mm_id: t for t in trajs},
    )


@dataclass
class AnchorHits:
    ids: list
    scores: list
    filter_fallback: bool = False


def retrieve_anchor(instr: str, idx: TrajIndex, embedder=None, start_cell: CellId | None = None,
                    dest_hint: GeoPoint | None = None, pool: int = 5) -> AnchorHits:
    if pool < 1:
        raise InvalidArgument("pool must be >= 1")
    if len(idx) == 0:
        raise InvalidState("anchor index is empty")
    embedder = embedder or HashEmbedder()
    sims = idx.vectors @ embedder.embed([instr])[0]
    rows = list(range(len(idx)))
    fallback = False
    if start_cell is not None:
        kept = [i for i in rows if idx.start_cells[i] == start_cell]
        if kept:
            rows = kept
        else:
            fallback = True
    rows.sort(key=lambda i: (-sims[i], i))
    rows = rows[:pool]
    if dest_hint is not None:
        rows.sort(key=lambda i: haversine_km(idx.endpoints[i], dest_hint))
    return AnchorHits([idx.ids[i] for i in rows], [float(sims[i]) for i in rows], fallback)


# -- constraint extraction ---------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintSet:
    destination: str
    waypoints: tuple = ()
    preferences: tuple = ()  # (kind, phrase)

    def __post_init__(self):
        if not self.destination.strip():
            raise ExtractionFailure("empty destination phrase")

    def to_record(self):
        return {"destination": self.destination, "waypoints": list(self.waypoints),
                "preferences": [list(p) for p in self.preferences]}


_STOP = frozenset((
    "via through passing pass past avoid avoiding prefer preferring keep stay stick then and starting from "
    "on before after please fast now quickly asap if so but with would could i it"
).split())
_ARTICLES = ("the", "a", "an")
_CUES = {
    "dest": ("to", "towards", "toward", "for"),
    "way": ("via", "through", "passing through", "passing by", "passing", "pass by", "pass", "past", "by way of"),
    "avoid": ("avoid", "avoiding", "stay away from", "not through"),
    "prefer": ("prefer", "preferring", "keep to", "stick to", "stay near", "stay on"),
}
_CLAUSE = re.compile(r"[^.,!?;:]+")
_WORDS = re.compile(r"[\w'&-]+")
_FRAGMENT = re.compile(r"^\s*([^.!?]{1,40}?)\s*[.!?]")
_MAX_FRAGMENT_WORDS = 4
_NOT_PLACES = {"me", "you", "it", "there", "here", "go", "way", "the way", "work"}


def _phrases_after(text: str, kind: str) -> list[str]:
    """Word runs following a cue of ``kind``, cut at stop words and punctuation."""
    out = []
    cues = sorted((c.split() for c in _CUES[kind]), key=len, reverse=True)
    for clause in _CLAUSE.findall(text):
        words = _WORDS.findall(clause)
        i = 0
        while i < len(words):
            cue = next((c for c in cues if words[i:i + len(c)] == c), None)
            if cue is None:
                i += 1
                continue
            j = i + len(cue)
            while j < len(words) and words[j] in _ARTICLES:
                j += 1
            k = j
            while k < len(words) and words[k] not in _STOP:
                k += 1
            if k > j:
                out.append(" ".join(words[j:k]))
            i = max(k, i + 1)
    return out


class RuleExtractor:
    """Cue-pattern extractor over normalized text."""

    def __repr__(self):
        return "RuleExtractor()"

    def __call__(self, instr: str) -> ConstraintSet:
        text = normalize_name(instr)
        dest = next((p for p in _phrases_after(text, "dest") if p not in _NOT_PLACES), None)
        if dest is None:
            m = _FRAGMENT.match(text)
            if m and 1 <= len(m.group(1).split()) <= _MAX_FRAGMENT_WORDS:
                dest = m.group(1).strip()
        if not dest:
            raise ExtractionFailure(f"no destination found in {instr!r}")
        waypoints = tuple(dict.fromkeys(w for w in _phrases_after(text, "way") if w != dest))
        prefs = [("avoid", p) for p in _phrases_after(text, "avoid")]
        prefs += [("prefer", p) for p in _phrases_after(text, "prefer")]
        return ConstraintSet(dest, waypoints, tuple(prefs))


class ProviderExtractor:
    """Asks a text provider for JSON constraints, falling back to the rules."""

    SYSTEM = ("Extract routing constraints from a navigation request. Reply with JSON "
              '{"destination": str, "waypoints": [str], "preferences": [["prefer"|"avoid", str]]}.')

    def __init__(self, provider):
        self.provider = provider
        self._rules = RuleExtractor()

    def __call__(self, instr: str) -> ConstraintSet:
        try:
            data = json.loads(self.provider(self.SYSTEM, instr))
            dest = normalize_name(str(data.get("destination") or ""))
            if dest:
                return ConstraintSet(
                    dest,
                    tuple(normalize_name(w) for w in data.get("waypoints") or () if w),
                    tuple((k, normalize_name(p)) for k, p in data.get("preferences") or () if k in ("prefer", "avoid")),
                )
        except (ProviderError, ValueError, TypeError, AttributeError) as exc:
            log.warning("constraint extraction provider failed: %s", exc)
        return self._rules(instr)


def extract_constraints(extractor, instr: str) -> ConstraintSet:
    return (extractor or RuleExtractor())(instr)


# -- grounding ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellCandidate:
    cell: CellId
    score: float
    rids: tuple


class CellGrounder:
    """Ranks cells against a phrase, by embedding cosine or BM25."""

    def __init__(self, cells: CellIndex, g: RoadGraph, embedder=None, method: str = "embed"):
        if len(cells) == 0:
            raise InvalidState("no cells to ground against")
        if method not in ("embed", "bm25"):
            raise InvalidArgument(f"unknown grounding method {method!r}")
        self.cells = cells
        self.g = g
        self.method = method
        self.embedder = embedder or HashEmbedder()
        self.order = cells.cells()
        descs = [cells.description(c) for c in self.order]
        if method == "embed":
            self._vectors = self.embedder.embed(descs)
        else:
            self._bm25 = BM25(descs)
        self._by_cell = g.segments_in_cell(cells.cfg)

    def scores(self, phrase: str) -> np.ndarray:
        if self.method == "embed":
            return self._vectors @ self.embedder.embed([phrase])[0]
        return self._bm25.scores(phrase)

    def ground(self, phrase: str, top: int = 1) -> list[CellCandidate]:
        s = self.scores(phrase)
        ranked = sorted(range(len(self.order)), key=lambda i: (-s[i], i))
        out = []
        for i in ranked[:top]:
            c = self.order[i]
            out.append(CellCandidate(c, float(s[i]), tuple(sorted(self._by_cell.get(c, ())))))
        return out

    def representative(self, cand: CellCandidate, phrase: str = "") -> int | None:
        """One segment standing for a cell: a name match first, else nearest the centre."""
        if not cand.rids:
            return None
        key = normalize_name(phrase)
        named = [r for r in cand.rids if key and self.g[r].name and normalize_name(self.g[r].name) in key]
        pool = named or list(cand.rids)
        centre = cell_center(cand.cell, self.cells.cfg)
        return min(pool, key=lambda r: (haversine_km(self.g[r].midpoint, centre), r))

    def segments(self, phrase: str, top: int) -> list[int]:
        """Representative segments of the ``top`` best cells that hold any segment."""
        out = []
        for cand in self.ground(phrase, len(self.order)):
            rid = self.representative(cand, phrase)
            if rid is not None and rid not in out:
                out.append(rid)
            if len(out) == top:
                break
        return out


def ground_phrase(phrase: str, cells: CellIndex, g: RoadGraph, embedder=None, top: int = 5) -> list[CellCandidate]:
    return CellGrounder(cells, g, embedder).ground(phrase, top)


# -- route generation -------------------------------------------------------------------------

def sample_skeleton(anchor: Trajectory, m: int = 3) -> list[int]:
    """``m`` evenly spaced interior rids of ``anchor``."""
    if m < 0:
        raise InvalidArgument("m must be >= 0")
    n = len(anchor.rid_list)
    if m == 0 or n < 3:
        return []
    picks = []
    for j in range(m):
        pos = int(math.floor((j + 1) * (n - 1) / (m + 1) + 0.5))
        pos = min(max(pos, 1), n - 2)
        if pos not in picks:
            picks.append(pos)
    return [anchor.rid_list[p] for p in picks]


def synth_times(g: RoadGraph, rids: Sequence[int], t0: float = 0.0, speed_kmh: float = SPEED_KMH) -> list[float]:
    mps = speed_kmh / 3.6
    times, acc = [], t0
    for r in rids:
        times.append(round(acc, 3))
        acc += g[r].length_m / mps
    return times


@dataclass
class RoutePrediction:
    traj: Trajectory
    candidates: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def failed(self):
        return bool(self.diagnostics.get("failed"))

    def to_record(self):
        return {"traj_id": self.traj.mm_id, "rid_list": list(self.traj.rid_list),
                "time_list": list(self.traj.time_list), "diagnostics": self.diagnostics}


def _dedupe_chain(rids):
    out = []
    for r in rids:
        if not out or out[-1] != r:
            out.append(r)
    return out


def generate_route(g: RoadGraph, start: int, traj_id: Hashable, waypoints: Sequence[int] = (),
                   skeleton: Sequence[int] = (), dest_candidates: Sequence[int] = (),
                   weights: SoftWeights | None = None, cfg: HexConfig | None = None,
                   t0: float = 0.0) -> RoutePrediction:
    """Chain ``start -> waypoints -> skeleton -> dest_candidates[0]``.

    The other destination candidates yield alternative routes, used by
    the oracle metrics.
    """
    if not dest_candidates:
        raise InvalidArgument("generate_route needs at least one destination candidate")
    g.require(start, *waypoints, *skeleton, *dest_candidates)

    def route(dest):
        chain = _dedupe_chain([start, *waypoints, *skeleton, dest])
        return chain_dijkstra(g, chain, weights, cfg) if len(chain) > 1 else None

    def to_traj(res):
        path = res.path if res is not None else [start]
        return Trajectory(traj_id, tuple(path), tuple(synth_times(g, path, t0)))

    main = route(dest_candidates[0])
    diag = {
        "waypoints": list(waypoints),
        "skeleton": list(skeleton),
        "dest_candidates": list(dest_candidates),
        "dropped": main.dropped if main is not None else [],
        "failed": bool(main is not None and main.failed),
    }
    pred = to_traj(main)
    candidates = [pred] + [to_traj(route(d)) for d in dest_candidates[1:]]
    return RoutePrediction(pred, candidates, diag)


def compile_weights(cs: ConstraintSet, grounder: CellGrounder, top: int = N_PREF_CELLS) -> SoftWeights | None:
    prefer, avoid = set(), set()
    for kind, phrase in cs.preferences:
        target = prefer if kind == "prefer" else avoid
        target.update(c.cell for c in grounder.ground(phrase, top))
    if not prefer and not avoid:
        return None
    return SoftWeights(prefer_cells=frozenset(prefer), avoid_cells=frozenset(avoid))


# -- pipelines --------------------------------------------------------------------------------

@dataclass(frozen=True)
class RouteQuery:
    query_id: Hashable
    instruction: str
    start: int
    t0: float = 0.0


def _constraints_or_fallback(extractor, instr, diag):
    try:
        return extract_constraints(extractor, instr)
    except ExtractionFailure as exc:
        diag["extraction_failed"] = str(exc)
        return None


def destsp(q: RouteQuery, g: RoadGraph, grounder: CellGrounder, extractor=None, n_dest: int = N_DEST) -> RoutePrediction:
    diag = {}
    cs = _constraints_or_fallback(extractor, q.instruction, diag)
    phrase = cs.destination if cs else q.instruction
    dests = grounder.segments(phrase, n_dest)
    pred = generate_route(g, q.start, q.query_id, (), (), dests, None, grounder.cells.cfg, q.t0)
    pred.diagnostics.update(diag, mode=f"destsp-{grounder.method}", destination=phrase)
    return pred


def constrsp(q: RouteQuery, g: RoadGraph, grounder: CellGrounder, extractor=None, n_dest: int = N_DEST) -> RoutePrediction:
    diag = {}
    cs = _constraints_or_fallback(extractor, q.instruction, diag)
    phrase = cs.destination if cs else q.instruction
    dests = grounder.segments(phrase, n_dest)
    wps = [r for w in (cs.waypoints if cs else ()) for r in grounder.segments(w, 1)]
    pred = generate_route(g, q.start, q.query_id, wps, (), dests, None, grounder.cells.cfg, q.t0)
    pred.diagnostics.update(diag, mode="constrsp", destination=phrase)
    return pred


def trajanchor(q: RouteQuery, g: RoadGraph, grounder: CellGrounder, idx: TrajIndex, extractor=None,
               pool: int = 5, m: int = 3, n_dest: int = N_DEST, oracle_dest: int | None = None) -> RoutePrediction:
    """Full pipeline; ``oracle_dest`` replaces the grounded destination candidates."""
    cfg = grounder.cells.cfg
    diag = {}
    cs = _constraints_or_fallback(extractor, q.instruction, diag)
    phrase = cs.destination if cs else q.instruction
    dests = [oracle_dest] if oracle_dest is not None else grounder.segments(phrase, n_dest)
    hint = g[dests[0]].end if dests else None
    hits = retrieve_anchor(q.instruction, idx, grounder.embedder, g.segment_cell(q.start, cfg), hint, pool)
    anchor = idx.trajectories[hits.ids[0]]
    if not dests:
        dests = [anchor.rid_list[-1]]
    skeleton = [r for r in sample_skeleton(anchor, m) if r != q.start]
    wps = [r for w in (cs.waypoints if cs else ()) for r in grounder.segments(w, 1)]
    weights = compile_weights(cs, grounder) if cs else None
    pred = generate_route(g, q.start, q.query_id, wps, skeleton, dests, weights, cfg, q.t0)
    pred.diagnostics.update(diag, mode="trajanchor", destination=phrase, anchor=hits.ids[0],
                            start_filter_fallback=hits.filter_fallback,
                            constraints=cs.to_record() if cs else None)
    return pred


class AnchorRouter(BaseEstimator):
    """Estimator wrapper: ``fit`` on (instruction, trajectory) pairs, ``predict`` route queries."""

    def __init__(self, graph=None, cells=None, mode="trajanchor", pool=5, skeleton=3,
                 n_dest=N_DEST, embedder=None, extractor=None):
        self.graph = graph
        self.cells = cells
        self.mode = mode
        self.pool = pool
        self.skeleton = skeleton
        self.n_dest = n_dest
        self.embedder = embedder
        self.extractor = extractor

    def fit(self, X, y=None):
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.graph is None or self.cells is None:
            raise InvalidArgument("AnchorRouter needs a road graph and a cell index")
        emb = self.embedder or HashEmbedder()
        method = "bm25" if self.mode == "destsp-bm25" else "embed"
        self.grounder_ = CellGrounder(self.cells, self.graph, emb, method)
        self.index_ = build_index(list(X), self.graph, self.cells.cfg, emb) if self.mode == "trajanchor" else None
        return self

    def _one(self, q: RouteQuery, oracle_dest=None):
        if self.mode == "trajanchor":
            return trajanchor(q, self.graph, self.grounder_, self.index_, self.extractor,
                              self.pool, self.skeleton, self.n_dest, oracle_dest)
        if self.mode == "constrsp":
            return constrsp(q, self.graph, self.grounder_, self.extractor, self.n_dest)
        return destsp(q, self.graph, self.grounder_, self.extractor, self.n_dest)

    def predict(self, X: Sequence[RouteQuery], oracle_dests: Sequence[int] | None = None) -> list[RoutePrediction]:
        if not hasattr(self, "grounder_"):
            raise InvalidState("AnchorRouter is not fitted")
        if oracle_dests is None:
            return [self._one(q) for q in X]
        return [self._one(q, d) for q, d in zip(X, oracle_dests)]
