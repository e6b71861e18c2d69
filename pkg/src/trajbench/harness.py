"""City bundles on disk, the synthetic mini-city, splits and benchmark runs."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .anchor import AnchorRouter, RouteQuery
from .annotate import (INSTRUCTION_FIELDS, QUERY_FIELDS, AnnotationRecord, TemplateGenerator, build_prompt,
                       generate, load_annotations, save_annotations)
from .errors import ConfigError, InvalidArgument
from .fuse import FuseRetriever
from .geo import CellIndex, CellMeta, GeoPoint, HexConfig, load_cell_meta, save_cell_meta, unproject
from .intent import (IntentProfile, PersonaStyle, default_assignment, load_pools, profile_rng,
                     sample_persona_style, sample_profile)
from .metrics import (TASK1_KEYS, TASK2_KEYS, TASK3_KEYS, cell_set, retrieval_report, task1_report,
                      task3_report)
from .providers import HashEmbedder
from .qc import HeuristicJudge, judge_score, run_qc
from .rap import RapCaptioner, caption
from .roadnet import RoadGraph, RoadSegment, SoftWeights, chain_dijkstra, load_roadnet, save_roadnet
from .traj import Trajectory, check_resolvable, compress, load_trajectories, save_trajectories

log = logging.getLogger(__name__)

FILES = {
    "config": "config.json",
    "roadnet": "roadnet.jsonl",
    "cells": "cells.jsonl",
    "trajectories": "trajectories.jsonl",
    "annotations": "annotations.jsonl",
    "phases": "phases.jsonl",
    "intents": "intents.jsonl",
    "qc": "qc.jsonl",
    "scores": "scores.jsonl",
    "split": "split.json",
}


# -- bundles -----------------------------------------------------------------------

@dataclass
class CityBundle:
    cfg: HexConfig
    graph: RoadGraph
    cells: CellIndex
    trajectories: list
    annotations: list = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        for t in self.trajectories:
            check_resolvable(t, self.graph)

    def trajectory(self, tid) -> Trajectory:
        return self._by_id()[tid]

    def _by_id(self):
        if not hasattr(self, "_ids"):
            self._ids = {t.mm_id: t for t in self.trajectories}
        return self._ids

    def annotation_map(self) -> dict:
        return {a.traj_id: a for a in self.annotations}

    def save(self, root) -> "CityBundle":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        (root / FILES["config"]).write_text(json.dumps(self.cfg.to_dict(), indent=2) + "\n")
        save_roadnet(self.graph, root / FILES["roadnet"])
        save_cell_meta(self.cells, root / FILES["cells"])
        save_trajectories(self.trajectories, root / FILES["trajectories"])
        if self.annotations:
            save_annotations(self.annotations, root / FILES["annotations"])
        self.root = root
        return self

    @classmethod
    def load(cls, root, min_len=2) -> "CityBundle":
        root = Path(root)
        cfg_path = root / FILES["config"]
        if not cfg_path.exists():
            raise ConfigError(f"{root} has no {FILES['config']}")
        cfg = HexConfig.from_dict(json.loads(cfg_path.read_text()))
        ann_path = root / FILES["annotations"]
        return cls(
            cfg=cfg,
            graph=load_roadnet(root / FILES["roadnet"]),
            cells=load_cell_meta(root / FILES["cells"], cfg),
            trajectories=load_trajectories(root / FILES["trajectories"], min_len),
            annotations=load_annotations(ann_path) if ann_path.exists() else [],
            root=root,
        )


# -- splits ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.70, 0.10, 0.20)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or not math.isclose(sum(self.ratios), 1.0):
            raise InvalidArgument(f"split ratios must be three non-negative numbers summing to 1, got {self.ratios}")


def split(ids: Sequence[Hashable], spec: SplitSpec = SplitSpec()) -> tuple[list, list, list]:
    if not ids:
        raise InvalidArgument("nothing to split")
    n = len(ids)
    order = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = math.floor(round(spec.ratios[0] * n, 9))
    n_val = math.floor(round(spec.ratios[1] * n, 9))
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def save_split(parts, spec: SplitSpec, path) -> None:
    train, val, test = parts
    data = {"seed": spec.seed, "ratios": list(spec.ratios), "train": train, "val": val, "test": test}
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def load_split(path) -> dict:
    return json.loads(Path(path).read_text())


# -- synthetic city --------------------------------------------------------------------------

_STREETS = ("Harbor Street", "Mill Street", "Canal Street", "Bridge Street", "Market Street", "Chapel Street",
            "Orchard Street", "Quarry Street", "Foundry Street", "Ferry Street", "Tanner Street", "Beacon Street")
_AVENUES = ("Owens Avenue", "Baker Avenue", "Collins Avenue", "Darwin Avenue", "Elgin Avenue", "Fulton Avenue",
            "Grover Avenue", "Hudson Avenue", "Irving Avenue", "Jasper Avenue", "Kepler Avenue", "Lowell Avenue")
_POI_HEADS = ("Rose", "Cedar", "Lantern", "Granite", "Willow", "Copper", "Maple", "Falcon", "Silver", "Ivy",
              "Juniper", "Amber", "Birch", "Cobalt", "Dove", "Ember")
_POI_KINDS = ("Cafe", "Library", "Hotel", "Bakery", "Museum", "Clinic", "Theater", "Market Hall", "Gallery",
              "Gym", "School", "Pharmacy")
_DISTRICTS = (("Northgate", "Eastfield"), ("Old Town", "Riverside"))
_LABELS = ("GREEN/PARK", "URBAN/INLAND")
CITY_ORIGIN = GeoPoint(41.1496, -8.6110)
EPOCH_2014_06_14 = 1402704000


def _street_name(pool, i, kind):
    return pool[i] if i < len(pool) else f"Street {i + 1} {kind}"


def synth_graph(n: int, spacing_m: float, cfg: HexConfig, rng: np.random.Generator) -> RoadGraph:
    rows = [_street_name(_STREETS, i, "Street") for i in rng.permutation(max(n, len(_STREETS)))[:n]]
    cols = [_street_name(_AVENUES, i, "Avenue") for i in rng.permutation(max(n, len(_AVENUES)))[:n]]
    half = (n - 1) / 2.0
    node = {(i, j): unproject((j - half) * spacing_m, (i - half) * spacing_m, cfg) for i in range(n) for j in range(n)}
    edges = []
    for i in range(n):
        for j in range(n):
            if j + 1 < n:
                edges.append(((i, j), (i, j + 1), rows[i], "primary" if i in (0, n - 1) else "residential"))
            if i + 1 < n:
                edges.append(((i, j), (i + 1, j), cols[j], "secondary" if j in (0, n - 1) else "tertiary"))
    segments, ends = [], {}
    for u, v, name, cls in edges:
        for a, b in ((u, v), (v, u)):
            rid = len(segments)
            segments.append(RoadSegment(rid, node[a], node[b], name, road_class=cls))
            ends[rid] = (a, b)
    by_start = {}
    for rid, (a, _) in ends.items():
        by_start.setdefault(a, []).append(rid)
    # any continuation except turning straight back
    adjacency = {rid: sorted(s for s in by_start.get(b, []) if ends[s][1] != a) for rid, (a, b) in ends.items()}
    return RoadGraph(segments, adjacency)


def synth_cells(g: RoadGraph, cfg: HexConfig, rng: np.random.Generator) -> CellIndex:
    by_cell = g.segments_in_cell(cfg)
    pois = [f"{h} {k}" for h in _POI_HEADS for k in _POI_KINDS]
    order = rng.permutation(len(pois))
    cells_sorted = sorted(by_cell)
    if len(cells_sorted) > len(pois):
        raise InvalidArgument("grid too large for the POI name pool")
    south = max(c.r for c in cells_sorted)
    metas = []
    for k, cell in enumerate(cells_sorted):
        roads = sorted({g[r].name for r in by_cell[cell]})
        mid = g[by_cell[cell][0]].midpoint
        north = mid.lat >= cfg.origin.lat
        east = mid.lon >= cfg.origin.lon
        district = _DISTRICTS[0 if north else 1][1 if east else 0]
        label = "WATERFRONT" if cell.r >= south - 1 else _LABELS[int(rng.integers(2))]
        poi = pois[order[k]]
        desc = f"POIs: {poi} | District: {district} | Roads: {', '.join(roads)} | GNN: {label}"
        metas.append(CellMeta(cell, desc, frozenset([poi]), frozenset(roads), district))
    return CellIndex(metas, cfg)


def synth_trajectories(g: RoadGraph, n_traj: int, rng: np.random.Generator,
                       min_len: int = 6, max_len: int = 16) -> list[Trajectory]:
    """Goal-directed trips: each driver has their own taste for road classes
    and sometimes swings by an intermediate stop."""
    rids = sorted(g.segments)
    classes = sorted({g[r].road_class for r in rids})
    out = []
    while len(out) < n_traj:
        src, dst = (rids[int(i)] for i in rng.choice(len(rids), size=2, replace=False))
        bias = {c: float(rng.uniform(0.7, 1.3)) for c in classes}
        w = SoftWeights(class_bias=bias)
        chain = [src, dst]
        if rng.random() < 0.4:
            chain.insert(1, rids[int(rng.integers(len(rids)))])
        res = chain_dijkstra(g, _dedupe(chain), w)
        path = res.path
        if res.dropped or not min_len <= len(path) <= max_len:
            continue
        speed = float(rng.uniform(20.0, 45.0)) / 3.6
        t = EPOCH_2014_06_14 + int(rng.integers(0, 60)) * 86400 + int(rng.integers(0, 86400))
        times = []
        for r in path:
            times.append(t)
            t += int(round(g[r].length_m / speed + rng.integers(0, 20)))
        out.append(Trajectory(len(out), tuple(path), tuple(times)))
    return out


def _dedupe(chain):
    return [r for i, r in enumerate(chain) if i == 0 or r != chain[i - 1]]


def synth_city(n: int = 5, n_traj: int = 100, seed: int = 0, spacing_m: float = 350.0,
               annotate: bool = True) -> CityBundle:
    if n < 3:
        raise InvalidArgument("grid size must be at least 3")
    rng = np.random.default_rng(seed)
    cfg = HexConfig(CITY_ORIGIN)
    g = synth_graph(n, spacing_m, cfg, rng)
    cells = synth_cells(g, cfg, rng)
    trajs = synth_trajectories(g, n_traj, rng)
    bundle = CityBundle(cfg, g, cells, trajs)
    if annotate:
        intents = sample_intents([t.mm_id for t in trajs], seed)
        bundle.annotations = annotate_all(bundle, compress_all(bundle), intents)
    return bundle


# -- pipeline stages -----------------------------------------------------------------------------

def compress_all(bundle: CityBundle) -> list:
    return [compress(t, bundle.graph, bundle.cells, bundle.cfg) for t in bundle.trajectories]


@dataclass(frozen=True)
class IntentDraw:
    profile: IntentProfile
    style: PersonaStyle
    assignment: dict

    def to_record(self):
        rec = self.profile.to_record()
        rec.update(self.style.to_record())
        rec["assignment"] = {str(q): list(d) for q, d in self.assignment.items()}
        return rec

    @classmethod
    def from_record(cls, rec):
        styles = {k: (v["form"], v["length"]) for k, v in rec["styles"].items()}
        return cls(IntentProfile(rec["traj_id"], tuple(rec["scenarios"])),
                   PersonaStyle(rec["persona"], styles),
                   {int(q): tuple(d) for q, d in rec["assignment"].items()})


def sample_intents(ids: Sequence[Hashable], seed: int, pools: dict | None = None) -> dict:
    pools = pools or load_pools()
    out = {}
    for tid in ids:
        rng = profile_rng(seed, tid)
        profile = sample_profile(rng, tid)
        out[tid] = IntentDraw(profile, sample_persona_style(rng, pools), default_assignment(rng))
    return out


def save_jsonl(records, path, schema: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if schema:
            fh.write(json.dumps({"_schema": schema, "version": 1}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def load_jsonl(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                if "_schema" not in rec:
                    out.append(rec)
    return out


def annotate_all(bundle: CityBundle, phase_seqs, intents: dict, generator=None) -> list[AnnotationRecord]:
    gen = generator or TemplateGenerator()
    records = []
    for ps in phase_seqs:
        draw = intents[ps.traj_id]
        records.append(generate(gen, build_prompt(ps, draw.profile, draw.style, draw.assignment)))
    return records


def qc_all(bundle: CityBundle, phase_seqs, records, judge=None):
    by_id = {ps.traj_id: ps for ps in phase_seqs}
    outcomes = [run_qc(r, by_id[r.traj_id], bundle.cells, judge) for r in records]
    return outcomes


def judge_all(bundle: CityBundle, phase_seqs, records, judge=None):
    by_id = {ps.traj_id: ps for ps in phase_seqs}
    judge = judge or HeuristicJudge()
    return [judge_score(judge, r, by_id[r.traj_id], bundle.cells) for r in records]


# -- benchmark runs ------------------------------------------------------------------------------

TASK_METHODS = {
    1: ("trajanchor", "destsp-bm25", "destsp-embed", "constrsp", "echo"),
    2: ("trajfuse", "oracle"),
    3: ("rap", "sem", "struct", "echo"),
}
STYLE_NAMES = ("literal", "concise", "chatty")


@dataclass
class BenchmarkResult:
    report: dict
    figure_rows: list
    predictions: list
    diagnostics: dict


def _split_ids(bundle, parts):
    if parts is None:
        parts = split([t.mm_id for t in bundle.trajectories])
    train, _, test = parts
    if not test:
        raise InvalidArgument("test split is empty")
    return list(train), list(test)


def _need_annotations(bundle, ids):
    ann = bundle.annotation_map()
    missing = [i for i in ids if i not in ann]
    if missing:
        raise InvalidArgument(f"{len(missing)} trajectories lack annotations, e.g. {missing[:3]}")
    return ann


def run_task1(bundle: CityBundle, method: str, parts=None, pool=5, skeleton=3, eps_km=0.1,
              embedder=None, extractor=None) -> BenchmarkResult:
    train, test = _split_ids(bundle, parts)
    ann = _need_annotations(bundle, train + test)
    g = bundle.graph
    queries, gts = [], {}
    for tid in test:
        gt = bundle.trajectory(tid)
        for style, fname in zip(STYLE_NAMES, INSTRUCTION_FIELDS):
            qid = f"{tid}:{style}"
            queries.append(RouteQuery(qid, getattr(ann[tid], fname), gt.rid_list[0], gt.time_list[0]))
            gts[qid] = Trajectory(qid, gt.rid_list, gt.time_list)
    if method == "echo":
        preds = {q.query_id: gts[q.query_id] for q in queries}
        cands, records = None, [{"traj_id": q, **gts[q].to_record()} for q in sorted(gts)]
    else:
        router = AnchorRouter(g, bundle.cells, method, pool, skeleton, embedder=embedder, extractor=extractor)
        router.fit([(getattr(ann[t], f), bundle.trajectory(t)) for t in train for f in INSTRUCTION_FIELDS])
        out = router.predict(queries)
        preds = {p.traj.mm_id: p.traj for p in out}
        cands = {p.traj.mm_id: p.candidates for p in out}
        records = [p.to_record() for p in out]
    report = task1_report(preds, gts, g, bundle.cfg, cands, eps_km=eps_km)
    report.update(task=1, method=method)
    rows = []
    for style in STYLE_NAMES:
        ids = [q for q in gts if q.endswith(":" + style)]
        sub = task1_report({q: preds[q] for q in ids}, {q: gts[q] for q in ids}, g, bundle.cfg,
                           {q: cands[q] for q in ids} if cands else None, eps_km=eps_km)
        report.setdefault("by_style", {})[style] = {k: sub[k] for k in ("h_at_5", "dest_hit", "jac")}
        rows += [{"group": style, "metric": k, "value": sub[k]} for k in ("h_at_5", "dest_hit", "jac")]
    return BenchmarkResult(report, rows, records, {})


def run_task2(bundle: CityBundle, method: str, parts=None, epochs=50, batch_size=32, lr=0.5, seed=0,
              j_mode="max", embedder=None) -> BenchmarkResult:
    train, test = _split_ids(bundle, parts)
    ann = _need_annotations(bundle, train + test)
    g, cells = bundle.graph, bundle.cells
    cellsets = {t: cell_set(bundle.trajectory(t), g, bundle.cfg) for t in test}
    qtexts, gt = {}, {}
    for tid in test:
        for k, fname in enumerate(QUERY_FIELDS, 1):
            qid = f"{tid}:q{k}"
            qtexts[qid] = getattr(ann[tid], fname)
            gt[qid] = tid
    qids = sorted(qtexts)
    if method == "oracle":
        ranked = {q: [gt[q]] + sorted((t for t in test if t != gt[q]), key=str) for q in qids}
        losses = []
    elif method == "trajfuse":
        model = FuseRetriever(g, cells, embedder, epochs, batch_size, lr, seed, k=50)
        pairs = [(getattr(ann[t], f), bundle.trajectory(t)) for t in train for f in QUERY_FIELDS]
        model.fit(pairs).index([bundle.trajectory(t) for t in test])
        ranked = dict(zip(qids, model.predict([qtexts[q] for q in qids])))
        losses = model.losses_
    else:
        raise InvalidArgument(f"unknown task 2 method {method!r}")
    report = retrieval_report(ranked, gt, cellsets, j_mode=j_mode)
    report.update(task=2, method=method)
    report["final_loss"] = round(losses[-1], 12) if losses else None
    # per-dimension breakdown: which dimensions each query was assigned to carry
    rows = []
    intents = sample_intents(test, seed)
    for dim in (1, 2, 3, 4):
        sub = [q for q in qids if dim in intents[gt[q]].assignment[int(q.rsplit("q", 1)[1])]]
        if not sub:
            continue
        r = retrieval_report({q: ranked[q] for q in sub}, gt, cellsets, j_mode=j_mode)
        report.setdefault("by_dimension", {})[str(dim)] = {k: r[k] for k in ("r_at_1", "r_at_10", "mrr")}
        rows += [{"group": f"dim{dim}", "metric": k, "value": r[k]} for k in ("r_at_1", "r_at_10", "mrr")]
    records = [{"query_id": q, "query": qtexts[q], "gt": gt[q], "ranked": list(ranked[q])} for q in qids]
    return BenchmarkResult(report, rows, records, {})


def run_task3(bundle: CityBundle, method: str, parts=None, k=3, embedder=None, generator=None) -> BenchmarkResult:
    train, test = _split_ids(bundle, parts)
    ann = _need_annotations(bundle, train + test)
    refs = {t: ann[t].trajectory_caption for t in test}
    diag = {}
    if method == "echo":
        preds = dict(refs)
        prompt_chars = {}
    else:
        model = RapCaptioner(bundle.graph, bundle.cells, method, k, embedder, generator)
        model.fit([(bundle.trajectory(t), ann[t].trajectory_caption) for t in train])
        preds, prompt_chars = {}, {}
        started = time.perf_counter()
        for t in test:
            p = model.prompt(bundle.trajectory(t))
            prompt_chars[t] = len(p.system) + len(p.user)
            preds[t] = caption(generator, p)
        diag["latency_s"] = time.perf_counter() - started
    emb = embedder or HashEmbedder()
    report = task3_report(preds, refs, bundle.cells.gazetteer("poi"), bundle.cells.gazetteer("all"), emb)
    report.update(task=3, method=method)
    # whitespace token counts stand in for model token usage
    report["in_tokens"] = float(np.mean([prompt_chars[t] for t in test])) / 4.0 if prompt_chars else 0.0
    report["out_tokens"] = float(np.mean([len(preds[t].split()) for t in test]))
    rows = [{"group": method, "metric": k_, "value": report[k_]} for k_ in TASK3_KEYS]
    records = [{"traj_id": t, "caption": preds[t], "reference": refs[t]} for t in sorted(test, key=str)]
    return BenchmarkResult(report, rows, records, diag)


def run_benchmark(bundle: CityBundle, task: int, method: str, out=None, parts=None, **kw) -> BenchmarkResult:
    if task not in TASK_METHODS:
        raise InvalidArgument(f"task must be 1, 2 or 3, got {task}")
    if method not in TASK_METHODS[task]:
        raise InvalidArgument(f"method {method!r} not available for task {task}; choose from {TASK_METHODS[task]}")
    runner = {1: run_task1, 2: run_task2, 3: run_task3}[task]
    res = runner(bundle, method, parts, **kw)
    if out is not None:
        write_result(res, out)
    return res


def write_result(res: BenchmarkResult, out) -> None:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(res.report, indent=2, sort_keys=True) + "\n")
    write_figure_csv(res.figure_rows, out.with_suffix(".csv"))
    save_jsonl(res.predictions, out.with_suffix(".predictions.jsonl"))
    if res.diagnostics:
        out.with_suffix(".diagnostics.json").write_text(json.dumps(res.diagnostics, indent=2) + "\n")


def write_figure_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["group", "metric", "value"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": repr(float(r["value"]))})


def figure_rows_from_report(report: dict) -> list:
    """Flatten the breakdowns of a saved report into figure rows."""
    rows = []
    for key in ("by_style", "by_dimension"):
        for group, metrics in sorted(report.get(key, {}).items()):
            label = group if key == "by_style" else f"dim{group}"
            rows += [{"group": label, "metric": m, "value": v} for m, v in metrics.items()]
    if not rows:
        keys = {1: TASK1_KEYS, 2: TASK2_KEYS, 3: TASK3_KEYS}[report["task"]]
        rows = [{"group": report.get("method", ""), "metric": k, "value": report[k]} for k in keys]
    return rows
