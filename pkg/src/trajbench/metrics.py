"""Evaluation metrics for route generation, retrieval and captioning."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgument
from .geo import GeoPoint, Gazetteer, HexConfig, haversine_km, normalize_name
from .roadnet import RoadGraph, hop_distance
from .traj import Trajectory, trajectory_points

DEFAULT_EPS_KM = 0.1
TASK1_KS = (1, 3, 5, 10)
TASK2_KS = (1, 5, 10, 50)
SR_THRESHOLD = 0.8


# -- Task 1: route-level metrics --------------------------------------------

def _nonempty(*ts):
    for t in ts:
        if t is None or len(t) == 0:
            raise InvalidArgument("trajectory must be non-empty")


def dest_hit(pred: Trajectory, gt: Trajectory, g: RoadGraph, cfg: HexConfig) -> int:
    _nonempty(pred, gt)
    return int(g.segment_cell(pred.rid_list[-1], cfg) == g.segment_cell(gt.rid_list[-1], cfg))


def endpoint_dist_km(pred: Trajectory, gt: Trajectory, g: RoadGraph) -> float:
    _nonempty(pred, gt)
    return haversine_km(g[pred.rid_list[-1]].end, g[gt.rid_list[-1]].end)


def hit_at_k(pred: Trajectory, gt: Trajectory, g: RoadGraph, k: int) -> int:
    _nonempty(pred, gt)
    return int(hop_distance(g, pred.rid_list[-1], gt.rid_list[-1], k) is not None)


def cell_set(t: Trajectory, g: RoadGraph, cfg: HexConfig) -> frozenset:
    return frozenset(g.segment_cell(r, cfg) for r in t.rid_list)


def jaccard_sets(a: frozenset, b: frozenset) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 1.0


def jaccard_cells(pred: Trajectory, gt: Trajectory, g: RoadGraph, cfg: HexConfig) -> float:
    _nonempty(pred, gt)
    return jaccard_sets(cell_set(pred, g, cfg), cell_set(gt, g, cfg))


def _distance_matrix(a: Sequence[GeoPoint], b: Sequence[GeoPoint]) -> np.ndarray:
    if not a or not b:
        raise InvalidArgument("point sequences must be non-empty")
    return np.array([[haversine_km(p, q) for q in b] for p in a])


def dtw_km(a: Sequence[GeoPoint], b: Sequence[GeoPoint]) -> float:
    d = _distance_matrix(a, b)
    n, m = d.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = d[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def hausdorff_km(a: Sequence[GeoPoint], b: Sequence[GeoPoint]) -> float:
    d = _distance_matrix(a, b)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def edr(a: Sequence[GeoPoint], b: Sequence[GeoPoint], eps_km: float = DEFAULT_EPS_KM) -> float:
    if not eps_km > 0:
        raise InvalidArgument(f"eps_km must be positive, got {eps_km}")
    if not a and not b:
        return 0.0
    n, m = len(a), len(b)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = 0 if haversine_km(a[i - 1], b[j - 1]) <= eps_km else 1
            dp[i, j] = min(dp[i - 1, j - 1] + sub, dp[i - 1, j] + 1, dp[i, j - 1] + 1)
    return int(dp[n, m]) / max(n, m)


def route_length_flags(pred: Trajectory, gt: Trajectory, g: RoadGraph) -> tuple[int, int]:
    gt_len = g.path_length_m(gt.rid_list)
    if gt_len <= 0:
        raise InvalidArgument("ground-truth route has zero length")
    ratio = g.path_length_m(pred.rid_list) / gt_len
    return int(ratio > 1.5), int(ratio < 0.5)


def oracle_select(candidates: Sequence[Trajectory], gt: Trajectory, g: RoadGraph) -> Trajectory:
    if not candidates:
        raise InvalidArgument("oracle_select needs at least one candidate")
    dists = [endpoint_dist_km(c, gt, g) for c in candidates]
    return candidates[int(np.argmin(dists))]


def _route_scores(pred, gt, g, cfg, ks, eps_km):
    pa, pb = trajectory_points(pred, g), trajectory_points(gt, g)
    row = {
        "dest_hit": dest_hit(pred, gt, g, cfg),
        "dist_km": endpoint_dist_km(pred, gt, g),
        "jac": jaccard_cells(pred, gt, g, cfg),
        "dtw": dtw_km(pa, pb),
        "haus": hausdorff_km(pa, pb),
        "edr": edr(pa, pb, eps_km),
    }
    # one BFS answers every K
    hops = hop_distance(g, pred.rid_list[-1], gt.rid_list[-1], max(ks))
    for k in ks:
        row[f"h_at_{k}"] = int(hops is not None and hops <= k)
    return row


def task1_scores(pred: Trajectory, gt: Trajectory, g: RoadGraph, cfg: HexConfig,
                 candidates: Sequence[Trajectory] | None = None,
                 ks=TASK1_KS, eps_km=DEFAULT_EPS_KM) -> dict:
    """Per-query Task 1 row, with oracle columns from ``candidates``."""
    row = _route_scores(pred, gt, g, cfg, ks, eps_km)
    row["over_rt"], row["under_rt"] = route_length_flags(pred, gt, g)
    pool = list(candidates) if candidates else [pred]
    best = oracle_select(pool, gt, g)
    orow = _route_scores(best, gt, g, cfg, (5,), eps_km)
    row.update({
        "o_h_at_5": orow["h_at_5"], "o_dest": orow["dest_hit"], "o_dist_km": orow["dist_km"],
        "o_jac": orow["jac"], "o_dtw": orow["dtw"], "o_haus": orow["haus"], "o_edr": orow["edr"],
    })
    return row


TASK1_KEYS = tuple(f"h_at_{k}" for k in TASK1_KS) + (
    "dest_hit", "dist_km", "jac", "dtw", "haus", "edr", "over_rt", "under_rt",
    "o_h_at_5", "o_dest", "o_dist_km", "o_jac", "o_dtw", "o_haus", "o_edr",
)


def mean_report(rows: Sequence[Mapping[str, float]], keys: Sequence[str]) -> dict:
    if not rows:
        raise InvalidArgument("no rows to aggregate")
    return {k: float(math.fsum(r[k] for r in rows) / len(rows)) for k in keys}


def task1_report(preds: Mapping[Hashable, Trajectory], gts: Mapping[Hashable, Trajectory],
                 g: RoadGraph, cfg: HexConfig, candidates: Mapping | None = None,
                 ks=TASK1_KS, eps_km=DEFAULT_EPS_KM) -> dict:
    ids = sorted(gts, key=str)
    rows = [task1_scores(preds[i], gts[i], g, cfg, (candidates or {}).get(i), ks, eps_km) for i in ids]
    keys = [f"h_at_{k}" for k in ks] + [k for k in TASK1_KEYS if not k.startswith("h_at_")]
    report = mean_report(rows, keys)
    report["n_queries"] = len(rows)
    return report


# -- Task 2: retrieval -----------------------------------------------------------

@dataclass(frozen=True)
class RetrievalQuery:
    ranked: tuple
    gt: Hashable


def retrieval_report(ranked: Mapping[Hashable, Sequence[Hashable]], gt: Mapping[Hashable, Hashable],
                     cells: Mapping[Hashable, frozenset], ks=TASK2_KS,
                     jac_threshold: float = SR_THRESHOLD, j_mode: str = "max") -> dict:
    """R@K, MRR, J@K and SR@K over queries.

    ``cells`` maps every trajectory id to its visited cell set.  J@K is
    the mean over queries of the best (``max``) or average (``mean``)
    Jaccard within the top K.
    """
    if j_mode not in ("max", "mean"):
        raise InvalidArgument(f"j_mode must be max or mean, got {j_mode!r}")
    if not ranked:
        raise InvalidArgument("no queries")
    qids = sorted(ranked, key=str)
    out = {}
    acc = {f"{p}_at_{k}": 0.0 for p in ("j", "sr", "r") for k in ks}
    rr = 0.0
    for q in qids:
        lst = list(ranked[q])
        if not lst:
            raise InvalidArgument(f"query {q} has an empty ranking")
        target = gt[q]
        gcells = cells[target]
        jacs = [jaccard_sets(cells[t], gcells) for t in lst]
        rank = lst.index(target) + 1 if target in lst else None
        rr += 1.0 / rank if rank else 0.0
        for k in ks:
            top = jacs[:k]
            best = max(top)
            acc[f"j_at_{k}"] += best if j_mode == "max" else sum(top) / len(top)
            acc[f"sr_at_{k}"] += float(best > jac_threshold)
            acc[f"r_at_{k}"] += float(rank is not None and rank <= k)
    n = len(qids)
    for k in ks:
        for p in ("j", "sr", "r"):
            out[f"{p}_at_{k}"] = acc[f"{p}_at_{k}"] / n
    out["mrr"] = rr / n
    out["n_queries"] = n
    return out


TASK2_KEYS = ("j_at_1", "j_at_5", "j_at_10", "sr_at_1", "sr_at_5", "sr_at_10",
              "r_at_1", "r_at_10", "r_at_50", "mrr")


# -- Task 3: caption text metrics ------------------------------------------------------

_WORD = re.compile(r"\w+")


def text_tokens(text: str) -> list[str]:
    return _WORD.findall(normalize_name(text))


def _lcs(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pred: str, ref: str) -> float:
    p, r = text_tokens(pred), text_tokens(ref)
    if not p or not r:
        return 0.0
    lcs = _lcs(p, r)
    if lcs == 0:
        return 0.0
    prec, rec = lcs / len(p), lcs / len(r)
    return 2 * prec * rec / (prec + rec)


_SUFFIXES = ("ingly", "edly", "ing", "ed", "ly", "es", "s")


def stem(word: str) -> str:
    """Crude suffix stripper, enough to align inflected forms."""
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            return word[: -len(suf)]
    return word


def _align(p: list[str], r: list[str]) -> list[tuple[int, int]]:
    """Exact matches first, then stem matches, preferring contiguous targets."""
    used_p, used_r, pairs = set(), set(), []
    for key in (lambda w: w, stem):
        rk = [key(w) for w in r]
        last = None
        for i, w in enumerate(p):
            if i in used_p:
                continue
            kw = key(w)
            options = [j for j, x in enumerate(rk) if x == kw and j not in used_r]
            if not options:
                continue
            j = last + 1 if last is not None and last + 1 in options else options[0]
            used_p.add(i)
            used_r.add(j)
            pairs.append((i, j))
            last = j
    return sorted(pairs)


def meteor(pred: str, ref: str, alpha=0.9, beta=3.0, gamma=0.5) -> float:
    p, r = text_tokens(pred), text_tokens(ref)
    if not p or not r:
        return 0.0
    pairs = _align(p, r)
    m = len(pairs)
    if m == 0:
        return 0.0
    chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
    prec, rec = m / len(p), m / len(r)
    fmean = prec * rec / (alpha * prec + (1 - alpha) * rec)
    # (chunks - 1) / (m - 1) so a fully contiguous alignment carries no penalty
    frag = (chunks - 1) / (m - 1) if m > 1 else 0.0
    return fmean * (1 - gamma * frag ** beta)


def poi_recall(pred: str, gt_pois: Sequence[str]) -> float:
    pois = {normalize_name(x) for x in gt_pois if normalize_name(x)}
    if not pois:
        return 1.0
    found = set(Gazetteer(pois).find(pred))
    return len(found) / len(pois)


def named_location_count(pred: str, gazetteer: Gazetteer) -> int:
    return len(set(gazetteer.find(pred)))


def embedding_f1(pred: str, ref: str, embedder) -> float:
    """Greedy token-embedding F1: each token matched to its most similar counterpart."""
    p, r = text_tokens(pred), text_tokens(ref)
    if not p or not r:
        return 0.0
    sim = embedder.embed(p) @ embedder.embed(r).T
    prec = float(sim.max(axis=1).mean())
    rec = float(sim.max(axis=0).mean())
    if prec + rec <= 0:
        return 0.0
    return 2 * prec * rec / (prec + rec)


TASK3_KEYS = ("bs_f1", "rouge_l", "meteor", "poi_r", "n_loc")


def task3_report(preds: Mapping[Hashable, str], refs: Mapping[Hashable, str],
                 poi_gazetteer: Gazetteer, all_gazetteer: Gazetteer, embedder=None) -> dict:
    ids = sorted(refs, key=str)
    if not ids:
        raise InvalidArgument("no captions to score")
    rows, vacuous = [], 0
    for i in ids:
        pred, ref = preds[i], refs[i]
        gt_pois = poi_gazetteer.distinct(ref)
        vacuous += not gt_pois
        rows.append({
            "bs_f1": embedding_f1(pred, ref, embedder) if embedder is not None else math.nan,
            "rouge_l": rouge_l(pred, ref),
            "meteor": meteor(pred, ref),
            "poi_r": poi_recall(pred, gt_pois),
            "n_loc": named_location_count(pred, all_gazetteer),
        })
    report = mean_report(rows, TASK3_KEYS)
    report["n_queries"] = len(rows)
    report["poi_r_vacuous"] = vacuous
    return report


def is_monotone(report: Mapping[str, float], prefix: str) -> bool:
    """Check ``{prefix}_at_K`` columns are non-decreasing in K."""
    ks = sorted(int(k.rsplit("_", 1)[1]) for k in report if k.startswith(prefix + "_at_") and k.rsplit("_", 1)[1].isdigit())
    vals = [report[f"{prefix}_at_{k}"] for k in ks]
    return all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
