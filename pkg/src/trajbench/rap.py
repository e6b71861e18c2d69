"""Trajectory captioning, zero-shot or with retrieved reference captions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .annotate import CAPTION_MARKER, PromptBundle, TemplateGenerator
from .errors import InvalidArgument, InvalidState, SchemaError
from .geo import CellIndex
from .providers import HashEmbedder
from .qc import sanitize_punctuation
from .roadnet import RoadGraph
from .traj import Trajectory, compress, format_structural_features, structural_features

CAPTION_MODES = ("struct", "sem", "rap")
DIRECTIVE = "origin, key route behaviors and semantic zones traversed, and destination"

CAPTION_SYSTEM = f"""{CAPTION_MARKER}
Write one objective paragraph describing a recorded vehicle trip.
Cover the {DIRECTIVE}.
Use only names that appear in the trip data. No speculation about the
driver, no em-dashes and no semicolons. Output the caption text only.
"""


def trajectory_text(t: Trajectory, g: RoadGraph, cells: CellIndex) -> str:
    """Text used to embed a trajectory: structural summary plus visited areas."""
    feats = structural_features(t, g, cells.cfg)
    ps = compress(t, g, cells, cells.cfg)
    areas = [p.desc for p in ps.phases if p.desc]
    return format_structural_features(feats) + "\nAreas: " + " / ".join(areas)


@dataclass
class CaptionIndex:
    ids: list
    vectors: np.ndarray
    captions: list

    def __len__(self):
        return len(self.ids)


def build_caption_index(train: Sequence[tuple[Trajectory, str]], g: RoadGraph, cells: CellIndex,
                        embedder=None) -> CaptionIndex:
    if not train:
        raise InvalidArgument("cannot build a caption index from an empty training set")
    embedder = embedder or HashEmbedder()
    texts = [trajectory_text(t, g, cells) for t, _ in train]
    return CaptionIndex([t.mm_id for t, _ in train], embedder.embed(texts), [c for _, c in train])


def retrieve_examples(query_vec: np.ndarray, idx: CaptionIndex, k: int = 3,
                      exclude: Hashable = None) -> list[tuple[str, float]]:
    """Top-``k`` (caption, similarity), skipping the entry whose id is ``exclude``."""
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    if len(idx) == 0:
        raise InvalidState("caption index is empty")
    sims = idx.vectors @ query_vec
    rows = [i for i in range(len(idx)) if exclude is None or idx.ids[i] != exclude]
    rows.sort(key=lambda i: (-sims[i], idx.ids[i]))
    return [(idx.captions[i], float(sims[i])) for i in rows[:k]]


def assemble_caption_prompt(t: Trajectory, g: RoadGraph, cells: CellIndex, mode: str,
                            examples: Sequence[str] = ()) -> PromptBundle:
    if mode not in CAPTION_MODES:
        raise InvalidArgument(f"mode must be one of {CAPTION_MODES}, got {mode!r}")
    if mode == "rap" and not examples:
        raise InvalidArgument("rap mode needs reference captions")
    feats = structural_features(t, g, cells.cfg)
    data = compress(t, g, cells if mode != "struct" else None, cells.cfg).to_json()
    data["mode"] = mode
    lines = ["TRIP GEOMETRY:", format_structural_features(feats)]
    if mode != "struct":
        lines += ["", "AREAS TRAVERSED (in order):"]
        lines += [f"  {ph['p']}. [{ph['role']}] {ph['desc'] or 'no description'}" for ph in data["phases"]]
    if mode == "rap":
        lines += ["", "REFERENCE CAPTIONS (match their style and level of detail, not their content):"]
        lines += [f"  Example {i}: {ex}" for i, ex in enumerate(examples, 1)]
    lines += ["", f"Describe the {DIRECTIVE}.", "", json.dumps(data, ensure_ascii=False)]
    return PromptBundle(CAPTION_SYSTEM, "\n".join(lines) + "\n", t.mm_id)


def caption(gen, p: PromptBundle) -> str:
    text = (gen or TemplateGenerator())(p.system, p.user).strip()
    if not text:
        raise SchemaError(f"empty caption for {p.traj_id}")
    return sanitize_punctuation(text)


class RapCaptioner(BaseEstimator):
    """``fit`` on (trajectory, caption) pairs, ``predict`` captions for trajectories."""

    def __init__(self, graph=None, cells=None, mode="rap", k=3, embedder=None, generator=None):
        self.graph = graph
        self.cells = cells
        self.mode = mode
        self.k = k
        self.embedder = embedder
        self.generator = generator

    def fit(self, X, y=None):
        if self.mode not in CAPTION_MODES:
            raise InvalidArgument(f"mode must be one of {CAPTION_MODES}, got {self.mode!r}")
        if self.graph is None or self.cells is None:
            raise InvalidArgument("RapCaptioner needs a road graph and a cell index")
        emb = self.embedder or HashEmbedder()
        self.index_ = build_caption_index(list(X), self.graph, self.cells, emb) if self.mode == "rap" else None
        return self

    def prompt(self, t: Trajectory) -> PromptBundle:
        if not hasattr(self, "index_"):
            raise InvalidState("RapCaptioner is not fitted")
        examples = ()
        if self.mode == "rap":
            emb = self.embedder or HashEmbedder()
            qv = emb.embed([trajectory_text(t, self.graph, self.cells)])[0]
            examples = [c for c, _ in retrieve_examples(qv, self.index_, self.k, exclude=t.mm_id)]
        return assemble_caption_prompt(t, self.graph, self.cells, self.mode, examples)

    def predict(self, trajs: Sequence[Trajectory]) -> list[str]:
        return [caption(self.generator, self.prompt(t)) for t in trajs]
