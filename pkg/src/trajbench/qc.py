"""Deterministic quality control, rubric judging and judge agreement."""

from __future__ import annotations

import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

from .annotate import INSTRUCTION_FIELDS, QUERY_FIELDS, AnnotationRecord
from .errors import InvalidArgument, ProviderError
from .geo import CellIndex, Gazetteer, normalize_name
from .traj import PhaseSeq

log = logging.getLogger(__name__)

DEFAULT_TERMINOLOGY = {
    "WATERFRONT": "by the river",
    "GREEN/PARK": "the park",
    "URBAN/INLAND": "downtown",
    "COASTAL/BEACH": "the beach",
}

CRITERIA = (
    "t1_correctness", "t1_no_hallucination", "t1_persona_fidelity", "t1_style_distinctness",
    "t2_retrieval_specificity", "t2_accuracy", "t2_no_hallucination",
    "t3_comprehensiveness", "t3_accuracy", "t3_objectivity_purity",
)

ORIGIN_CUES = ("from", "starting from", "starting on", "starting at", "starts on", "starts at", "departs from")
DEST_CUES = ("to", "ending at", "ends at", "ends on", "arriving at", "finishing at", "finish at", "finishes at")


# -- sanitizers ---------------------------------------------------------------

def _terminology_pattern(mapping):
    keys = sorted(mapping, key=len, reverse=True)
    return re.compile(r"(?<![\w/])(" + "|".join(re.escape(k) for k in keys) + r")(?![\w/])", re.IGNORECASE)


_DEFAULT_TERM_RE = _terminology_pattern(DEFAULT_TERMINOLOGY)


def sanitize_terminology(text: str, mapping: Mapping[str, str] = DEFAULT_TERMINOLOGY) -> str:
    pattern = _DEFAULT_TERM_RE if mapping is DEFAULT_TERMINOLOGY else _terminology_pattern(mapping)
    lookup = {k.lower(): v for k, v in mapping.items()}
    return pattern.sub(lambda m: lookup[m.group(1).lower()], text)


def qc_terminology(rec: AnnotationRecord, mapping: Mapping[str, str] = DEFAULT_TERMINOLOGY) -> AnnotationRecord:
    return rec.replace_texts(lambda t: sanitize_terminology(t, mapping))


_EM_DASH = re.compile(r"\s*—\s*")
_SEMI = re.compile(r"\s*;")


def sanitize_punctuation(text: str) -> str:
    return _SEMI.sub(",", _EM_DASH.sub(", ", text))


def qc_punctuation(rec: AnnotationRecord) -> AnnotationRecord:
    return rec.replace_texts(sanitize_punctuation)


def sanitize(rec: AnnotationRecord) -> AnnotationRecord:
    return qc_punctuation(qc_terminology(rec))


# -- grounding -------------------------------------------------------------------

@dataclass
class GroundingReport:
    traj_id: Hashable
    mentions: list = field(default_factory=list)  # (field, name, grounded)
    misaligned: list = field(default_factory=list)  # (field, name, expected role)

    @property
    def ungrounded(self):
        return [(f, n) for f, n, ok in self.mentions if not ok]

    @property
    def clean(self):
        return not self.ungrounded and not self.misaligned

    def to_record(self):
        return {"traj_id": self.traj_id,
                "mentions": [list(m) for m in self.mentions],
                "ungrounded": [list(m) for m in self.ungrounded],
                "misaligned": [list(m) for m in self.misaligned]}


def _preceded_by(normalized: str, start: int, cues) -> bool:
    head = normalized[:start].rstrip()
    return any(head == c or head.endswith(" " + c) for c in cues)


def _phase_vocab(ps: PhaseSeq, cells: CellIndex, k: int) -> set[str]:
    phase = ps.phases[k]
    vocab = {normalize_name(n) for n in phase.road_names}
    return vocab | cells.vocabulary([phase.h])


def grounding_vocab(ps: PhaseSeq, cells: CellIndex) -> set[str]:
    vocab = set()
    for p in ps.phases:
        vocab |= {normalize_name(n) for n in p.road_names}
    return vocab | cells.vocabulary(ps.cells)


def qc_grounding(rec: AnnotationRecord, ps: PhaseSeq, cells: CellIndex,
                 gazetteer: Gazetteer | None = None) -> GroundingReport:
    """Classify every gazetteer mention as grounded or not.

    A mention is grounded when it belongs to a visited phase's roads or
    a visited cell's vocabulary.  Mentions introduced by an origin cue
    must come from the first phase, destination cues from the last.
    """
    gaz = gazetteer if gazetteer is not None else cells.gazetteer("all")
    visited = grounding_vocab(ps, cells)
    first = _phase_vocab(ps, cells, 0)
    last = _phase_vocab(ps, cells, -1)
    extra = Gazetteer(visited)
    report = GroundingReport(rec.traj_id)
    for fname, text in rec.texts().items():
        norm = normalize_name(text)
        for name, start, _ in (gaz | extra).finditer(norm):
            report.mentions.append((fname, name, name in visited))
            if _preceded_by(norm, start, ORIGIN_CUES) and name not in first:
                report.misaligned.append((fname, name, "origin"))
            elif _preceded_by(norm, start, DEST_CUES) and name not in last:
                report.misaligned.append((fname, name, "destination"))
    return report


# -- diversity ----------------------------------------------------------------------

_TOKEN = re.compile(r"\w+")


def tokens(text: str) -> list[str]:
    return _TOKEN.findall(normalize_name(text))


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@dataclass
class DiversityResult:
    passed: bool
    reasons: list = field(default_factory=list)


def qc_diversity(rec: AnnotationRecord, max_jaccard: float = 0.8) -> DiversityResult:
    toks = {f: tokens(getattr(rec, f)) for f in INSTRUCTION_FIELDS}
    reasons = []
    names = list(INSTRUCTION_FIELDS)
    for i in range(3):
        for j in range(i + 1, 3):
            a, b = toks[names[i]], toks[names[j]]
            if a and b and a[0] == b[0]:
                reasons.append(f"{names[i]} and {names[j]} share opener {a[0]!r}")
            sim = jaccard(set(a), set(b))
            if sim > max_jaccard:
                reasons.append(f"{names[i]} and {names[j]} overlap (jaccard {sim:.2f})")
    return DiversityResult(not reasons, reasons)


# -- hallucination -------------------------------------------------------------------

_ALLOWED_CAPS = {"AM", "PM", "I"}
_BREAK_CHARS = ",;:!?.\"')("


def capitalized_spans(text: str, gazetteer: Gazetteer) -> list[str]:
    """Runs of two or more capitalized words not covered by ``gazetteer``."""
    suspects = []
    run = []

    def flush():
        # greedily cover the run with gazetteer names, keep what is left
        i, leftover = 0, []
        while i < len(run):
            cover = 0
            for j in range(len(run), i + 1, -1):
                if " ".join(run[i:j]) in gazetteer:
                    cover = j - i
                    break
            if cover == 0 and run[i] in gazetteer:
                cover = 1
            if cover:
                if len(leftover) >= 2:
                    suspects.append(" ".join(leftover))
                leftover = []
                i += cover
            else:
                leftover.append(run[i])
                i += 1
        if len(leftover) >= 2:
            suspects.append(" ".join(leftover))
        run.clear()

    for raw in text.split():
        word = raw.strip(_BREAK_CHARS)
        breaks = word != raw.rstrip(_BREAK_CHARS) or raw[-1:] in _BREAK_CHARS
        leading_break = raw[:1] in "\"'(("
        if leading_break:
            flush()
        if word and word[0].isupper() and word not in _ALLOWED_CAPS:
            run.append(word)
        else:
            flush()
        if breaks:
            flush()
    flush()
    return suspects


@dataclass
class HallucinationResult:
    flagged: bool
    spans: list = field(default_factory=list)
    rationale: str = ""
    degraded: bool = False

    def to_record(self):
        return {"flagged": self.flagged, "spans": self.spans, "rationale": self.rationale, "degraded": self.degraded}


class HeuristicJudge:
    """Offline judge: QC outcomes mapped to rubric scores."""

    judge_id = "heuristic"

    def hallucination(self, rec, ps, cells) -> HallucinationResult:
        gaz = cells.gazetteer("all") | Gazetteer(grounding_vocab(ps, cells))
        spans = []
        for text in rec.texts().values():
            spans += capitalized_spans(text, gaz)
        spans = list(dict.fromkeys(spans))
        why = "capitalized entities absent from gazetteer" if spans else "no unknown entities"
        return HallucinationResult(bool(spans), spans, why)

    def score(self, rec, ps, cells=None) -> dict:
        ungrounded_t1 = ungrounded_t2 = ungrounded_t3 = 0
        halluc = {"t1": False, "t2": False, "t3": False}
        cover = 5
        if cells is not None:
            report = qc_grounding(rec, ps, cells)
            bad = report.ungrounded + [(f, n) for f, n, _ in report.misaligned]
            ungrounded_t1 = sum(f in INSTRUCTION_FIELDS for f, _ in bad)
            ungrounded_t2 = sum(f in QUERY_FIELDS for f, _ in bad)
            ungrounded_t3 = sum(f == "trajectory_caption" for f, _ in bad)
            gaz = cells.gazetteer("all") | Gazetteer(grounding_vocab(ps, cells))
            for key, flds in (("t1", INSTRUCTION_FIELDS), ("t2", QUERY_FIELDS), ("t3", ("trajectory_caption",))):
                halluc[key] = any(capitalized_spans(getattr(rec, f), gaz) for f in flds)
            caption = normalize_name(rec.trajectory_caption)
            found = set(gaz.find(caption))
            hits = sum(bool(found & _phase_vocab(ps, cells, k)) for k in (0, -1))
            cover = (3, 4, 5)[hits]
        diverse = qc_diversity(rec).passed
        subjective = re.search(r"\b(wants?|wanted|probably|maybe|i think|hopes?)\b|!", rec.trajectory_caption, re.I)
        named_queries = sum(bool(tokens(q)) and cells is not None and bool(cells.gazetteer("all").find(q))
                            for q in rec.queries)
        return {
            "t1_correctness": _grounding_score(ungrounded_t1),
            "t1_no_hallucination": 2 if halluc["t1"] else 5,
            "t1_persona_fidelity": 5 if diverse else 4,
            "t1_style_distinctness": 5 if diverse else 3,
            "t2_retrieval_specificity": 5 if named_queries == 3 or cells is None else 4,
            "t2_accuracy": _grounding_score(ungrounded_t2),
            "t2_no_hallucination": 2 if halluc["t2"] else 5,
            "t3_comprehensiveness": cover,
            "t3_accuracy": _grounding_score(ungrounded_t3),
            "t3_objectivity_purity": 3 if subjective else 5,
        }


def _grounding_score(n_bad):
    return 5 if n_bad == 0 else 4 if n_bad == 1 else 3


class ProviderJudge:
    """Judge backed by a text provider returning JSON verdicts.

    Falls back to the heuristic judge when the provider fails.
    """

    def __init__(self, provider, judge_id="provider"):
        self.provider = provider
        self.judge_id = judge_id
        self._fallback = HeuristicJudge()

    def _ask(self, task, rec, ps):
        system = f"You are a strict annotation judge. Task: {task}. Reply with JSON only."
        user = json.dumps({"record": rec.to_record(), "trajectory": ps.to_json()}, ensure_ascii=False)
        return json.loads(self.provider(system, user))

    def hallucination(self, rec, ps, cells) -> HallucinationResult:
        try:
            data = self._ask("list hallucinated entities as {\"flagged\": bool, \"spans\": [...], \"rationale\": str}", rec, ps)
            return HallucinationResult(bool(data["flagged"]), list(data.get("spans", [])), str(data.get("rationale", "")))
        except (ProviderError, ValueError, KeyError, TypeError) as exc:
            log.warning("judge provider failed, using heuristic: %s", exc)
            res = self._fallback.hallucination(rec, ps, cells)
            res.degraded = True
            res.rationale += f" (degraded to heuristic: {exc})"
            return res

    def score(self, rec, ps, cells=None) -> dict:
        try:
            data = self._ask("score each rubric criterion 1-5 as {criterion: int}; criteria: " + ", ".join(CRITERIA), rec, ps)
            return {c: data[c] for c in CRITERIA}
        except (ProviderError, ValueError, KeyError, TypeError) as exc:
            log.warning("judge provider failed, using heuristic: %s", exc)
            return self._fallback.score(rec, ps, cells)


def qc_hallucination(judge, rec, ps, cells) -> HallucinationResult:
    return (judge or HeuristicJudge()).hallucination(rec, ps, cells)


# -- scoring and agreement -------------------------------------------------------------

@dataclass(frozen=True)
class ScoreCard:
    item_id: Hashable
    scores: Mapping[str, int]
    judge_id: str = "heuristic"

    def __post_init__(self):
        missing = set(CRITERIA) - set(self.scores)
        if missing:
            raise InvalidArgument(f"score card missing {sorted(missing)}")
        bad = {c: s for c, s in self.scores.items() if s not in (1, 2, 3, 4, 5)}
        if bad:
            raise InvalidArgument(f"scores out of 1-5: {bad}")

    @property
    def mean(self):
        return sum(self.scores[c] for c in CRITERIA) / len(CRITERIA)

    def to_record(self):
        return {"item_id": self.item_id, "judge_id": self.judge_id, **{c: self.scores[c] for c in CRITERIA}}

    @classmethod
    def from_record(cls, rec):
        return cls(rec["item_id"], {c: int(rec[c]) for c in CRITERIA}, rec.get("judge_id", "heuristic"))


def _clamp(criterion, value):
    try:
        v = int(round(float(value)))
    except (TypeError, ValueError):
        warnings.warn(f"non-numeric score for {criterion}: {value!r}; using 1")
        return 1
    if v < 1 or v > 5:
        c = min(5, max(1, v))
        warnings.warn(f"score {value} for {criterion} out of range, clamped to {c}")
        return c
    return v


def judge_score(judge, rec: AnnotationRecord, ps: PhaseSeq, cells: CellIndex | None = None) -> ScoreCard:
    judge = judge or HeuristicJudge()
    raw = judge.score(rec, ps, cells)
    return ScoreCard(rec.traj_id, {c: _clamp(c, raw[c]) for c in CRITERIA}, getattr(judge, "judge_id", "judge"))


def agreement_pm1(a: Sequence[ScoreCard], b: Sequence[ScoreCard]) -> dict[str, float]:
    """Per-criterion share of items where two judges differ by at most one point."""
    ida = [c.item_id for c in a]
    idb = {c.item_id: c for c in b}
    if len(set(ida)) != len(ida) or set(ida) != set(idb) or len(idb) != len(b):
        raise InvalidArgument("score card lists are not aligned on item ids")
    if not a:
        raise InvalidArgument("no items to compare")
    out = {}
    for crit in CRITERIA:
        agree = sum(abs(c.scores[crit] - idb[c.item_id].scores[crit]) <= 1 for c in a)
        out[crit] = agree / len(a)
    out["mean"] = sum(out[c] for c in CRITERIA) / len(CRITERIA)
    return out


def select_top(scored: Sequence[tuple[Hashable, ScoreCard]], n: int) -> list:
    if n > len(scored) or n < 0:
        raise InvalidArgument(f"cannot select {n} of {len(scored)}")
    ranked = sorted(scored, key=lambda item: (-item[1].mean, item[0]))
    return [tid for tid, _ in ranked[:n]]


@dataclass
class QCOutcome:
    record: AnnotationRecord
    grounding: GroundingReport
    diversity: DiversityResult
    hallucination: HallucinationResult

    @property
    def passed(self):
        return self.grounding.clean and self.diversity.passed and not self.hallucination.flagged

    def to_record(self):
        return {
            "traj_id": self.record.traj_id,
            "passed": self.passed,
            "grounding": self.grounding.to_record(),
            "diversity": {"passed": self.diversity.passed, "reasons": self.diversity.reasons},
            "hallucination": self.hallucination.to_record(),
        }


def run_qc(rec: AnnotationRecord, ps: PhaseSeq, cells: CellIndex, judge=None) -> QCOutcome:
    """All five stages: sanitize first, then check the sanitized record."""
    clean = sanitize(rec)
    return QCOutcome(
        record=clean,
        grounding=qc_grounding(clean, ps, cells),
        diversity=qc_diversity(clean),
        hallucination=qc_hallucination(judge, clean, ps, cells),
    )
