"""Prompt assembly, annotation records and the offline template generator."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from typing import Hashable, Mapping, Sequence

from .errors import InvalidAssignment, SchemaError
from .intent import DIMENSIONS, STYLES, IntentProfile, PersonaStyle, scenario_label
from .traj import PhaseSeq

log = logging.getLogger(__name__)

ANNOTATION_MARKER = "## ANNOTATION TASK"
CAPTION_MARKER = "## CAPTION TASK"

SYSTEM_PROMPT = f"""{ANNOTATION_MARKER}

## 1. Core Directive
Infer what the traveller wanted from a real driving trajectory, given as
compressed phases with headings, road names and area descriptions.

* Grounding: mention only roads, places and features present in the data.
* Keep instructions goal-focused: destination plus one or two constraints.
* Phase alignment: origin comes from phase 0, destination from the last
  phase, waypoints from the phases in between.
* Never echo area labels. WATERFRONT -> "by the river", GREEN/PARK -> "the park",
  URBAN/INLAND -> "downtown", COASTAL/BEACH -> "the beach".
* Do not use em-dashes or semicolons.

## 2. Intent Taxonomy
  Dim 1 Destination: 1.1 Exact Anchor, 1.2 Fuzzy Semantic
  Dim 2 Waypoint: 2.1 Strict Sequential, 2.2 Flexible / Feature, 2.3 Pass-through Zone
  Dim 3 Route Preference: 3.1 Semantic Constraints, 3.2 Topological / Direct., 3.3 Orthogonal Comp.
  Dim 4 Temporal/Pace: 4.1 Time-of-Day, 4.2 Pace / Duration

## 3. Diversity
* Single intent uses Dimension 1 only.
* Composite intent uses Dimension 1 once plus scenarios from Dimensions 2-4.

## 4. Few-Shot Examples
{{few_shot}}

## 5. Instruction Styles
  literal: faithful and explicit. concise: as short as possible.
  chatty: conversational. Every variant opens with a different word.

## 6. Retrieval Queries and Caption
* Three search-style retrieval queries that together cover all four dimensions.
* One third-person, factual, present-tense caption.

## 7. Output Format (JSON only)
{{ "_intent_planning": "...", "_retrieval_planning": "...",
  "instruction_literal": "...", "instruction_concise": "...",
  "instruction_chatty": "...", "retrieval_query_1": "...",
  "retrieval_query_2": "...", "retrieval_query_3": "...",
  "trajectory_caption": "..." }}
"""

RECORD_KEYS = (
    "_intent_planning", "_retrieval_planning",
    "instruction_literal", "instruction_concise", "instruction_chatty",
    "retrieval_query_1", "retrieval_query_2", "retrieval_query_3",
    "trajectory_caption",
)
TEXT_FIELDS = RECORD_KEYS[2:]
INSTRUCTION_FIELDS = ("instruction_literal", "instruction_concise", "instruction_chatty")
QUERY_FIELDS = ("retrieval_query_1", "retrieval_query_2", "retrieval_query_3")


@dataclass(frozen=True)
class PromptBundle:
    system: str
    user: str
    traj_id: Hashable = None


@dataclass(frozen=True)
class AnnotationRecord:
    traj_id: Hashable
    intent_planning: str
    retrieval_planning: str
    instruction_literal: str
    instruction_concise: str
    instruction_chatty: str
    retrieval_query_1: str
    retrieval_query_2: str
    retrieval_query_3: str
    trajectory_caption: str

    def __post_init__(self):
        empty = [f for f in TEXT_FIELDS if not str(getattr(self, f)).strip()]
        if empty:
            raise SchemaError(f"record {self.traj_id}: empty field(s) {empty}")

    def texts(self) -> dict[str, str]:
        return {f: getattr(self, f) for f in TEXT_FIELDS}

    @property
    def instructions(self):
        return [getattr(self, f) for f in INSTRUCTION_FIELDS]

    @property
    def queries(self):
        return [getattr(self, f) for f in QUERY_FIELDS]

    def replace_texts(self, fn) -> "AnnotationRecord":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for f in TEXT_FIELDS:
            values[f] = fn(values[f])
        return AnnotationRecord(**values)

    def to_record(self):
        out = {"traj_id": self.traj_id,
               "_intent_planning": self.intent_planning,
               "_retrieval_planning": self.retrieval_planning}
        out.update(self.texts())
        return out

    @classmethod
    def from_record(cls, rec, traj_id=None):
        missing = [k for k in RECORD_KEYS if k not in rec]
        if missing:
            raise SchemaError(f"record missing field(s) {missing}")
        return cls(
            traj_id=rec.get("traj_id", traj_id) if traj_id is None else traj_id,
            intent_planning=str(rec["_intent_planning"]),
            retrieval_planning=str(rec["_retrieval_planning"]),
            **{k: str(rec[k]) for k in TEXT_FIELDS},
        )


def load_annotations(path) -> list[AnnotationRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                if "_schema" not in rec:
                    out.append(AnnotationRecord.from_record(rec))
    return out


def save_annotations(records: Sequence[AnnotationRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_schema": "annotations", "version": 1}) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_record(), ensure_ascii=False) + "\n")


# -- prompt assembly -----------------------------------------------------------

def _check_assignment(assignment: Mapping[int, Sequence[int]]) -> dict[int, tuple[int, ...]]:
    if sorted(assignment) != [1, 2, 3]:
        raise InvalidAssignment(f"assignment must cover queries 1-3, got {sorted(assignment)}")
    norm = {q: tuple(sorted(int(d) for d in assignment[q])) for q in (1, 2, 3)}
    if any(not dims for dims in norm.values()):
        raise InvalidAssignment("every query needs at least one dimension")
    covered = {d for dims in norm.values() for d in dims}
    if covered != {1, 2, 3, 4}:
        raise InvalidAssignment(f"queries leave dimension(s) {sorted({1, 2, 3, 4} - covered)} uncovered")
    return norm


def _dims_text(dims):
    return " + ".join(f"Dim {d} {DIMENSIONS[d]}" for d in dims)


def _optional_constraints(ps: PhaseSeq, profile: IntentProfile) -> list[str]:
    dims = set(profile.dimensions)
    lines = []
    if 2 in dims:
        lines.append("WAYPOINT CONTEXT: pick waypoints from transit phases only.")
    if 3 in dims:
        lines.append("ROUTE CONTEXT: describe preferences by area character or road type.")
    if 4 in dims:
        lines.append(f"TIME CONTEXT: departure {ps.to_json()['meta']['start_time']}.")
    return lines


def _few_shot_block(few_shot):
    if not few_shot:
        return "(none supplied)"
    return "\n".join(f"* {json.dumps(ex, ensure_ascii=False)}" for ex in few_shot)


def build_prompt(ps: PhaseSeq, profile: IntentProfile, style: PersonaStyle,
                 assignment: Mapping[int, Sequence[int]], few_shot=None) -> PromptBundle:
    norm = _check_assignment(assignment)
    lines = [
        "For this trajectory, generate three instructions (literal, concise, chatty)",
        "that reflect these intent type(s):",
        "",
        "  " + " + ".join(scenario_label(s) for s in profile.scenarios),
        "",
        'INTENT PLANNING (required): output "_intent_planning" first.',
        "",
        "RETRIEVAL ASSIGNMENT (3 queries cover ALL 4 DIMENSIONS):",
    ]
    lines += [f"  - retrieval_query_{q} -> {_dims_text(norm[q])}" for q in (1, 2, 3)]
    lines += ["", f"SPEAKER PERSONA: {style.persona}", "", "STYLE GUIDANCE:"]
    for s in STYLES:
        form, length = style.styles[s]
        lines.append(f"  - {s + ':':9s} {form}  [length: {length}]")
    extra = _optional_constraints(ps, profile)
    if extra:
        lines += [""] + extra
    lines += [
        "",
        'NARRATIVE MODE -- IGNORE: text after "Narrative:" in a phase description',
        "is not a source of facts or phrasing.",
        "",
        "Output ONLY a JSON object. No reasoning.",
        "",
        json.dumps(ps.to_json(), ensure_ascii=False),
    ]
    system = SYSTEM_PROMPT.replace("{few_shot}", _few_shot_block(few_shot))
    return PromptBundle(system, "\n".join(lines) + "\n", ps.traj_id)


# -- generation ------------------------------------------------------------------

_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$")


def parse_record(text: str, traj_id) -> AnnotationRecord:
    try:
        data = json.loads(_FENCE.sub("", text.strip()))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"provider output is not JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaError("provider output is not a JSON object")
    return AnnotationRecord.from_record(data, traj_id=traj_id)


def generate(gen, p: PromptBundle) -> AnnotationRecord:
    """Run a provider on a prompt and validate its record; one retry on bad output."""
    last = None
    for attempt in (1, 2):
        text = gen(p.system, p.user)
        try:
            return parse_record(text, p.traj_id)
        except SchemaError as exc:
            log.warning("schema violation from provider (attempt %d): %s", attempt, exc)
            last = exc
    raise last


# -- offline template generator ---------------------------------------------------

def parse_desc(desc: str) -> dict[str, list[str]]:
    """Split a ``Key: a, b | Key: c`` area description into lists."""
    out = {}
    for part in desc.split("|"):
        if ":" in part:
            key, _, value = part.partition(":")
            out[key.strip().lower()] = [v.strip() for v in value.split(",") if v.strip()]
    return out


_DIR_WORDS = {"N": "north", "NE": "northeast", "E": "east", "SE": "southeast",
              "S": "south", "SW": "southwest", "W": "west", "NW": "northwest"}


def _time_of_day(hour):
    if hour < 6:
        return "early morning"
    if hour < 12:
        return "morning"
    if hour < 17:
        return "afternoon"
    if hour < 21:
        return "evening"
    return "night"


def _parse_start(text):
    # "Saturday, Jun 14, 2014 at 4:11 AM"
    try:
        return datetime.strptime(text, "%A, %b %d, %Y at %I:%M %p").replace(tzinfo=timezone.utc)
    except ValueError:
        return None


def _first(items, default=None):
    for x in items:
        if x:
            return x
    return default


class _TripFacts:
    """Names and context the template generator is allowed to use."""

    def __init__(self, data):
        phases = data.get("phases", [])
        self.phases = phases
        self.descs = [parse_desc(p.get("desc", "")) for p in phases]
        roads = [list(p.get("road_names") or []) for p in phases]
        self.origin_road = roads[0][0] if roads and roads[0] else None
        self.dest_road = roads[-1][-1] if roads and roads[-1] else None
        self.dest_poi = _first(self.descs[-1].get("pois", []) if self.descs else [])
        self.origin_district = _first(self.descs[0].get("district", []) if self.descs else [])
        self.dest_district = _first(self.descs[-1].get("district", []) if self.descs else [])
        middle = roads[1:-1]
        used = {self.origin_road, self.dest_road}
        self.waypoints = []
        for r in middle:
            for name in r:
                if name not in used:
                    used.add(name)
                    self.waypoints.append(name)
        self.dest_label = _first(self.descs[-1].get("gnn", []) if self.descs else [])
        self.headings = [p.get("dir") for p in phases if p.get("dir")]
        meta = data.get("meta", {})
        self.start = _parse_start(meta.get("start_time", ""))
        self.duration = meta.get("total_duration", "")
        self.n_phases = meta.get("n_phases", len(phases))

    @property
    def destination(self):
        return self.dest_poi or self.dest_road or self.dest_district or "the destination"

    def main_heading(self):
        if not self.headings:
            return "ahead"
        counts = {}
        for h in self.headings:
            counts[h] = counts.get(h, 0) + 1
        best = max(sorted(counts), key=lambda h: counts[h])
        return _DIR_WORDS.get(best, "ahead")

    def when(self):
        if self.start is None:
            return None
        return f"{self.start:%A} {_time_of_day(self.start.hour)}"


_LABEL_PHRASES = {"WATERFRONT": "by the river", "GREEN/PARK": "near the park",
                  "URBAN/INLAND": "downtown", "COASTAL/BEACH": "near the beach"}


def _trailing_json(user: str):
    for line in reversed(user.strip().splitlines()):
        if line.startswith("{"):
            return json.loads(line)
    raise SchemaError("prompt carries no trajectory JSON")


class TemplateGenerator:
    """Deterministic stand-in for an LLM provider.

    Reads the structured data embedded in the prompt and fills fixed
    templates, so every name it emits comes from the trajectory itself.
    """

    def __repr__(self):
        return "TemplateGenerator()"

    def __call__(self, system: str, user: str) -> str:
        if CAPTION_MARKER in system:
            return self._caption(user)
        return json.dumps(self._annotation(user), ensure_ascii=False)

    def _annotation(self, user):
        data = _trailing_json(user)
        facts = _TripFacts(data)
        scenarios = re.findall(r"\b([1-4]\.[1-3]) ", user.split("INTENT PLANNING")[0])
        dims = {int(s[0]) for s in scenarios}
        assigned = {int(q): [int(d) for d in re.findall(r"Dim (\d)", rest)]
                    for q, rest in re.findall(r"retrieval_query_(\d) -> (.*)", user)}
        dest = facts.destination
        wp = facts.waypoints[0] if facts.waypoints else None
        pace = "4.2" in scenarios

        literal = f"Head to {dest}"
        if wp and 2 in dims:
            literal += f" via {wp}"
        if facts.origin_road:
            literal += f", starting from {facts.origin_road}"
        literal += "."
        if pace:
            literal += " Keep it quick."
        concise = f"{dest}. {'Fast' if pace else 'Please'}."
        chatty = f"Hey, could you get me to {dest}?"
        if wp and 2 in dims:
            chatty += f" I would like to pass {wp} on the way."
        elif 3 in dims:
            chatty += f" Something heading {facts.main_heading()} would be great."
        else:
            chatty += " No fuss, whatever works."

        queries = [self._query(q, assigned.get(q, []), facts) for q in (1, 2, 3)]
        return {
            "_intent_planning": f"scenarios {' + '.join(scenarios) or 'none'}",
            "_retrieval_planning": ", ".join(f"q{q} dims {assigned.get(q, [])}" for q in (1, 2, 3)),
            "instruction_literal": literal,
            "instruction_concise": concise,
            "instruction_chatty": chatty,
            "retrieval_query_1": queries[0],
            "retrieval_query_2": queries[1],
            "retrieval_query_3": queries[2],
            "trajectory_caption": _caption_text(facts, with_context=True),
        }

    @staticmethod
    def _query(q, dims, facts):
        opener = ("Trips", "Routes", "Recorded drives")[q - 1]
        parts = []
        if facts.origin_road:
            parts.append(f"from {facts.origin_road}")
        for d in dims:
            if d == 1:
                parts.append(f"ending at {facts.destination}")
            elif d == 2:
                if facts.waypoints:
                    parts.append("passing through " + " and ".join(facts.waypoints[:2]))
                else:
                    parts.append("with no intermediate stops")
            elif d == 3:
                parts.append(f"that mostly head {facts.main_heading()}")
            elif d == 4:
                when = facts.when()
                parts.append(f"taken on a {when}" if when else "at any time of day")
                if facts.duration:
                    parts.append(f"lasting about {facts.duration}")
        return opener + " " + " ".join(parts) + "."

    def _caption(self, user):
        data = _trailing_json(user)
        facts = _TripFacts(data)
        return _caption_text(facts, with_context=data.get("mode", "sem") != "struct")


def _caption_text(facts: _TripFacts, with_context: bool) -> str:
    parts = []
    when = facts.when()
    opening = "The trip starts"
    if facts.origin_road:
        opening += f" on {facts.origin_road}"
    if with_context and facts.origin_district:
        opening += f" in {facts.origin_district}"
    if when:
        opening += f" on a {when}"
    parts.append(opening + ".")
    mid = f"It travels mainly {facts.main_heading()}"
    if facts.waypoints:
        mid += " along " + ", ".join(facts.waypoints[:3])
    parts.append(mid + ".")
    if with_context and facts.dest_label in _LABEL_PHRASES:
        parts.append(f"The final stretch runs {_LABEL_PHRASES[facts.dest_label]}.")
    end = "It ends"
    if with_context and facts.dest_poi:
        end += f" at {facts.dest_poi}"
        if facts.dest_road:
            end += f" on {facts.dest_road}"
    elif facts.dest_road:
        end += f" on {facts.dest_road}"
    if with_context and facts.dest_district:
        end += f" in {facts.dest_district}"
    if facts.duration:
        end += f" after {facts.duration} over {facts.n_phases} phases"
    parts.append(end + ".")
    return " ".join(parts)
