"""Travel-intent taxonomy and the samplers that condition annotation."""

from __future__ import annotations

import bisect
import zlib
from dataclasses import dataclass, field
from itertools import accumulate
from typing import Hashable

import numpy as np
import yaml

from .errors import ConfigError

SCENARIOS = {
    "1.1": (1, "Exact Anchor"),
    "1.2": (1, "Fuzzy Semantic"),
    "2.1": (2, "Strict Sequential"),
    "2.2": (2, "Flexible / Feature"),
    "2.3": (2, "Pass-through Zone"),
    "3.1": (3, "Semantic Constraints"),
    "3.2": (3, "Topological / Direct."),
    "3.3": (3, "Orthogonal Comp."),
    "4.1": (4, "Time-of-Day"),
    "4.2": (4, "Pace / Duration"),
}
DIMENSIONS = {1: "Destination", 2: "Waypoint", 3: "Route Preference", 4: "Temporal/Pace"}
COUNT_PROBS = (0.15, 0.35, 0.30, 0.15, 0.05)

_DESTINATION = ("1.1", "1.2")
_OTHERS = tuple(s for s, (dim, _) in SCENARIOS.items() if dim != 1)
_CUM = tuple(accumulate(COUNT_PROBS))

STYLES = ("literal", "concise", "chatty")

DEFAULT_POOLS = {
    "persona": [
        "Impatient and rushed",
        "Relaxed sightseer",
        "Cautious elderly passenger",
        "Busy professional",
        "Parent with young kids",
        "Late-night shift worker",
        "Budget-minded student",
        "Delivery courier",
        "Local who knows the shortcuts",
        "First-time visitor",
    ],
    "literal_forms": [
        "imperative command",
        "declarative statement",
        "sequenced action",
        "context-aware continuation",
        "telegraphic/terse",
        "coordinate-style",
    ],
    "concise_forms": [
        "single word or minimal fragment",
        "terse command",
        "abbreviated phrase",
        "constraint-first",
        "destination-only",
    ],
    "chatty_forms": [
        "question form",
        "complaint or reaction",
        "narrative/storytelling",
        "casual suggestion",
        "soft request",
        "trailing/open-ended",
    ],
    "literal_lengths": [
        "Brief but complete (one sentence)",
        "Moderate (dest. + 1-2 constraints)",
        "Detailed (dest. + waypoints + constr.)",
    ],
    "concise_lengths": [
        "Ultra-terse (telegram, fragments ok)",
        "Short phrase (minimal thought)",
        "Brief sentence (concise, grammatical)",
    ],
    "chatty_lengths": [
        "Casual one-liner",
        "Conversational (a couple sentences)",
        "Chatty and detailed (rambling ok)",
    ],
}


def scenario_dimension(sid: str) -> int:
    return SCENARIOS[sid][0]


def scenario_label(sid: str) -> str:
    return f"{sid} {SCENARIOS[sid][1]}"


@dataclass(frozen=True)
class IntentProfile:
    traj_id: Hashable
    scenarios: tuple

    def __post_init__(self):
        if not 1 <= len(self.scenarios) <= 5:
            raise ValueError(f"profile must hold 1-5 scenarios, got {len(self.scenarios)}")
        if len(set(self.scenarios)) != len(self.scenarios):
            raise ValueError("duplicate scenario in profile")
        if sum(scenario_dimension(s) == 1 for s in self.scenarios) != 1:
            raise ValueError("profile needs exactly one destination scenario")

    @property
    def k(self):
        return len(self.scenarios)

    @property
    def dimensions(self):
        return sorted({scenario_dimension(s) for s in self.scenarios})

    @property
    def flags(self):
        # 3.3 alongside 3.1/3.2 is allowed but worth surfacing downstream
        if "3.3" in self.scenarios and ({"3.1", "3.2"} & set(self.scenarios)):
            return ["orthogonal_with_route_pref"]
        return []

    def label_line(self):
        return " + ".join(self.scenarios)

    def to_record(self):
        return {"traj_id": self.traj_id, "scenarios": list(self.scenarios), "k": self.k, "flags": self.flags}


def profile_rng(seed: int, traj_id: Hashable) -> np.random.Generator:
    """Per-trajectory stream: counter-based on (seed, crc32(traj_id))."""
    return np.random.default_rng([int(seed), zlib.crc32(str(traj_id).encode("utf-8"))])


def _as_rng(seed, traj_id=None):
    if isinstance(seed, np.random.Generator):
        return seed
    return profile_rng(seed, traj_id) if traj_id is not None else np.random.default_rng(seed)


def sample_profile(seed, traj_id: Hashable) -> IntentProfile:
    """Draw an intent profile; ``seed`` is an int or a numpy Generator."""
    rng = _as_rng(seed, traj_id)
    k = min(bisect.bisect_right(_CUM, rng.random()), 4) + 1
    picked = [_DESTINATION[int(rng.integers(2))]]
    if k > 1:
        order = rng.permutation(len(_OTHERS))[: k - 1]
        picked += sorted(_OTHERS[i] for i in order)
    return IntentProfile(traj_id, tuple(picked))


@dataclass(frozen=True)
class PersonaStyle:
    persona: str
    styles: dict = field(default_factory=dict)  # style -> (sentence_form, length)

    def to_record(self):
        return {"persona": self.persona,
                "styles": {k: {"form": f, "length": ln} for k, (f, ln) in self.styles.items()}}


def load_pools(path=None) -> dict:
    pools = {k: list(v) for k, v in DEFAULT_POOLS.items()}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: pools file must be a mapping")
        unknown = set(loaded) - set(DEFAULT_POOLS)
        if unknown:
            raise ConfigError(f"{path}: unknown pool keys {sorted(unknown)}")
        for key, values in loaded.items():
            pools[key] = [str(v) for v in (values or [])]
    return pools


def sample_persona_style(seed, pools: dict | None = None) -> PersonaStyle:
    pools = DEFAULT_POOLS if pools is None else pools
    for key in DEFAULT_POOLS:
        if not pools.get(key):
            raise ConfigError(f"pool {key!r} is empty")
    rng = _as_rng(seed)

    def draw(key):
        pool = pools[key]
        return pool[int(rng.integers(len(pool)))]

    persona = draw("persona")
    styles = {s: (draw(f"{s}_forms"), draw(f"{s}_lengths")) for s in STYLES}
    return PersonaStyle(persona, styles)


def default_assignment(rng: np.random.Generator) -> dict[int, tuple[int, ...]]:
    """Spread the four intent dimensions over the three retrieval queries."""
    dims = [int(d) for d in rng.permutation(4) + 1]
    doubled = int(rng.integers(3))
    out, it = {}, iter(dims)
    for q in (1, 2, 3):
        take = 2 if q - 1 == doubled else 1
        out[q] = tuple(sorted(next(it) for _ in range(take)))
    return out
