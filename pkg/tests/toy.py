"""Hand-built toy inputs shared by prompt and QC tests."""

from trajbench.geo import CellId, CellIndex, CellMeta, HexConfig
from trajbench.intent import IntentProfile, PersonaStyle
from trajbench.traj import Phase, PhaseSeq

from conftest import ORIGIN

CFG = HexConfig(ORIGIN)

CELLS = CellIndex([
    CellMeta(CellId(0, 0), "POIs: Rose Cafe | District: Old Town | Roads: Harbor Street | GNN: URBAN/INLAND",
             frozenset({"Rose Cafe"}), frozenset({"Harbor Street"}), "Old Town"),
    CellMeta(CellId(1, 0), "POIs: Ivy Library | District: Old Town | Roads: Mill Street | GNN: GREEN/PARK",
             frozenset({"Ivy Library"}), frozenset({"Mill Street"}), "Old Town"),
    CellMeta(CellId(2, 0), "POIs: Falcon Hotel | District: Riverside | Roads: Canal Street | GNN: WATERFRONT",
             frozenset({"Falcon Hotel"}), frozenset({"Canal Street"}), "Riverside"),
], CFG)

PS = PhaseSeq(
    traj_id="toy-1",
    phases=(
        Phase(CellId(0, 0), 3, "E", 120.0, "O", ("Harbor Street",), CELLS.description(CellId(0, 0))),
        Phase(CellId(1, 0), 4, "E", 375.0, "T", ("Mill Street",), CELLS.description(CellId(1, 0))),
        Phase(CellId(2, 0), 1, "SE", 0.0, "D", ("Canal Street",), CELLS.description(CellId(2, 0))),
    ),
    n_rids=8,
    start_time=1402719060,
)

PROFILE = IntentProfile("toy-1", ("1.1", "2.1", "4.2"))

STYLE = PersonaStyle("Busy professional", {
    "literal": ("imperative command", "Brief but complete (one sentence)"),
    "concise": ("terse command", "Short phrase (minimal thought)"),
    "chatty": ("soft request", "Casual one-liner"),
})

ASSIGNMENT = {1: (1,), 2: (2, 3), 3: (4,)}


def separable_toy(n=200, in_dim=289, seed=0):
    """Distinct text queries paired with random (hence linearly separable) feature rows."""
    import numpy as np

    from trajbench.providers import HashEmbedder

    words = ("harbor tower market chapel kepler jasper falcon cafe granite owl museum station "
             "river bridge park school library garden stadium mill").split()
    rng = np.random.default_rng(seed)
    queries = set()
    while len(queries) < n:
        a, b, c = rng.choice(words, 3, replace=False)
        queries.add(f"from {a} to {b} via {c}")
    queries = sorted(queries)
    return queries, HashEmbedder().embed(queries), rng.normal(size=(n, in_dim))


def toy_trip():
    """Graph and trajectory whose phases line up with ``CELLS``."""
    from conftest import cell_graph
    from trajbench.traj import Trajectory

    a, b, c = CellId(0, 0), CellId(1, 0), CellId(2, 0)
    names = {0: "Harbor Street", 1: "Harbor Street", 2: "Mill Street", 3: "Mill Street", 4: "Canal Street"}
    g = cell_graph([a, a, b, b, c], names)
    t = Trajectory("toy-1", range(5), (1402719060, 1402719120, 1402719300, 1402719400, 1402719555))
    return g, t
