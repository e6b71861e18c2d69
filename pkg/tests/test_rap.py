from pathlib import Path

import pytest
from sklearn.base import clone

from toy import CELLS, toy_trip
from trajbench.errors import InvalidArgument, InvalidState, SchemaError
from trajbench.geo import normalize_name
from trajbench.harness import compress_all
from trajbench.providers import HashEmbedder
from trajbench.qc import qc_grounding
from trajbench.rap import (
    CAPTION_SYSTEM, DIRECTIVE, RapCaptioner, assemble_caption_prompt, build_caption_index, caption,
    retrieve_examples, trajectory_text,
)

GOLDEN = Path(__file__).parent / "golden"
EXAMPLES = ("Example caption one.", "Example caption two.")


@pytest.mark.parametrize("mode", ["struct", "sem", "rap"])
def test_prompt_golden(mode):
    g, t = toy_trip()
    p = assemble_caption_prompt(t, g, CELLS, mode, EXAMPLES if mode == "rap" else ())
    assert p.user == (GOLDEN / f"caption_{mode}.txt").read_text()
    assert p.system == (GOLDEN / "caption_system.txt").read_text() == CAPTION_SYSTEM
    assert DIRECTIVE in p.user


def test_struct_prompt_has_no_semantic_names():
    g, t = toy_trip()
    text = normalize_name(assemble_caption_prompt(t, g, CELLS, "struct").user)
    for meta in CELLS:
        for name in meta.poi_names | {normalize_name(meta.district)}:
            assert name not in text


def test_rap_prompt_has_exactly_k_examples(city):
    cap = RapCaptioner(graph=city.graph, cells=city.cells, k=2)
    cap.fit([(city.trajectory(a.traj_id), a.trajectory_caption) for a in city.annotations[:30]])
    p = cap.prompt(city.trajectories[50])
    assert sum(line.startswith("  Example ") for line in p.user.splitlines()) == 2
    with pytest.raises(InvalidArgument):
        assemble_caption_prompt(city.trajectories[0], city.graph, city.cells, "rap")
    with pytest.raises(InvalidArgument):
        assemble_caption_prompt(city.trajectories[0], city.graph, city.cells, "poem")


def test_retrieve_examples(city):
    emb = HashEmbedder()
    train = [(city.trajectory(a.traj_id), a.trajectory_caption) for a in city.annotations[:25]]
    idx = build_caption_index(train, city.graph, city.cells, emb)
    assert build_caption_index(train, city.graph, city.cells, emb).vectors.tolist() == idx.vectors.tolist()
    t0 = train[0][0]
    qv = emb.embed([trajectory_text(t0, city.graph, city.cells)])[0]
    top = retrieve_examples(qv, idx, k=len(idx))
    sims = [s for _, s in top]
    assert sims == sorted(sims, reverse=True)
    assert top[0][0] == train[0][1]
    excl = retrieve_examples(qv, idx, k=len(idx), exclude=t0.mm_id)
    assert len(excl) == len(idx) - 1
    single = build_caption_index(train[:1], city.graph, city.cells, emb)
    assert retrieve_examples(qv, single, k=1) == [(train[0][1], pytest.approx(1.0))]
    with pytest.raises(InvalidArgument):
        retrieve_examples(qv, idx, k=0)


def test_caption_contract():
    g, t = toy_trip()
    p = assemble_caption_prompt(t, g, CELLS, "sem")
    out = caption(None, p)
    assert "Harbor Street" in out and "Canal Street" in out
    with pytest.raises(SchemaError):
        caption(lambda s, u: "   ", p)
    assert caption(lambda s, u: "A — B; C", p) == "A, B, C"


def test_sem_and_rap_captions_are_grounded(city):
    seqs = {ps.traj_id: ps for ps in compress_all(city)}
    train = [(city.trajectory(a.traj_id), a.trajectory_caption) for a in city.annotations[:60]]
    for mode in ("sem", "rap"):
        cap = RapCaptioner(graph=city.graph, cells=city.cells, mode=mode).fit(train)
        trips = city.trajectories[60:80]
        for t, text in zip(trips, cap.predict(trips)):
            rec = next(a for a in city.annotations if a.traj_id == t.mm_id)
            rec = type(rec).from_record({**rec.to_record(), "trajectory_caption": text})
            assert not qc_grounding(rec, seqs[t.mm_id], city.cells).ungrounded


def test_captioner_estimator(city):
    cap = RapCaptioner(graph=city.graph, cells=city.cells)
    with pytest.raises(InvalidState):
        cap.prompt(city.trajectories[0])
    assert clone(cap).get_params()["k"] == 3
    with pytest.raises(InvalidArgument):
        RapCaptioner().fit([])
    # a training item never retrieves itself
    train = [(city.trajectory(a.traj_id), f"Caption number {i}.") for i, a in enumerate(city.annotations[:10])]
    user = cap.fit(train).prompt(train[0][0]).user
    assert "Caption number 0." not in user
    assert sum(f"Caption number {i}." in user for i in range(1, 10)) == 3
