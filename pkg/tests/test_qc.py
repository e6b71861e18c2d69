import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from toy import CELLS, PS
from trajbench.annotate import TEXT_FIELDS, AnnotationRecord
from trajbench.errors import InvalidArgument, ProviderError
from trajbench.qc import (
    CRITERIA, HeuristicJudge, ProviderJudge, ScoreCard, agreement_pm1, capitalized_spans, judge_score,
    qc_diversity, qc_grounding, qc_hallucination, qc_punctuation, qc_terminology, run_qc, sanitize,
    sanitize_punctuation, sanitize_terminology, select_top,
)

GOOD = {
    "instruction_literal": "Head to Falcon Hotel via Mill Street, starting from Harbor Street.",
    "instruction_concise": "Falcon Hotel. Please.",
    "instruction_chatty": "Hey, could you get me to Falcon Hotel? No fuss, whatever works.",
    "retrieval_query_1": "Trips from Harbor Street ending at Falcon Hotel.",
    "retrieval_query_2": "Routes from Harbor Street passing through Mill Street.",
    "retrieval_query_3": "Recorded drives from Harbor Street taken on a Saturday morning.",
    "trajectory_caption": "The trip starts on Harbor Street in Old Town. It travels mainly east along "
                          "Mill Street. It ends at Falcon Hotel on Canal Street in Riverside.",
}


def make(**over):
    rec = {"_intent_planning": "p", "_retrieval_planning": "r", **GOOD, **over}
    return AnnotationRecord.from_record(rec, traj_id="toy-1")


def card(item, value=5, **over):
    scores = {c: value for c in CRITERIA}
    scores.update(over)
    return ScoreCard(item, scores)


texts = st.lists(st.sampled_from(list("ab ;—,./") + ["WATERFRONT", "GREEN/PARK", "urban/inland", " x "]),
                 max_size=20).map("".join)


def test_terminology_examples():
    assert sanitize_terminology("Drive WATERFRONT now") == "Drive by the river now"
    assert sanitize_terminology("near GREEN/PARK and urban/inland") == "near the park and downtown"
    assert sanitize_terminology("clean text") == "clean text"


def test_punctuation_examples():
    assert sanitize_punctuation("A — B; C") == "A, B, C"
    assert sanitize_punctuation("clean text") == "clean text"


@given(texts)
def test_sanitizers_idempotent_and_order_insensitive(t):
    once = sanitize_punctuation(sanitize_terminology(t))
    assert sanitize_punctuation(sanitize_terminology(once)) == once
    assert sanitize_terminology(sanitize_punctuation(t)) == once
    assert "—" not in once and ";" not in once


def test_record_sanitizers():
    rec = make(trajectory_caption="It ends WATERFRONT — quietly; done.")
    out = sanitize(rec)
    assert out.trajectory_caption == "It ends by the river, quietly, done."
    assert qc_punctuation(qc_terminology(rec)) == out
    assert out.traj_id == rec.traj_id and out.intent_planning == rec.intent_planning


def test_grounding_clean_and_ungrounded():
    assert qc_grounding(make(), PS, CELLS).clean
    only_last = make(trajectory_caption="It ends on Canal Street.")
    assert qc_grounding(only_last, PS, CELLS).clean
    bad = make(trajectory_caption="It passes Baker Avenue and ends on Canal Street.")
    rep = qc_grounding(bad, PS, CELLS, CELLS.gazetteer() | __import__("trajbench.geo").geo.Gazetteer(["Baker Avenue"]))
    assert rep.ungrounded == [("trajectory_caption", "baker avenue")]


def test_grounding_phase_alignment():
    rec = make(instruction_literal="Head to Mill Street, starting from Harbor Street.")
    rep = qc_grounding(rec, PS, CELLS)
    assert rep.misaligned == [("instruction_literal", "mill street", "destination")]
    rec = make(retrieval_query_1="Trips from Canal Street ending at Falcon Hotel.")
    assert qc_grounding(rec, PS, CELLS).misaligned == [("retrieval_query_1", "canal street", "origin")]


def test_grounding_recall_on_inserted_mentions():
    from trajbench.geo import Gazetteer

    outside = ["Baker Avenue", "Copper Museum", "Northgate", "Lantern Gallery"]
    gaz = CELLS.gazetteer() | Gazetteer(outside)
    inside = sorted(CELLS.gazetteer().names)
    rng = np.random.default_rng(0)
    for _ in range(200):
        picks = list(rng.choice(inside + outside, size=3))
        styled = [p.upper() if rng.random() < 0.3 else "  ".join(p.split()) for p in picks]
        caption = "Noted. " + ". ".join(styled) + ". Fine."
        rep = qc_grounding(make(trajectory_caption=caption), PS, CELLS, gaz)
        found = [n for f, n, _ in rep.mentions if f == "trajectory_caption"]
        assert found == [p.lower() for p in picks]
        flagged = {n for _, n in rep.ungrounded}
        assert flagged == {p.lower() for p in picks if p in outside}


def test_diversity():
    same = make(instruction_concise=GOOD["instruction_literal"])
    assert not qc_diversity(same).passed
    assert qc_diversity(make()).passed


def test_diversity_threshold_monotone(city):
    recs = city.annotations
    rates = []
    for thr in np.linspace(0.0, 1.0, 11):
        rates.append(sum(not qc_diversity(r, thr).passed for r in recs))
    assert rates == sorted(rates, reverse=True)


def test_capitalized_spans():
    gaz = CELLS.gazetteer()
    assert capitalized_spans("Go past Crystal Tower to Falcon Hotel.", gaz) == ["Crystal Tower"]
    assert capitalized_spans("Hey, could you get me to Falcon Hotel? Thanks", gaz) == []
    assert capitalized_spans("At 4 AM I left Harbor Street.", gaz) == []


def test_hallucination_flag():
    judge = HeuristicJudge()
    res = qc_hallucination(judge, make(trajectory_caption="It ends at Crystal Tower near Canal Street."), PS, CELLS)
    assert res.flagged and res.spans == ["Crystal Tower"]
    assert not qc_hallucination(None, make(), PS, CELLS).flagged


def test_hallucination_injection_recall(city):
    heads = ["Crystal", "Obsidian", "Velvet", "Amber", "Cobalt", "Saffron", "Indigo", "Marble", "Thistle", "Quartz"]
    kinds = ["Tower", "Plaza", "Arcade", "Pavilion", "Terrace", "Observatory"]
    rng = np.random.default_rng(1)
    from trajbench.harness import compress_all

    seqs = {ps.traj_id: ps for ps in compress_all(city)}
    hits = trials = 0
    for rec in city.annotations[:50]:
        name = f"{rng.choice(heads)} {rng.choice(kinds)}"
        field = TEXT_FIELDS[int(rng.integers(len(TEXT_FIELDS)))]
        text = getattr(rec, field).rstrip(".") + f", then past {name}."
        bad = AnnotationRecord.from_record({**rec.to_record(), field: text})
        trials += 1
        hits += qc_hallucination(None, bad, seqs[rec.traj_id], city.cells).flagged
    assert hits / trials >= 0.9


def test_default_judge_contract():
    sc = judge_score(None, make(), PS, CELLS)
    assert all(v >= 4 for v in sc.scores.values())
    assert judge_score(None, make(), PS, CELLS) == sc
    flagged = judge_score(None, make(trajectory_caption="It ends at Crystal Tower."), PS, CELLS)
    assert flagged.scores["t1_no_hallucination"] == 5
    assert flagged.scores["t2_no_hallucination"] == 5


def test_provider_scores_are_clamped():
    import json

    judge = ProviderJudge(lambda s, u: json.dumps({c: 7 if i == 0 else 3 for i, c in enumerate(CRITERIA)}))
    with pytest.warns(UserWarning, match="clamped"):
        sc = judge_score(judge, make(), PS, CELLS)
    assert sc.scores[CRITERIA[0]] == 5 and sc.scores[CRITERIA[1]] == 3
    assert sc.judge_id == "provider"


def test_provider_judge_degrades():
    def broken(s, u):
        raise ProviderError("down")

    judge = ProviderJudge(broken)
    res = judge.hallucination(make(), PS, CELLS)
    assert res.degraded and not res.flagged
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert judge_score(judge, make(), PS, CELLS).scores == judge_score(None, make(), PS, CELLS).scores


def test_scorecard_validation():
    with pytest.raises(InvalidArgument):
        ScoreCard(1, {c: 6 for c in CRITERIA})
    with pytest.raises(InvalidArgument):
        ScoreCard(1, {CRITERIA[0]: 3})
    assert ScoreCard.from_record(card(3).to_record()) == card(3)


def test_agreement_examples():
    a = [card(i) for i in range(4)]
    assert agreement_pm1(a, a) == {**{c: 1.0 for c in CRITERIA}, "mean": 1.0}
    one = agreement_pm1([card(1, 5)], [card(1, 3)])
    assert all(one[c] == 0.0 for c in CRITERIA)
    with pytest.raises(InvalidArgument):
        agreement_pm1(a, a[:3])


def test_agreement_vs_counting_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(1, 15))
        sa = rng.integers(1, 6, size=(n, len(CRITERIA)))
        sb = rng.integers(1, 6, size=(n, len(CRITERIA)))
        a = [ScoreCard(i, dict(zip(CRITERIA, map(int, row)))) for i, row in enumerate(sa)]
        b = [ScoreCard(i, dict(zip(CRITERIA, map(int, row)))) for i, row in enumerate(sb)][::-1]
        got = agreement_pm1(a, b)
        for j, c in enumerate(CRITERIA):
            assert got[c] == pytest.approx(np.mean(np.abs(sa[:, j] - sb[:, j]) <= 1))


def test_select_top():
    scored = [(3, card(3, 4)), (1, card(1, 4)), (2, card(2, 5)), (0, card(0, 3))]
    assert select_top(scored, 4) == [2, 1, 3, 0]
    assert select_top(scored, 2) == [2, 1]
    assert select_top(scored[::-1], 2) == [2, 1]
    with pytest.raises(InvalidArgument):
        select_top(scored, 5)


def test_run_qc_on_generated_corpus(city):
    from trajbench.harness import compress_all

    seqs = {ps.traj_id: ps for ps in compress_all(city)}
    for rec in city.annotations:
        out = run_qc(rec, seqs[rec.traj_id], city.cells)
        assert out.grounding.clean, out.grounding.to_record()
        assert out.passed
        for text in out.record.texts().values():
            assert "—" not in text and ";" not in text
