import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cove.backend import ScriptedBackend
from cove.evaluation import (
    EmptyGold,
    EmptyResponse,
    EvalReport,
    FactJudgment,
    GoldEntity,
    JudgeMode,
    ListJudgment,
    NoFacts,
    Rarity,
    clip_sentences,
    extract_facts,
    fact_report,
    factscore,
    factscore_by_rarity,
    judge_fact,
    list_report,
    micro_precision,
    multispan_f1,
    multispan_f1_corpus,
    normalize_entity,
    parse_fact_lines,
    render_table,
)
from cove.model import PipelineConfig, PipelineTrace, Step, TaskKind
from cove.prompts import BankStep, load_banks

EXTRACT = load_banks().get(TaskKind.LONGFORM_BIO, BankStep.EXTRACT)


def test_normalize_examples():
    assert normalize_entity("  The Mexican–American War.") == "mexican–american war"
    assert normalize_entity("JOHN F. KENNEDY JR.") == normalize_entity("John F. Kennedy Jr")
    assert normalize_entity("an  apple!?") == "apple"
    assert normalize_entity("The the band.") == "band"
    assert normalize_entity("...") == ""


@given(st.text())
def test_normalize_is_idempotent(s):
    once = normalize_entity(s)
    assert normalize_entity(once) == once


def test_aliases_resolve_to_one_entity():
    gold = (GoldEntity("Joseph R. Biden", ("Joe Biden",)),)
    j = ListJudgment("q", ("Joe Biden", "joseph r. biden", "Someone Else"), gold)
    assert j.counts() == (1, 1)
    with pytest.raises(EmptyGold):
        ListJudgment("q", ("a",), ()).counts()


def test_no_predictions_flagged():
    s = micro_precision([ListJudgment("q", (), ("a",))])
    assert s.no_predictions and s.precision == 0.0
    assert list_report("x", [ListJudgment("q", (), ("a",))]).flags


def test_span_f1_single_answer_match():
    s = multispan_f1(["Project Gutenberg"], ["project gutenberg."])
    assert (s.f1, s.precision, s.recall) == (1.0, 1.0, 1.0)
    assert multispan_f1([], ["a"]).f1 == 0.0
    with pytest.raises(EmptyGold):
        multispan_f1(["a"], [])


def test_span_corpus_pools_counts():
    s = multispan_f1_corpus([(["a", "b"], ["a"]), (["c"], ["c", "d", "e"])])
    # hits 2, predicted 3, gold 4
    assert s.precision == 2 / 3 and s.recall == 0.5 and s.f1 == 4 / 7


def test_metrics_ignore_prediction_order():
    rng = random.Random(3)
    for _ in range(100):
        gold = [f"g{i}" for i in range(rng.randint(1, 6))]
        pool = gold + [f"x{i}" for i in range(4)]
        pred = rng.sample(pool, rng.randint(0, len(pool)))
        shuffled = pred[:]
        rng.shuffle(shuffled)
        assert multispan_f1(pred, gold) == multispan_f1(shuffled, gold)
        a = micro_precision([ListJudgment("q", pred, gold)])
        b = micro_precision([ListJudgment("q", shuffled, gold)])
        assert a == b


def test_factscore_buckets_and_no_facts():
    judgments = [
        FactJudgment("a", (("f", True), ("g", False)), Rarity.HEAD),
        FactJudgment("b", (("f", True),), Rarity.HEAD),
        FactJudgment("c", (("f", False),), "tail"),
        FactJudgment("d", (), Rarity.TORSO),
    ]
    by = factscore_by_rarity(judgments)
    assert by["head"].score == 75.0
    assert by["tail"].score == 0.0
    assert by["torso"] is None
    overall = factscore(judgments)
    assert overall.score == pytest.approx(50.0)
    assert overall.avg_facts == 1.0
    with pytest.raises(NoFacts):
        factscore([FactJudgment("d", ())])


def test_parse_fact_lines_stops_at_next_demo():
    text = "- Curie was a physicist.\n- Curie was born in Warsaw.\n\nPlease breakdown the following: x\n- y"
    assert parse_fact_lines(text) == ["Curie was a physicist.", "Curie was born in Warsaw."]


def test_extract_facts_with_mock_and_trace_tag():
    backend = ScriptedBackend().add(
        "regex", r"independent facts: Marie Curie was a Polish physicist\.\n\Z",
        "- Marie Curie was Polish.\n- Marie Curie was a physicist.",
    )
    trace = PipelineTrace("b", PipelineConfig())
    facts = extract_facts("Marie Curie was a Polish physicist.", backend, EXTRACT, trace)
    assert facts == ["Marie Curie was Polish.", "Marie Curie was a physicist."]
    assert [c.step for c in trace.calls] == [Step.EXECUTE]
    with pytest.raises(EmptyResponse):
        extract_facts("  ", backend, EXTRACT)


def test_judge_fact_exact_mode():
    gold = ["Donald Trump was born in Queens."]
    assert judge_fact("donald trump was born in Queens", gold)
    # paraphrases are not matched in exact mode
    assert not judge_fact("Trump was born in Queens.", gold)
    with pytest.raises(EmptyGold):
        judge_fact("x", [])


def test_judge_fact_backend_mode():
    backend = (
        ScriptedBackend()
        .add("regex", r"Statement: Hillary Clinton was born in New York\nAnswer:\Z", " No.")
        .add("regex", r"Statement: Donald Trump was born in Queens\nAnswer:\Z", "Yes")
        .add("regex", r"Statement: Unclear\nAnswer:\Z", "Perhaps")
    )
    warnings = []
    assert not judge_fact("Hillary Clinton was born in New York", [], JudgeMode.BACKEND, backend, warnings)
    assert judge_fact("Donald Trump was born in Queens", [], JudgeMode.BACKEND, backend, warnings)
    assert warnings == []
    assert not judge_fact("Unclear", [], JudgeMode.BACKEND, backend, warnings)
    assert len(warnings) == 1


def test_clip_sentences():
    text = "One. Two!  Three? Four."
    assert clip_sentences(text, 2) == "One. Two!"
    assert clip_sentences(text, 10) == text
    with pytest.raises(ValueError):
        clip_sentences(text, 0)


def _list(label, p, pos, neg):
    return EvalReport(TaskKind.LIST_QA, label, {"precision": p, "avg_pos": pos, "avg_neg": neg})


def test_render_table_fixture():
    table = render_table([_list("Few-shot baseline", 0.17, 0.77, 3.91), _list("CoVe (factored)", 0.36, 0.68, 1.19)])
    assert table == (
        "[list_qa]\n"
        "Method             Prec.  Pos.  Neg.\n"
        "-----------------  -----  ----  ----\n"
        "Few-shot baseline   0.17  0.77  3.91\n"
        "CoVe (factored)     0.36  0.68  1.19\n"
    )


def test_fact_report_table_has_rarity_columns():
    r = fact_report("b", [FactJudgment("a", (("f", True),), "head"), FactJudgment("c", (("f", False),), "tail")])
    table = render_table([r])
    assert "Head" in table and "Torso" in table
    row = table.splitlines()[-1]
    assert row.split() == ["b", "50.0", "1.0", "100.0", "-", "0.0"]


def test_report_round_trip_is_stable():
    r = _list("x", 0.5, 1.0, 1.0)
    again = EvalReport.from_dict(r.to_dict())
    assert again.dumps() == r.dumps()
