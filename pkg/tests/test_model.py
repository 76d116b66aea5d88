import io
import threading

import pytest
from hypothesis import given, strategies as st

from cove.model import (
    CallRecord,
    CrossCheckVerdict,
    DecodingParams,
    InvalidConfig,
    PipelineConfig,
    PipelineResult,
    PipelineTrace,
    PlannedVerification,
    PlannerStrategy,
    Query,
    Step,
    TaskKind,
    VerdictStatus,
    VerificationPlan,
    VerificationQA,
    Variant,
    decode_result,
    encode_result,
    read_results,
    read_trace,
    validate_config,
    write_results,
    write_trace,
)


def test_validate_config_examples():
    assert validate_config(PipelineConfig(Variant.FACTORED, PlannerStrategy.OPEN, 10, parallelism=4)) == []
    assert validate_config(PipelineConfig(Variant.BASELINE, PlannerStrategy.YES_NO)) == [
        "planner_strategy ignored for baseline"
    ]
    with pytest.raises(InvalidConfig):
        validate_config(PipelineConfig(Variant.JOINT, max_questions=0))
    with pytest.raises(InvalidConfig):
        validate_config(PipelineConfig(parallelism=0))
    with pytest.raises(InvalidConfig):
        validate_config(PipelineConfig(decoding=DecodingParams(temperature=-0.1)))


def test_defaults_are_greedy():
    cfg = PipelineConfig()
    assert cfg.decoding.temperature == 0.0
    assert cfg.max_questions == 10


def test_config_round_trip_and_hash():
    cfg = PipelineConfig("factor_revise", "yes_no", 5, DecodingParams(0.3, 64, ("###",)), 2, 7, "skip")
    again = PipelineConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()
    assert PipelineConfig().config_hash() != cfg.config_hash()


def test_query_rejects_blank_text():
    with pytest.raises(ValueError):
        Query("   ", TaskKind.LIST_QA, "x")


def test_verdict_part_invariant():
    with pytest.raises(ValueError):
        CrossCheckVerdict(VerdictStatus.INCONSISTENT, "something")
    assert CrossCheckVerdict(VerdictStatus.CONSISTENT, "fine").consistent_part == "fine"


def test_trace_rejects_duplicate_seq_and_orders_calls():
    trace = PipelineTrace("q", PipelineConfig())
    a, b = trace.reserve(2)
    trace.add(CallRecord(b, Step.FINAL_GEN, "p2", "c2", "m"))
    trace.add(CallRecord(a, Step.BASELINE_GEN, "p1", "c1", "m"))
    assert [c.seq for c in trace.calls] == [0, 1]
    with pytest.raises(ValueError):
        trace.add(CallRecord(a, Step.PLAN, "p", "c", "m"))


def test_trace_concurrent_appends():
    trace = PipelineTrace("q", PipelineConfig())

    def worker():
        for _ in range(50):
            (seq,) = trace.reserve(1)
            trace.add(CallRecord(seq, Step.EXECUTE, f"p{seq}", "c", "m"))

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert [c.seq for c in trace.calls] == list(range(400))


_text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=30)


@st.composite
def results(draw):
    query = Query(draw(_text.filter(lambda s: s.strip())), draw(st.sampled_from(list(TaskKind))), draw(_text))
    cfg = PipelineConfig(draw(st.sampled_from(list(Variant))), draw(st.sampled_from(list(PlannerStrategy))))
    items = tuple(
        PlannedVerification(draw(_text), q, draw(st.integers(0, 3)))
        for q in draw(st.lists(_text.filter(lambda s: s.strip()), max_size=4, unique=True))
    )
    plan = VerificationPlan(items, draw(st.booleans()))
    qa = tuple(VerificationQA(it, draw(_text)) for it in items)
    verdicts = None
    if cfg.variant is Variant.FACTOR_REVISE:
        verdicts = tuple(
            CrossCheckVerdict(VerdictStatus.INCONSISTENT) if draw(st.booleans())
            else CrossCheckVerdict(VerdictStatus.PARTIALLY_CONSISTENT, draw(_text))
            for _ in qa
        )
    trace = PipelineTrace(query.id, cfg)
    for seq in trace.reserve(draw(st.integers(0, 4))):
        trace.add(CallRecord(seq, draw(st.sampled_from(list(Step))), draw(_text), draw(_text), "mock",
                             draw(st.integers(0, 99)), draw(st.none() | _text)))
    trace.warn(draw(_text))
    return PipelineResult(query, draw(_text), plan, qa, verdicts, draw(_text), trace)


@given(results())
def test_result_round_trip(result):
    line = encode_result(result)
    assert line.endswith("\n") and line.count("\n") == 1
    back = decode_result(line)
    assert back == result
    assert encode_result(back) == line


@given(st.lists(results(), max_size=3))
def test_results_file_round_trip(items):
    buf = io.StringIO()
    write_results(items, buf)
    buf.seek(0)
    assert read_results(buf) == items


def test_trace_file_round_trip():
    trace = PipelineTrace("q1", PipelineConfig(Variant.TWO_STEP))
    for seq in trace.reserve(3):
        trace.add(CallRecord(seq, Step.PLAN, f"prompt {seq}\nwith newline", "ünïcode", "m", 3))
    trace.warn("plan truncated")
    buf = io.StringIO()
    write_trace(trace, buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == 4
    buf.seek(0)
    assert read_trace(buf) == trace
