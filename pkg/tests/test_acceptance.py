"""Acceptance criteria, one test per criterion.

Each test prints a single CRITERION line; the lines are repeated in the
pytest terminal summary. Criterion 9 (live endpoint smoke test) is manual and
documented in the README, so it is not collected here.
"""

import json
import random
import time

import pytest

from cove import cli
from cove.backend import ScriptedBackend, dump_rules
from cove.datasets import TaskRecord, dump_dataset
from cove.evaluation import (
    FactJudgment,
    ListJudgment,
    GoldEntity,
    factscore,
    micro_precision,
    multispan_f1,
)
from cove.model import (
    PipelineConfig,
    PlannerStrategy,
    Query,
    Step,
    TaskKind,
    VerdictStatus,
    Variant,
)
from cove.pipeline import (
    expected_call_count,
    isolation_violations,
    independence_violations,
    parse_crosscheck,
    parse_list_answer,
    parse_plan,
    run,
)

from conftest import FIXTURES
from oracles import (
    make_scenario,
    naive_shared_ngram,
    oracle_call_count,
    oracle_micro_precision,
    oracle_span_prf,
    random_entities,
    random_list_instance,
    random_plan,
    random_span_instance,
    render_list_text,
    render_plan_text,
    scenario_backend,
    scenario_rules,
)

FIG1_QUERY = Query("Name some politicians who were born in NY, New York", TaskKind.LIST_QA, "fig1")


def _strategy_for(rng, task):
    choices = [PlannerStrategy.OPEN, PlannerStrategy.YES_NO]
    if task is TaskKind.LIST_QA:
        choices.append(PlannerStrategy.RULE)
    return rng.choice(choices)


def test_criterion_1_isolation(criterion):
    c = criterion(1, "execute prompts never contain a 10-gram of the draft")
    rng = random.Random(101)
    start = time.perf_counter()
    checked = leaks = lib_disagree = indep = 0
    joint_runs = joint_contains = joint_ngram = 0
    for variant in (Variant.TWO_STEP, Variant.FACTORED, Variant.FACTOR_REVISE, Variant.JOINT):
        for _ in range(200):
            task = rng.choice(list(TaskKind))
            strategy = _strategy_for(rng, task)
            sc = make_scenario(rng, task, strategy=strategy)
            result = run(Query(sc.query, task, "q"), PipelineConfig(variant, strategy), scenario_backend(sc, variant))
            draft = result.baseline_response
            if variant is Variant.JOINT:
                # positive control: each combined prompt carries its draft passage verbatim
                joint_runs += 1
                prompts = [call.prompt for call in result.trace.calls if call.step is Step.PLAN]
                if all(any(p in prompt for prompt in prompts) for p in sc.passages):
                    joint_contains += 1
                long = [p for p in sc.passages if len(p.split()) >= 10]
                if all(any(naive_shared_ngram(prompt, p) for prompt in prompts) for p in long):
                    joint_ngram += 1
                continue
            for call in result.trace.calls:
                if call.step is Step.EXECUTE:
                    checked += 1
                    leaks += naive_shared_ngram(call.prompt, draft)
            lib_disagree += bool(isolation_violations(result))
            indep += bool(independence_violations(result))
    elapsed = time.perf_counter() - start
    ok = (
        leaks == 0 and lib_disagree == 0 and indep == 0
        and joint_contains == joint_runs == joint_ngram == 200 and elapsed < 30
    )
    c.check(ok, (
        f"{checked} execute prompts over 600 runs, {leaks} leaks; joint control "
        f"{joint_contains}/{joint_runs} contain the draft ({joint_ngram} via 10-grams); "
        f"library flags {lib_disagree}, cross-question leaks {indep}; {elapsed:.1f}s"
    ))


def test_criterion_2_call_counts(criterion):
    c = criterion(2, "trace call counts match the per-variant formulas")
    rng = random.Random(202)
    bad = []
    for trial in range(500):
        variant = rng.choice(list(Variant))
        task = rng.choice(list(TaskKind))
        strategy = _strategy_for(rng, task) if variant.verifies else PlannerStrategy.OPEN
        sc = make_scenario(rng, task, k=rng.randint(0, 10), strategy=strategy)
        result = run(Query(sc.query, task, f"t{trial}"), PipelineConfig(variant, strategy),
                     scenario_backend(sc, variant))
        k = len(result.plan)
        got = len(result.trace)
        want = oracle_call_count(variant, k, strategy, len(sc.passages))
        lib = expected_call_count(variant, k, strategy, len(sc.passages))
        if variant.verifies and k != sc.k:
            bad.append((trial, "plan size", k, sc.k))
        if not (got == want == lib):
            bad.append((trial, variant.value, strategy.value, k, got, want, lib))
    c.check(not bad, f"500 trials, {len(bad)} mismatches {bad[:3]}")


def test_criterion_3_politician_scenario(criterion):
    c = criterion(3, "NY politician scenario end to end")
    backend = ScriptedBackend.from_file(FIXTURES / "fig1.rules")
    out = {v: run(FIG1_QUERY, PipelineConfig(v), backend) for v in
           (Variant.BASELINE, Variant.FACTORED, Variant.FACTOR_REVISE)}
    base = out[Variant.BASELINE].final_response
    fac = out[Variant.FACTORED].final_response
    fr = out[Variant.FACTOR_REVISE]
    verdicts = [v.status for v in fr.verdicts]
    ok = (
        base == "Hillary Clinton, Donald Trump, Michael Bloomberg"
        and fac == "Donald Trump"
        and fr.final_response == "Donald Trump"
        and verdicts == [VerdictStatus.INCONSISTENT, VerdictStatus.CONSISTENT, VerdictStatus.INCONSISTENT]
        and out[Variant.FACTORED].qa[0].answer == "Chicago, Illinois"
    )
    c.check(ok, f"baseline={base!r} factored={fac!r} factor_revise={fr.final_response!r}")


def test_criterion_4_metric_oracles(criterion):
    c = criterion(4, "micro_precision and multispan_f1 equal a brute-force oracle")
    rng = random.Random(404)
    mp_bad = 0
    for _ in range(1000):
        instances = [random_list_instance(rng) for _ in range(rng.randint(1, 5))]
        judgments = [
            ListJudgment(f"q{i}", tuple(inst.predicted), tuple(GoldEntity(n, a) for n, a in inst.gold))
            for i, inst in enumerate(instances)
        ]
        got = micro_precision(judgments)
        want = oracle_micro_precision(instances)
        mp_bad += (got.precision, got.avg_pos, got.avg_neg) != tuple(float(x) for x in want)
    f1_bad = 0
    for _ in range(1000):
        pred, gold, pred_ids, gold_ids = random_span_instance(rng)
        got = multispan_f1(pred, gold)
        want = oracle_span_prf(pred_ids, gold_ids)
        f1_bad += (got.f1, got.precision, got.recall) != tuple(float(x) for x in want)
    c.check(mp_bad == 0 and f1_bad == 0, f"precision mismatches {mp_bad}/1000, F1 mismatches {f1_bad}/1000")


def test_criterion_5_worked_examples(criterion):
    c = criterion(5, "hand-computed metric fixtures")
    p = micro_precision([
        ListJudgment("1", ("a", "b", "c"), ("a", "b")),
        ListJudgment("2", ("d",), ("d", "e")),
    ])
    f = multispan_f1(["a"], ["a", "b"])
    fs = factscore([
        FactJudgment("r1", (("f1", True), ("f2", True), ("f3", True), ("f4", False))),
        FactJudgment("r2", (("g1", True), ("g2", False))),
    ])
    ok = (
        (p.precision, p.avg_pos, p.avg_neg) == (0.75, 1.5, 0.5)
        and (f.f1, f.precision, f.recall) == (2 / 3, 1.0, 0.5)
        and fs.score == 62.5
    )
    c.check(ok, f"precision {p.precision}, F1 {f.f1:.6f}, factscore {fs.score}")


def _multi_query_fixture(tmp_path, n=8):
    rng = random.Random(606)
    records, rules = [], []
    for i in range(n):
        sc = make_scenario(rng, TaskKind.LIST_QA)
        sc.final = "done"
        records.append(TaskRecord(f"s{i}", TaskKind.LIST_QA, sc.query, (GoldEntity("done"),)))
        rules.extend(scenario_rules(sc, Variant.FACTOR_REVISE))
    data, rule_file = tmp_path / "data.jsonl", tmp_path / "mock.rules"
    data.write_text(dump_dataset(records), encoding="utf-8")
    dump_rules(rules, rule_file)
    return data, rule_file


def test_criterion_6_determinism_and_replay(criterion, tmp_path, monkeypatch):
    c = criterion(6, "deterministic runs, live-call-free replay, mutation detected")
    data, rules = _multi_query_fixture(tmp_path)
    args = ["run", "--dataset", str(data), "--task", "list_qa", "--variant", "factor_revise",
            "--mock", str(rules), "--jobs", "4", "--parallelism", "4"]
    codes = [cli.main(args + ["--run-dir", str(tmp_path / name)]) for name in ("a", "b")]
    first = (tmp_path / "a" / "results.jsonl").read_bytes()
    second = (tmp_path / "b" / "results.jsonl").read_bytes()
    identical = first == second and len(first.splitlines()) == 8

    def no_live(*a, **k):
        raise AssertionError("live backend constructed during replay")

    monkeypatch.setattr(cli, "HTTPBackend", no_live)
    monkeypatch.setattr(cli, "ScriptedBackend", no_live)
    replay_ok = cli.main(["replay", str(tmp_path / "a")])

    lines = first.decode("utf-8").splitlines(keepends=True)
    rec = json.loads(lines[3])
    call = rec["trace"]["calls"][2]
    mid = len(call["prompt"]) // 2
    call["prompt"] = call["prompt"][:mid] + chr(ord(call["prompt"][mid]) ^ 1) + call["prompt"][mid + 1:]
    lines[3] = json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n"
    mutated = tmp_path / "mutated.jsonl"
    mutated.write_text("".join(lines), encoding="utf-8")
    replay_bad = cli.main(["replay", str(mutated)])
    ok = codes == [0, 0] and identical and replay_ok == 0 and replay_bad == 4
    c.check(ok, f"run exits {codes}, identical={identical}, replay exit {replay_ok}, mutated replay exit {replay_bad}")


def test_criterion_7_parsers(criterion):
    c = criterion(7, "parser round trips and verdict labels")
    rng = random.Random(707)
    plan_bad = []
    for i in range(1000):
        pairs = random_plan(rng, rng.randint(0, 10))
        text = render_plan_text(rng, pairs)
        plan = parse_plan(text, max_questions=10)
        flat = ", ".join(q for _, q in pairs) == text
        want = [("" if flat else f, q) for f, q in pairs]
        if [(it.source_fact, it.question) for it in plan] != want:
            plan_bad.append(text)
    list_bad = []
    for _ in range(1000):
        ents = random_entities(rng)
        if parse_list_answer(render_list_text(rng, ents)) != ents:
            list_bad.append(ents)
    label_bad = []
    for label, status in (("CONSISTENT", VerdictStatus.CONSISTENT),
                          ("INCONSISTENT", VerdictStatus.INCONSISTENT),
                          ("PARTIALLY CONSISTENT", VerdictStatus.PARTIALLY_CONSISTENT)):
        for form in (label, label.lower(), label.title(), label.capitalize()):
            for tail in ("", ".", ". Donald Trump", ": born in Queens"):
                if parse_crosscheck(form + tail).status is not status:
                    label_bad.append(form + tail)
    for garbage in ("", "maybe", "I cannot tell", "???", "Consistency unknown", "12"):
        if parse_crosscheck(garbage).status is not VerdictStatus.INCONSISTENT:
            label_bad.append(garbage)
    ok = not plan_bad and not list_bad and not label_bad
    c.check(ok, f"plan failures {len(plan_bad)}/1000, list failures {len(list_bad)}/1000, "
                f"label failures {label_bad[:3]}")


class _Timed:
    """Wraps a backend and records when each prompt was in flight."""

    def __init__(self, inner):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.deterministic = True
        self.spans = {}

    def complete(self, request):
        t0 = time.perf_counter()
        out = self.inner.complete(request)
        self.spans[request.prompt] = (t0, time.perf_counter())
        return out


def test_criterion_8_concurrency(criterion):
    c = criterion(8, "bounded parallel factored execution")
    rng = random.Random(808)
    stage_ratios, run_ratios, peaks = [], [], []
    for _ in range(20):
        sc = make_scenario(rng, TaskKind.LIST_QA, k=8)
        q = Query(sc.query, TaskKind.LIST_QA, "c8")
        stage, whole = {}, {}
        for par in (1, 4):
            mock = scenario_backend(sc, Variant.FACTORED, delay=0.01)
            timed = _Timed(mock)
            t0 = time.perf_counter()
            result = run(q, PipelineConfig(Variant.FACTORED, parallelism=par), timed)
            whole[par] = time.perf_counter() - t0
            spans = [timed.spans[call.prompt] for call in result.trace.calls if call.step is Step.EXECUTE]
            assert len(spans) == 8
            stage[par] = max(b for _, b in spans) - min(a for a, _ in spans)
            if par == 4:
                peaks.append(mock.max_in_flight)
        stage_ratios.append(stage[4] / stage[1])
        run_ratios.append(whole[4] / whole[1])
    ok = max(stage_ratios) < 0.6 and max(peaks) <= 4
    c.check(ok, (
        f"execute stage worst parallel/sequential ratio {max(stage_ratios):.2f} "
        f"(whole run {max(run_ratios):.2f}), peak in-flight {max(peaks)}, 20 repetitions"
    ))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
