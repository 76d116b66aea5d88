"""Draft, plan, execute, revise: the verification pipeline and its parsers."""

from __future__ import annotations

import functools
import logging
import re
import time
from typing import Sequence

from .backend import Backend, BackendError, CompletionRequest, run_bounded
from .model import (
    CallRecord,
    CoveError,
    CrossCheckVerdict,
    FailurePolicy,
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
    validate_config,
)
from .prompts import (
    BankSet,
    BankStep,
    load_banks,
    parse_label,
    render_baseline,
    render_crosscheck,
    render_execute,
    render_execute_2step,
    render_final,
    render_joint,
    render_plan,
    shared_ngrams,
)
from .text import sentence_spans

logger = logging.getLogger(__name__)

# completions are cut where a few-shot model would start the next demonstration
STEP_STOP = ("\n\n",)


class PipelineError(CoveError):
    """A backend call failed; carries the step and the partial trace."""

    def __init__(self, message: str, step: Step, trace: PipelineTrace):
        super().__init__(f"{step.value}: {message}")
        self.step = step
        self.trace = trace


class EmptyBaseline(CoveError):
    pass


class NotApplicable(CoveError, ValueError):
    pass


# -- passages ----------------------------------------------------------------


def split_passages(text: str, task_kind: TaskKind) -> list[str]:
    """Sentences for biographies, the whole response otherwise."""
    if not text.strip():
        return []
    if TaskKind(task_kind) is TaskKind.LONGFORM_BIO:
        return [text[a:b] for a, b in sentence_spans(text)]
    return [text.strip()]


# -- parsers -----------------------------------------------------------------

_QUESTION_START = re.compile(
    r"^(?:who|whom|whose|what|when|where|why|how|which|is|was|are|were|am|does|did|do|has|have|had"
    r"|can|could|will|would|should|shall|may|might"
    r"|(?:in|on|at|for|during|from|to|by|of|with|since|until|after|before)\s+(?:what|which|whom|whose|how))\b",
    re.IGNORECASE,
)
_ENUM = re.compile(r"^\s*(?:\d+[.)]\s+|[-*•]\s+)")
# a comma splits fields unless it sits between two digits ("1,000")
_FIELD_COMMA = re.compile(r"(?<!\d),|,(?!\d)")


def _split_fields(line: str) -> list[str]:
    return _FIELD_COMMA.split(line)


def _fact_and_question(segments: list[str]) -> tuple[str, str]:
    for j, seg in enumerate(segments):
        if _QUESTION_START.match(seg.strip()):
            return ",".join(segments[:j]).strip(), ",".join(segments[j:]).strip()
    if len(segments) == 1:
        return "", segments[0].strip()
    return segments[0].strip(), ",".join(segments[1:]).strip()


def _parse_plan_line(line: str) -> list[tuple[str, str]]:
    line = _ENUM.sub("", line).strip()
    if not line:
        return []
    items, chunk = [], []
    for seg in _split_fields(line):
        chunk.append(seg)
        if seg.strip().endswith("?"):
            items.append(_fact_and_question(chunk))
            chunk = []
    if chunk and any(s.strip() for s in chunk):
        items.append(_fact_and_question(chunk))
    return [(f, q) for f, q in items if _looks_like_question(q)]


def _looks_like_question(q: str) -> bool:
    return bool(q) and (q.endswith("?") or bool(_QUESTION_START.match(q)))


def finalize_plan(
    items: Sequence[PlannedVerification], max_questions: int, trace: PipelineTrace | None = None
) -> VerificationPlan:
    """Drop repeated questions (first kept) and cut to ``max_questions``."""
    seen, unique = set(), []
    for item in items:
        if item.question not in seen:
            seen.add(item.question)
            unique.append(item)
    truncated = len(unique) > max_questions
    if truncated and trace is not None:
        trace.warn(f"plan truncated from {len(unique)} to {max_questions} questions")
    return VerificationPlan(tuple(unique[:max_questions]), truncated)


def parse_plan_items(completion: str, passage: int = 0) -> list[PlannedVerification]:
    items = []
    for line in completion.splitlines():
        for fact, question in _parse_plan_line(line):
            items.append(PlannedVerification(fact, question, passage))
    return items


def parse_plan(
    completion: str,
    strategy: PlannerStrategy = PlannerStrategy.OPEN,
    max_questions: int = 10,
    trace: PipelineTrace | None = None,
    passage: int = 0,
) -> VerificationPlan:
    """Parse planner output into a plan.

    Accepts ``fact, question`` lines as well as a flat comma-separated list of
    questions. Never raises: text with no recognisable question yields an
    empty plan and a trace warning.
    """
    items = parse_plan_items(completion, passage)
    if not items and completion.strip() and trace is not None:
        trace.warn(f"no verification questions parsed from planner output ({PlannerStrategy(strategy).value})")
    return finalize_plan(items, max_questions, trace)


def format_plan(plan: VerificationPlan) -> str:
    return "\n".join(f"{i.source_fact}, {i.question}" if i.source_fact else i.question for i in plan)


def build_rule_plan(entities: Sequence[str], query: Query, max_questions: int = 10) -> VerificationPlan:
    """Templated yes/no questions, one per listed entity, without a backend call."""
    if query.task_kind is not TaskKind.LIST_QA:
        raise NotApplicable(f"rule-templated questions are defined for list tasks, not {query.task_kind.value}")
    text = query.text.strip().rstrip("?").strip()
    items = [
        PlannedVerification(e.strip(), f"Does {e.strip()} answer the question {text}?")
        for e in entities
        if e.strip()
    ]
    return finalize_plan(items, max_questions)


def parse_crosscheck(completion: str, trace: PipelineTrace | None = None) -> CrossCheckVerdict:
    text = completion.strip()
    text = re.sub(r"^response:\s*", "", text, flags=re.IGNORECASE)
    text = re.split(r"\n\s*\n|\nContext:", text, maxsplit=1)[0].strip()
    status = parse_label(text)
    if status is None:
        if trace is not None:
            trace.warn(f"unrecognized cross-check verdict {completion[:60]!r}; treated as inconsistent")
        return CrossCheckVerdict(VerdictStatus.INCONSISTENT)
    if status is VerdictStatus.INCONSISTENT:
        return CrossCheckVerdict(status)
    label_len = len("PARTIALLY CONSISTENT") if status is VerdictStatus.PARTIALLY_CONSISTENT else len("CONSISTENT")
    rest = text[label_len:].lstrip(" .:-\t\n")
    return CrossCheckVerdict(status, rest.strip())


_QUOTES = "\"'“”‘’`"


def parse_list_answer(completion: str) -> list[str]:
    out = []
    for line in completion.splitlines():
        for piece in line.split(","):
            piece = _ENUM.sub("", piece).strip().strip(_QUOTES).strip()
            if piece:
                out.append(piece)
    return out


def parse_joint(completion: str, passage: int = 0) -> list[tuple[PlannedVerification, str]]:
    """Pairs from alternating ``Q:``/``A:`` lines; a missing last answer becomes ""."""
    pairs: list[list] = []
    field = None
    for raw in completion.splitlines():
        line = raw.strip()
        if line.startswith("Q:"):
            pairs.append([line[2:].strip(), []])
            field = "q"
        elif line.startswith("A:") and pairs:
            pairs[-1][1] = [line[2:].strip()]
            field = "a"
        elif line and pairs:
            if field == "a":
                pairs[-1][1].append(line)
            else:
                pairs[-1][0] += " " + line
    out = []
    for qline, answer in pairs:
        segments = _split_fields(qline)
        fact, question = _fact_and_question(segments)
        if question:
            out.append((PlannedVerification(fact, question, passage), "\n".join(answer)))
    return out


def parse_numbered_answers(completion: str, k: int) -> list[str]:
    """Answers to a numbered execute prompt; the completion continues after ``A1:``."""
    text = "A1:" + completion
    answers = [""] * k
    marks = list(re.finditer(r"(?m)^\s*A(\d+):", text))
    for m, nxt in zip(marks, marks[1:] + [None]):
        idx = int(m.group(1)) - 1
        body = text[m.end(): nxt.start() if nxt else len(text)]
        if 0 <= idx < k and not answers[idx]:
            answers[idx] = body.strip()
    return answers


# -- call accounting ---------------------------------------------------------


def expected_call_count(
    variant: Variant,
    k: int,
    strategy: PlannerStrategy = PlannerStrategy.OPEN,
    passages: int = 1,
) -> int:
    """Backend calls a run makes for a plan of ``k`` questions over ``passages`` passages."""
    variant = Variant(variant)
    if not variant.verifies:
        return 1
    plan_calls = 0 if PlannerStrategy(strategy) is PlannerStrategy.RULE else passages
    if variant is Variant.JOINT:
        if PlannerStrategy(strategy) is PlannerStrategy.RULE:
            return 1 + (1 if k else 0) + passages
        return 1 + passages + passages
    if variant is Variant.TWO_STEP:
        return 1 + plan_calls + (1 if k else 0) + passages
    if variant is Variant.FACTORED:
        return 1 + plan_calls + k + passages
    return 1 + plan_calls + 2 * k + passages


# -- running -----------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def default_banks() -> BankSet:
    return load_banks()


class _Caller:
    def __init__(self, backend: Backend, config: PipelineConfig, trace: PipelineTrace):
        self.backend = backend
        self.config = config
        self.trace = trace
        self.deterministic = getattr(backend, "deterministic", False)
        stops = tuple(dict.fromkeys(config.decoding.stop_sequences + STEP_STOP))
        self.decoding = type(config.decoding)(
            config.decoding.temperature, config.decoding.max_tokens, stops
        )

    def _one(self, step: Step, seq: int, prompt: str) -> str | BackendError:
        start = time.perf_counter()
        error = None
        try:
            completion = self.backend.complete(CompletionRequest(prompt, self.decoding))
        except BackendError as exc:
            completion, error = "", exc
        wall_ms = 0 if self.deterministic else int((time.perf_counter() - start) * 1000)
        self.trace.add(CallRecord(
            seq, step, prompt, completion, self.backend.backend_id, wall_ms,
            None if error is None else f"{type(error).__name__}: {error}",
        ))
        return completion if error is None else error

    def call(self, step: Step, prompt: str) -> str:
        (seq,) = self.trace.reserve(1)
        out = self._one(step, seq, prompt)
        if isinstance(out, BackendError):
            raise PipelineError(str(out), step, self.trace) from out
        return out

    def many(self, step: Step, prompts: Sequence[str], skippable: bool = False) -> list[str | None]:
        """Issue prompts concurrently; None marks a skipped failure."""
        seqs = self.trace.reserve(len(prompts))
        outs = run_bounded(
            lambda i: self._one(step, seqs[i], prompts[i]), range(len(prompts)), self.config.parallelism
        )
        results = []
        for seq, out in zip(seqs, outs):
            if isinstance(out, BackendError):
                if skippable and self.config.failure_policy is FailurePolicy.SKIP:
                    self.trace.warn(f"seq {seq}: {step.value} failed, skipped: {out}")
                    results.append(None)
                    continue
                raise PipelineError(f"seq {seq}: {out}", step, self.trace) from out
            results.append(out)
        return results


def _framed_fact(query: Query, item: PlannedVerification, passages: list[str]) -> str:
    fact = item.source_fact.strip()
    if query.task_kind is TaskKind.LONGFORM_BIO:
        return fact or passages[item.passage]
    q = query.text.strip()
    if not q.endswith("?"):
        q += "?"
    return f"{q} {fact or passages[item.passage]}"


def run(
    query: Query,
    config: PipelineConfig,
    backend: Backend,
    banks: BankSet | None = None,
) -> PipelineResult:
    """Run one query through the configured variant.

    Raises PipelineError when a backend call fails (unless the failure policy
    skips failed verification calls) and EmptyBaseline for a blank draft.
    """
    banks = default_banks() if banks is None else banks
    trace = PipelineTrace(query.id, config)
    for warning in validate_config(config):
        trace.warn(warning)
    caller = _Caller(backend, config, trace)
    task = query.task_kind
    variant = config.variant

    if variant in (Variant.ZERO_SHOT, Variant.ZERO_SHOT_COT):
        prompt = render_baseline(query, None, cot=variant is Variant.ZERO_SHOT_COT)
    else:
        prompt = render_baseline(query, banks.get(task, BankStep.BASELINE_GEN))
    baseline = caller.call(Step.BASELINE_GEN, prompt).strip()
    if not variant.verifies:
        return PipelineResult(query, baseline, VerificationPlan(), (), None, baseline, trace)
    if not baseline:
        raise EmptyBaseline(f"query {query.id!r}: baseline response is empty")

    passages = split_passages(baseline, task)
    strategy = config.planner_strategy
    verdicts = None

    if variant is Variant.JOINT:
        plan, qa = _joint(query, passages, config, banks, caller, baseline)
    else:
        if strategy is PlannerStrategy.RULE:
            plan = build_rule_plan(parse_list_answer(baseline), query, config.max_questions)
            if plan.truncated:
                trace.warn(f"plan truncated to {config.max_questions} questions")
        else:
            bank = banks.get(task, BankStep.PLAN, strategy)
            outs = caller.many(Step.PLAN, [render_plan(query, p, strategy, bank) for p in passages])
            items = []
            for idx, out in enumerate(outs):
                parsed = parse_plan_items(out, idx)
                if not parsed and out.strip():
                    trace.warn(f"passage {idx}: no verification questions parsed from planner output")
                items.extend(parsed)
            plan = finalize_plan(items, config.max_questions, trace)
        if not plan.items:
            trace.warn("empty verification plan; final response is generated from the draft alone")
        qa = _execute(plan, config, banks.get(task, BankStep.EXECUTE), caller)
        if variant is Variant.FACTOR_REVISE:
            verdicts = _cross_check(query, qa, passages, banks.get(task, BankStep.CROSS_CHECK), caller)

    final_bank = banks.get(task, BankStep.FINAL_GEN)
    prompts = []
    for idx, passage in enumerate(passages):
        sel = [i for i, item in enumerate(qa) if item.planned.passage == idx]
        prompts.append(render_final(
            query,
            passage,
            [qa[i] for i in sel],
            None if verdicts is None else [verdicts[i] for i in sel],
            final_bank,
        ))
    finals = [f.strip() for f in caller.many(Step.FINAL_GEN, prompts)]
    final = " ".join(f for f in finals if f)
    return PipelineResult(query, baseline, plan, tuple(qa), verdicts, final, trace)


def _joint(query, passages, config, banks, caller, baseline):
    task = query.task_kind
    strategy = config.planner_strategy
    if strategy is PlannerStrategy.RULE:
        plan = build_rule_plan(parse_list_answer(baseline), query, config.max_questions)
        if not plan.items:
            caller.trace.warn("empty verification plan; final response is generated from the draft alone")
            return plan, []
        prompt = (
            f"Context: Q: {query.text.strip()}\nA: {baseline}\n\n"
            + render_execute_2step(plan.questions, banks.get(task, BankStep.EXECUTE))
        )
        answers = parse_numbered_answers(caller.call(Step.PLAN, prompt), len(plan))
        return plan, [VerificationQA(item, a) for item, a in zip(plan, answers)]
    bank = banks.get(task, BankStep.JOINT_PLAN_EXECUTE, strategy)
    outs = caller.many(Step.PLAN, [render_joint(query, p, strategy, bank) for p in passages])
    pairs = [pair for idx, out in enumerate(outs) for pair in parse_joint(out, idx)]
    answers = {}
    for item, answer in pairs:
        answers.setdefault(item.question, answer)
    plan = finalize_plan([item for item, _ in pairs], config.max_questions, caller.trace)
    if not plan.items:
        caller.trace.warn("empty verification plan; final response is generated from the draft alone")
    return plan, [VerificationQA(item, answers[item.question]) for item in plan]


def _execute(plan, config, bank, caller) -> list[VerificationQA]:
    if not plan.items:
        return []
    if config.variant is Variant.TWO_STEP:
        completion = caller.call(Step.EXECUTE, render_execute_2step(plan.questions, bank))
        answers = parse_numbered_answers(completion, len(plan))
        return [VerificationQA(item, a) for item, a in zip(plan, answers)]
    outs = caller.many(Step.EXECUTE, [render_execute(q, bank) for q in plan.questions], skippable=True)
    return [VerificationQA(item, out) for item, out in zip(plan, outs) if out is not None]


def _cross_check(query, qa, passages, bank, caller) -> tuple[CrossCheckVerdict, ...]:
    verdicts: list[CrossCheckVerdict | None] = [None] * len(qa)
    todo = []
    for i, item in enumerate(qa):
        if item.answer.strip():
            todo.append(i)
        else:
            caller.trace.warn(f"no answer for {item.planned.question!r}; fact treated as inconsistent")
            verdicts[i] = CrossCheckVerdict(VerdictStatus.INCONSISTENT)
    prompts = [render_crosscheck(_framed_fact(query, qa[i].planned, passages), qa[i], bank) for i in todo]
    outs = caller.many(Step.CROSS_CHECK, prompts, skippable=True)
    for i, out in zip(todo, outs):
        if out is None:
            verdicts[i] = CrossCheckVerdict(VerdictStatus.INCONSISTENT)
        else:
            verdicts[i] = parse_crosscheck(out, caller.trace)
    return tuple(verdicts)


# -- invariant checks ----------------------------------------------------------

ISOLATED_VARIANTS = frozenset({Variant.TWO_STEP, Variant.FACTORED, Variant.FACTOR_REVISE})


def isolation_violations(result: PipelineResult, n: int = 10) -> list[tuple[int, tuple[str, ...]]]:
    """(seq, n-gram) pairs where an execute prompt repeats draft text."""
    if result.trace.config.variant not in ISOLATED_VARIANTS:
        return []
    out = []
    for call in result.trace.calls:
        if call.step is Step.EXECUTE:
            for gram in sorted(shared_ngrams(call.prompt, result.baseline_response, n)):
                out.append((call.seq, gram))
    return out


def independence_violations(result: PipelineResult) -> list[tuple[int, str]]:
    """(seq, question) pairs where a factored execute prompt shows another question."""
    if result.trace.config.variant not in (Variant.FACTORED, Variant.FACTOR_REVISE):
        return []
    questions = result.plan.questions
    out = []
    executes = [c for c in result.trace.calls if c.step is Step.EXECUTE]
    for call in executes:
        own = [q for q in questions if call.prompt.endswith(f"Q: {q}\nA:")]
        for q in questions:
            if q not in own and f"Q: {q}\n" in call.prompt:
                out.append((call.seq, q))
    return out
