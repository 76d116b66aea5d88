"""Prompt rendering from few-shot demonstration banks.

Every rendering function is pure. The execute-step renderers receive only
verification questions, never the draft response; ``shared_ngrams`` is the
check used to confirm that.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .model import (
    CoveError,
    CrossCheckVerdict,
    PlannerStrategy,
    Query,
    TaskKind,
    VerdictStatus,
    VerificationQA,
)

ISOLATION_NGRAM = 10
COT_SUFFIX = "Let's think step by step."
LIST_ONLY_SUFFIX = "List only the answers separated by a comma"
OTHER_SOURCE = "From another source,"
BUILTIN_BANKS = Path(__file__).parent / "banks"


class PromptError(CoveError, ValueError):
    pass


class MissingBank(PromptError, LookupError):
    pass


class EmptyDraft(PromptError):
    pass


class EmptyQuestion(PromptError):
    pass


class EmptyPlan(PromptError):
    pass


class IncompleteQA(PromptError):
    pass


class BankFormatError(PromptError):
    pass


class BankStep(str, enum.Enum):
    BASELINE_GEN = "baseline"
    PLAN = "plan"
    JOINT_PLAN_EXECUTE = "joint"
    EXECUTE = "execute"
    CROSS_CHECK = "crosscheck"
    FINAL_GEN = "final"
    EXTRACT = "extract"


# banks that come in one flavour per generated-planner strategy
_STRATEGY_STEPS = {BankStep.PLAN, BankStep.JOINT_PLAN_EXECUTE}


@dataclass(frozen=True)
class DemoBank:
    task_kind: TaskKind
    step: BankStep
    demonstrations: tuple[tuple[str, str], ...]
    strategy: PlannerStrategy | None = None

    def __post_init__(self):
        object.__setattr__(self, "demonstrations", tuple(tuple(d) for d in self.demonstrations))
        if not self.demonstrations:
            raise BankFormatError(f"{self.task_kind.value}.{self.step.value}: bank has no demonstrations")

    def __len__(self):
        return len(self.demonstrations)


# -- bank files --------------------------------------------------------------
#
# UTF-8 text. Records are separated by a line containing only ``---``; each
# record has an ``@context:`` and an ``@response:`` field, whose values run
# until the next header line. Lines starting with ``#`` outside a field are
# comments. Draft material (baseline responses) only ever appears inside
# context fields as the text after an ``A:`` line opener, or as the passage
# following ``Context:``; execute banks may contain neither.

_HEADER = re.compile(r"^@(context|response):[ \t]?(.*)$")


def parse_bank_text(text: str, name: str = "<bank>") -> list[tuple[str, str]]:
    demos = []
    record: dict[str, list[str]] = {}
    current = None

    def flush(lineno):
        nonlocal record, current
        if not record:
            return
        missing = {"context", "response"} - set(record)
        if missing:
            raise BankFormatError(f"{name}:{lineno}: record missing {sorted(missing)}")
        demos.append(tuple("\n".join(record[k]).strip("\n") for k in ("context", "response")))
        record, current = {}, None

    lineno = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.strip() == "---":
            flush(lineno)
            continue
        m = _HEADER.match(line)
        if m:
            current = m.group(1)
            if current in record:
                raise BankFormatError(f"{name}:{lineno}: duplicate @{current}")
            record[current] = [m.group(2)] if m.group(2) else []
        elif current is None:
            if line.strip() and not line.startswith("#"):
                raise BankFormatError(f"{name}:{lineno}: text outside a field")
        else:
            record[current].append(line)
    flush(lineno)
    return demos


def format_bank_text(demos: Iterable[tuple[str, str]]) -> str:
    return "---\n".join(f"@context:\n{c}\n@response:\n{r}\n" for c, r in demos)


def _draft_material(bank: DemoBank) -> list[str]:
    """Draft text carried by a bank, per the marker convention above."""
    out = []
    for context, response in bank.demonstrations:
        if bank.step is BankStep.BASELINE_GEN:
            out.append(response)
            continue
        for line in context.splitlines():
            if line.startswith("A:") and bank.step in (
                BankStep.PLAN, BankStep.JOINT_PLAN_EXECUTE, BankStep.FINAL_GEN
            ):
                out.append(line[2:].strip())
                break
    return out


def check_execute_bank(bank: DemoBank, others: Iterable[DemoBank] = ()) -> None:
    """Reject execute demonstrations that carry draft material."""
    for i, (context, response) in enumerate(bank.demonstrations, 1):
        for marker in ("Context:", OTHER_SOURCE, "\nA:"):
            if marker in context or marker in response:
                raise BankFormatError(
                    f"{bank.task_kind.value}.execute demo {i}: contains draft frame {marker.strip()!r}"
                )
        if "\n" in context.strip():
            raise BankFormatError(f"{bank.task_kind.value}.execute demo {i}: context must be one question")
    text = "\n".join(c + "\n" + r for c, r in bank.demonstrations)
    for other in others:
        if other.task_kind is not bank.task_kind:
            continue
        for draft in _draft_material(other):
            leaked = shared_ngrams(text, draft)
            if leaked:
                raise BankFormatError(
                    f"{bank.task_kind.value}.execute shares draft text with "
                    f"{other.task_kind.value}.{other.step.value}: {' '.join(next(iter(leaked)))!r}"
                )


def check_crosscheck_bank(bank: DemoBank) -> None:
    labels = {parse_label(r) for _, r in bank.demonstrations}
    missing = set(VerdictStatus) - labels
    if missing:
        raise BankFormatError(
            f"{bank.task_kind.value}.crosscheck demos must show every verdict, missing "
            f"{sorted(s.value for s in missing)}"
        )


def parse_label(response: str) -> VerdictStatus | None:
    head = response.strip().upper()
    if head.startswith("PARTIALLY CONSISTENT"):
        return VerdictStatus.PARTIALLY_CONSISTENT
    if head.startswith("INCONSISTENT"):
        return VerdictStatus.INCONSISTENT
    if head.startswith("CONSISTENT"):
        return VerdictStatus.CONSISTENT
    return None


def _bank_key(filename: str):
    parts = filename.split(".")
    if parts[-1] != "bank" or len(parts) not in (3, 4):
        raise BankFormatError(f"bad bank filename {filename!r}; want <task>.<step>[.<strategy>].bank")
    task, step = TaskKind(parts[0]), BankStep(parts[1])
    strategy = PlannerStrategy(parts[2]) if len(parts) == 4 else None
    if (strategy is not None) != (step in _STRATEGY_STEPS):
        raise BankFormatError(f"{filename}: strategy suffix required exactly for plan/joint banks")
    return task, step, strategy


class BankSet:
    """All demonstration banks, keyed by (task, step, strategy)."""

    def __init__(self, banks: Iterable[DemoBank] = (), source: str = ""):
        self.source = source
        self._banks: dict[tuple, DemoBank] = {}
        for bank in banks:
            self._banks[(bank.task_kind, bank.step, bank.strategy)] = bank

    def get(self, task: TaskKind, step: BankStep, strategy: PlannerStrategy | None = None) -> DemoBank:
        if step not in _STRATEGY_STEPS:
            strategy = None
        try:
            return self._banks[(TaskKind(task), step, strategy)]
        except KeyError:
            suffix = f".{strategy.value}" if strategy else ""
            raise MissingBank(f"no bank {TaskKind(task).value}.{step.value}{suffix}") from None

    def has(self, task, step, strategy=None) -> bool:
        try:
            self.get(task, step, strategy)
        except MissingBank:
            return False
        return True

    def __iter__(self):
        return iter(self._banks.values())

    def __len__(self):
        return len(self._banks)

    def validate(self) -> None:
        banks = list(self)
        for bank in banks:
            if bank.step is BankStep.EXECUTE:
                check_execute_bank(bank, banks)
            elif bank.step is BankStep.CROSS_CHECK:
                check_crosscheck_bank(bank)


def load_bank(path: str | Path) -> DemoBank:
    path = Path(path)
    task, step, strategy = _bank_key(path.name)
    demos = parse_bank_text(path.read_text(encoding="utf-8"), str(path))
    bank = DemoBank(task, step, tuple(demos), strategy)
    if step is BankStep.EXECUTE:
        check_execute_bank(bank)
    elif step is BankStep.CROSS_CHECK:
        check_crosscheck_bank(bank)
    return bank


def load_banks(directory: str | Path | None = None) -> BankSet:
    """Load every ``*.bank`` file in a directory (default: the bundled set)."""
    if directory is None:
        directory, source = BUILTIN_BANKS, "builtin"
    else:
        directory = Path(directory)
        source = str(directory)
    banks = [load_bank(p) for p in sorted(directory.glob("*.bank"))]
    bank_set = BankSet(banks, source)
    bank_set.validate()
    return bank_set


# -- n-gram isolation check --------------------------------------------------


def ngrams(text: str, n: int = ISOLATION_NGRAM) -> set[tuple[str, ...]]:
    tokens = text.split()
    return {tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)}


def shared_ngrams(text: str, draft: str, n: int = ISOLATION_NGRAM) -> set[tuple[str, ...]]:
    """Whitespace-token n-grams of ``draft`` that also occur in ``text``."""
    return ngrams(draft, n) & ngrams(text, n)


# -- rendering ---------------------------------------------------------------


def _period(text: str) -> str:
    text = text.strip()
    if not text or text[-1] in ".!?":
        return text
    return text + "."


def _require(bank: DemoBank | None, task: TaskKind | None, step: BankStep) -> DemoBank:
    if bank is None:
        raise MissingBank(f"no {step.value} bank given")
    if bank.step is not step or (task is not None and bank.task_kind is not task):
        raise MissingBank(
            f"need {task.value if task else '*'}.{step.value} bank, got {bank.task_kind.value}.{bank.step.value}"
        )
    return bank


def _qa_frames(demos: Sequence[tuple[str, str]]) -> str:
    return "".join(f"Q: {c}\nA: {r}\n\n" for c, r in demos)


def _context_frames(demos: Sequence[tuple[str, str]], newline_response: bool = False) -> str:
    sep = "\n" if newline_response else " "
    return "".join(f"Context: {c}\nResponse:{sep}{r}\n\n" for c, r in demos)


def render_baseline(query: Query, bank: DemoBank | None = None, *, cot: bool = False) -> str:
    """Baseline prompt: few-shot Q/A frames, or the bare query when ``bank`` is None.

    The zero-shot form appends the chain-of-thought cue when ``cot`` is set and,
    for list-style tasks, the instruction to list comma-separated answers last.
    """
    if bank is None:
        parts = [query.text.strip()]
        if cot:
            parts.append(COT_SUFFIX)
        if query.task_kind in (TaskKind.LIST_QA, TaskKind.MULTISPAN_QA):
            parts.append(LIST_ONLY_SUFFIX)
        return "\n".join(parts)
    bank = _require(bank, query.task_kind, BankStep.BASELINE_GEN)
    return _qa_frames(bank.demonstrations) + f"Q: {query.text.strip()}\nA:"


def render_plan(
    query: Query, draft_or_passage: str, strategy: PlannerStrategy, bank: DemoBank | None
) -> str | None:
    """Planner prompt conditioned on the query and a draft passage.

    Returns None for the rule-templated strategy: those plans are built
    mechanically and need no backend call.
    """
    strategy = PlannerStrategy(strategy)
    if strategy is PlannerStrategy.RULE:
        return None
    if not draft_or_passage.strip():
        raise EmptyDraft("cannot plan verifications for an empty draft")
    bank = _require(bank, query.task_kind, BankStep.PLAN)
    if bank.strategy is not strategy:
        raise MissingBank(f"plan bank is for {bank.strategy}, need {strategy.value}")
    return (
        _context_frames(bank.demonstrations, newline_response=True)
        + f"Context: Q: {query.text.strip()}\nA: {draft_or_passage.strip()}\nResponse:\n"
    )


def render_joint(query: Query, draft_or_passage: str, strategy: PlannerStrategy, bank: DemoBank | None) -> str:
    """Single prompt that plans and answers verification questions together.

    Unlike the execute renderers this one deliberately shows the draft.
    """
    if not draft_or_passage.strip():
        raise EmptyDraft("cannot plan verifications for an empty draft")
    bank = _require(bank, query.task_kind, BankStep.JOINT_PLAN_EXECUTE)
    if bank.strategy is not PlannerStrategy(strategy):
        raise MissingBank(f"joint bank is for {bank.strategy}, need {strategy}")
    return (
        _context_frames(bank.demonstrations, newline_response=True)
        + f"Context: Q: {query.text.strip()}\nA: {draft_or_passage.strip()}\nResponse:\n"
    )


def render_execute(question: str, bank: DemoBank | None) -> str:
    if not question.strip():
        raise EmptyQuestion("verification question is empty")
    bank = _require(bank, None, BankStep.EXECUTE)
    return _qa_frames(bank.demonstrations) + f"Q: {question.strip()}\nA:"


def render_execute_2step(questions: Sequence[str], bank: DemoBank | None) -> str:
    """All questions in one prompt, numbered, answers expected as ``A<i>:`` lines."""
    if not questions:
        raise EmptyPlan("no verification questions to execute")
    if any(not q.strip() for q in questions):
        raise EmptyQuestion("verification question is empty")
    bank = _require(bank, None, BankStep.EXECUTE)
    demos = bank.demonstrations
    demo_block = "".join(f"Q{i}: {c}\n" for i, (c, _) in enumerate(demos, 1))
    demo_block += "".join(f"A{i}: {r}\n" for i, (_, r) in enumerate(demos, 1))
    block = "".join(f"Q{i}: {q.strip()}\n" for i, q in enumerate(questions, 1))
    return f"{demo_block}\n{block}A1:"


def _qa_lines(qa: Iterable[VerificationQA]) -> str:
    return "".join(f"Q: {item.planned.question.strip()}\nA: {item.answer.strip()}\n" for item in qa)


def render_crosscheck(original_fact: str, qa: VerificationQA, bank: DemoBank | None) -> str:
    if not qa.answer.strip():
        raise IncompleteQA(f"no answer for {qa.planned.question!r}")
    bank = _require(bank, None, BankStep.CROSS_CHECK)
    return (
        _context_frames(bank.demonstrations)
        + f"Context: {_period(original_fact)}\n{OTHER_SOURCE}\n{_qa_lines([qa])}Response:"
    )


def redact(text: str, fact: str) -> str:
    """Remove verbatim occurrences of ``fact`` and tidy the separators left behind."""
    fact = fact.strip()
    if not fact:
        return text
    out = re.sub(rf"(?<!\w){re.escape(fact)}(?!\w)", "", text)
    out = re.sub(r"\s*([,;])(\s*[,;])+", r"\1", out)
    out = re.sub(r"[ \t]{2,}", " ", out)
    out = re.sub(r"^[\s,;]+|[\s,;]+$", "", out)
    out = re.sub(r"\s+([.,;!?])", r"\1", out)
    return out


def render_final(
    query: Query,
    baseline: str,
    qa: Sequence[VerificationQA],
    verdicts: Sequence[CrossCheckVerdict] | None,
    bank: DemoBank | None,
) -> str:
    """Revision prompt for one passage of the draft.

    With cross-check verdicts, inconsistent facts are cut from the passage,
    their verification pairs are dropped, and consistent parts are listed.
    """
    bank = _require(bank, query.task_kind, BankStep.FINAL_GEN)
    passage = baseline.strip()
    consistent = []
    if verdicts is not None:
        if len(verdicts) != len(qa):
            raise ValueError(f"{len(verdicts)} verdicts for {len(qa)} verification pairs")
        kept = []
        for item, verdict in zip(qa, verdicts):
            if verdict.status is VerdictStatus.INCONSISTENT:
                passage = redact(passage, item.planned.source_fact)
            else:
                kept.append(item)
                if verdict.consistent_part and verdict.consistent_part.strip():
                    consistent.append(verdict.consistent_part.strip())
        qa = kept
    head = _context_frames(bank.demonstrations) + f"Context: Q: {query.text.strip()}\nA: {_period(passage)}\n"
    if not qa:
        return head + "Response:"
    body = f"{OTHER_SOURCE}\n{_qa_lines(qa)}"
    if consistent:
        body += "Consistent facts:\n" + "".join(f"- {c}\n" for c in consistent)
    return head + body + "Response:"


def render_extract(passage: str, bank: DemoBank | None) -> str:
    bank = _require(bank, None, BankStep.EXTRACT)
    demos = "".join(
        f"Please breakdown the following sentence into independent facts: {c}\n{r}\n\n"
        for c, r in bank.demonstrations
    )
    return demos + f"Please breakdown the following sentence into independent facts: {passage.strip()}\n"
