"""Metrics: list precision, multi-span F1, FactScore-style factuality, reports."""

from __future__ import annotations

import enum
import json
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .backend import Backend, BackendError, CompletionRequest
from .model import CallRecord, CoveError, PipelineTrace, Step, TaskKind
from .prompts import DemoBank, render_extract
from .text import split_sentences, sentence_spans


class EmptyGold(CoveError, ValueError):
    pass


class NoFacts(CoveError, ValueError):
    pass


class EmptyResponse(CoveError, ValueError):
    pass


class Rarity(str, enum.Enum):
    HEAD = "head"
    TORSO = "torso"
    TAIL = "tail"


class JudgeMode(str, enum.Enum):
    EXACT = "exact"
    BACKEND = "backend"


# -- normalisation -----------------------------------------------------------

_ARTICLE = re.compile(r"^(?:the|a|an)\s+")


def _strip_trailing_punct(s: str) -> str:
    while s and unicodedata.category(s[-1]).startswith("P"):
        s = s[:-1]
    return s


def normalize_entity(surface: str) -> str:
    """Lowercase, collapse whitespace, drop leading articles and trailing punctuation."""
    s = surface.lower()
    while True:
        before = s
        s = " ".join(s.split())
        s = _ARTICLE.sub("", s)
        s = _strip_trailing_punct(s)
        if s == before:
            return s


# -- list precision ----------------------------------------------------------


@dataclass(frozen=True)
class GoldEntity:
    name: str
    aliases: tuple[str, ...] = ()


@dataclass(frozen=True)
class ListJudgment:
    query_id: str
    predicted: tuple[str, ...]
    gold: tuple[GoldEntity, ...]

    def __post_init__(self):
        object.__setattr__(self, "predicted", tuple(self.predicted))
        gold = tuple(g if isinstance(g, GoldEntity) else GoldEntity(g) for g in self.gold)
        object.__setattr__(self, "gold", gold)

    def counts(self) -> tuple[int, int]:
        """(true positives, false positives) after per-query dedup of predictions."""
        if not self.gold:
            raise EmptyGold(f"query {self.query_id!r} has no gold entities")
        resolve = {}
        for g in self.gold:
            canon = normalize_entity(g.name)
            for surface in (g.name, *g.aliases):
                resolve.setdefault(normalize_entity(surface), canon)
        seen = set()
        for p in self.predicted:
            n = normalize_entity(p)
            if n:
                seen.add(resolve.get(n, ("unmatched", n)))
        tp = sum(1 for s in seen if isinstance(s, str))
        return tp, len(seen) - tp


@dataclass(frozen=True)
class ListScore:
    precision: float
    avg_pos: float
    avg_neg: float
    no_predictions: bool = False


def micro_precision(judgments: Sequence[ListJudgment]) -> ListScore:
    """Micro-averaged precision plus mean true/false positives per query.

    Predictions are normalized and deduplicated within each query first.
    With no predictions at all precision is reported as 0 and flagged.
    """
    if not judgments:
        raise EmptyGold("no judgments")
    counts = [j.counts() for j in judgments]
    tp = sum(c[0] for c in counts)
    fp = sum(c[1] for c in counts)
    n = len(counts)
    if tp + fp == 0:
        return ListScore(0.0, 0.0, 0.0, no_predictions=True)
    return ListScore(tp / (tp + fp), tp / n, fp / n)


# -- multi-span F1 -----------------------------------------------------------


@dataclass(frozen=True)
class SpanScore:
    f1: float
    precision: float
    recall: float


def _prf(hits: int, n_pred: int, n_gold: int) -> SpanScore:
    p = hits / n_pred if n_pred else 0.0
    r = hits / n_gold if n_gold else 0.0
    # harmonic mean of P and R, written as one division so it rounds once
    f1 = 2 * hits / (n_pred + n_gold) if hits else 0.0
    return SpanScore(f1, p, r)


def span_counts(pred_spans: Iterable[str], gold_spans: Iterable[str]) -> tuple[int, int, int]:
    pred = {normalize_entity(s) for s in pred_spans} - {""}
    gold = {normalize_entity(s) for s in gold_spans} - {""}
    if not gold:
        raise EmptyGold("gold spans are empty")
    return len(pred & gold), len(pred), len(gold)


def multispan_f1(pred_spans: Sequence[str], gold_spans: Sequence[str]) -> SpanScore:
    """Exact match over normalized, deduplicated spans for one question."""
    return _prf(*span_counts(pred_spans, gold_spans))


def multispan_f1_corpus(pairs: Iterable[tuple[Sequence[str], Sequence[str]]]) -> SpanScore:
    """Corpus-level scores: numerators and denominators summed over questions."""
    hits = n_pred = n_gold = 0
    for pred, gold in pairs:
        h, p, g = span_counts(pred, gold)
        hits, n_pred, n_gold = hits + h, n_pred + p, n_gold + g
    return _prf(hits, n_pred, n_gold)


# -- factuality --------------------------------------------------------------


@dataclass(frozen=True)
class FactJudgment:
    response_id: str
    facts: tuple[tuple[str, bool], ...]
    rarity: Rarity | None = None

    def __post_init__(self):
        object.__setattr__(self, "facts", tuple((str(f), bool(s)) for f, s in self.facts))
        if self.rarity is not None:
            object.__setattr__(self, "rarity", Rarity(self.rarity))


@dataclass(frozen=True)
class FactScore:
    score: float  # percentage
    avg_facts: float
    responses: int


def factscore(judgments: Sequence[FactJudgment]) -> FactScore:
    """Mean per-response supported fraction (as a percentage) and mean fact count.

    Responses without facts count toward the average fact count but not the score.
    """
    scored = [j for j in judgments if j.facts]
    if not scored:
        raise NoFacts("no response has any atomic facts")
    per = [sum(s for _, s in j.facts) / len(j.facts) for j in scored]
    return FactScore(
        100.0 * sum(per) / len(per),
        sum(len(j.facts) for j in judgments) / len(judgments),
        len(judgments),
    )


def factscore_by_rarity(judgments: Sequence[FactJudgment]) -> dict[str, FactScore | None]:
    out: dict[str, FactScore | None] = {}
    for bucket in Rarity:
        group = [j for j in judgments if j.rarity is bucket]
        try:
            out[bucket.value] = factscore(group)
        except NoFacts:
            out[bucket.value] = None
    return out


_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def parse_fact_lines(completion: str) -> list[str]:
    facts = []
    for line in completion.splitlines():
        if not line.strip():
            if facts:
                break
            continue
        if line.lstrip().startswith("Please breakdown"):
            break
        fact = _BULLET.sub("", line).strip()
        if fact:
            facts.append(fact)
    return facts


def extract_facts(
    response: str,
    backend: Backend,
    bank: DemoBank,
    trace: PipelineTrace | None = None,
    per_sentence: bool = False,
) -> list[str]:
    """Atomic facts from a response via a prompted backend.

    Calls are logged to ``trace`` under the execute step tag.
    """
    if not response.strip():
        raise EmptyResponse("cannot extract facts from an empty response")
    chunks = split_sentences(response) if per_sentence else [response.strip()]
    facts = []
    for chunk in chunks:
        prompt = render_extract(chunk, bank)
        seq = trace.reserve(1)[0] if trace is not None else None
        try:
            completion = backend.complete(CompletionRequest(prompt))
        except BackendError as exc:
            if trace is not None:
                trace.add(CallRecord(seq, Step.EXECUTE, prompt, "", backend.backend_id, 0, str(exc)))
            raise
        if trace is not None:
            trace.add(CallRecord(seq, Step.EXECUTE, prompt, completion, backend.backend_id))
        facts.extend(parse_fact_lines(completion))
    return facts


def sentence_facts(response: str) -> list[str]:
    """Fallback extraction: every sentence counts as one fact."""
    return split_sentences(response)


def normalize_fact(text: str) -> str:
    return normalize_entity(text)


def judge_prompt(fact: str, gold_facts: Iterable[str] = ()) -> str:
    known = "".join(f"- {g}\n" for g in sorted(gold_facts))
    head = f"Known facts:\n{known}\n" if known else ""
    return f"{head}Is the following statement true? Answer yes or no.\nStatement: {fact.strip()}\nAnswer:"


def judge_fact(
    fact: str,
    gold_facts: Iterable[str],
    mode: JudgeMode = JudgeMode.EXACT,
    backend: Backend | None = None,
    warnings: list[str] | None = None,
) -> bool:
    """Decide whether a fact is supported.

    Exact mode tests normalized membership in the gold set, so paraphrases
    count as unsupported. Backend mode asks a judge model and reads the
    leading yes/no; anything else counts as unsupported with a warning.
    """
    gold = list(gold_facts)
    if JudgeMode(mode) is JudgeMode.EXACT:
        if not gold:
            raise EmptyGold("exact judging needs gold facts")
        return normalize_fact(fact) in {normalize_fact(g) for g in gold}
    if backend is None:
        raise ValueError("backend judging needs a backend")
    reply = backend.complete(CompletionRequest(judge_prompt(fact, gold)))
    m = re.match(r"\s*([A-Za-z]+)", reply)
    word = m.group(1).lower() if m else ""
    if word in ("yes", "true"):
        return True
    if word not in ("no", "false") and warnings is not None:
        warnings.append(f"unparseable judge reply {reply[:40]!r} for {fact[:40]!r}; counted unsupported")
    return False


def clip_sentences(text: str, n: int) -> str:
    """First ``n`` sentences with their original separators; shorter text is unchanged."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spans = sentence_spans(text)
    if len(spans) <= n:
        return text
    return text[: spans[n - 1][1]]


# -- reports -----------------------------------------------------------------


@dataclass
class EvalReport:
    task_kind: TaskKind
    label: str
    metrics: dict[str, float]
    buckets: dict[str, dict[str, float] | None] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.task_kind = TaskKind(self.task_kind)

    def to_dict(self) -> dict:
        return {
            "task_kind": self.task_kind.value,
            "label": self.label,
            "metrics": self.metrics,
            "buckets": self.buckets,
            "flags": self.flags,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> EvalReport:
        return cls(
            TaskKind(d["task_kind"]), d["label"], dict(d["metrics"]),
            dict(d.get("buckets", {})), list(d.get("flags", [])), dict(d.get("meta", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


COLUMNS = {
    TaskKind.LIST_QA: [("precision", "Prec.", 2), ("avg_pos", "Pos.", 2), ("avg_neg", "Neg.", 2)],
    TaskKind.MULTISPAN_QA: [("f1", "F1", 2), ("precision", "Prec.", 2), ("recall", "Rec.", 2)],
    TaskKind.LONGFORM_BIO: [("factscore", "FactScore", 1), ("avg_facts", "Avg. # facts", 1)],
}


def list_report(label: str, judgments: Sequence[ListJudgment], meta=None) -> EvalReport:
    s = micro_precision(judgments)
    flags = ["no predictions; precision reported as 0"] if s.no_predictions else []
    return EvalReport(TaskKind.LIST_QA, label,
                      {"precision": s.precision, "avg_pos": s.avg_pos, "avg_neg": s.avg_neg},
                      flags=flags, meta=dict(meta or {}))


def multispan_report(label: str, pairs, meta=None) -> EvalReport:
    s = multispan_f1_corpus(pairs)
    return EvalReport(TaskKind.MULTISPAN_QA, label,
                      {"f1": s.f1, "precision": s.precision, "recall": s.recall}, meta=dict(meta or {}))


def fact_report(label: str, judgments: Sequence[FactJudgment], meta=None) -> EvalReport:
    s = factscore(judgments)
    buckets = {
        k: None if v is None else {"factscore": v.score, "avg_facts": v.avg_facts}
        for k, v in factscore_by_rarity(judgments).items()
    }
    return EvalReport(TaskKind.LONGFORM_BIO, label,
                      {"factscore": s.score, "avg_facts": s.avg_facts}, buckets, meta=dict(meta or {}))


def render_table(reports: Sequence[EvalReport]) -> str:
    """Aligned plain-text table, one row per report, grouped by task."""
    lines = []
    for task in TaskKind:
        rows = [r for r in reports if r.task_kind is task]
        if not rows:
            continue
        cols = COLUMNS[task]
        header = ["Method"] + [c[1] for c in cols]
        body = [[r.label] + [f"{r.metrics[key]:.{digits}f}" for key, _, digits in cols] for r in rows]
        if task is TaskKind.LONGFORM_BIO and any(any(r.buckets.values()) for r in rows):
            header += [b.value.capitalize() for b in Rarity]
            for r, row in zip(rows, body):
                row += [
                    "-" if not r.buckets.get(b.value) else f"{r.buckets[b.value]['factscore']:.1f}"
                    for b in Rarity
                ]
        widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
        fmt = lambda row: "  ".join(  # noqa: E731
            cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths))
        )
        lines.append(f"[{task.value}]")
        lines.append(fmt(header))
        lines.append("  ".join("-" * w for w in widths))
        lines.extend(fmt(row) for row in body)
        for r in rows:
            for flag in r.flags:
                lines.append(f"  note ({r.label}): {flag}")
        lines.append("")
    return "\n".join(lines)
