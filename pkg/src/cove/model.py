"""Shared domain types, pipeline configuration and the call trace."""

from __future__ import annotations

import enum
import hashlib
import json
import threading
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, TextIO


class CoveError(Exception):
    """Base class for every error raised by this package."""


class InvalidConfig(CoveError, ValueError):
    pass


class TaskKind(str, enum.Enum):
    LIST_QA = "list_qa"
    MULTISPAN_QA = "multispan_qa"
    LONGFORM_BIO = "longform_bio"


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    ZERO_SHOT = "zero_shot"
    ZERO_SHOT_COT = "zero_shot_cot"
    JOINT = "joint"
    TWO_STEP = "two_step"
    FACTORED = "factored"
    FACTOR_REVISE = "factor_revise"

    @property
    def verifies(self) -> bool:
        """True for the variants that run plan/execute/final steps."""
        return self not in _DEGENERATE


_DEGENERATE = frozenset({Variant.BASELINE, Variant.ZERO_SHOT, Variant.ZERO_SHOT_COT})


class PlannerStrategy(str, enum.Enum):
    OPEN = "open"
    YES_NO = "yes_no"
    RULE = "rule"


class FailurePolicy(str, enum.Enum):
    ABORT = "abort"
    SKIP = "skip"


class Step(str, enum.Enum):
    BASELINE_GEN = "baseline_gen"
    PLAN = "plan"
    EXECUTE = "execute"
    CROSS_CHECK = "cross_check"
    FINAL_GEN = "final_gen"


class VerdictStatus(str, enum.Enum):
    CONSISTENT = "consistent"
    INCONSISTENT = "inconsistent"
    PARTIALLY_CONSISTENT = "partially_consistent"


@dataclass(frozen=True)
class Query:
    text: str
    task_kind: TaskKind
    id: str = ""

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("query text is empty")
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))

    def to_dict(self) -> dict:
        return {"id": self.id, "task_kind": self.task_kind.value, "text": self.text}

    @classmethod
    def from_dict(cls, d: dict) -> Query:
        return cls(text=d["text"], task_kind=TaskKind(d["task_kind"]), id=d.get("id", ""))


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    max_tokens: int = 512
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "stop_sequences": list(self.stop_sequences),
        }

    @classmethod
    def from_dict(cls, d: dict) -> DecodingParams:
        return cls(
            temperature=d.get("temperature", 0.0),
            max_tokens=d.get("max_tokens", 512),
            stop_sequences=tuple(d.get("stop_sequences", ())),
        )


@dataclass(frozen=True)
class PipelineConfig:
    variant: Variant = Variant.FACTORED
    planner_strategy: PlannerStrategy = PlannerStrategy.OPEN
    max_questions: int = 10
    decoding: DecodingParams = field(default_factory=DecodingParams)
    parallelism: int = 4
    seed: int = 0
    failure_policy: FailurePolicy = FailurePolicy.ABORT

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "planner_strategy", PlannerStrategy(self.planner_strategy))
        object.__setattr__(self, "failure_policy", FailurePolicy(self.failure_policy))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "planner_strategy": self.planner_strategy.value,
            "max_questions": self.max_questions,
            "decoding": self.decoding.to_dict(),
            "parallelism": self.parallelism,
            "seed": self.seed,
            "failure_policy": self.failure_policy.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        return cls(
            variant=Variant(d["variant"]),
            planner_strategy=PlannerStrategy(d.get("planner_strategy", "open")),
            max_questions=d.get("max_questions", 10),
            decoding=DecodingParams.from_dict(d.get("decoding", {})),
            parallelism=d.get("parallelism", 4),
            seed=d.get("seed", 0),
            failure_policy=FailurePolicy(d.get("failure_policy", "abort")),
        )

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def validate_config(config: PipelineConfig) -> list[str]:
    """Check a config, raising InvalidConfig on hard errors.

    Returns warnings for field combinations that are accepted but ignored.
    """
    if config.max_questions < 1:
        raise InvalidConfig(f"max_questions must be >= 1, got {config.max_questions}")
    if config.parallelism < 1:
        raise InvalidConfig(f"parallelism must be >= 1, got {config.parallelism}")
    if config.decoding.temperature < 0:
        raise InvalidConfig(f"temperature must be >= 0, got {config.decoding.temperature}")
    if config.decoding.max_tokens < 1:
        raise InvalidConfig(f"max_tokens must be >= 1, got {config.decoding.max_tokens}")
    warnings = []
    if not config.variant.verifies and config.planner_strategy is not PlannerStrategy.OPEN:
        warnings.append(f"planner_strategy ignored for {config.variant.value}")
    return warnings


@dataclass(frozen=True)
class PlannedVerification:
    source_fact: str
    question: str
    # index of the response passage the fact came from; 0 for single-passage tasks
    passage: int = 0

    def __post_init__(self):
        if not self.question.strip():
            raise ValueError("verification question is empty")

    def to_dict(self) -> dict:
        return {"source_fact": self.source_fact, "question": self.question, "passage": self.passage}

    @classmethod
    def from_dict(cls, d: dict) -> PlannedVerification:
        return cls(d["source_fact"], d["question"], d.get("passage", 0))


@dataclass(frozen=True)
class VerificationPlan:
    items: tuple[PlannedVerification, ...] = ()
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self):
        return len(self.items)

    def __iter__(self) -> Iterator[PlannedVerification]:
        return iter(self.items)

    @property
    def questions(self) -> list[str]:
        return [item.question for item in self.items]

    def to_dict(self) -> dict:
        return {"items": [i.to_dict() for i in self.items], "truncated": self.truncated}

    @classmethod
    def from_dict(cls, d: dict) -> VerificationPlan:
        return cls(tuple(PlannedVerification.from_dict(i) for i in d["items"]), d["truncated"])


@dataclass(frozen=True)
class VerificationQA:
    planned: PlannedVerification
    answer: str

    def to_dict(self) -> dict:
        return {"planned": self.planned.to_dict(), "answer": self.answer}

    @classmethod
    def from_dict(cls, d: dict) -> VerificationQA:
        return cls(PlannedVerification.from_dict(d["planned"]), d["answer"])


@dataclass(frozen=True)
class CrossCheckVerdict:
    status: VerdictStatus
    consistent_part: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "status", VerdictStatus(self.status))
        has_part = self.consistent_part is not None
        if has_part != (self.status is not VerdictStatus.INCONSISTENT):
            raise ValueError(f"consistent_part must be set iff status is not inconsistent: {self!r}")

    def to_dict(self) -> dict:
        return {"status": self.status.value, "consistent_part": self.consistent_part}

    @classmethod
    def from_dict(cls, d: dict) -> CrossCheckVerdict:
        return cls(VerdictStatus(d["status"]), d.get("consistent_part"))


@dataclass(frozen=True)
class CallRecord:
    seq: int
    step: Step
    prompt: str
    completion: str
    backend_id: str
    wall_ms: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        d = {
            "seq": self.seq,
            "step": self.step.value,
            "prompt": self.prompt,
            "completion": self.completion,
            "backend_id": self.backend_id,
            "wall_ms": self.wall_ms,
        }
        if self.error is not None:
            d["error"] = self.error
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CallRecord:
        return cls(
            seq=d["seq"],
            step=Step(d["step"]),
            prompt=d["prompt"],
            completion=d["completion"],
            backend_id=d.get("backend_id", ""),
            wall_ms=d.get("wall_ms", 0),
            error=d.get("error"),
        )


class PipelineTrace:
    """Append-only record of backend calls for one query.

    Sequence numbers are handed out by ``reserve`` at issue time, so a batch
    dispatched concurrently still gets seq numbers in plan order. Records are
    kept sorted by seq no matter in which order they complete.
    """

    def __init__(self, query_id: str, config: PipelineConfig, calls=(), warnings=()):
        self.query_id = query_id
        self.config = config
        self._calls: dict[int, CallRecord] = {c.seq: c for c in calls}
        self._warnings: list[str] = list(warnings)
        self._next_seq = max(self._calls, default=-1) + 1
        self._lock = threading.Lock()

    def reserve(self, n: int = 1) -> list[int]:
        with self._lock:
            seqs = list(range(self._next_seq, self._next_seq + n))
            self._next_seq += n
            return seqs

    def add(self, record: CallRecord) -> None:
        with self._lock:
            if record.seq in self._calls:
                raise ValueError(f"seq {record.seq} already recorded")
            self._calls[record.seq] = record

    def warn(self, message: str) -> None:
        with self._lock:
            self._warnings.append(message)

    @property
    def calls(self) -> tuple[CallRecord, ...]:
        with self._lock:
            return tuple(self._calls[k] for k in sorted(self._calls))

    @property
    def warnings(self) -> tuple[str, ...]:
        with self._lock:
            return tuple(self._warnings)

    def steps(self) -> list[Step]:
        return [c.step for c in self.calls]

    def count(self, step: Step) -> int:
        return sum(1 for c in self.calls if c.step is step)

    def __len__(self):
        return len(self.calls)

    def __eq__(self, other):
        if not isinstance(other, PipelineTrace):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"PipelineTrace(query_id={self.query_id!r}, calls={len(self)})"

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "config": self.config.to_dict(),
            "calls": [c.to_dict() for c in self.calls],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PipelineTrace:
        return cls(
            d["query_id"],
            PipelineConfig.from_dict(d["config"]),
            [CallRecord.from_dict(c) for c in d["calls"]],
            d.get("warnings", ()),
        )


@dataclass(frozen=True)
class PipelineResult:
    query: Query
    baseline_response: str
    plan: VerificationPlan
    qa: tuple[VerificationQA, ...]
    verdicts: tuple[CrossCheckVerdict, ...] | None
    final_response: str
    trace: PipelineTrace

    def __post_init__(self):
        object.__setattr__(self, "qa", tuple(self.qa))
        if self.verdicts is not None:
            object.__setattr__(self, "verdicts", tuple(self.verdicts))

    def to_dict(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "baseline_response": self.baseline_response,
            "plan": self.plan.to_dict(),
            "qa": [q.to_dict() for q in self.qa],
            "verdicts": None if self.verdicts is None else [v.to_dict() for v in self.verdicts],
            "final_response": self.final_response,
            "trace": self.trace.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PipelineResult:
        verdicts = d.get("verdicts")
        return cls(
            query=Query.from_dict(d["query"]),
            baseline_response=d["baseline_response"],
            plan=VerificationPlan.from_dict(d["plan"]),
            qa=tuple(VerificationQA.from_dict(q) for q in d["qa"]),
            verdicts=None if verdicts is None else tuple(CrossCheckVerdict.from_dict(v) for v in verdicts),
            final_response=d["final_response"],
            trace=PipelineTrace.from_dict(d["trace"]),
        )


# Line-delimited JSON: one record per line, UTF-8, key order fixed by to_dict.

def dumps_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n"


def encode_result(result: PipelineResult) -> str:
    return dumps_line(result.to_dict())


def decode_result(line: str) -> PipelineResult:
    return PipelineResult.from_dict(json.loads(line))


def write_results(results: Iterable[PipelineResult], fh: TextIO) -> None:
    for r in results:
        fh.write(encode_result(r))


def read_results(fh: Iterable[str]) -> list[PipelineResult]:
    return [decode_result(line) for line in fh if line.strip()]


def write_trace(trace: PipelineTrace, fh: TextIO) -> None:
    """Write a trace as a header line followed by one line per call."""
    fh.write(dumps_line({
        "kind": "trace",
        "query_id": trace.query_id,
        "config": trace.config.to_dict(),
        "warnings": list(trace.warnings),
    }))
    for call in trace.calls:
        fh.write(dumps_line({"kind": "call", **call.to_dict()}))


def read_trace(fh: Iterable[str]) -> PipelineTrace:
    header = None
    calls = []
    for lineno, line in enumerate(fh, 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.pop("kind", "call")
        if kind == "trace":
            if header is not None:
                raise ValueError(f"line {lineno}: second trace header")
            header = rec
        elif kind == "call":
            calls.append(CallRecord.from_dict(rec))
        else:
            raise ValueError(f"line {lineno}: unknown record kind {kind!r}")
    if header is None:
        header = {"query_id": "", "config": PipelineConfig().to_dict(), "warnings": []}
    return PipelineTrace(
        header["query_id"],
        PipelineConfig.from_dict(header["config"]),
        calls,
        header.get("warnings", ()),
    )


def with_variant(config: PipelineConfig, variant: Variant | str) -> PipelineConfig:
    return replace(config, variant=Variant(variant))

