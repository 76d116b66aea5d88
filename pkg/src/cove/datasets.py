"""Task datasets: query templates and the line-delimited record format."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .evaluation import GoldEntity, Rarity
from .model import CoveError, Query, TaskKind, dumps_line

MAX_SPAN_TOKENS = 3


class EmptySlot(CoveError, ValueError):
    pass


class DatasetError(CoveError):
    pass


class ParseError(DatasetError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaMismatch(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


# -- query templates ---------------------------------------------------------

_WIKIDATA = re.compile(r"^Who are some (.+)s who were born in (.+)\?$", re.S)


def _slot(name: str, value: str) -> str:
    if not isinstance(value, str) or not value.strip():
        raise EmptySlot(f"{name} is empty")
    return value


def make_wikidata_query(profession: str, city: str) -> str:
    return f"Who are some {_slot('profession', profession)}s who were born in {_slot('city', city)}?"


def parse_wikidata_query(text: str) -> tuple[str, str]:
    """Inverse of make_wikidata_query."""
    m = _WIKIDATA.match(text)
    if m is None:
        raise ValueError(f"not a wikidata list question: {text!r}")
    return m.group(1), m.group(2)


def make_category_query(category: str) -> str:
    return "Name some " + _slot("category", category)


def parse_category_query(text: str) -> str:
    if not text.startswith("Name some ") or len(text) == len("Name some "):
        raise ValueError(f"not a category question: {text!r}")
    return text[len("Name some "):]


def make_bio_query(entity: str) -> str:
    return "Tell me a bio of " + _slot("entity", entity)


def parse_bio_query(text: str) -> str:
    if not text.startswith("Tell me a bio of ") or len(text) == len("Tell me a bio of "):
        raise ValueError(f"not a bio request: {text!r}")
    return text[len("Tell me a bio of "):]


# -- records -----------------------------------------------------------------


@dataclass(frozen=True)
class TaskRecord:
    id: str
    task_kind: TaskKind
    query_text: str
    gold: tuple  # GoldEntity for list_qa, str otherwise
    rarity: Rarity | None = None
    source: str | None = None  # e.g. "wikidata" or "category"

    @property
    def query(self) -> Query:
        return Query(self.query_text, self.task_kind, self.id)

    @property
    def gold_strings(self) -> list[str]:
        return [g.name if isinstance(g, GoldEntity) else g for g in self.gold]

    def to_dict(self) -> dict:
        d = {"id": self.id, "query": self.query_text}
        if self.task_kind is TaskKind.LIST_QA:
            d["gold"] = [
                {"name": g.name, "aliases": list(g.aliases)} if g.aliases else g.name for g in self.gold
            ]
        else:
            d["gold"] = list(self.gold)
        if self.rarity is not None:
            d["rarity"] = self.rarity.value
        if self.source is not None:
            d["source"] = self.source
        return d


_KEYS = {"id", "query", "gold", "rarity", "source", "slots"}


def _query_from_slots(slots: dict, task: TaskKind, line: int) -> str:
    try:
        if task is TaskKind.LIST_QA and "category" in slots:
            return make_category_query(slots["category"])
        if task is TaskKind.LIST_QA:
            return make_wikidata_query(slots["profession"], slots["city"])
        if task is TaskKind.LONGFORM_BIO:
            return make_bio_query(slots["entity"])
    except KeyError as exc:
        raise SchemaMismatch(f"missing slot {exc.args[0]!r}", line) from None
    except EmptySlot as exc:
        raise SchemaMismatch(str(exc), line) from None
    raise SchemaMismatch(f"slots are not supported for {task.value}", line)


def _gold_entity(item, line: int) -> GoldEntity:
    if isinstance(item, str) and item.strip():
        return GoldEntity(item)
    if isinstance(item, dict) and isinstance(item.get("name"), str) and item["name"].strip():
        aliases = item.get("aliases", [])
        if not isinstance(aliases, list) or not all(isinstance(a, str) for a in aliases):
            raise SchemaMismatch("aliases must be a list of strings", line)
        extra = set(item) - {"name", "aliases"}
        if extra:
            raise SchemaMismatch(f"unknown gold entity keys {sorted(extra)}", line)
        return GoldEntity(item["name"], tuple(aliases))
    raise SchemaMismatch(f"bad gold entity {item!r}", line)


def parse_record(obj, task: TaskKind, line: int = 0) -> TaskRecord:
    if not isinstance(obj, dict):
        raise SchemaMismatch("record must be an object", line)
    extra = set(obj) - _KEYS
    if extra:
        raise SchemaMismatch(f"unknown keys {sorted(extra)}", line)
    rid = obj.get("id")
    if not isinstance(rid, str) or not rid:
        raise SchemaMismatch("id must be a non-empty string", line)
    if "query" in obj:
        text = obj["query"]
    elif isinstance(obj.get("slots"), dict):
        text = _query_from_slots(obj["slots"], task, line)
    else:
        raise SchemaMismatch("record needs query or slots", line)
    if not isinstance(text, str) or not text.strip():
        raise SchemaMismatch("query must be a non-empty string", line)
    gold = obj.get("gold")
    if not isinstance(gold, list) or not gold:
        raise SchemaMismatch("gold must be a non-empty list", line)
    if task is TaskKind.LIST_QA:
        items = tuple(_gold_entity(g, line) for g in gold)
    else:
        if not all(isinstance(g, str) and g.strip() for g in gold):
            raise SchemaMismatch("gold must be a list of non-empty strings", line)
        items = tuple(gold)
        if task is TaskKind.MULTISPAN_QA:
            long = [g for g in gold if len(g.split()) > MAX_SPAN_TOKENS]
            if long:
                raise SchemaMismatch(f"span longer than {MAX_SPAN_TOKENS} tokens: {long[0]!r}", line)
    rarity = obj.get("rarity")
    if rarity is not None:
        if task is not TaskKind.LONGFORM_BIO:
            raise SchemaMismatch("rarity only applies to longform_bio", line)
        try:
            rarity = Rarity(str(rarity).lower())
        except ValueError:
            raise SchemaMismatch(f"unknown rarity {rarity!r}", line) from None
    source = obj.get("source")
    if source is not None and not isinstance(source, str):
        raise SchemaMismatch("source must be a string", line)
    return TaskRecord(rid, task, text, items, rarity, source)


def read_dataset(lines: Iterable[str], task_kind: TaskKind | str) -> list[TaskRecord]:
    task = TaskKind(task_kind)
    records: list[TaskRecord] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(lines, 1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, lineno) from None
        rec = parse_record(obj, task, lineno)
        if rec.id in seen:
            raise SchemaMismatch(f"duplicate id {rec.id!r} (first on line {seen[rec.id]})", lineno)
        seen[rec.id] = lineno
        records.append(rec)
    return records


def load_dataset(path: str | Path, task_kind: TaskKind | str) -> list[TaskRecord]:
    """Load and validate a dataset file; every record comes back or an error is raised."""
    try:
        with open(path, encoding="utf-8") as fh:
            return read_dataset(fh, task_kind)
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8: {exc.reason}", 0) from None


def dump_dataset(records: Iterable[TaskRecord]) -> str:
    return "".join(dumps_line(r.to_dict()) for r in records)


def dataset_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


SAMPLES = Path(__file__).parent / "data"
SAMPLE_FILES = {
    TaskKind.LIST_QA: SAMPLES / "wikidata_sample.jsonl",
    TaskKind.MULTISPAN_QA: SAMPLES / "multispan_sample.jsonl",
    TaskKind.LONGFORM_BIO: SAMPLES / "bio_sample.jsonl",
}
