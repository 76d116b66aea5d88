"""Text-completion backends: HTTP chat client, scripted mock, record/replay."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence, TypeVar

import httpx
import yaml

from .model import CallRecord, CoveError, DecodingParams, Step, dumps_line

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class BackendError(CoveError):
    pass


class BackendUnavailable(BackendError):
    pass


class NoRuleMatched(BackendError):
    pass


class TokenLimitExceeded(BackendError):
    pass


class ReplayMiss(BackendError):
    """A replayed prompt has no recorded completion."""


class LiveCallForbidden(BackendError):
    pass


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    decoding: DecodingParams = field(default_factory=DecodingParams)

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt is empty")


class Backend(Protocol):
    backend_id: str
    # deterministic backends report wall_ms=0 so traces stay byte-stable
    deterministic: bool

    def complete(self, request: CompletionRequest) -> str: ...


def run_bounded(fn: Callable[[T], R], items: Iterable[T], parallelism: int) -> list[R]:
    """Map ``fn`` over items with at most ``parallelism`` calls in flight, keeping order."""
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")
    items = list(items)
    if parallelism == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(parallelism, len(items))) as pool:
        return list(pool.map(fn, items))


def complete_batch(
    backend: Backend,
    requests: Sequence[CompletionRequest],
    parallelism: int,
) -> list[str | BackendError]:
    """Complete requests concurrently; output order matches input order.

    A failed request leaves its exception in the corresponding slot instead of
    raising, so callers decide whether to abort.
    """

    def one(req):
        try:
            return backend.complete(req)
        except BackendError as exc:
            return exc

    return run_bounded(one, requests, parallelism)


# -- scripted mock -----------------------------------------------------------


class Matcher(str, enum.Enum):
    EXACT = "exact"
    CONTAINS = "contains"
    REGEX = "regex"


@dataclass(frozen=True)
class ScriptedRule:
    matcher: Matcher
    pattern: str
    completion: str
    priority: int = 0

    def __post_init__(self):
        object.__setattr__(self, "matcher", Matcher(self.matcher))
        if self.matcher is Matcher.REGEX:
            re.compile(self.pattern)

    def matches(self, prompt: str) -> bool:
        if self.matcher is Matcher.EXACT:
            return prompt == self.pattern
        if self.matcher is Matcher.CONTAINS:
            return self.pattern in prompt
        return re.search(self.pattern, prompt, re.DOTALL) is not None

    def to_dict(self) -> dict:
        return {
            "matcher": self.matcher.value,
            "pattern": self.pattern,
            "completion": self.completion,
            "priority": self.priority,
        }


def load_rules(path: str | Path) -> list[ScriptedRule]:
    """Read a mock script: one JSON rule object per line, ``#`` lines ignored."""
    rules = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                d = json.loads(line)
                rules.append(ScriptedRule(
                    Matcher(d["matcher"]), d["pattern"], d["completion"], d.get("priority", 0)
                ))
            except (ValueError, KeyError, re.error) as exc:
                raise ValueError(f"{path}:{lineno}: bad rule: {exc}") from exc
    return rules


def dump_rules(rules: Iterable[ScriptedRule], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rule in rules:
            fh.write(dumps_line(rule.to_dict()))


class ScriptedBackend:
    """Deterministic mock mapping rendered prompts to canned completions.

    Among the rules that match a prompt the highest priority wins; ties go to
    the rule declared first. ``delay`` (seconds) and ``jitter`` simulate
    latency; jitter is drawn from an RNG keyed on (seed, prompt) so it does
    not depend on thread scheduling.
    """

    deterministic = True

    def __init__(
        self,
        rules: Iterable[ScriptedRule] = (),
        *,
        delay: float = 0.0,
        jitter: float = 0.0,
        seed: int = 0,
        max_prompt_chars: int | None = None,
        backend_id: str = "scripted",
    ):
        self.rules = list(rules)
        self.delay = delay
        self.jitter = jitter
        self.seed = seed
        self.max_prompt_chars = max_prompt_chars
        self.backend_id = backend_id
        self._lock = threading.Lock()
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> ScriptedBackend:
        kwargs.setdefault("backend_id", f"scripted:{Path(path).name}")
        return cls(load_rules(path), **kwargs)

    def add(self, matcher, pattern: str, completion: str, priority: int = 0) -> ScriptedBackend:
        self.rules.append(ScriptedRule(Matcher(matcher), pattern, completion, priority))
        return self

    def resolve(self, prompt: str) -> str:
        best = None
        for rule in self.rules:
            if rule.matches(prompt) and (best is None or rule.priority > best.priority):
                best = rule
        if best is None:
            raise NoRuleMatched(f"no rule matches prompt ending {prompt[-80:]!r}")
        return best.completion

    def _sleep_for(self, prompt: str) -> float:
        if not self.jitter:
            return self.delay
        key = hashlib.sha256(f"{self.seed}\0{prompt}".encode()).digest()
        return self.delay + random.Random(key).uniform(0, self.jitter)

    def complete(self, request: CompletionRequest) -> str:
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            if self.max_prompt_chars is not None and len(request.prompt) > self.max_prompt_chars:
                raise TokenLimitExceeded(
                    f"prompt has {len(request.prompt)} chars, limit {self.max_prompt_chars}"
                )
            pause = self._sleep_for(request.prompt)
            if pause > 0:
                time.sleep(pause)
            return self.resolve(request.prompt)
        finally:
            with self._lock:
                self.in_flight -= 1


# -- HTTP chat-completions client --------------------------------------------

TOKEN_ENV = "COVE_API_KEY"


@dataclass(frozen=True)
class HTTPSettings:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "default"
    timeout: float = 60.0
    max_attempts: int = 3
    backoff: float = 0.5


_ENV_OVERRIDES = {
    "COVE_ENDPOINT": ("endpoint", str),
    "COVE_MODEL": ("model", str),
    "COVE_TIMEOUT": ("timeout", float),
    "COVE_MAX_ATTEMPTS": ("max_attempts", int),
}
_FORBIDDEN_KEYS = {"api_key", "token", "auth_token", "authorization"}


def load_http_settings(path: str | Path | None = None, env=None) -> HTTPSettings:
    """Settings from an optional YAML file, then ``COVE_*`` env overrides.

    The auth token is never read from files; see ``TOKEN_ENV``.
    """
    env = os.environ if env is None else env
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        doc = doc.get("backend", doc)
        bad = _FORBIDDEN_KEYS & set(doc)
        if bad:
            raise ValueError(f"{path}: auth tokens are only accepted via ${TOKEN_ENV}, found {sorted(bad)}")
        known = set(HTTPSettings.__dataclass_fields__)
        values.update({k: v for k, v in doc.items() if k in known})
    for var, (key, conv) in _ENV_OVERRIDES.items():
        if env.get(var):
            values[key] = conv(env[var])
    return HTTPSettings(**values)


class HTTPBackend:
    """Client for chat-completions style endpoints.

    The flat prompt is sent as a single user message. Transport errors, 429
    and 5xx responses are retried with exponential backoff; other 4xx fail
    immediately.
    """

    deterministic = False

    def __init__(
        self,
        settings: HTTPSettings,
        *,
        api_key: str | None = None,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.settings = settings
        self.api_key = os.environ.get(TOKEN_ENV) if api_key is None else api_key
        self.backend_id = f"http:{settings.model}"
        self._client = client or httpx.Client(timeout=settings.timeout)
        self._sleep = sleep

    def payload(self, request: CompletionRequest) -> dict:
        body = {
            "model": self.settings.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        }
        if request.decoding.stop_sequences:
            body["stop"] = list(request.decoding.stop_sequences)
        return body

    def complete(self, request: CompletionRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self.payload(request)
        last = None
        for attempt in range(self.settings.max_attempts):
            if attempt:
                self._sleep(self.settings.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.settings.endpoint, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                logger.warning("attempt %d/%d: %s", attempt + 1, self.settings.max_attempts, last)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                logger.warning("attempt %d/%d: %s", attempt + 1, self.settings.max_attempts, last)
                continue
            if resp.status_code >= 400:
                text = resp.text
                if "context_length" in text or "maximum context" in text:
                    raise TokenLimitExceeded(text[:500])
                raise BackendError(f"HTTP {resp.status_code}: {text[:500]}")
            return _extract_text(resp.json())
        raise BackendUnavailable(f"{self.settings.endpoint}: {last} after {self.settings.max_attempts} attempts")

    def close(self):
        self._client.close()


def _extract_text(data: dict) -> str:
    try:
        choice = data["choices"][0]
    except (KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"malformed response: {str(data)[:200]}") from exc
    if "message" in choice:
        return choice["message"].get("content") or ""
    return choice.get("text", "")


# -- record / replay ---------------------------------------------------------


class RecordingBackend:
    """Wraps a backend and keeps a transcript of every call."""

    def __init__(self, inner: Backend, step: Step = Step.EXECUTE):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.deterministic = getattr(inner, "deterministic", False)
        self.step = step
        self._lock = threading.Lock()
        self.records: list[CallRecord] = []

    def complete(self, request: CompletionRequest) -> str:
        start = time.perf_counter()
        completion = self.inner.complete(request)
        wall_ms = 0 if self.deterministic else int((time.perf_counter() - start) * 1000)
        with self._lock:
            self.records.append(CallRecord(
                len(self.records), self.step, request.prompt, completion, self.backend_id, wall_ms
            ))
        return completion

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(dumps_line({"kind": "call", **rec.to_dict()}))


class ReplayBackend:
    """Serves completions from recorded calls, keyed by exact prompt bytes.

    Never touches the network. A prompt absent from the recording raises
    ReplayMiss.
    """

    deterministic = True

    def __init__(self, records: Iterable[CallRecord], backend_id: str = "replay"):
        self.backend_id = backend_id
        self._table: dict[str, str] = {}
        for rec in records:
            if rec.error is None:
                self._table.setdefault(rec.prompt, rec.completion)
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> ReplayBackend:
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    if d.pop("kind", "call") == "call":
                        records.append(CallRecord.from_dict(d))
        return cls(records)

    def complete(self, request: CompletionRequest) -> str:
        with self._lock:
            self.calls += 1
        try:
            return self._table[request.prompt]
        except KeyError:
            raise ReplayMiss(f"prompt not in recording (ends {request.prompt[-60:]!r})") from None


class ForbiddenBackend:
    """Raises on every call; stands in where no live traffic is allowed."""

    deterministic = True
    backend_id = "forbidden"

    def complete(self, request: CompletionRequest) -> str:
        raise LiveCallForbidden("live backend call attempted")
