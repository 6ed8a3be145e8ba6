"""The one place that talks to a language model.

Every call goes through :class:`LLMClient.complete`, which records a
:class:`ChatExchange` (tokens + elapsed time) into a :class:`UsageLedger`.
Three backends are available:

* ``live``   - an OpenAI-compatible ``/chat/completions`` endpoint,
* ``replay`` - answers from frozen JSONL fixtures keyed by prompt digest,
* ``record`` - wraps another backend and appends what it sees to a fixture.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Protocol, TypeVar

import httpx

logger = logging.getLogger(__name__)

SCHEMA_LEDGER = "policykg-ledger/1"
SCHEMA_FIXTURE = "policykg-replay/1"
API_KEY_ENV = "POLICYKG_API_KEY"

T = TypeVar("T")
R = TypeVar("R")


class Stage(str, Enum):
    POLICY_READ = "PolicyRead"
    LEAK_MAP = "LeakMap"
    REPORT = "Report"
    BASELINE_STAGE1 = "BaselineStage1"
    BASELINE_STAGE2 = "BaselineStage2"
    BASELINE_STAGE3 = "BaselineStage3"


STAGE_ORDER = {s: i for i, s in enumerate(Stage)}


class LLMError(RuntimeError):
    pass


class TransportError(LLMError):
    def __init__(self, stage: Stage, message: str):
        super().__init__(f"[{Stage(stage).value}] {message}")
        self.stage = Stage(stage)


class ReplayMissError(LLMError):
    def __init__(self, stage: Stage, digest: str):
        super().__init__(f"[{Stage(stage).value}] no replay fixture for prompt {digest[:16]}")
        self.stage = Stage(stage)
        self.digest = digest


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatExchange:
    stage: Stage
    prompt: str
    response: str
    prompt_tokens: int
    completion_tokens: int
    elapsed_ms: int
    template: str = ""

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        if self.prompt_tokens < 0 or self.completion_tokens < 0 or self.elapsed_ms < 0:
            raise ValueError("token counts and elapsed time must be non-negative")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    @property
    def digest(self) -> str:
        return prompt_digest(self.prompt)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        d["digest"] = self.digest
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChatExchange":
        return cls(
            Stage(d["stage"]), d["prompt"], d["response"], int(d["prompt_tokens"]),
            int(d["completion_tokens"]), int(d["elapsed_ms"]), d.get("template", ""),
        )


@dataclass(frozen=True)
class StageCost:
    calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    elapsed_ms: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: "StageCost") -> "StageCost":
        return StageCost(
            self.calls + other.calls,
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
            self.elapsed_ms + other.elapsed_ms,
        )


@dataclass(frozen=True)
class CostReport:
    per_stage: dict[Stage, StageCost]
    overall: StageCost
    wall_clock_ms: int | None = None

    @property
    def total_tokens(self) -> int:
        return self.overall.total_tokens


class UsageLedger:
    """Thread-safe, append-only record of exchanges.

    ``wall_clock_ms`` is the end-to-end time of the run and is kept apart
    from the summed per-call ``elapsed_ms``.
    """

    def __init__(self, exchanges: Iterable[ChatExchange] = (), wall_clock_ms: int | None = None,
                 clock: str = "live"):
        self._lock = threading.Lock()
        self._exchanges: list[ChatExchange] = list(exchanges)
        self.wall_clock_ms = wall_clock_ms
        self.clock = clock

    def append(self, ex: ChatExchange) -> None:
        with self._lock:
            self._exchanges.append(ex)

    @property
    def exchanges(self) -> list[ChatExchange]:
        with self._lock:
            return list(self._exchanges)

    def __len__(self) -> int:
        return len(self._exchanges)

    def sorted_exchanges(self) -> list[ChatExchange]:
        """Exchanges in a canonical order independent of completion order."""
        return sorted(
            self.exchanges,
            key=lambda e: (STAGE_ORDER[e.stage], e.digest, e.response, e.elapsed_ms),
        )

    def to_dict(self) -> dict:
        report = ledger_totals(self)
        return {
            "schema": SCHEMA_LEDGER,
            "clock": self.clock,
            "wall_clock_ms": self.wall_clock_ms,
            "totals": _cost_dict(report.overall),
            "stages": {s.value: _cost_dict(c) for s, c in report.per_stage.items()},
            "exchanges": [e.to_dict() for e in self.sorted_exchanges()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UsageLedger":
        if d.get("schema") != SCHEMA_LEDGER:
            raise ValueError(f"unsupported ledger schema {d.get('schema')!r}")
        return cls(
            (ChatExchange.from_dict(e) for e in d["exchanges"]),
            d.get("wall_clock_ms"),
            d.get("clock", "live"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "UsageLedger":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def merge(self, other: "UsageLedger") -> "UsageLedger":
        wall = None
        if self.wall_clock_ms is not None or other.wall_clock_ms is not None:
            wall = (self.wall_clock_ms or 0) + (other.wall_clock_ms or 0)
        clock = self.clock if self.clock == other.clock else "mixed"
        return UsageLedger(self.exchanges + other.exchanges, wall, clock)


def _cost_dict(c: StageCost) -> dict:
    return {
        "calls": c.calls,
        "prompt_tokens": c.prompt_tokens,
        "completion_tokens": c.completion_tokens,
        "total_tokens": c.total_tokens,
        "elapsed_ms": c.elapsed_ms,
    }


def ledger_totals(ledger: UsageLedger) -> CostReport:
    per_stage: dict[Stage, StageCost] = {}
    for ex in ledger.exchanges:
        cost = StageCost(1, ex.prompt_tokens, ex.completion_tokens, ex.elapsed_ms)
        per_stage[ex.stage] = per_stage.get(ex.stage, StageCost()) + cost
    per_stage = dict(sorted(per_stage.items(), key=lambda kv: STAGE_ORDER[kv[0]]))
    overall = sum(per_stage.values(), StageCost())
    return CostReport(per_stage, overall, ledger.wall_clock_ms)


# -- backends ----------------------------------------------------------------


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int
    completion_tokens: int
    elapsed_ms: int


class Backend(Protocol):
    deterministic: bool

    def complete(self, stage: Stage, prompt: str) -> Completion: ...


class LiveBackend:
    """OpenAI-compatible chat-completions endpoint over HTTP."""

    deterministic = False

    def __init__(self, base_url: str, model: str, api_key: str | None = None, temperature: float = 0.0,
                 max_retries: int = 3, timeout: float = 120.0, transport: httpx.BaseTransport | None = None,
                 backoff: float = 1.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.temperature = temperature
        self.max_retries = max_retries
        self.backoff = backoff
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def complete(self, stage: Stage, prompt: str) -> Completion:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        last_error = ""
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            start = time.perf_counter()
            try:
                resp = self._http.post(f"{self.base_url}/chat/completions", json=payload)
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                logger.warning("%s attempt %d failed: %s", stage.value, attempt + 1, last_error)
                continue
            elapsed = int(round((time.perf_counter() - start) * 1000))
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("%s attempt %d failed: %s", stage.value, attempt + 1, last_error)
                continue
            if resp.status_code >= 400:
                raise TransportError(stage, f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
                text = body["choices"][0]["message"]["content"] or ""
                usage = body.get("usage") or {}
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise TransportError(stage, f"unexpected response shape: {exc}") from exc
            return Completion(text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)), elapsed)
        raise TransportError(stage, f"gave up after {self.max_retries + 1} attempts ({last_error})")

    def close(self) -> None:
        self._http.close()


def load_fixtures(paths: Iterable[str | Path]) -> dict[str, dict]:
    table: dict[str, dict] = {}
    for path in paths:
        path = Path(path)
        if not path.exists():
            continue
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            if row.get("schema", SCHEMA_FIXTURE) != SCHEMA_FIXTURE:
                raise ValueError(f"{path}: unsupported fixture schema {row.get('schema')!r}")
            table.setdefault(row["digest"], row)
    return table


class ReplayBackend:
    deterministic = True

    def __init__(self, fixtures: Iterable[str | Path] | dict[str, dict]):
        self.table = fixtures if isinstance(fixtures, dict) else load_fixtures(fixtures)

    def complete(self, stage: Stage, prompt: str) -> Completion:
        digest = prompt_digest(prompt)
        row = self.table.get(digest)
        if row is None:
            raise ReplayMissError(stage, digest)
        return Completion(row["response"], int(row["prompt_tokens"]), int(row["completion_tokens"]),
                          int(row["elapsed_ms"]))


class RecordBackend:
    """Forward to ``inner`` and append every new exchange to ``path``."""

    def __init__(self, inner: Backend, path: str | Path):
        self.inner = inner
        self.path = Path(path)
        self.deterministic = getattr(inner, "deterministic", False)
        self._lock = threading.Lock()
        self._seen = set(load_fixtures([self.path]))

    def complete(self, stage: Stage, prompt: str) -> Completion:
        out = self.inner.complete(stage, prompt)
        digest = prompt_digest(prompt)
        with self._lock:
            if digest not in self._seen:
                self._seen.add(digest)
                row = {
                    "schema": SCHEMA_FIXTURE, "digest": digest, "stage": Stage(stage).value,
                    "prompt": prompt, "response": out.text, "prompt_tokens": out.prompt_tokens,
                    "completion_tokens": out.completion_tokens, "elapsed_ms": out.elapsed_ms,
                }
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
        return out


# -- client ------------------------------------------------------------------


@dataclass
class LLMConfig:
    backend: str = "live"
    base_url: str = "https://api.deepseek.com/v1"
    model: str = "deepseek-chat"
    temperature: float = 0.0
    max_retries: int = 3
    parallelism: int = 4
    fixtures: list[str] = field(default_factory=list)
    record_to: str | None = None

    def __post_init__(self):
        if self.backend not in ("live", "replay", "record"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.parallelism < 1:
            raise ValueError("parallelism must be at least 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")


def build_backend(config: LLMConfig, transport: httpx.BaseTransport | None = None) -> Backend:
    if config.backend == "replay":
        if not config.fixtures:
            raise ValueError("replay backend needs at least one fixture file")
        return ReplayBackend(config.fixtures)
    live = LiveBackend(config.base_url, config.model, os.environ.get(API_KEY_ENV), config.temperature,
                       config.max_retries, transport=transport)
    if config.backend == "record":
        target = config.record_to or (config.fixtures[0] if config.fixtures else None)
        if not target:
            raise ValueError("record backend needs a fixture file to write")
        return RecordBackend(live, target)
    return live


class LLMClient:
    def __init__(self, backend: Backend, ledger: UsageLedger | None = None, parallelism: int = 4):
        self.backend = backend
        self.deterministic = getattr(backend, "deterministic", False)
        self.ledger = ledger if ledger is not None else UsageLedger(clock=self._clock_name())
        self.parallelism = parallelism
        self._slots = threading.BoundedSemaphore(parallelism)

    def _clock_name(self) -> str:
        return "replay" if self.deterministic else "live"

    @classmethod
    def from_config(cls, config: LLMConfig, transport: httpx.BaseTransport | None = None) -> "LLMClient":
        return cls(build_backend(config, transport), parallelism=config.parallelism)

    def complete(self, stage: Stage, prompt: str, template: str = "") -> ChatExchange:
        stage = Stage(stage)
        if not prompt or not prompt.strip():
            raise ValueError(f"[{stage.value}] prompt must be non-empty")
        with self._slots:
            out = self.backend.complete(stage, prompt)
        ex = ChatExchange(stage, prompt, out.text, out.prompt_tokens, out.completion_tokens,
                          out.elapsed_ms, template)
        self.ledger.append(ex)
        return ex

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Apply ``fn`` with bounded concurrency; results keep input order."""
        items = list(items)
        if self.parallelism == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
            return list(pool.map(fn, items))

    @contextmanager
    def timed(self):
        """Measure end-to-end time into ``ledger.wall_clock_ms``.

        Under a deterministic backend the wall clock is replaced by the sum
        of replayed per-call times so ledger files stay reproducible.
        """
        before = len(self.ledger)
        start = time.perf_counter()
        try:
            yield self.ledger
        finally:
            if self.deterministic:
                spent = sum(e.elapsed_ms for e in self.ledger.exchanges[before:])
            else:
                spent = int(round((time.perf_counter() - start) * 1000))
            self.ledger.wall_clock_ms = (self.ledger.wall_clock_ms or 0) + spent
