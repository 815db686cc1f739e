"""Answer sources: chat-completions HTTP client, seeded mock, record/replay."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import httpx

from ..promptgen import PromptPair
from ..survey_data import Profile, QuestionSpec, bundled_questions, load_reference_dataset
from .parsing import ParseError, parse_response
from .transcripts import Transcript, TranscriptWriter, read_transcripts

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("http", "mock", "replay")
RETRYABLE_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


class BackendError(RuntimeError):
    def __init__(self, message: str, correlation_id: str | None = None):
        self.correlation_id = correlation_id
        suffix = f" [request {correlation_id}]" if correlation_id else ""
        super().__init__(message + suffix)


class RetriesExhausted(BackendError):
    pass


class BackendTimeout(BackendError):
    pass


class BackendHTTPError(BackendError):
    def __init__(self, message: str, status: int, correlation_id: str | None = None):
        self.status = status
        super().__init__(message, correlation_id)


class ReplayMiss(BackendError):
    pass


class BackendConstructionError(BackendError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    kind: str
    label: str = ""
    endpoint: str | None = None
    model: str | None = None
    temperature: float = 1.0
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    requests_per_minute: float | None = None
    api_key_env: str | None = "OPENAI_API_KEY"
    backoff_base: float = 0.5
    seed: int | None = None
    weight_table: Any = None
    transcript: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.requests_per_minute is not None and self.requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        if self.kind == "http" and not (self.endpoint and self.model):
            raise ValueError("http backend requires endpoint and model")
        if self.kind == "mock" and (self.seed is None or self.weight_table is None):
            raise ValueError("mock backend requires a seed and a weight table")
        if self.kind == "replay" and not self.transcript:
            raise ValueError("replay backend requires a transcript file")

    @property
    def backend_id(self) -> str:
        return self.label or f"{self.kind}:{self.model or ''}"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> BackendConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**dict(data))

    def to_dict(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass(frozen=True)
class Reply:
    text: str
    attempts: int = 1
    latency_ms: float = 0.0


class Backend:
    backend_id: str = ""
    max_in_flight: int = 1
    model: str | None = None
    temperature: float | None = None

    def ask_detailed(self, pair: PromptPair) -> Reply:
        raise NotImplementedError

    def ask(self, pair: PromptPair) -> str:
        return self.ask_detailed(pair).text

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# HTTP


class RateLimiter:
    """Spaces request starts at least 60/rpm seconds apart across threads."""

    def __init__(self, requests_per_minute: float | None, clock=time.monotonic, sleep=time.sleep):
        self.interval = 60.0 / requests_per_minute if requests_per_minute else 0.0
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = 0.0

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            self._sleep(start - now)


class HttpBackend(Backend):
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(
        self,
        config: BackendConfig,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.backend_id = config.backend_id
        self.max_in_flight = config.max_in_flight
        self.model = config.model
        self.temperature = config.temperature
        self._client = client or httpx.Client(timeout=config.timeout)
        self._owns_client = client is None
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._limiter = RateLimiter(config.requests_per_minute, sleep=sleep)
        self._sleep = sleep

    def _headers(self, correlation_id: str) -> dict[str, str]:
        headers = {"Content-Type": "application/json", "X-Request-ID": correlation_id}
        if self.config.api_key_env:
            token = os.environ.get(self.config.api_key_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def request_body(self, pair: PromptPair) -> dict[str, Any]:
        return {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": pair.system_text},
                {"role": "user", "content": pair.user_text},
            ],
        }

    def ask_detailed(self, pair: PromptPair) -> Reply:
        correlation_id = uuid.uuid4().hex
        body = self.request_body(pair)
        headers = self._headers(correlation_id)
        last_error: str = ""
        timed_out = False
        started = time.perf_counter()
        for attempt in range(1, self.config.max_retries + 2):
            if attempt > 1:
                self._sleep(self.config.backoff_base * 2 ** (attempt - 2))
            self._limiter.acquire()
            with self._slots:
                try:
                    resp = self._client.post(
                        self.config.endpoint, json=body, headers=headers, timeout=self.config.timeout
                    )
                except httpx.TimeoutException as exc:
                    timed_out, last_error = True, f"timeout: {exc}"
                    continue
                except httpx.TransportError as exc:
                    timed_out, last_error = False, f"transport error: {exc}"
                    continue
            if resp.status_code in RETRYABLE_STATUS:
                timed_out, last_error = False, f"HTTP {resp.status_code}"
                continue
            if not 200 <= resp.status_code < 300:
                raise BackendHTTPError(
                    f"non-retryable HTTP {resp.status_code}: {resp.text[:200]}",
                    resp.status_code,
                    correlation_id,
                )
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"malformed completion payload: {exc}", correlation_id) from exc
            if not isinstance(text, str):
                raise BackendError("completion content is not a string", correlation_id)
            latency = (time.perf_counter() - started) * 1000
            return Reply(text, attempts=attempt, latency_ms=round(latency, 3))
        attempts = self.config.max_retries + 1
        if timed_out:
            raise BackendTimeout(f"timed out after {attempts} attempts ({last_error})", correlation_id)
        raise RetriesExhausted(f"gave up after {attempts} attempts ({last_error})", correlation_id)

    def close(self) -> None:
        if self._owns_client:
            self._client.close()


# ---------------------------------------------------------------------------
# Mock


@dataclass(frozen=True)
class WeightTable:
    """Logits for one question: a base per option label plus additive
    offsets keyed attribute -> attribute value -> option label."""

    base: Mapping[str, float]
    offsets: Mapping[str, Mapping[str, Mapping[str, float]]] = field(default_factory=dict)

    def check(self, question: QuestionSpec) -> None:
        missing = [label for label in question.labels if label not in self.base]
        if missing:
            raise ValueError(f"weight table for {question.question_id} lacks options {missing}")
        for attr, by_value in self.offsets.items():
            for value, deltas in by_value.items():
                stray = set(deltas) - set(question.labels)
                if stray:
                    raise ValueError(
                        f"weight table offset {attr}={value} names unknown options {sorted(stray)}"
                    )

    def logits(self, profile: Profile, question: QuestionSpec) -> list[float]:
        self.check(question)
        out = [float(self.base[label]) for label in question.labels]
        for attr, by_value in self.offsets.items():
            deltas = by_value.get(str(getattr(profile, attr)))
            if not deltas:
                continue
            for i, label in enumerate(question.labels):
                out[i] += float(deltas.get(label, 0.0))
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> WeightTable:
        return cls(base=dict(data["base"]), offsets=data.get("offsets", {}))

    def to_dict(self) -> dict[str, Any]:
        return {"base": dict(self.base), "offsets": self.offsets}


def uniform_weight_table(question: QuestionSpec) -> WeightTable:
    return WeightTable(base={label: 0.0 for label in question.labels})


# Options that read as the most pro-environmental answer; Green Party
# supporters lean towards them in the default mock table.
_GREEN_LEANING = {
    "lifestyle": "I'm environmentally friendly in most things I do",
    "personal_impact": "Strongly Agree",
    "willing_to_pay": "Strongly Agree",
    "env_disaster": "Strongly Agree",
    "climate_control": "Strongly Agree",
    "green_tariff": "Yes, we already buy a green tariff",
    "env_group": "Yes",
}


def default_weight_tables(
    reference=None, questions: Mapping[str, QuestionSpec] | None = None
) -> dict[str, WeightTable]:
    """Log-proportions of the reference distribution, plus a mild Green Party lean."""
    questions = questions if questions is not None else bundled_questions()
    reference = reference if reference is not None else load_reference_dataset(questions=questions)
    tables = {}
    for qid, question in questions.items():
        if qid not in reference:
            tables[qid] = uniform_weight_table(question)
            continue
        props = reference.distribution(qid).proportions
        base = {label: math.log(max(p, 1e-3)) for label, p in zip(question.labels, props)}
        offsets = {}
        if qid in _GREEN_LEANING:
            offsets = {"voting_intention": {"Green Party": {_GREEN_LEANING[qid]: 0.7}}}
        tables[qid] = WeightTable(base, offsets)
    return tables


def load_weight_tables(source: Any, questions: Mapping[str, QuestionSpec] | None = None) -> dict[str, WeightTable]:
    """Accept ``"default"``, ``"uniform"``, a JSON path, or an inline mapping."""
    questions = questions if questions is not None else bundled_questions()
    if source == "default":
        return default_weight_tables(questions=questions)
    if source == "uniform":
        return {qid: uniform_weight_table(q) for qid, q in questions.items()}
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            source = json.load(fh)
    payload = source.get("questions", source)
    return {qid: WeightTable.from_dict(spec) for qid, spec in payload.items()}


def stream_seed(experiment_seed: int, profile_id: str, question_id: str) -> int:
    digest = hashlib.sha256(f"{experiment_seed}\x1f{profile_id}\x1f{question_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def softmax(logits: list[float]) -> list[float]:
    top = max(logits)
    weights = [math.exp(x - top) for x in logits]
    total = math.fsum(weights)
    return [w / total for w in weights]


def mock_answer(
    profile: Profile,
    question: QuestionSpec,
    experiment_seed: int,
    weight_table: WeightTable,
) -> str:
    """Draw one option label from softmax(base + offsets).

    The draw depends only on (seed, profile_id, question_id), never on
    call order, so parallel runs reproduce serial ones.
    """
    probs = softmax(weight_table.logits(profile, question))
    u = random.Random(stream_seed(experiment_seed, profile.profile_id, question.question_id)).random()
    cumulative = 0.0
    for label, p in zip(question.labels, probs):
        cumulative += p
        if u < cumulative:
            return label
    return question.labels[-1]


class MockBackend(Backend):
    def __init__(
        self,
        seed: int,
        weight_tables: Mapping[str, WeightTable],
        profiles: Mapping[str, Profile],
        questions: Mapping[str, QuestionSpec] | None = None,
        backend_id: str = "mock",
        max_in_flight: int = 1,
    ):
        self.seed = seed
        self.weight_tables = dict(weight_tables)
        self.profiles = dict(profiles)
        self.questions = questions if questions is not None else bundled_questions()
        self.backend_id = backend_id
        self.max_in_flight = max_in_flight
        self.model = "mock"

    def ask_detailed(self, pair: PromptPair) -> Reply:
        question = self.questions[pair.question_id]
        table = self.weight_tables.get(pair.question_id)
        if table is None:
            raise BackendError(f"mock weight table has no entry for {pair.question_id}")
        label = mock_answer(self.profiles[pair.profile_id], question, self.seed, table)
        return Reply(label)


# ---------------------------------------------------------------------------
# Record / replay


class ReplayBackend(Backend):
    """Serves recorded raw replies keyed by (profile_id, question_id)."""

    def __init__(self, transcripts, backend_id: str = "replay", max_in_flight: int = 1):
        if isinstance(transcripts, (str, Path)):
            transcripts = read_transcripts(transcripts)
        self._replies = {(t.profile_id, t.question_id): t.raw_reply for t in transcripts}
        self.backend_id = backend_id
        self.max_in_flight = max_in_flight
        self.model = "replay"

    def __len__(self) -> int:
        return len(self._replies)

    def ask_detailed(self, pair: PromptPair) -> Reply:
        try:
            return Reply(self._replies[(pair.profile_id, pair.question_id)])
        except KeyError:
            raise ReplayMiss(
                f"no recorded reply for profile {pair.profile_id!r}, question {pair.question_id!r}"
            ) from None


class RecordingBackend(Backend):
    """Wraps another backend and appends a Transcript for every call."""

    def __init__(
        self,
        inner: Backend,
        store: str | Path | TranscriptWriter,
        questions: Mapping[str, QuestionSpec] | None = None,
    ):
        self.inner = inner
        self.writer = store if isinstance(store, TranscriptWriter) else TranscriptWriter(store)
        self.questions = questions if questions is not None else bundled_questions()
        self.backend_id = inner.backend_id
        self.max_in_flight = inner.max_in_flight
        self.model = inner.model
        self.temperature = inner.temperature

    def ask_detailed(self, pair: PromptPair) -> Reply:
        reply = self.inner.ask_detailed(pair)
        parsed, failure = None, None
        question = self.questions.get(pair.question_id)
        if question is None:
            failure = "unregistered question"
        else:
            try:
                parsed = parse_response(reply.text, question)
            except ParseError as exc:
                failure = exc.kind
        self.writer.append(
            Transcript(
                profile_id=pair.profile_id,
                question_id=pair.question_id,
                system_text=pair.system_text,
                user_text=pair.user_text,
                raw_reply=reply.text,
                parsed_option=parsed,
                failure=failure,
                attempts=reply.attempts,
                latency_ms=reply.latency_ms,
                backend_id=self.backend_id,
                model=self.model,
                temperature=self.temperature,
            )
        )
        return reply

    def close(self) -> None:
        self.inner.close()


def record_and_replay(
    store: str | Path,
    mode: str = "replay",
    inner: Backend | None = None,
    questions: Mapping[str, QuestionSpec] | None = None,
) -> Backend:
    if mode == "record":
        if inner is None:
            raise ValueError("record mode needs a backend to wrap")
        return RecordingBackend(inner, store, questions)
    if mode == "replay":
        return ReplayBackend(store)
    raise ValueError(f"unknown mode {mode!r}")


def make_backend(
    config: BackendConfig,
    profiles: Mapping[str, Profile] | None = None,
    questions: Mapping[str, QuestionSpec] | None = None,
    client: httpx.Client | None = None,
) -> Backend:
    try:
        if config.kind == "http":
            return HttpBackend(config, client=client)
        if config.kind == "mock":
            tables = load_weight_tables(config.weight_table, questions)
            for qid, question in (questions or bundled_questions()).items():
                if qid in tables:
                    tables[qid].check(question)
            return MockBackend(
                config.seed,
                tables,
                profiles or {},
                questions,
                backend_id=config.backend_id,
                max_in_flight=config.max_in_flight,
            )
        backend = ReplayBackend(config.transcript, backend_id=config.backend_id,
                                max_in_flight=config.max_in_flight)
        return backend
    except (OSError, ValueError, KeyError) as exc:
        raise BackendConstructionError(f"cannot construct {config.kind} backend {config.backend_id!r}: {exc}") from exc
