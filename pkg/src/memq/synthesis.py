"""Answer generation from a question and retrieved memories.

Backends implement a single ``complete(request, params)`` attempt;
:func:`generate` owns retries, timing and logging.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import string
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx

from .store import MemoryItem
from .text import is_cjk

log = logging.getLogger(__name__)

WORD_LIMIT = 50
CJK_CHAR_LIMIT = 100
REFUSAL = "no relevant memory"
NO_MEMORY_MARKER = "(no memory provided)"
API_KEY_ENV = "MEMQ_API_KEY"


class TemplateError(ValueError):
    pass


class GenerationError(RuntimeError):
    retryable = True


class GenerationTimeout(GenerationError):
    pass


class RateLimited(GenerationError):
    def __init__(self, retry_after: float | None = None):
        super().__init__(f"rate limited (retry after {retry_after}s)")
        self.retry_after = retry_after


class EndpointError(GenerationError):
    def __init__(self, status: int, body: str):
        super().__init__(f"endpoint returned {status}: {body[:200]}")
        self.status = status
        self.body = body
        self.retryable = status >= 500 or status in (408, 409)


class BudgetExceeded(GenerationError):
    retryable = False


class MissingTranscript(GenerationError):
    retryable = False


# --------------------------------------------------------------------------
# Prompt


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str

    def __post_init__(self):
        try:
            fields = [f for _, f, _, _ in string.Formatter().parse(self.body) if f is not None]
        except ValueError as exc:
            raise TemplateError(f"{self.template_id}: {exc}") from None
        for name in ("question", "memories", "word_limit"):
            n = fields.count(name)
            if n != 1:
                raise TemplateError(f"{self.template_id}: placeholder {{{name}}} appears {n} times")
        extra = set(fields) - {"question", "memories", "word_limit"}
        if extra:
            raise TemplateError(f"{self.template_id}: unknown placeholders {sorted(extra)}")


ANSWER_TEMPLATE_V1 = PromptTemplate(
    "answer-v1",
    "You are the person whose memories are listed below. Answer the question "
    "in first person, drawing only on these memories, and keep the answer "
    "within {word_limit} words. Reuse names, places, dates and objects exactly "
    "as they are written in the memories.\n\n"
    "Memories:\n{memories}\n\n"
    "Question: {question}\n"
    "Answer:",
)


def render_memories(memories: Sequence[MemoryItem]) -> str:
    if not memories:
        return NO_MEMORY_MARKER
    return "\n".join(f"{i}. [{m.subtype.value}] {m.text}" for i, m in enumerate(memories, 1))


def build_prompt(
    template: PromptTemplate,
    question: str,
    memories: Sequence[MemoryItem],
    word_limit: int = WORD_LIMIT,
) -> str:
    return template.body.format(
        question=question, memories=render_memories(memories), word_limit=word_limit
    )


def truncate_answer(text: str, max_words: int = WORD_LIMIT, max_cjk: int = CJK_CHAR_LIMIT) -> str:
    """Cut ``text`` before the word or CJK character that would exceed either limit."""
    words = cjk = 0
    in_word = False
    for i, ch in enumerate(text):
        if is_cjk(ch):
            in_word = False
            cjk += 1
            if cjk > max_cjk:
                return text[:i].rstrip()
        elif ch.isalnum():
            if not in_word:
                words += 1
                in_word = True
                if words > max_words:
                    return text[:i].rstrip()
        else:
            in_word = False
    return text


def mock_extractive_generate(question: str, memories: Sequence[MemoryItem]) -> str:
    """Return the top-ranked memory verbatim (truncated), or the refusal string."""
    if not memories:
        return REFUSAL
    return truncate_answer(memories[0].text)


# --------------------------------------------------------------------------
# Backends


@dataclass(frozen=True)
class GenerationParams:
    max_tokens: int = 256
    temperature: float = 0.0
    timeout: float = 30.0
    retries: int = 3


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    question: str = ""
    memories: tuple[MemoryItem, ...] = ()


@dataclass(frozen=True)
class GenerationResult:
    text: str
    attempts: int
    latency: float


class GenerationBackend(Protocol):
    name: str

    def complete(self, request: GenerationRequest, params: GenerationParams) -> str: ...


class MockExtractiveBackend:
    """Offline, deterministic backend; never touches the network."""

    name = "mock"
    concurrent = False

    def complete(self, request: GenerationRequest, params: GenerationParams) -> str:
        return mock_extractive_generate(request.question, request.memories)


class ChatCompletionsBackend:
    """POST ``{base_url}/chat/completions`` with a bearer token.

    ``client`` may be injected (e.g. an ``httpx.Client`` with a mock
    transport); otherwise one is created per backend.
    """

    concurrent = True

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        *,
        client: httpx.Client | None = None,
        max_calls: int | None = None,
    ):
        self.name = f"chat:{model}"
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self._client = client or httpx.Client()
        self.max_calls = max_calls
        self.calls = 0
        self._lock = threading.Lock()

    def payload(self, request: GenerationRequest, params: GenerationParams) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }

    def complete(self, request: GenerationRequest, params: GenerationParams) -> str:
        with self._lock:
            if self.max_calls is not None and self.calls >= self.max_calls:
                raise BudgetExceeded(f"call cap of {self.max_calls} reached")
            self.calls += 1
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self._client.post(
                f"{self.base_url}/chat/completions",
                json=self.payload(request, params),
                headers=headers,
                timeout=params.timeout,
            )
        except httpx.TimeoutException as exc:
            raise GenerationTimeout(str(exc)) from exc
        except httpx.TransportError as exc:
            raise EndpointError(0, str(exc)) from exc
        if resp.status_code == 429:
            ra = resp.headers.get("retry-after")
            try:
                retry_after = float(ra) if ra is not None else None
            except ValueError:
                retry_after = None
            raise RateLimited(retry_after)
        if resp.status_code != 200:
            raise EndpointError(resp.status_code, resp.text)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            err = EndpointError(resp.status_code, resp.text)
            err.retryable = False
            raise err from exc


def transcript_key(backend_name: str, prompt: str, params: GenerationParams) -> str:
    blob = json.dumps(
        {
            "backend": backend_name,
            "prompt": prompt,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        },
        ensure_ascii=False,
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class RecordingBackend:
    """Wraps another backend and stores each exchange as ``<sha256>.json``."""

    def __init__(self, inner: GenerationBackend, directory: str | Path):
        self.inner = inner
        self.name = inner.name
        self.concurrent = getattr(inner, "concurrent", False)
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def complete(self, request: GenerationRequest, params: GenerationParams) -> str:
        t0 = time.perf_counter()
        text = self.inner.complete(request, params)
        key = transcript_key(self.name, request.prompt, params)
        record = {
            "backend": self.name,
            "prompt": request.prompt,
            "params": asdict(params),
            "response": text,
            "latency": time.perf_counter() - t0,
        }
        (self.directory / f"{key}.json").write_text(
            json.dumps(record, ensure_ascii=False, indent=1) + "\n", encoding="utf-8"
        )
        return text


class ReplayBackend:
    """Serves responses recorded by :class:`RecordingBackend`; fully offline."""

    concurrent = False

    def __init__(self, directory: str | Path, name: str):
        self.directory = Path(directory)
        self.name = name

    def complete(self, request: GenerationRequest, params: GenerationParams) -> str:
        key = transcript_key(self.name, request.prompt, params)
        path = self.directory / f"{key}.json"
        if not path.exists():
            raise MissingTranscript(f"no recorded transcript {key}")
        return json.loads(path.read_text(encoding="utf-8"))["response"]


# --------------------------------------------------------------------------
# Calling


def generate(
    backend: GenerationBackend,
    request: GenerationRequest | str,
    params: GenerationParams = GenerationParams(),
    sleep: Callable[[float], None] = time.sleep,
) -> GenerationResult:
    """Call ``backend`` with retries on retryable errors.

    Backoff is the server's retry-after when given, else 0.5 * 2**attempt
    seconds. Raises the last error once ``params.retries`` retries are spent.
    """
    if isinstance(request, str):
        request = GenerationRequest(prompt=request)
    t0 = time.perf_counter()
    attempt = 0
    while True:
        attempt += 1
        ts = time.perf_counter()
        try:
            text = backend.complete(request, params)
        except GenerationError as exc:
            log.info("%s attempt %d failed after %.3fs: %s", backend.name, attempt, time.perf_counter() - ts, exc)
            if not exc.retryable or attempt > params.retries:
                raise
            delay = exc.retry_after if isinstance(exc, RateLimited) and exc.retry_after is not None else 0.5 * 2 ** (attempt - 1)
            sleep(delay)
            continue
        latency = time.perf_counter() - t0
        log.info("%s attempt %d ok in %.3fs", backend.name, attempt, latency)
        return GenerationResult(text, attempt, latency)


@dataclass
class BatchOutcome:
    results: list[GenerationResult | None]
    errors: list[GenerationError | None] = field(default_factory=list)


def generate_many(
    backend: GenerationBackend,
    requests: Sequence[GenerationRequest],
    params: GenerationParams = GenerationParams(),
    max_in_flight: int = 4,
) -> BatchOutcome:
    """Generate for every request, isolating failures per request."""

    def one(req: GenerationRequest):
        try:
            return generate(backend, req, params), None
        except GenerationError as exc:
            return None, exc

    if getattr(backend, "concurrent", False) and max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            pairs = list(pool.map(one, requests))
    else:
        pairs = [one(r) for r in requests]
    return BatchOutcome([r for r, _ in pairs], [e for _, e in pairs])
