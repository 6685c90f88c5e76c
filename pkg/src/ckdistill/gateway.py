"""Client layer for a chat-completions-style endpoint.

One live implementation (:class:`HttpGateway`) plus deterministic stand-ins
used by the pipeline and the test suite: a scripted mock, a seeded synthetic
generator, and transcript record/replay. All of them share the same
``complete`` / ``complete_batch`` surface, so the distiller never knows
which one it is talking to.
"""
from __future__ import annotations

import hashlib
import json
import os
import random
import re
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .errors import ConfigError, CostCapError, RequestError, TransportError
from .schema import TemplateSet

FINISH_REASONS = ("complete", "truncated", "refused")


@dataclass(frozen=True)
class CompletionRequest:
    model_id: str
    messages: tuple  # ((role, text), ...)
    temperature: float
    max_output_tokens: int = 1024

    def __post_init__(self):
        if not self.messages:
            raise ConfigError("completion request needs at least one message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ConfigError("temperature must be in [0, 2]")
        object.__setattr__(self, "messages", tuple((r, t) for r, t in self.messages))

    @classmethod
    def user(cls, model_id: str, prompt: str, temperature: float, **kw) -> "CompletionRequest":
        return cls(model_id, (("user", prompt),), temperature, **kw)

    def body(self) -> dict:
        """Chat-completions wire shape."""
        return {
            "model": self.model_id,
            "messages": [{"role": r, "content": t} for r, t in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
        }

    def digest(self) -> str:
        blob = json.dumps(self.body(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @property
    def text(self) -> str:
        return "\n".join(t for _, t in self.messages)


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    finish_reason: str = "complete"
    usage: tuple = (0, 0)  # (input_tokens, output_tokens)

    def __post_init__(self):
        if self.finish_reason not in FINISH_REASONS:
            raise ConfigError(f"bad finish reason: {self.finish_reason!r}")
        if not self.text and self.finish_reason != "refused":
            raise ConfigError("empty completion text requires finish_reason=refused")


@dataclass(frozen=True)
class GatewayConfig:
    endpoint_url: str = ""
    api_key_env_name: str = "OPENAI_API_KEY"
    model_id: str = "chat-model"
    max_concurrent: int = 4
    requests_per_minute: int = 60
    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_cap: float = 30.0
    request_cap: int = 1000
    timeout: float = 60.0

    def __post_init__(self):
        for name in ("max_concurrent", "requests_per_minute"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_retries < 0 or self.request_cap < 1:
            raise ConfigError("max_retries must be >= 0 and request_cap >= 1")
        if self.backoff_base <= 0 or self.backoff_cap < self.backoff_base:
            raise ConfigError("backoff bounds must be positive and ordered")


class SystemClock:
    def monotonic(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock:
    """Manual clock for tests: sleeping advances time instead of waiting."""

    def __init__(self, start: float = 0.0):
        self._now = start
        self._lock = threading.Lock()

    def monotonic(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, seconds: float) -> None:
        with self._lock:
            self._now += max(0.0, seconds)

    def advance(self, seconds: float) -> None:
        self.sleep(seconds)


class RateLimiter:
    """Sliding-window limiter: at most ``limit`` grants inside any window.

    A plain token bucket with burst capacity can emit up to twice the
    nominal rate inside one window, so the window log is kept explicitly.
    """

    def __init__(self, limit: int, window: float = 60.0, clock=None):
        if limit < 1:
            raise ConfigError("rate limit must be >= 1")
        self.limit = limit
        self.window = window
        self.clock = clock or SystemClock()
        self._grants = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a grant is available; returns the grant timestamp."""
        while True:
            with self._lock:
                now = self.clock.monotonic()
                while self._grants and now - self._grants[0] >= self.window:
                    self._grants.popleft()
                if len(self._grants) < self.limit:
                    self._grants.append(now)
                    return now
                wait = self._grants[0] + self.window - now
            self.clock.sleep(wait)


class TransientFailure(Exception):
    """Internal: a retryable condition (timeout, 429, 5xx)."""

    def __init__(self, status):
        super().__init__(f"transient failure: {status}")
        self.status = status


@dataclass
class BatchResult:
    index: int
    response: Optional[CompletionResponse] = None
    error: Optional[Exception] = None

    @property
    def ok(self) -> bool:
        return self.response is not None


class GatewayBase:
    """Shared batch machinery; subclasses provide ``complete``."""

    model_id: str = "chat-model"
    max_concurrent: int = 4

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        raise NotImplementedError

    def complete_batch(self, reqs: Sequence[CompletionRequest]) -> list:
        """Run requests with at most ``max_concurrent`` in flight.

        Results come back ordered by input index; one failed request never
        aborts the rest of the batch.
        """
        if not reqs:
            return []
        results = [BatchResult(i) for i in range(len(reqs))]

        def run(i: int) -> None:
            try:
                results[i].response = self.complete(reqs[i])
            except Exception as e:  # reported per item, caller decides
                results[i].error = e

        workers = max(1, min(self.max_concurrent, len(reqs)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(len(reqs))))
        return results


class RetryingGateway(GatewayBase):
    """Adds rate limiting, bounded retries with jittered exponential
    backoff, and the per-run request cap on top of a raw ``_send``."""

    def __init__(
        self,
        *,
        model_id: str = "chat-model",
        max_concurrent: int = 4,
        requests_per_minute: int = 60,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        backoff_cap: float = 30.0,
        request_cap: int = 1_000_000,
        clock=None,
        jitter_seed: int | None = None,
    ):
        self.model_id = model_id
        self.max_concurrent = max_concurrent
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.request_cap = request_cap
        self.clock = clock or SystemClock()
        self.limiter = RateLimiter(requests_per_minute, clock=self.clock)
        self._jitter = random.Random(jitter_seed)
        self._lock = threading.Lock()
        self.attempts_total = 0
        self.issue_times: list = []

    @classmethod
    def from_config(cls, cfg: GatewayConfig, **kw) -> "RetryingGateway":
        return cls(
            model_id=cfg.model_id,
            max_concurrent=cfg.max_concurrent,
            requests_per_minute=cfg.requests_per_minute,
            max_retries=cfg.max_retries,
            backoff_base=cfg.backoff_base,
            backoff_cap=cfg.backoff_cap,
            request_cap=cfg.request_cap,
            **kw,
        )

    def _send(self, req: CompletionRequest) -> CompletionResponse:
        raise NotImplementedError

    def _record_attempt(self, when: float) -> None:
        with self._lock:
            if self.attempts_total >= self.request_cap:
                raise CostCapError(
                    f"request cap of {self.request_cap} reached for this run"
                )
            self.attempts_total += 1
            self.issue_times.append(when)

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        last: TransientFailure | None = None
        for attempt in range(self.max_retries + 1):
            granted = self.limiter.acquire()
            self._record_attempt(granted)
            try:
                return self._send(req)
            except TransientFailure as e:
                last = e
                if attempt < self.max_retries:
                    delay = min(self.backoff_cap, self.backoff_base * (2**attempt))
                    self.clock.sleep(delay * (0.5 + self._jitter.random()))
        raise TransportError(
            f"retries exhausted after {self.max_retries + 1} attempts "
            f"(last: {last.status})",
            last_status=last.status if last else None,
        )


class ScriptedGateway(RetryingGateway):
    """Test double driven by an outcome queue or a responder callable.

    Outcomes may be ``CompletionResponse``, plain text, an exception to
    raise, or an int HTTP status (429/5xx become transient failures, other
    4xx request errors). Instruments in-flight concurrency for assertions.
    """

    def __init__(self, script=None, *, responder: Callable | None = None, **kw):
        kw.setdefault("model_id", "mock-model")
        kw.setdefault("requests_per_minute", 1_000_000)
        kw.setdefault("max_retries", 0)
        kw.setdefault("backoff_base", 1e-6)
        kw.setdefault("backoff_cap", 1e-6)
        super().__init__(**kw)
        self._script = deque(script or [])
        self._responder = responder
        self._mon = threading.Lock()
        self._in_flight = 0
        self.in_flight_peak = 0
        self.calls: list = []

    def _next_outcome(self, req: CompletionRequest):
        with self._mon:
            self.calls.append(req)
            if self._responder is not None:
                return self._responder(req, len(self.calls) - 1)
            if not self._script:
                raise AssertionError("scripted gateway ran out of outcomes")
            return self._script.popleft()

    def _send(self, req: CompletionRequest) -> CompletionResponse:
        with self._mon:
            self._in_flight += 1
            self.in_flight_peak = max(self.in_flight_peak, self._in_flight)
        try:
            outcome = self._next_outcome(req)
            if isinstance(outcome, Exception):
                raise outcome
            if isinstance(outcome, int):
                if outcome == 429 or outcome >= 500:
                    raise TransientFailure(outcome)
                raise RequestError(f"rejected with status {outcome}", status=outcome)
            if isinstance(outcome, CompletionResponse):
                return outcome
            return CompletionResponse(text=str(outcome))
        finally:
            with self._mon:
                self._in_flight -= 1


@dataclass(frozen=True)
class SyntheticProfile:
    """How the synthetic gateway recognizes prompts and phrases replies."""

    judge_marker: str
    count_pattern: str
    item_template: str
    yes_text: str = "是"
    no_text: str = "否"
    invalid_rate: float = 0.3
    default_count: int = 10

    @classmethod
    def for_language(cls, lang: str) -> "SyntheticProfile":
        if lang == "zh":
            return cls(
                judge_marker="是否合理",
                count_pattern=r"(\d+)个",
                item_template="PersonX处理事项{token}",
            )
        return cls(
            judge_marker="reasonable",
            count_pattern=r"(?:Write|Give)\s+(\d+)",
            item_template="PersonX handles task {token}",
            yes_text="yes",
            no_text="no",
        )

    @classmethod
    def for_templates(cls, templates: TemplateSet) -> "SyntheticProfile":
        return cls.for_language(templates.language)


class SyntheticGateway(GatewayBase):
    """Deterministic fake LLM: replies are a pure function of the request
    content and the seed, so identical request streams replay identically
    regardless of scheduling order."""

    def __init__(
        self,
        seed: int = 0,
        profile: SyntheticProfile | None = None,
        *,
        model_id: str = "synthetic-model",
        max_concurrent: int = 4,
    ):
        self.seed = seed
        self.profile = profile or SyntheticProfile.for_language("zh")
        self.model_id = model_id
        self.max_concurrent = max_concurrent

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        token = hashlib.sha256(
            f"{self.seed}|{req.digest()}".encode("utf-8")
        ).hexdigest()
        rng = random.Random(token)
        prompt = req.text
        if self.profile.judge_marker in prompt:
            verdict = (
                self.profile.no_text
                if rng.random() < self.profile.invalid_rate
                else self.profile.yes_text
            )
            return CompletionResponse(text=verdict)
        m = None
        for m in re.finditer(self.profile.count_pattern, prompt):
            pass  # keep the last match: the request count follows the examples
        n = int(m.group(1)) if m else self.profile.default_count
        lines = [
            f"{i}. " + self.profile.item_template.format(token=f"{token[:10]}{i}")
            for i in range(1, n + 1)
        ]
        return CompletionResponse(text="\n".join(lines))


class HttpGateway(RetryingGateway):
    """POSTs chat-completions bodies to a configured endpoint with a bearer
    token taken from the environment. Never used by the test suite."""

    def __init__(self, cfg: GatewayConfig, clock=None, jitter_seed: int | None = None):
        super().__init__(
            model_id=cfg.model_id,
            max_concurrent=cfg.max_concurrent,
            requests_per_minute=cfg.requests_per_minute,
            max_retries=cfg.max_retries,
            backoff_base=cfg.backoff_base,
            backoff_cap=cfg.backoff_cap,
            request_cap=cfg.request_cap,
            clock=clock,
            jitter_seed=jitter_seed,
        )
        if not cfg.endpoint_url:
            raise ConfigError("http gateway needs endpoint_url")
        key = os.environ.get(cfg.api_key_env_name, "")
        if not key:
            raise ConfigError(
                f"credential not found in environment variable {cfg.api_key_env_name}"
            )
        self._url = cfg.endpoint_url
        self._timeout = cfg.timeout
        self._headers = {
            "Authorization": f"Bearer {key}",
            "Content-Type": "application/json",
        }
        import httpx  # deferred: offline modes never need it

        self._client = httpx.Client(timeout=cfg.timeout)
        self._httpx = httpx

    def _send(self, req: CompletionRequest) -> CompletionResponse:
        try:
            resp = self._client.post(self._url, headers=self._headers, json=req.body())
        except self._httpx.TimeoutException:
            raise TransientFailure("timeout") from None
        except self._httpx.TransportError as e:
            raise TransientFailure(f"transport: {e}") from None
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientFailure(resp.status_code)
        if resp.status_code >= 400:
            raise RequestError(
                f"endpoint rejected request: {resp.status_code} {resp.text[:200]}",
                status=resp.status_code,
            )
        payload = resp.json()
        choice = payload["choices"][0]
        finish = {"stop": "complete", "length": "truncated"}.get(
            choice.get("finish_reason", "stop"), "refused"
        )
        usage = payload.get("usage", {})
        return CompletionResponse(
            text=choice["message"]["content"] or "",
            finish_reason=finish,
            usage=(usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)),
        )

    def close(self) -> None:
        self._client.close()


# --- transcript record / replay ------------------------------------------------


class RecordingGateway(GatewayBase):
    """Wraps another gateway and appends (request, response) pairs to a
    line-delimited transcript file for later offline replay."""

    def __init__(self, inner: GatewayBase, path: str | Path):
        self.inner = inner
        self.model_id = inner.model_id
        self.max_concurrent = inner.max_concurrent
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._fh = self.path.open("a", encoding="utf-8")

    def _record(self, req: CompletionRequest, resp: CompletionResponse) -> None:
        entry = {
            "digest": req.digest(),
            "request": req.body(),
            "response": {
                "text": resp.text,
                "finish_reason": resp.finish_reason,
                "usage": list(resp.usage),
            },
        }
        with self._lock:
            self._fh.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")
            self._fh.flush()

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        resp = self.inner.complete(req)
        self._record(req, resp)
        return resp

    def complete_batch(self, reqs: Sequence[CompletionRequest]) -> list:
        results = self.inner.complete_batch(reqs)
        for r in results:  # written in input order for stable transcripts
            if r.ok:
                self._record(reqs[r.index], r.response)
        return results

    def close(self) -> None:
        self._fh.close()


class ReplayGateway(GatewayBase):
    """Serves responses from a transcript, keyed by request digest.

    Duplicate requests are served FIFO, so a replayed run is independent of
    scheduling order as long as the request stream itself is deterministic.
    """

    def __init__(self, path: str | Path, *, model_id: str = "replay-model", max_concurrent: int = 4):
        self.path = Path(path)
        self.model_id = model_id
        self.max_concurrent = max_concurrent
        if not self.path.is_file():
            raise ConfigError(f"transcript not found: {self.path}")
        self._by_digest: dict = {}
        self._lock = threading.Lock()
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            resp = entry["response"]
            self._by_digest.setdefault(entry["digest"], deque()).append(
                CompletionResponse(
                    text=resp["text"],
                    finish_reason=resp.get("finish_reason", "complete"),
                    usage=tuple(resp.get("usage", (0, 0))),
                )
            )

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        with self._lock:
            queue = self._by_digest.get(req.digest())
            if not queue:
                raise TransportError(
                    "no recorded response for request; transcript is stale",
                    last_status="replay-miss",
                )
            return queue.popleft()
