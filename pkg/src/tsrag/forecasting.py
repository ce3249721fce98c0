"""Retrieval-augmented prompting and forecasting backends.

A forecast task is a query series plus its frequency config. Backends:

* ``http_llm`` retrieves top-K references, renders a prompt and asks a
  chat-completion endpoint for the next ``horizon`` values.
* ``mock`` answers the same prompt with canned or hash-seeded numbers; it
  exercises the whole prompt/parse path without a network.
* ``retrieval_average`` averages the continuations of the top-K references.
* ``naive`` / ``seasonal_naive`` are the usual statistical baselines.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import httpx
import numpy as np

from .core import FrequencyConfig, Series, naive2_forecast, znormalize
from .dtw import DEFAULT_TOP_K, RetrievalResult, retrieve_top_k
from .errors import BackendError, DataError, UnparsableResponse
from .knowledge_base import KnowledgeBase, Segment

log = logging.getLogger(__name__)
audit_log = logging.getLogger("tsrag.audit")

TEMPLATE_VERSION = "1"
API_KEY_ENV = "TSRAG_API_KEY"

SYSTEM_MESSAGE = ("You are a time series forecasting assistant. Reply with the requested "
                  "number of comma-separated values and nothing else.")

_NUMBER = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?")


class BackendKind(str, Enum):
    HTTP_LLM = "http_llm"
    MOCK = "mock"
    RETRIEVAL_AVERAGE = "retrieval_average"
    NAIVE = "naive"
    SEASONAL_NAIVE = "seasonal_naive"

    @classmethod
    def parse(cls, name: str | BackendKind) -> BackendKind:
        if isinstance(name, BackendKind):
            return name
        key = str(name).strip().lower().replace("-", "_")
        if key == "http":
            key = "http_llm"
        try:
            return cls(key)
        except ValueError:
            raise DataError(f"unknown backend {name!r}") from None


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind
    endpoint: str | None = None
    model_name: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    backoff: float = 1.0
    audit: bool = False
    canned: Mapping[str, Sequence[float]] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", BackendKind.parse(self.kind))
        if self.kind is BackendKind.HTTP_LLM and not (self.endpoint and self.model_name):
            raise DataError("http_llm backend needs both an endpoint and a model name")
        if self.max_in_flight < 1:
            raise DataError("max_in_flight must be positive")
        if self.max_retries < 0:
            raise DataError("max_retries must be non-negative")


@dataclass(frozen=True)
class ForecastTask:
    query: Series
    config: FrequencyConfig
    k: int = DEFAULT_TOP_K

    def __post_init__(self):
        if len(self.query) < self.config.input_length:
            raise DataError(f"query {self.query.id!r} has {len(self.query)} points, "
                            f"needs at least {self.config.input_length}")
        if self.k < 0:
            raise DataError("retrieval depth must be non-negative")

    @property
    def window(self) -> np.ndarray:
        return self.query.as_array()[-self.config.input_length:]


@dataclass(frozen=True)
class Prompt:
    text: str
    token_estimate: int
    references: tuple[tuple[int, float], ...]

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Forecast:
    values: tuple[float, ...]
    backend: BackendKind
    prompt_fingerprint: str | None = None
    raw_response: str | None = None
    references: tuple[tuple[int, float], ...] = field(default=())


def _scale(std: float) -> float:
    return std if std > 0 else 1.0


def rescale_continuation(segment: Segment, mean: float, std: float) -> np.ndarray:
    """Map a segment's raw continuation onto a target (mean, std) scale.

    Written as ``c * ratio + shift`` so that a target equal to the segment's
    own scale gives back the continuation unchanged.
    """
    ratio = _scale(std) / _scale(segment.norm_std)
    shift = mean - ratio * segment.norm_mean
    return np.asarray(segment.continuation, dtype=np.float64) * ratio + shift


def _fmt(values) -> str:
    return ", ".join(f"{float(v):.6g}" for v in values)


def build_prompt(task: ForecastTask, results: Sequence[RetrievalResult],
                 kb: KnowledgeBase | None) -> Prompt:
    cfg = task.config
    window = task.window
    _, q_mean, q_std = znormalize(window)
    refs = list(results[:task.k]) if task.k else []
    parts = [
        f"Task: forecast the next {cfg.horizon} observations of a "
        f"{cfg.frequency.value.lower()} time series.",
    ]
    if refs:
        if kb is None:
            raise DataError("retrieval results given without a knowledge base")
        parts.append(f"The {len(refs)} reference sequences below come from historical data and "
                     f"have a similar shape to the query. They are shown on the query's scale; "
                     f"'then' lists what followed each one.")
        for res in refs:
            seg = kb.get(res.kb_id)
            ctx = np.asarray(seg.context) * _scale(q_std) + q_mean
            block = [f"Reference {res.rank} (DTW similarity {res.similarity:.6g}):",
                     f"history: {_fmt(ctx)}"]
            if seg.continuation:
                block.append(f"then: {_fmt(rescale_continuation(seg, q_mean, q_std))}")
            parts.append("\n".join(block))
    parts.append(f"Query (last {cfg.input_length} observations):\n{_fmt(window)}")
    parts.append(f"Answer with exactly {cfg.horizon} comma-separated numbers and nothing else.")
    text = "\n\n".join(parts) + "\n"
    return Prompt(text=text, token_estimate=math.ceil(len(text) / 4),
                  references=tuple((r.kb_id, r.similarity) for r in refs))


def parse_response(text: str, horizon: int) -> list[float]:
    """First ``horizon`` numbers from the first line holding enough of them,
    falling back to the whole text."""
    for line in text.splitlines():
        found = _NUMBER.findall(line)
        if len(found) >= horizon:
            break
    else:
        found = _NUMBER.findall(text)
    if len(found) < horizon:
        raise UnparsableResponse(text, horizon)
    values = [float(v) for v in found[:horizon]]
    if not all(math.isfinite(v) for v in values):
        raise UnparsableResponse(text, horizon)
    return values


class ChatClient:
    """Minimal chat-completion client: retries with exponential backoff and a
    hard cap on simultaneous requests."""

    def __init__(self, config: BackendConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._client = httpx.Client(timeout=config.timeout, transport=transport)
        self._api_key = os.environ.get(API_KEY_ENV)

    def close(self):
        self._client.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        return headers

    def _redact(self, text: str) -> str:
        return text.replace(self._api_key, "***") if self._api_key else text

    def complete(self, user_message: str) -> str:
        cfg = self.config
        body = {
            "model": cfg.model_name,
            "messages": [{"role": "system", "content": SYSTEM_MESSAGE},
                         {"role": "user", "content": user_message}],
            "temperature": 0,
        }
        last_error: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                time.sleep(cfg.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    if cfg.audit:
                        audit_log.info("request %s %s", cfg.endpoint, self._redact(str(body)))
                    resp = self._client.post(cfg.endpoint, json=body, headers=self._headers())
                if cfg.audit:
                    audit_log.info("response %d %s", resp.status_code, self._redact(resp.text))
            except httpx.HTTPError as exc:
                last_error = exc
                log.warning("request to %s failed (attempt %d): %s", cfg.endpoint, attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = BackendError(f"HTTP {resp.status_code}")
                log.warning("endpoint returned %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"endpoint rejected request: HTTP {resp.status_code}: "
                                   f"{self._redact(resp.text[:500])}")
            return _extract_text(resp)
        raise BackendError(f"endpoint {cfg.endpoint} unreachable after "
                           f"{cfg.max_retries + 1} attempts: {last_error}")


def _extract_text(resp: httpx.Response) -> str:
    try:
        doc = resp.json()
        content = doc["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise BackendError(f"unexpected response body: {resp.text[:500]!r}") from None
    if not isinstance(content, str):
        raise BackendError("response content is not text")
    return content


def _mock_reply(prompt: Prompt, task: ForecastTask, canned) -> str:
    if canned and prompt.fingerprint in canned:
        values = canned[prompt.fingerprint]
    else:
        window = task.window
        rng = np.random.default_rng(int(prompt.fingerprint[:16], 16))
        spread = float(np.std(window)) or 1.0
        values = window[-1] + rng.normal(0.0, 0.1 * spread, size=task.config.horizon)
    return ", ".join(repr(float(v)) for v in values)


class Forecaster:
    """Binds a backend config (and optional KB) and produces forecasts.

    Safe to share across threads; the HTTP client is created lazily and reused.
    """

    def __init__(self, backend: BackendConfig, kb: KnowledgeBase | None = None,
                 band: int | None = None, transport: httpx.BaseTransport | None = None):
        self.backend = backend
        self.kb = kb
        self.band = band
        self._transport = transport
        self._client: ChatClient | None = None
        self._lock = threading.Lock()

    def close(self):
        if self._client is not None:
            self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _chat(self) -> ChatClient:
        with self._lock:
            if self._client is None:
                self._client = ChatClient(self.backend, self._transport)
            return self._client

    def _need_kb(self) -> KnowledgeBase:
        if self.kb is None or not len(self.kb):
            raise DataError(f"{self.backend.kind.value} backend needs a non-empty knowledge base")
        return self.kb

    def retrieve(self, task: ForecastTask, require_continuation: bool = False):
        if task.k == 0:
            return []
        kb = self._need_kb()
        return retrieve_top_k(task.window, kb, task.k, band=self.band,
                              require_continuation=require_continuation)

    def prompt(self, task: ForecastTask) -> Prompt:
        # mock runs without a KB when none is given; http_llm insists on one for k > 0
        wants_refs = task.k > 0 and (self.kb is not None or self.backend.kind is BackendKind.HTTP_LLM)
        results = self.retrieve(task) if wants_refs else []
        return build_prompt(task, results, self.kb)

    def forecast(self, task: ForecastTask) -> Forecast:
        kind = self.backend.kind
        horizon = task.config.horizon
        if kind in (BackendKind.HTTP_LLM, BackendKind.MOCK):
            prompt = self.prompt(task)
            if kind is BackendKind.HTTP_LLM:
                raw = self._chat().complete(prompt.text)
            else:
                raw = _mock_reply(prompt, task, self.backend.canned)
            return Forecast(values=tuple(parse_response(raw, horizon)), backend=kind,
                            prompt_fingerprint=prompt.fingerprint, raw_response=raw,
                            references=prompt.references)
        if kind is BackendKind.RETRIEVAL_AVERAGE:
            return self._retrieval_average(task)
        history = task.query.values
        if kind is BackendKind.NAIVE:
            values = naive2_forecast(history, horizon, 1)
        else:
            values = naive2_forecast(history, horizon, task.config.seasonality)
        return Forecast(values=tuple(values), backend=kind)

    def _retrieval_average(self, task: ForecastTask) -> Forecast:
        kb = self._need_kb()
        horizon = task.config.horizon
        if kb.horizon != horizon:
            raise DataError(f"knowledge base horizon {kb.horizon} differs from task horizon {horizon}")
        results = []
        if task.k and any(s.continuation for s in kb.entries):
            results = self.retrieve(task, require_continuation=True)
        if not results:
            log.info("no continuation-bearing references for %s; using naive forecast", task.query.id)
            values = naive2_forecast(task.query.values, horizon, 1)
            return Forecast(values=tuple(values), backend=BackendKind.RETRIEVAL_AVERAGE)
        _, q_mean, q_std = znormalize(task.window)
        stacked = np.array([rescale_continuation(kb.get(r.kb_id), q_mean, q_std) for r in results])
        values = stacked.mean(axis=0)
        return Forecast(values=tuple(float(v) for v in values),
                        backend=BackendKind.RETRIEVAL_AVERAGE,
                        references=tuple((r.kb_id, r.similarity) for r in results))


def forecast(task: ForecastTask, kb: KnowledgeBase | None, backend: BackendConfig,
             band: int | None = None) -> Forecast:
    with Forecaster(backend, kb, band=band) as f:
        return f.forecast(task)
