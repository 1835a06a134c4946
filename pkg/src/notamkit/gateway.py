"""LLM backends behind one ``complete`` contract: live HTTP, scripted mock, and cassette replay."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import httpx

from .errors import BackendUnavailable, GatewayError, IoError, ReplayMiss, ScriptMiss, describe

log = logging.getLogger(__name__)

ENV_API_KEY = "NOTAMKIT_API_KEY"
ENV_API_URL = "NOTAMKIT_API_URL"
ENV_MODEL = "NOTAMKIT_MODEL"
DEFAULT_MODEL = "gpt-4.1-nano"


def _digest(payload) -> str:
    blob = json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PromptRequest:
    system_text: str
    user_text: str
    temperature: float = 0.0
    max_tokens: int = 1024
    model_id: str = DEFAULT_MODEL
    # distinguishes repeated samples at one temperature; 0 leaves the tag untouched
    sample_index: int = 0
    request_tag: str = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        payload = [self.system_text, self.user_text, float(self.temperature), self.model_id]
        if self.sample_index:
            payload.append(self.sample_index)
        object.__setattr__(self, "request_tag", _digest(payload))

    @property
    def deterministic(self) -> bool:
        return self.temperature == 0.0

    @property
    def request_digest(self) -> str:
        return _digest(
            [self.system_text, self.user_text, float(self.temperature), self.model_id, self.max_tokens, self.sample_index]
        )


@dataclass(frozen=True)
class Completion:
    text: str
    backend_id: str
    latency_ms: float = 0.0
    from_cache: bool = False
    error: Optional[str] = None
    exception: Optional[BaseException] = field(default=None, compare=False, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    def raise_for_error(self) -> "Completion":
        if self.exception is not None:
            raise self.exception
        if self.error is not None:
            raise GatewayError(self.error)
        return self


class Backend:
    """Shared batch logic. Subclasses implement :meth:`complete`."""

    backend_id = "backend"

    def complete(self, req: PromptRequest) -> Completion:
        raise NotImplementedError

    def _complete_safely(self, req: PromptRequest) -> Completion:
        try:
            return self.complete(req)
        except GatewayError as exc:
            return Completion(text="", backend_id=self.backend_id, error=describe(exc), exception=exc)

    def complete_batch(self, reqs: list[PromptRequest], max_in_flight: int = 1) -> list[Completion]:
        """Complete every request, keeping input order. Failures come back in place."""
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if not reqs:
            return []
        if max_in_flight == 1 or len(reqs) == 1:
            return [self._complete_safely(r) for r in reqs]
        with ThreadPoolExecutor(max_workers=min(max_in_flight, len(reqs))) as pool:
            return list(pool.map(self._complete_safely, reqs))


# -- mock --------------------------------------------------------------------

Responder = Union[str, Callable[[PromptRequest], Optional[str]]]


@dataclass
class MockRule:
    """Answer ``response`` when every ``contains`` string (and none of ``not_contains``) is in the prompt."""

    response: Responder
    contains: tuple[str, ...] = ()
    not_contains: tuple[str, ...] = ()
    regex: Optional[str] = None

    def matches(self, req: PromptRequest) -> bool:
        text = req.system_text + "\n" + req.user_text
        if any(s not in text for s in self.contains):
            return False
        if any(s in text for s in self.not_contains):
            return False
        if self.regex and not re.search(self.regex, text):
            return False
        return True


def _as_tuple(value) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return (value,)
    return tuple(value)


class MockBackend(Backend):
    """Scripted backend: exact request tags first, then rules in order, then ``default``."""

    backend_id = "mock"

    def __init__(self, responses: Optional[dict[str, str]] = None, rules=(), default: Optional[Responder] = None):
        self.responses = dict(responses or {})
        self.rules = [r if isinstance(r, MockRule) else MockRule(**r) for r in rules]
        self.default = default
        self.calls: list[PromptRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> "MockBackend":
        """Script file: ``{"responses": {tag: text}, "rules": [{contains, not_contains, regex, response}], "default": text}``."""
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoError(f"cannot read mock script {path}: {exc}") from exc
        rules = [
            MockRule(
                response=r["response"],
                contains=_as_tuple(r.get("contains")),
                not_contains=_as_tuple(r.get("not_contains")),
                regex=r.get("regex"),
            )
            for r in obj.get("rules", ())
        ]
        return cls(obj.get("responses"), rules, obj.get("default"))

    def add_rule(self, response: Responder, contains=(), not_contains=(), regex=None) -> "MockBackend":
        self.rules.append(MockRule(response, _as_tuple(contains), _as_tuple(not_contains), regex))
        return self

    def _answer(self, req: PromptRequest) -> Optional[str]:
        if req.request_tag in self.responses:
            return self.responses[req.request_tag]
        for rule in self.rules:
            if rule.matches(req):
                resp = rule.response
                return resp(req) if callable(resp) else resp
        if self.default is not None:
            return self.default(req) if callable(self.default) else self.default
        return None

    def complete(self, req: PromptRequest) -> Completion:
        with self._lock:
            self.calls.append(req)
            text = self._answer(req)
        if text is None:
            raise ScriptMiss(f"no scripted response for request {req.request_tag[:12]}")
        return Completion(text=text, backend_id=self.backend_id, from_cache=False)


# -- cassettes ---------------------------------------------------------------

def cassette_entry(req: PromptRequest, text: str) -> dict:
    return {"tag": req.request_tag, "request_digest": req.request_digest, "response_text": text, "model_id": req.model_id}


def read_cassette(path) -> dict[str, dict]:
    entries: dict[str, dict] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read cassette {path}: {exc}") from exc
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            tag = entry["tag"]
            entry["response_text"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise IoError(f"{path}:{no}: malformed cassette line ({exc})") from exc
        entries.setdefault(tag, entry)
    return entries


class ReplayBackend(Backend):
    backend_id = "replay"

    def __init__(self, cassette_path):
        self.path = Path(cassette_path)
        self.entries = read_cassette(self.path)

    def complete(self, req: PromptRequest) -> Completion:
        entry = self.entries.get(req.request_tag)
        if entry is None:
            raise ReplayMiss(f"request {req.request_tag[:12]} not in cassette {self.path}")
        return Completion(text=entry["response_text"], backend_id=self.backend_id, from_cache=True)


class RecordingBackend(Backend):
    """Wrap another backend and append each successful exchange to a cassette."""

    def __init__(self, inner: Backend, cassette_path):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.path = Path(cassette_path)
        self._seen: set[str] = set()
        self._lock = threading.Lock()
        try:
            self._fh = open(self.path, "a", encoding="utf-8", newline="\n")
        except OSError as exc:
            raise IoError(f"cannot record to {self.path}: {exc}") from exc

    def complete(self, req: PromptRequest) -> Completion:
        comp = self.inner.complete(req)
        with self._lock:
            if req.request_tag not in self._seen:
                self._seen.add(req.request_tag)
                self._fh.write(json.dumps(cassette_entry(req, comp.text), ensure_ascii=False) + "\n")
                self._fh.flush()
        return comp

    def close(self) -> None:
        with self._lock:
            self._fh.close()
        close = getattr(self.inner, "close", None)
        if close:
            close()


# -- live --------------------------------------------------------------------

RETRY_STATUS = {429, 500, 502, 503, 504}


class LiveBackend(Backend):
    """Chat-completion client for any endpoint speaking the common ``messages`` wire shape."""

    backend_id = "live"

    def __init__(
        self,
        url: str,
        api_key: Optional[str] = None,
        *,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff_s: float = 1.0,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not url:
            raise BackendUnavailable(f"no API URL configured (set {ENV_API_URL})")
        self.url = url
        self.api_key = api_key
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self._recording = None
        self._record_lock = threading.Lock()

    @classmethod
    def from_env(cls, **kwargs) -> "LiveBackend":
        return cls(os.environ.get(ENV_API_URL, ""), os.environ.get(ENV_API_KEY), **kwargs)

    def close(self) -> None:
        self.stop_recording()
        self._client.close()

    def record_session(self, path) -> None:
        """Append every successful exchange to a cassette until :meth:`stop_recording`."""
        try:
            fh = open(path, "a", encoding="utf-8", newline="\n")
        except OSError as exc:
            raise IoError(f"cannot record to {path}: {exc}") from exc
        with self._record_lock:
            if self._recording is not None:
                self._recording.close()
            self._recording = fh

    def stop_recording(self) -> None:
        with self._record_lock:
            if self._recording is not None:
                self._recording.close()
                self._recording = None

    def _post(self, req: PromptRequest) -> str:
        body = {
            "model": req.model_id,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": req.user_text},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        last = "no attempt made"
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(self.backoff_s * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.url, json=body)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                log.warning("attempt %d/%d failed: %s", attempt + 1, self.max_attempts, last)
                continue
            if resp.status_code in RETRY_STATUS:
                last = f"HTTP {resp.status_code}"
                log.warning("attempt %d/%d failed: %s", attempt + 1, self.max_attempts, last)
                continue
            if resp.status_code >= 400:
                raise BackendUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendUnavailable(f"unexpected response body: {exc}") from exc
        raise BackendUnavailable(f"gave up after {self.max_attempts} attempts ({last})")

    def complete(self, req: PromptRequest) -> Completion:
        start = time.perf_counter()
        text = self._post(req)
        latency = (time.perf_counter() - start) * 1000.0
        with self._record_lock:
            if self._recording is not None:
                self._recording.write(json.dumps(cassette_entry(req, text), ensure_ascii=False) + "\n")
                self._recording.flush()
        return Completion(text=text, backend_id=self.backend_id, latency_ms=latency)


def completion_to_json(c: Completion) -> dict:
    return {
        "text": c.text,
        "backend_id": c.backend_id,
        "latency_ms": c.latency_ms,
        "from_cache": c.from_cache,
        "error": c.error,
    }
