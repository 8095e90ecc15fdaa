"""Preference scorers: the pluggable judges behind hard-sample rescue.

Three backends share one contract, ``score(request) -> int in [1, 10]``:

* OracleScorer: deterministic ground truth backed by a planted affinity
  table. Used by the synthetic diagnostics and every offline test.
* RemoteScorer: an OpenAI-style chat-completions HTTP endpoint. Requests
  retry with exponential backoff on timeouts and 5xx replies.
* CachedScorer: wraps any backend with a persistent JSONL cache keyed by
  (user, item, preference_version), so revised preferences re-score while
  untouched ones never hit the network twice.

Backend failures surface as ScoringUnavailable; the trainer then treats
the sample as not rescued instead of aborting the run.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

from . import prompts
from .data import ItemProfile
from .errors import (
    HardsiftError,
    ProtocolError,
    ScoreParseError,
    ScoringUnavailable,
    TransportError,
    ValidationError,
)

log = logging.getLogger(__name__)

SCORE_MIN = 1
SCORE_MAX = 10

_SCORE_RE = re.compile(rf"<{prompts.SCORE_TAG}>\s*([+-]?\d+)\s*</{prompts.SCORE_TAG}>")


@dataclass(frozen=True)
class ScoreRequest:
    user: int
    item: int
    preference_text: str
    item_profile: ItemProfile
    preference_version: int = 1

    def __post_init__(self):
        if self.preference_version < 1:
            raise ValidationError("preference_version starts at 1")


@dataclass(frozen=True)
class EndpointConfig:
    """Where and how to reach the remote scorer. The auth token is read
    from the environment variable named by auth_env, never stored here."""

    base_url: str
    model_name: str
    temperature: float = 0.0
    timeout: float = 30.0
    max_retries: int = 3
    auth_env: str = "HARDSIFT_API_KEY"
    backoff_base: float = 0.5
    system_prompt: str = "You judge how well items match user preferences."

    def __post_init__(self):
        if not self.base_url:
            raise ValidationError("base_url must be set")
        if self.timeout <= 0:
            raise ValidationError("timeout must be positive")
        if self.max_retries < 0:
            raise ValidationError("max_retries must be >= 0")
        if self.backoff_base < 0:
            raise ValidationError("backoff_base must be >= 0")


def oracle_score(affinity: float) -> int:
    """Map a [0, 1] affinity to the 1-10 scale: 1 + floor(a * 10), capped
    at 10 so an affinity of exactly 1 still fits."""
    if not (0.0 <= affinity <= 1.0) or not math.isfinite(affinity):
        raise ValidationError(f"affinity must be in [0, 1], got {affinity}")
    return min(SCORE_MIN + int(affinity * 10), SCORE_MAX)


def parse_score_response(text: str) -> int:
    """First integer inside the score tag. Out-of-range values are
    rejected, not clamped; fractional replies fail to match at all."""
    match = _SCORE_RE.search(text)
    if match is None:
        raise ScoreParseError(f"no well-formed score tag in reply: {text!r}")
    value = int(match.group(1))
    if not (SCORE_MIN <= value <= SCORE_MAX):
        raise ScoreParseError(f"score {value} outside [{SCORE_MIN}, {SCORE_MAX}]: {text!r}")
    return value


def parse_tagged_text(text: str, tag: str) -> str:
    """Content of the first <tag>...</tag> block, stripped and non-empty."""
    match = re.search(rf"<{tag}>(.*?)</{tag}>", text, flags=re.DOTALL)
    if match is None:
        raise ScoreParseError(f"no <{tag}> tag in reply: {text!r}")
    content = match.group(1).strip()
    if not content:
        raise ScoreParseError(f"<{tag}> tag is empty in reply: {text!r}")
    return content


def remote_call(endpoint: EndpointConfig, prompt: str) -> str:
    """POST one chat request and return the first choice's message text.

    Timeouts, connection drops and 5xx answers are retried up to
    max_retries times with backoff_base * 2^attempt sleeps (no jitter, so
    runs stay reproducible). 4xx answers and exhausted retries raise
    TransportError; replies that are not the expected JSON shape raise
    ProtocolError.
    """
    body = {
        "model": endpoint.model_name,
        "messages": [
            {"role": "system", "content": endpoint.system_prompt},
            {"role": "user", "content": prompt},
        ],
        "temperature": endpoint.temperature,
    }
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(endpoint.auth_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"

    last_error = "no attempt made"
    for attempt in range(endpoint.max_retries + 1):
        if attempt:
            time.sleep(endpoint.backoff_base * (2 ** (attempt - 1)))
        try:
            response = requests.post(
                endpoint.base_url, json=body, headers=headers, timeout=endpoint.timeout
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            last_error = f"{type(exc).__name__}: {exc}"
            continue
        if response.status_code >= 500:
            last_error = f"HTTP {response.status_code}"
            continue
        if response.status_code >= 400:
            raise TransportError(f"endpoint rejected the request: HTTP {response.status_code}")
        try:
            payload = response.json()
            content = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"reply is not chat-completion JSON: {exc}") from None
        if not isinstance(content, str):
            raise ProtocolError("reply content is not text")
        return content
    raise TransportError(
        f"gave up after {endpoint.max_retries + 1} attempts, last failure: {last_error}"
    )


class OracleScorer:
    """Scores straight off a planted affinity table or callable. Ignores
    the preference text entirely; the affinity already is the truth."""

    def __init__(self, affinity):
        self.affinity = affinity

    def score(self, request: ScoreRequest) -> int:
        if isinstance(self.affinity, np.ndarray):
            value = float(self.affinity[request.user, request.item])
        else:
            value = float(self.affinity(request.user, request.item))
        return oracle_score(value)


class RemoteScorer:
    """Renders the score prompt, calls the endpoint, parses the tag.
    Any endpoint or parse failure becomes ScoringUnavailable."""

    def __init__(self, endpoint: EndpointConfig):
        self.endpoint = endpoint
        self.calls = 0

    def score(self, request: ScoreRequest) -> int:
        prompt = prompts.render_score_prompt(request.preference_text, request.item_profile)
        self.calls += 1
        try:
            reply = remote_call(self.endpoint, prompt)
            return parse_score_response(reply)
        except (TransportError, ProtocolError, ScoreParseError) as exc:
            raise ScoringUnavailable(str(exc)) from exc


class ScoreCacheStore:
    """Append-only JSONL score cache. Each line holds user, item,
    pref_version, score and a timestamp. Corrupted lines are skipped and
    counted, never fatal. Reads are lock-free after load; writes are
    serialized."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._index: dict[tuple[int, int, int], int] = {}
        self.corrupted = 0
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    key = (int(record["user"]), int(record["item"]), int(record["pref_version"]))
                    value = int(record["score"])
                except (ValueError, KeyError, TypeError):
                    self.corrupted += 1
                    continue
                if SCORE_MIN <= value <= SCORE_MAX:
                    self._index[key] = value
                else:
                    self.corrupted += 1
        if self.corrupted:
            log.warning("score cache %s: skipped %d corrupted records", self.path, self.corrupted)

    def __len__(self) -> int:
        return len(self._index)

    def get(self, user: int, item: int, pref_version: int) -> int | None:
        return self._index.get((user, item, pref_version))

    def put(self, user: int, item: int, pref_version: int, score: int) -> None:
        record = {
            "user": user,
            "item": item,
            "pref_version": pref_version,
            "score": score,
            "timestamp": time.time(),
        }
        with self._lock:
            self._index[(user, item, pref_version)] = score
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


class CachedScorer:
    """Cache layer in front of any backend. Hits never touch the backend;
    misses are fetched, stored, then returned. Failed calls are not
    cached, so the next epoch retries them."""

    def __init__(self, inner, store: ScoreCacheStore):
        self.inner = inner
        self.store = store
        self.hits = 0
        self.misses = 0

    def score(self, request: ScoreRequest) -> int:
        cached = self.store.get(request.user, request.item, request.preference_version)
        if cached is not None:
            self.hits += 1
            return cached
        self.misses += 1
        value = self.inner.score(request)
        self.store.put(request.user, request.item, request.preference_version, value)
        return value


def score(backend, request: ScoreRequest) -> int:
    """Contract boundary: whatever the backend, the result must be an
    integer in [1, 10]."""
    value = backend.score(request)
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise HardsiftError(f"scorer returned a non-integer: {value!r}")
    if not (SCORE_MIN <= value <= SCORE_MAX):
        raise HardsiftError(f"scorer returned {value}, outside [{SCORE_MIN}, {SCORE_MAX}]")
    return int(value)


def score_many(backend, requests_list: list[ScoreRequest], parallelism: int = 1) -> list[int | None]:
    """Score a batch, keeping input order. A failed request yields None.
    With parallelism > 1 up to that many requests are in flight at once,
    which only matters for remote backends."""
    if parallelism < 1:
        raise ValidationError("parallelism must be >= 1")

    def one(request: ScoreRequest) -> int | None:
        try:
            return score(backend, request)
        except ScoringUnavailable:
            return None

    if parallelism == 1 or len(requests_list) <= 1:
        return [one(r) for r in requests_list]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, requests_list))
