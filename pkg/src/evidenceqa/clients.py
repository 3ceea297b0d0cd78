"""Pluggable clients for the four hosted-model roles.

Roles: chunk summarizer, object detector, query-text encoder, and
answerer. Each role has an HTTP implementation speaking a
provider-neutral chat/detect/embed protocol and a deterministic mock
that replays fixture responses keyed by request fingerprint. Mock mode
performs no network operations at all.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import requests

from .errors import (
    ClientError,
    InvalidArgumentError,
    ParseError,
    ProtocolError,
    StrictMockError,
)
from .frames import BBox, FrameRef

logger = logging.getLogger(__name__)

ENV_API_BASE = "EVIDENCE_API_BASE"
ENV_API_KEY = "EVIDENCE_API_KEY"

DEFAULT_TIMEOUT_S = 60.0
DEFAULT_MAX_RETRIES = 2
DEFAULT_MAX_IN_FLIGHT = 4
DEFAULT_BACKOFF_S = 0.5

CHAT_PATH = "/chat"
DETECT_PATH = "/detect"
EMBED_PATH = "/embed"


@dataclass(frozen=True)
class ClientConfig:
    """Connection settings for one client; mock and live are exclusive."""

    endpoint: str | None = None
    model: str = "default"
    api_key_env: str = ENV_API_KEY
    timeout_s: float = DEFAULT_TIMEOUT_S
    max_retries: int = DEFAULT_MAX_RETRIES
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT
    fixture_path: str | None = None

    def __post_init__(self):
        if self.endpoint and self.fixture_path:
            raise InvalidArgumentError(
                "endpoint and fixture_path are mutually exclusive"
            )
        if self.max_retries < 0:
            raise InvalidArgumentError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise InvalidArgumentError("max_in_flight must be >= 1")


@dataclass
class Detection:
    """One detector output: normalized box, confidence, visual embedding."""

    box: BBox
    score: float
    embedding: np.ndarray


# ---------------------------------------------------------------------------
# Request fingerprints
# ---------------------------------------------------------------------------


def canonical_request(fields: dict) -> str:
    """Canonical JSON used for fingerprinting; key order never matters."""
    return json.dumps(fields, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False)


def request_fingerprint(fields: dict) -> str:
    return hashlib.sha256(canonical_request(fields).encode("utf-8")).hexdigest()


def _frame_fields(frames: Sequence[FrameRef]) -> list[dict]:
    return [f.fingerprint_fields() for f in frames]


def chat_fingerprint(model: str, instruction: str,
                     frames: Sequence[FrameRef]) -> str:
    return request_fingerprint({
        "op": "chat",
        "model": model,
        "instruction": instruction,
        "frames": _frame_fields(frames),
    })


def detect_fingerprint(model: str, frame: FrameRef) -> str:
    return request_fingerprint({
        "op": "detect",
        "model": model,
        "image": frame.fingerprint_fields(),
    })


def embed_fingerprint(model: str, text: str) -> str:
    return request_fingerprint({"op": "embed", "model": model, "text": text})


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


class FixtureStore:
    """Ordered (fingerprint, response) pairs replayed by mock clients.

    Fingerprints must be unique. Lookups mark entries consumed so tests
    can assert at teardown that no scripted reply went unused.
    """

    def __init__(self, entries: Sequence[tuple[str, object]] = ()):
        self._responses: dict[str, object] = {}
        for fingerprint, response in entries:
            if fingerprint in self._responses:
                raise InvalidArgumentError(
                    f"duplicate fixture fingerprint {fingerprint}"
                )
            self._responses[fingerprint] = response
        self._consumed: set[str] = set()

    @classmethod
    def load(cls, path: str | Path) -> "FixtureStore":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"fixture file not found: {path}")
        entries = []
        with path.open(encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(
                        f"malformed fixture line {lineno}: {exc}", line=lineno
                    ) from exc
                if not isinstance(obj, dict) or "fingerprint" not in obj \
                        or "response" not in obj:
                    raise ParseError(
                        f"fixture line {lineno} must carry fingerprint and response",
                        line=lineno,
                    )
                entries.append((obj["fingerprint"], obj["response"]))
        return cls(entries)

    @staticmethod
    def dump(entries: Sequence[tuple[str, object]], path: str | Path) -> None:
        lines = [
            json.dumps({"fingerprint": fp, "response": resp},
                       separators=(",", ":"), ensure_ascii=False)
            for fp, resp in entries
        ]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""),
                              encoding="utf-8")

    def lookup(self, fingerprint: str) -> object:
        if fingerprint not in self._responses:
            raise StrictMockError(
                f"no fixture entry for request fingerprint {fingerprint}"
            )
        self._consumed.add(fingerprint)
        return self._responses[fingerprint]

    def unconsumed(self) -> list[str]:
        return [fp for fp in self._responses if fp not in self._consumed]

    def __len__(self) -> int:
        return len(self._responses)


# ---------------------------------------------------------------------------
# HTTP transport
# ---------------------------------------------------------------------------


class _HttpTransport:
    """Shared POST-with-retries plumbing for the live clients.

    Retries 429/5xx/transport errors up to ``max_retries`` times with
    exponential backoff; the sleep function is injectable so tests never
    wait. An internal semaphore bounds in-flight requests.
    """

    def __init__(self, config: ClientConfig,
                 sleep: Callable[[float], None] = time.sleep):
        if not config.endpoint:
            raise InvalidArgumentError("live client requires an endpoint")
        self.config = config
        self._sleep = sleep
        self._semaphore = threading.Semaphore(config.max_in_flight)
        self.total_retries = 0

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def post(self, path: str, payload: dict) -> dict:
        url = self.config.endpoint.rstrip("/") + path
        attempts = self.config.max_retries + 1
        last_error: ClientError | None = None
        for attempt in range(attempts):
            try:
                with self._semaphore:
                    response = requests.post(
                        url, json=payload, headers=self._headers(),
                        timeout=self.config.timeout_s,
                    )
            except requests.RequestException as exc:
                last_error = ClientError(f"request to {url} failed: {exc}")
            else:
                if response.status_code == 200:
                    try:
                        return response.json()
                    except ValueError as exc:
                        raise ProtocolError(
                            f"non-JSON reply from {url}: {exc}"
                        ) from exc
                retryable = response.status_code >= 500 or response.status_code == 429
                last_error = ClientError(
                    f"{url} returned status {response.status_code}",
                    retryable=retryable, status=response.status_code,
                )
                if not retryable:
                    raise last_error
            if attempt < attempts - 1:
                self.total_retries += 1
                delay = DEFAULT_BACKOFF_S * (2 ** attempt)
                logger.warning("retrying %s after failure (%s), attempt %d",
                               url, last_error, attempt + 2)
                self._sleep(delay)
        assert last_error is not None
        raise last_error


def _encode_image_part(frame: FrameRef) -> dict:
    if frame.path is None:
        raise InvalidArgumentError(
            f"frame {frame.video_id}/{frame.timestamp_ms} has no resolved path"
        )
    data = base64.b64encode(Path(frame.path).read_bytes()).decode("ascii")
    part: dict = {"type": "image", "image": data}
    if frame.bbox is not None:
        part["bbox"] = list(frame.bbox)
    return part


# ---------------------------------------------------------------------------
# Live clients
# ---------------------------------------------------------------------------


class HttpChatClient:
    """Chat-style client backing both the summarizer and answerer roles."""

    def __init__(self, config: ClientConfig,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._transport = _HttpTransport(config, sleep=sleep)

    @property
    def total_retries(self) -> int:
        return self._transport.total_retries

    def _chat(self, text: str, frames: Sequence[FrameRef]) -> str:
        content: list[dict] = [{"type": "text", "text": text}]
        content.extend(_encode_image_part(frame) for frame in frames)
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
        }
        reply = self._transport.post(CHAT_PATH, payload)
        if not isinstance(reply, dict) or not isinstance(reply.get("content"), str):
            raise ProtocolError(f"chat reply missing text content: {reply!r}")
        return reply["content"]

    def summarize(self, frames: Sequence[FrameRef], instruction: str) -> str:
        if not frames:
            raise InvalidArgumentError("summarize requires at least one frame")
        return self._chat(instruction, frames)

    def answer_chat(self, prompt: str, frames: Sequence[FrameRef]) -> str:
        return self._chat(prompt, frames)


class _DimTracker:
    """Guards against embedding-dimension drift across calls."""

    def __init__(self, what: str):
        self._what = what
        self._dim: int | None = None

    def check(self, dim: int) -> None:
        if self._dim is None:
            self._dim = dim
        elif dim != self._dim:
            raise ProtocolError(
                f"{self._what} dimension drifted from {self._dim} to {dim}"
            )


def _parse_detections(raw: object) -> list[Detection]:
    if not isinstance(raw, list):
        raise ProtocolError(f"detections must be a list, got {type(raw).__name__}")
    detections = []
    for item in raw:
        if not isinstance(item, dict) or not {"box", "score", "embedding"} <= set(item):
            raise ProtocolError(f"malformed detection entry: {item!r}")
        box = tuple(float(v) for v in item["box"])
        if len(box) != 4:
            raise ProtocolError(f"detection box must have 4 coordinates: {item!r}")
        embedding = np.asarray(item["embedding"], dtype=np.float32)
        detections.append(Detection(box, float(item["score"]), embedding))
    return detections


class HttpDetector:
    def __init__(self, config: ClientConfig,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._transport = _HttpTransport(config, sleep=sleep)
        self._dims = _DimTracker("detector embedding")

    def detect(self, frame: FrameRef) -> list[Detection]:
        payload = {"model": self.config.model,
                   "image": _encode_image_part(frame)["image"]}
        reply = self._transport.post(DETECT_PATH, payload)
        detections = _parse_detections(reply.get("detections") if isinstance(reply, dict) else None)
        for det in detections:
            self._dims.check(det.embedding.shape[0])
        return detections


class HttpTextEncoder:
    def __init__(self, config: ClientConfig,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._transport = _HttpTransport(config, sleep=sleep)
        self._dims = _DimTracker("text embedding")

    def embed_text(self, term: str) -> np.ndarray:
        if not term:
            raise InvalidArgumentError("cannot embed an empty term")
        reply = self._transport.post(EMBED_PATH,
                                     {"model": self.config.model, "text": term})
        if not isinstance(reply, dict) or "embedding" not in reply:
            raise ProtocolError(f"embed reply missing embedding: {reply!r}")
        vector = np.asarray(reply["embedding"], dtype=np.float32)
        if vector.ndim != 1 or vector.size == 0:
            raise ProtocolError(f"embedding must be a non-empty vector: {reply!r}")
        self._dims.check(vector.shape[0])
        return vector


# ---------------------------------------------------------------------------
# Mock clients
# ---------------------------------------------------------------------------


class MockChatClient:
    """Fixture-backed summarizer/answerer; raises on unknown fingerprints."""

    def __init__(self, store: FixtureStore, model: str = "mock"):
        self._store = store
        self.model = model

    def _chat(self, text: str, frames: Sequence[FrameRef]) -> str:
        fingerprint = chat_fingerprint(self.model, text, frames)
        response = self._store.lookup(fingerprint)
        if not isinstance(response, str):
            raise ProtocolError(
                f"chat fixture for {fingerprint} must be text, got "
                f"{type(response).__name__}"
            )
        return response

    def summarize(self, frames: Sequence[FrameRef], instruction: str) -> str:
        if not frames:
            raise InvalidArgumentError("summarize requires at least one frame")
        return self._chat(instruction, frames)

    def answer_chat(self, prompt: str, frames: Sequence[FrameRef]) -> str:
        return self._chat(prompt, frames)


class MockDetector:
    def __init__(self, store: FixtureStore, model: str = "mock"):
        self._store = store
        self.model = model
        self._dims = _DimTracker("detector embedding")

    def detect(self, frame: FrameRef) -> list[Detection]:
        response = self._store.lookup(detect_fingerprint(self.model, frame))
        detections = _parse_detections(response)
        for det in detections:
            self._dims.check(det.embedding.shape[0])
        return detections


class MockTextEncoder:
    def __init__(self, store: FixtureStore, model: str = "mock"):
        self._store = store
        self.model = model
        self._dims = _DimTracker("text embedding")

    def embed_text(self, term: str) -> np.ndarray:
        if not term:
            raise InvalidArgumentError("cannot embed an empty term")
        response = self._store.lookup(embed_fingerprint(self.model, term))
        vector = np.asarray(response, dtype=np.float32)
        if vector.ndim != 1 or vector.size == 0:
            raise ProtocolError("embedding fixture must be a non-empty vector")
        self._dims.check(vector.shape[0])
        return vector


# ---------------------------------------------------------------------------
# Client set factory
# ---------------------------------------------------------------------------


@dataclass
class ClientSet:
    """The four model roles wired to one backend (live or mock)."""

    summarizer: object
    detector: object
    encoder: object
    answerer: object
    fixture_store: FixtureStore | None = None


def make_clients(config: ClientConfig,
                 sleep: Callable[[float], None] = time.sleep) -> ClientSet:
    """Build all four roles; a fixture path selects mock mode.

    An empty fixture path yields a mock set with an empty store: every
    request then fails with a strict-mock error naming its fingerprint.
    """
    if config.fixture_path is not None:
        store = (FixtureStore.load(config.fixture_path)
                 if config.fixture_path else FixtureStore())
        return ClientSet(
            summarizer=MockChatClient(store, config.model),
            detector=MockDetector(store, config.model),
            encoder=MockTextEncoder(store, config.model),
            answerer=MockChatClient(store, config.model),
            fixture_store=store,
        )
    endpoint = config.endpoint or os.environ.get(ENV_API_BASE)
    if not endpoint:
        raise InvalidArgumentError(
            f"no endpoint configured and {ENV_API_BASE} is unset"
        )
    live_config = ClientConfig(
        endpoint=endpoint, model=config.model, api_key_env=config.api_key_env,
        timeout_s=config.timeout_s, max_retries=config.max_retries,
        max_in_flight=config.max_in_flight,
    )
    return ClientSet(
        summarizer=HttpChatClient(live_config, sleep=sleep),
        detector=HttpDetector(live_config, sleep=sleep),
        encoder=HttpTextEncoder(live_config, sleep=sleep),
        answerer=HttpChatClient(live_config, sleep=sleep),
    )
