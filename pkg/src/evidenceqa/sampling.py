"""Deterministic planning of chunk spans and frame-sample timestamps.

All arithmetic runs on an integer millisecond grid; the second-valued
API converts at the boundary, so replanning the same video can never
drift. Frame periods below one millisecond are not representable on the
grid, hence the ``MAX_FPS`` bound.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidArgumentError

MS_PER_S = 1000
MAX_FPS = 1000.0

DEFAULT_COARSE_CHUNK_S = 600.0
DEFAULT_COARSE_FPS = 0.1
DEFAULT_FINE_CHUNK_S = 60.0
DEFAULT_FINE_FPS = 1.0
DEFAULT_VISUAL_FPS = 1.0


def to_ms(seconds: float) -> int:
    """Convert seconds to the internal millisecond grid."""
    return round(seconds * MS_PER_S)


def to_seconds(ms: int) -> float:
    return ms / MS_PER_S


@dataclass(frozen=True)
class ChunkSpan:
    """Half-open span ``[start_ms, end_ms)`` of one planned chunk."""

    start_ms: int
    end_ms: int
    index: int = 0

    def __post_init__(self):
        if self.start_ms < 0 or self.start_ms >= self.end_ms:
            raise InvalidArgumentError(
                f"degenerate span [{self.start_ms}, {self.end_ms}) ms"
            )
        if self.index < 0:
            raise InvalidArgumentError(f"negative span index {self.index}")

    @classmethod
    def from_seconds(cls, start_s: float, end_s: float, index: int = 0) -> "ChunkSpan":
        return cls(to_ms(start_s), to_ms(end_s), index)

    @property
    def start_s(self) -> float:
        return to_seconds(self.start_ms)

    @property
    def end_s(self) -> float:
        return to_seconds(self.end_ms)

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms

    def contains_ms(self, timestamp_ms: int) -> bool:
        return self.start_ms <= timestamp_ms < self.end_ms

    def contains_s(self, timestamp_s: float) -> bool:
        return self.start_s <= timestamp_s < self.end_s

    def intersects(self, other: "ChunkSpan") -> bool:
        return self.start_ms < other.end_ms and other.start_ms < self.end_ms


@dataclass(frozen=True)
class SamplingConfig:
    """Chunk lengths and frame rates for the three extraction passes."""

    coarse_chunk_s: float = DEFAULT_COARSE_CHUNK_S
    coarse_fps: float = DEFAULT_COARSE_FPS
    fine_chunk_s: float = DEFAULT_FINE_CHUNK_S
    fine_fps: float = DEFAULT_FINE_FPS
    visual_fps: float = DEFAULT_VISUAL_FPS

    def __post_init__(self):
        for name in ("coarse_chunk_s", "coarse_fps", "fine_chunk_s",
                     "fine_fps", "visual_fps"):
            value = getattr(self, name)
            if not value > 0:
                raise InvalidArgumentError(f"{name} must be positive, got {value}")
        for fps_name in ("coarse_fps", "fine_fps", "visual_fps"):
            if getattr(self, fps_name) > MAX_FPS:
                raise InvalidArgumentError(
                    f"{fps_name} exceeds the millisecond grid limit of {MAX_FPS}"
                )
        if self.coarse_chunk_s * self.coarse_fps < 1:
            raise InvalidArgumentError("coarse chunk would contain no frame")
        if self.fine_chunk_s * self.fine_fps < 1:
            raise InvalidArgumentError("fine chunk would contain no frame")


def plan_chunks(duration_s: float, chunk_len_s: float) -> list[ChunkSpan]:
    """Tile ``[0, duration)`` with fixed-length, non-overlapping spans.

    The last span may be shorter; it is always emitted, so the spans
    cover the duration exactly.
    """
    if not duration_s > 0:
        raise InvalidArgumentError(f"duration_s must be positive, got {duration_s}")
    if not chunk_len_s > 0:
        raise InvalidArgumentError(f"chunk_len_s must be positive, got {chunk_len_s}")
    duration_ms = to_ms(duration_s)
    chunk_ms = to_ms(chunk_len_s)
    if duration_ms <= 0 or chunk_ms <= 0:
        raise InvalidArgumentError("duration and chunk length must be >= 1 ms")

    spans = []
    start = 0
    index = 0
    while start < duration_ms:
        end = min(start + chunk_ms, duration_ms)
        spans.append(ChunkSpan(start, end, index))
        start = end
        index += 1
    return spans


def plan_frames_ms(span: ChunkSpan, fps: float) -> list[int]:
    """Millisecond timestamps ``start + k/fps`` for k = 0, 1, ... within the span.

    Each timestamp is derived from k directly (never from the previous
    one), so there is no accumulated rounding.
    """
    if not fps > 0:
        raise InvalidArgumentError(f"fps must be positive, got {fps}")
    if fps > MAX_FPS:
        raise InvalidArgumentError(
            f"fps {fps} exceeds the millisecond grid limit of {MAX_FPS}"
        )
    timestamps = []
    k = 0
    while True:
        t = span.start_ms + round(k * MS_PER_S / fps)
        if t >= span.end_ms:
            break
        timestamps.append(t)
        k += 1
    return timestamps


def plan_frames(span: ChunkSpan, fps: float) -> list[float]:
    """Second-valued view of :func:`plan_frames_ms`."""
    return [to_seconds(t) for t in plan_frames_ms(span, fps)]
