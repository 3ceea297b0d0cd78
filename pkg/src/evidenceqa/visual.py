"""Object-proposal evidence store with a fixed little-endian binary format.

Every proposal is a detected object at one timestamp: a normalized
bounding box, the detector confidence, and a float32 visual embedding.
Values are rounded to float32 at ingestion so the on-disk format round
trips bit-exactly.

File layout (all little-endian), documented with a hex-annotated example
in ``docs/visual-db-format.md``:

    magic            4 bytes  b"VEVD"
    version          u32      1
    embedding_dim    u32      D (> 0)
    threshold        f32      detector confidence cutoff
    name_count       u32      number of video names
    names            name_count x (u32 byte length + UTF-8 bytes)
    records          until EOF, each 32 + 4*D bytes:
        video_index  u32      index into the name table
        timestamp_ms u64
        bbox         4 x f32  x0, y0, x1, y1
        score        f32
        embedding    D x f32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    DimensionError,
    FormatError,
    InvalidArgumentError,
    TruncatedError,
    ValidationError,
    VersionError,
)
from .frames import BBox

MAGIC = b"VEVD"
FORMAT_VERSION = 1
DEFAULT_DETECTOR_THRESHOLD = 0.3

_HEADER = struct.Struct("<4sIIfI")
_NAME_LEN = struct.Struct("<I")
_RECORD_PREFIX = struct.Struct("<IQ4ff")


def _f32(value: float) -> float:
    return float(np.float32(value))


@dataclass(eq=False)
class VisualProposal:
    """One detected object at one timestamp."""

    video_id: str
    timestamp_ms: int
    bbox: BBox
    score: float
    embedding: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VisualProposal):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.timestamp_ms == other.timestamp_ms
            and self.bbox == other.bbox
            and self.score == other.score
            and self.embedding.dtype == other.embedding.dtype
            and self.embedding.tobytes() == other.embedding.tobytes()
        )


class VisualDb:
    """Proposals grouped by (video, timestamp); single writer, many readers."""

    def __init__(self, embedding_dim: int,
                 detector_threshold: float = DEFAULT_DETECTOR_THRESHOLD):
        if embedding_dim <= 0:
            raise ValidationError(
                f"embedding_dim must be positive, got {embedding_dim}"
            )
        threshold = _f32(detector_threshold)
        if not 0.0 <= threshold <= 1.0:
            raise ValidationError(
                f"detector_threshold must lie in [0, 1], got {detector_threshold}"
            )
        self.embedding_dim = int(embedding_dim)
        self.detector_threshold = threshold
        self._videos: dict[str, dict[int, list[VisualProposal]]] = {}

    # -- ingestion ----------------------------------------------------

    def _validate_detection(self, bbox: Sequence[float], score: float,
                            embedding: np.ndarray
                            ) -> tuple[BBox, float, np.ndarray]:
        vector = np.asarray(embedding, dtype=np.float32)
        if vector.ndim != 1 or vector.shape[0] != self.embedding_dim:
            raise DimensionError(
                f"embedding has length {vector.size}, store requires "
                f"{self.embedding_dim}"
            )
        if len(bbox) != 4:
            raise ValidationError(f"bbox must have 4 coordinates: {bbox!r}")
        x0, y0, x1, y1 = (_f32(v) for v in bbox)
        for coord in (x0, y0, x1, y1):
            if not 0.0 <= coord <= 1.0:
                raise ValidationError(f"bbox {bbox!r} is not normalized to [0, 1]")
        if not (x0 < x1 and y0 < y1):
            raise ValidationError(f"bbox {bbox!r} is empty or inverted")
        score32 = _f32(score)
        if not 0.0 <= score32 <= 1.0:
            raise ValidationError(f"score {score} lies outside [0, 1]")
        return (x0, y0, x1, y1), score32, vector

    def ingest_detections(self, video_id: str, timestamp_ms: int,
                          detections: Iterable[tuple[Sequence[float], float,
                                                     np.ndarray]]) -> int:
        """Append detections at ``timestamp_ms``; returns how many passed
        the confidence threshold. Invalid input leaves the db unchanged.

        Timestamps must be ingested in non-decreasing order per video.
        """
        if not video_id:
            raise InvalidArgumentError("video_id must be non-empty")
        if timestamp_ms < 0:
            raise InvalidArgumentError(f"negative timestamp {timestamp_ms}")
        groups = self._videos.get(video_id)
        if groups:
            last = next(reversed(groups))
            if timestamp_ms < last:
                raise InvalidArgumentError(
                    f"timestamp {timestamp_ms} precedes last ingested {last} "
                    f"for {video_id}"
                )
        validated = [self._validate_detection(bbox, score, embedding)
                     for bbox, score, embedding in detections]
        kept = [
            VisualProposal(video_id, timestamp_ms, bbox, score, embedding)
            for bbox, score, embedding in validated
            if score >= self.detector_threshold
        ]
        if not kept:
            return 0
        if groups is None:
            groups = self._videos.setdefault(video_id, {})
        groups.setdefault(timestamp_ms, []).extend(kept)
        return len(kept)

    def _append_loaded(self, proposal: VisualProposal, offset: int) -> None:
        groups = self._videos.setdefault(proposal.video_id, {})
        if groups:
            last = next(reversed(groups))
            if proposal.timestamp_ms < last:
                raise FormatError(
                    f"timestamps of {proposal.video_id} go backwards",
                    offset=offset,
                )
        groups.setdefault(proposal.timestamp_ms, []).append(proposal)

    # -- queries ------------------------------------------------------

    def proposals_at(self, video_id: str, timestamp_ms: int) -> list[VisualProposal]:
        """All proposals at that exact timestamp; empty when none or the
        video is unknown (distinct from an error)."""
        return list(self._videos.get(video_id, {}).get(timestamp_ms, []))

    def timestamps(self, video_id: str) -> list[int]:
        return list(self._videos.get(video_id, {}))

    def iter_groups(self, video_id: str) -> Iterator[tuple[int, list[VisualProposal]]]:
        for timestamp_ms, group in self._videos.get(video_id, {}).items():
            yield timestamp_ms, list(group)

    def video_ids(self) -> list[str]:
        return list(self._videos)

    def proposal_count(self) -> int:
        return sum(len(group) for groups in self._videos.values()
                   for group in groups.values())

    def __contains__(self, video_id: str) -> bool:
        return video_id in self._videos

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VisualDb):
            return NotImplemented
        return (
            self.embedding_dim == other.embedding_dim
            and self.detector_threshold == other.detector_threshold
            and self._videos == other._videos
        )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def persist_visual(db_path: str | Path, db: VisualDb) -> None:
    names = db.video_ids()
    name_index = {name: i for i, name in enumerate(names)}
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, db.embedding_dim,
                           db.detector_threshold, len(names))]
    for name in names:
        encoded = name.encode("utf-8")
        chunks.append(_NAME_LEN.pack(len(encoded)))
        chunks.append(encoded)
    for name in names:
        for timestamp_ms, group in db.iter_groups(name):
            for proposal in group:
                chunks.append(_RECORD_PREFIX.pack(
                    name_index[name], timestamp_ms, *proposal.bbox,
                    proposal.score))
                chunks.append(
                    proposal.embedding.astype("<f4", copy=False).tobytes())
    Path(db_path).write_bytes(b"".join(chunks))


def load_visual(db_path: str | Path) -> VisualDb:
    path = Path(db_path)
    if not path.is_file():
        raise FileNotFoundError(f"visual db not found: {path}")
    data = path.read_bytes()

    if data[:4] != MAGIC:
        raise FormatError("bad magic, not a visual evidence db", offset=0)
    if len(data) < _HEADER.size:
        raise TruncatedError("file ends inside the header", offset=len(data))
    _, version, dim, threshold, name_count = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported visual db version {version}", offset=4)
    if dim == 0:
        raise ValidationError("embedding_dim of 0 in header")

    offset = _HEADER.size
    names = []
    for _ in range(name_count):
        if offset + _NAME_LEN.size > len(data):
            raise TruncatedError("file ends inside the name table", offset=offset)
        (length,) = _NAME_LEN.unpack_from(data, offset)
        offset += _NAME_LEN.size
        if offset + length > len(data):
            raise TruncatedError("file ends inside a video name", offset=offset)
        try:
            names.append(data[offset:offset + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"undecodable video name: {exc}",
                              offset=offset) from exc
        offset += length

    db = VisualDb(dim, threshold)
    record_size = _RECORD_PREFIX.size + 4 * dim
    while offset < len(data):
        if offset + record_size > len(data):
            raise TruncatedError("file ends inside a proposal record",
                                 offset=offset)
        video_index, timestamp_ms, x0, y0, x1, y1, score = \
            _RECORD_PREFIX.unpack_from(data, offset)
        if video_index >= len(names):
            raise FormatError(f"video index {video_index} out of range",
                              offset=offset)
        embedding = np.frombuffer(
            data, dtype="<f4", count=dim,
            offset=offset + _RECORD_PREFIX.size).copy()
        bbox = (x0, y0, x1, y1)
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValidationError(f"stored bbox {bbox!r} is invalid")
        if score < db.detector_threshold:
            raise ValidationError(
                f"stored score {score} is below threshold {db.detector_threshold}"
            )
        db._append_loaded(
            VisualProposal(names[video_index], timestamp_ms, bbox, score,
                           embedding),
            offset,
        )
        offset += record_size
    return db
