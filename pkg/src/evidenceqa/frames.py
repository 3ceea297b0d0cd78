"""Frame references and directory-backed frame resolution.

Frames live outside the databases as pre-extracted image files laid out
as ``<root>/<video_id>/<timestamp_ms>.jpg``; the pipeline only ever
passes references around.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

BBox = tuple[float, float, float, float]


@dataclass(frozen=True)
class FrameRef:
    """Reference to one frame, optionally with a highlighted box.

    ``path`` is machine-local and is deliberately excluded from request
    fingerprints; identity is ``(video_id, timestamp_ms, bbox)``, falling
    back to ``path`` for external reference images with no video identity.
    """

    video_id: str
    timestamp_ms: int
    bbox: BBox | None = None
    path: str | None = None

    def fingerprint_fields(self) -> dict:
        if not self.video_id and self.path:
            ident: dict = {"path": self.path}
        else:
            ident = {"video_id": self.video_id, "timestamp_ms": self.timestamp_ms}
        if self.bbox is not None:
            ident["bbox"] = list(self.bbox)
        return ident


class DirectoryFrameProvider:
    """Resolves planned timestamps to image files under a root directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def video_dir(self, video_id: str) -> Path:
        return self.root / video_id

    def resolve(self, video_id: str, timestamp_ms: int) -> FrameRef:
        """Return a :class:`FrameRef` with its path; the file must exist."""
        path = self.video_dir(video_id) / f"{timestamp_ms}.jpg"
        if not path.is_file():
            raise FileNotFoundError(f"frame not found: {path}")
        return FrameRef(video_id, timestamp_ms, path=str(path))
