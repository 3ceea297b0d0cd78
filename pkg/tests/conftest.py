"""Shared test helpers: frame trees and fixture-file authoring."""

from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def make_frame_files(root: Path, video_id: str, timestamps_ms) -> Path:
    """Create empty frame files laid out the way the provider expects."""
    video_dir = root / video_id
    video_dir.mkdir(parents=True, exist_ok=True)
    for timestamp_ms in timestamps_ms:
        (video_dir / f"{timestamp_ms}.jpg").write_bytes(b"")
    return video_dir


@pytest.fixture
def frames_root(tmp_path: Path) -> Path:
    root = tmp_path / "frames"
    root.mkdir()
    return root
