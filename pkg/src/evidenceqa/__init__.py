"""Reusable semantic and visual evidence databases for long-video QA.

Offline, a video is distilled into two query-agnostic stores: structured
textual records from a coarse-to-fine summarization pass, and
timestamped object proposals with visual embeddings from a detector.
Online, each question retrieves from both stores, selects a compact set
of frames, and hands everything to an answering model behind a
pluggable client interface.
"""

from .errors import EvidenceError
from .evaluation import CategoryReport, LabeledItem, Prediction, emit_report, score
from .frames import DirectoryFrameProvider, FrameRef
from .inference import (
    EvidenceBundle,
    InputPlan,
    QuerySpec,
    answer,
    answer_query,
    assemble_prompt,
    route_task,
    select_frames,
)
from .retrieval import (
    QueryTermSet,
    RetrievalConfig,
    RetrievedEvidence,
    cosine,
    extract_query_terms,
    narrow_videos,
    retrieve_timestamps,
)
from .sampling import ChunkSpan, SamplingConfig, plan_chunks, plan_frames
from .semantic import (
    FineChunkRecord,
    GlobalSummary,
    SemanticDb,
    build_fine_records,
    build_global_summary,
    load_semantic,
    query_semantic,
    store_semantic,
)
from .visual import VisualDb, VisualProposal, load_visual, persist_visual

__version__ = "0.1.0"

__all__ = [
    "CategoryReport",
    "ChunkSpan",
    "DirectoryFrameProvider",
    "EvidenceBundle",
    "EvidenceError",
    "FineChunkRecord",
    "FrameRef",
    "GlobalSummary",
    "InputPlan",
    "LabeledItem",
    "Prediction",
    "QuerySpec",
    "QueryTermSet",
    "RetrievalConfig",
    "RetrievedEvidence",
    "SamplingConfig",
    "SemanticDb",
    "VisualDb",
    "VisualProposal",
    "answer",
    "answer_query",
    "assemble_prompt",
    "build_fine_records",
    "build_global_summary",
    "cosine",
    "emit_report",
    "extract_query_terms",
    "load_semantic",
    "load_visual",
    "narrow_videos",
    "persist_visual",
    "plan_chunks",
    "plan_frames",
    "query_semantic",
    "retrieve_timestamps",
    "route_task",
    "score",
    "select_frames",
    "store_semantic",
]
