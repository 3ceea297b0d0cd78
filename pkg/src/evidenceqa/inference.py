"""Task routing, frame selection, prompt assembly, and answer prediction.

Input construction is task-dependent: memory-heavy task families read
the semantic store, object-centric families retrieve visual evidence
(with semantic context attached), and the rest get both. The routing
table is plain data and can be overridden wholesale from configuration.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

from .errors import (
    AnswerParseError,
    ClientError,
    InvalidArgumentError,
    InvariantError,
    NotFoundError,
    ParseError,
)
from .evaluation import task_category_map
from .frames import FrameRef
from .retrieval import (
    RetrievalConfig,
    RetrievedEvidence,
    embed_query_terms,
    extract_query_terms,
    narrow_videos,
    retrieve_timestamps,
)
from .sampling import ChunkSpan
from .semantic import SemanticDb, fine_record_to_text, query_semantic, summary_to_text
from .visual import VisualDb

logger = logging.getLogger(__name__)

DEFAULT_FRAME_BUDGET = 32
DEFAULT_NARROW_K = 2
DEFAULT_ANSWER_RETRIES = 1
DEFAULT_ANSWER_FALLBACK = "first"
FALLBACK_SPAN_MS = 60_000

# Which evidence source each task family leans on. Not prescribed by the
# benchmark; override per task via the routing table in configuration.
_CATEGORY_SOURCES = {
    "Recipe": (True, False),
    "Ingredient": (True, False),
    "Nutrition": (True, False),
    "Action": (True, True),
    "3D Perception": (True, True),
    "Object Motion": (True, True),
    "Gaze": (True, True),
}
_MULTI_VIDEO_TASKS = {"Multi-Recipe Recognition"}


@dataclass(frozen=True)
class InputPlan:
    """Which evidence sources feed the answerer, and how many frames."""

    use_semantic: bool = True
    use_visual: bool = True
    multi_video: bool = False
    frame_budget: int = DEFAULT_FRAME_BUDGET

    def __post_init__(self):
        if not (self.use_semantic or self.use_visual):
            raise InvalidArgumentError("a plan must use at least one source")
        if self.frame_budget < 1:
            raise InvalidArgumentError("frame_budget must be >= 1")


@dataclass(frozen=True)
class QuerySpec:
    """One multiple-choice question aimed at one or more videos."""

    question: str
    choices: tuple[str, ...]
    task: str
    video_ids: tuple[str, ...]
    ref_image: FrameRef | None = None
    question_id: str = ""

    def __post_init__(self):
        if len(self.choices) < 2:
            raise InvalidArgumentError("a query needs at least two choices")
        if len(self.choices) > 26:
            raise InvalidArgumentError("at most 26 lettered choices supported")
        if not self.video_ids:
            raise InvalidArgumentError("a query needs at least one video id")

    @classmethod
    def from_json(cls, line: str, lineno: int = 1) -> "QuerySpec":
        try:
            obj = json.loads(line)
            ref = None
            if obj.get("ref_image") is not None:
                raw = obj["ref_image"]
                bbox = tuple(raw["bbox"]) if raw.get("bbox") is not None else None
                ref = FrameRef(
                    video_id=raw.get("video_id", ""),
                    timestamp_ms=int(raw.get("timestamp_ms", 0)),
                    bbox=bbox,
                    path=raw.get("path"),
                )
            return cls(
                question=obj["question"],
                choices=tuple(obj["choices"]),
                task=obj["task"],
                video_ids=tuple(obj["video_ids"]),
                ref_image=ref,
                question_id=obj.get("question_id", ""),
            )
        except (json.JSONDecodeError, KeyError, TypeError,
                InvalidArgumentError) as exc:
            raise ParseError(f"malformed question at line {lineno}: {exc}",
                             line=lineno) from exc

    def to_json(self) -> str:
        obj: dict = {
            "question_id": self.question_id,
            "question": self.question,
            "choices": list(self.choices),
            "task": self.task,
            "video_ids": list(self.video_ids),
        }
        if self.ref_image is not None:
            ref: dict = {
                "video_id": self.ref_image.video_id,
                "timestamp_ms": self.ref_image.timestamp_ms,
            }
            if self.ref_image.bbox is not None:
                ref["bbox"] = list(self.ref_image.bbox)
            if self.ref_image.path is not None:
                ref["path"] = self.ref_image.path
            obj["ref_image"] = ref
        return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


@dataclass
class EvidenceBundle:
    """Everything handed to the answerer for one question."""

    semantic_text: str
    frames: list[FrameRef]
    enhanced_question: str


@dataclass
class AnswerOutcome:
    """Predicted choice plus whether the configured fallback fired."""

    choice_index: int | None
    fallback_used: bool
    raw_reply: str | None = None


def default_routing_table(frame_budget: int = DEFAULT_FRAME_BUDGET
                          ) -> dict[str, InputPlan]:
    table = {}
    for task, category in task_category_map().items():
        use_semantic, use_visual = _CATEGORY_SOURCES[category]
        table[task] = InputPlan(
            use_semantic=use_semantic,
            use_visual=use_visual,
            multi_video=task in _MULTI_VIDEO_TASKS,
            frame_budget=frame_budget,
        )
    return table


def route_task(task: str, table: Mapping[str, InputPlan] | None = None,
               frame_budget: int | None = None) -> InputPlan:
    """Look the task up in the routing table; unknown tasks get the
    both-sources default. Never fails."""
    if table is None:
        table = default_routing_table()
    plan = table.get(task)
    if plan is None:
        plan = InputPlan(use_semantic=True, use_visual=True, multi_video=False,
                         frame_budget=DEFAULT_FRAME_BUDGET)
    if frame_budget is not None:
        plan = replace(plan, frame_budget=frame_budget)
    return plan


def select_frames(video_id: str, retrieved: RetrievedEvidence | None,
                  fallback_span: ChunkSpan, budget: int) -> list[FrameRef]:
    """Pick at most ``budget`` frames.

    Non-empty retrieval: keep everything if it fits, otherwise an even
    stride over the retrieved timestamps (index ``floor(i*N/budget)``),
    order and attached boxes preserved. Empty retrieval: ``budget``
    timestamps evenly spanning the fallback span.
    """
    if budget < 1:
        raise InvalidArgumentError(f"budget must be >= 1, got {budget}")
    if retrieved is not None and retrieved.timestamps_ms:
        timestamps = retrieved.timestamps_ms
        boxes = {match.timestamp_ms: match.bbox for match in retrieved.matches}
        if len(timestamps) > budget:
            count = len(timestamps)
            timestamps = [timestamps[(i * count) // budget]
                          for i in range(budget)]
        return [FrameRef(video_id, t, bbox=boxes.get(t)) for t in timestamps]
    duration = fallback_span.duration_ms
    picked = []
    for i in range(budget):
        t = fallback_span.start_ms + (i * duration) // budget
        if not picked or t != picked[-1]:
            picked.append(t)
    return [FrameRef(video_id, t) for t in picked]


def _choice_letter(index: int) -> str:
    return chr(ord("A") + index)


def assemble_prompt(query: QuerySpec, plan: InputPlan, semantic_text: str,
                    frames: Sequence[FrameRef]) -> EvidenceBundle:
    """Deterministic text assembly; identical inputs give identical bytes."""
    frames = sorted(frames, key=lambda f: (f.video_id, f.timestamp_ms))
    if len(frames) > plan.frame_budget:
        raise InvariantError(
            f"{len(frames)} frames exceed the budget of {plan.frame_budget}"
        )
    if not plan.use_visual and frames:
        raise InvariantError("frames supplied to a semantic-only plan")
    if not plan.use_semantic and semantic_text:
        raise InvariantError("semantic text supplied to a visual-only plan")

    lines = ["Answer the multiple-choice question about the video content."]
    if plan.use_semantic:
        lines.append("Semantic evidence:")
        lines.append(semantic_text if semantic_text else "(none available)")
    if plan.use_visual:
        lines.append(f"Attached frames ({len(frames)}):")
        for frame in frames:
            entry = f"- {frame.video_id} @ {frame.timestamp_ms} ms"
            if frame.bbox is not None:
                entry += " box [" + ", ".join(f"{v:.4f}" for v in frame.bbox) + "]"
            lines.append(entry)
        lines.append(
            f"Retrieved evidence: {len(frames)} frame(s) selected for this question."
        )
    lines.append(f"Question: {query.question}")
    lines.append("Choices:")
    for i, choice in enumerate(query.choices):
        lines.append(f"{_choice_letter(i)}. {choice}")
    lines.append("Reply with exactly one choice letter.")
    return EvidenceBundle(
        semantic_text=semantic_text if plan.use_semantic else "",
        frames=list(frames),
        enhanced_question="\n".join(lines),
    )


_LETTER = re.compile(r"(?<![A-Za-z])\(?([A-Za-z])\)?(?![A-Za-z])")
_NUMBER = re.compile(r"(?<!\d)(\d{1,2})(?!\d)")


def parse_choice_reply(text: str, choice_count: int) -> int:
    """First standalone choice letter wins (case-insensitive, parentheses
    allowed); a standalone 1-based number is accepted when no letter fits."""
    for match in _LETTER.finditer(text):
        index = ord(match.group(1).upper()) - ord("A")
        if 0 <= index < choice_count:
            return index
    for match in _NUMBER.finditer(text):
        number = int(match.group(1))
        if 1 <= number <= choice_count:
            return number - 1
    raise AnswerParseError(
        f"reply matches none of the {choice_count} choices: {text!r}",
        raw_reply=text,
    )


def answer(bundle: EvidenceBundle, choices: Sequence[str], answerer_client, *,
           retries: int = DEFAULT_ANSWER_RETRIES,
           fallback: str = DEFAULT_ANSWER_FALLBACK,
           backoff_s: float = 0.5,
           sleep: Callable[[float], None] = time.sleep) -> AnswerOutcome:
    """Ask the answerer and parse its reply into a choice index.

    Client failures and unparsable replies are retried; once retries are
    exhausted the configured fallback applies: ``"first"`` picks choice
    0, ``"abstain"`` predicts nothing. Either way the outcome records
    that the fallback fired.
    """
    if len(choices) < 2:
        raise InvalidArgumentError("need at least two choices")
    if fallback not in ("first", "abstain"):
        raise InvalidArgumentError(f"unknown fallback policy {fallback!r}")
    attempts = retries + 1
    last_error: Exception | None = None
    for attempt in range(attempts):
        try:
            reply = answerer_client.answer_chat(bundle.enhanced_question,
                                                bundle.frames)
            return AnswerOutcome(parse_choice_reply(reply, len(choices)),
                                 fallback_used=False, raw_reply=reply)
        except (ClientError, AnswerParseError) as exc:
            last_error = exc
            if attempt < attempts - 1:
                sleep(backoff_s * (2 ** attempt))
    logger.warning("answer fallback (%s) after %d attempts: %s",
                   fallback, attempts, last_error)
    raw = last_error.raw_reply if isinstance(last_error, AnswerParseError) else None
    if fallback == "first":
        return AnswerOutcome(0, fallback_used=True, raw_reply=raw)
    return AnswerOutcome(None, fallback_used=True, raw_reply=raw)


# ---------------------------------------------------------------------------
# End-to-end query pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    question_id: str
    choice_index: int | None
    fallback_used: bool
    bundle: EvidenceBundle
    terms_fallback: bool = False


def video_span_hint(sem_db: SemanticDb | None, vis_db: VisualDb | None,
                    video_id: str) -> ChunkSpan:
    """Best-effort ``[0, duration)`` span for uniform fallback sampling."""
    end_ms = 0
    if sem_db is not None and video_id in sem_db:
        _, records = sem_db.get(video_id)
        if records:
            end_ms = max(end_ms, records[-1].span.end_ms)
    if vis_db is not None and video_id in vis_db:
        timestamps = vis_db.timestamps(video_id)
        if timestamps:
            end_ms = max(end_ms, timestamps[-1] + 1000)
    if end_ms <= 0:
        end_ms = FALLBACK_SPAN_MS
    return ChunkSpan(0, end_ms, 0)


def _narrowed_videos(query: QuerySpec, plan: InputPlan,
                     sem_db: SemanticDb | None, narrow_k: int) -> list[str]:
    videos = list(query.video_ids)
    if not plan.multi_video or len(videos) <= 1 or sem_db is None or not len(sem_db):
        return videos
    ranked = narrow_videos(sem_db, query.question, k=len(sem_db))
    kept = [v for v in ranked if v in videos][:narrow_k]
    return kept if kept else videos


def _semantic_text_for(videos: Sequence[str], sem_db: SemanticDb | None) -> str:
    if sem_db is None:
        return ""
    sections = []
    for video_id in videos:
        try:
            summary, records = query_semantic(sem_db, video_id)
        except NotFoundError:
            logger.warning("no semantic evidence for video %s", video_id)
            continue
        parts = [summary_to_text(summary)]
        parts.extend(fine_record_to_text(record) for record in records)
        sections.append("\n".join(parts))
    return "\n\n".join(sections)


def answer_query(query: QuerySpec, sem_db: SemanticDb | None,
                 vis_db: VisualDb | None, clients, *,
                 retrieval_config: RetrievalConfig | None = None,
                 routing_table: Mapping[str, InputPlan] | None = None,
                 frame_budget: int | None = None,
                 narrow_k: int = DEFAULT_NARROW_K,
                 answer_retries: int = DEFAULT_ANSWER_RETRIES,
                 answer_fallback: str = DEFAULT_ANSWER_FALLBACK,
                 sleep: Callable[[float], None] = time.sleep,
                 dry_run: bool = False) -> PipelineResult:
    """Route, retrieve, select frames, assemble, and predict one question.

    With ``dry_run`` the assembled bundle is returned without calling
    the answerer.
    """
    retrieval_config = retrieval_config or RetrievalConfig()
    plan = route_task(query.task, routing_table, frame_budget)
    videos = _narrowed_videos(query, plan, sem_db, narrow_k)

    semantic_text = _semantic_text_for(videos, sem_db) if plan.use_semantic else ""

    frames: list[FrameRef] = []
    terms_fallback = False
    if plan.use_visual:
        per_video_budget = max(1, plan.frame_budget // len(videos))
        if vis_db is not None:
            terms = extract_query_terms(query.question, list(query.choices),
                                        query.ref_image, clients.answerer)
            terms = embed_query_terms(terms, clients.encoder)
            terms_fallback = terms.fallback
            for video_id in videos:
                retrieved = retrieve_timestamps(vis_db, video_id, terms,
                                                retrieval_config)
                span = video_span_hint(sem_db, vis_db, video_id)
                frames.extend(select_frames(video_id, retrieved, span,
                                            per_video_budget))
        else:
            for video_id in videos:
                span = video_span_hint(sem_db, vis_db, video_id)
                frames.extend(select_frames(video_id, None, span,
                                            per_video_budget))
        frames.sort(key=lambda f: (f.video_id, f.timestamp_ms))
        if len(frames) > plan.frame_budget:
            count = len(frames)
            frames = [frames[(i * count) // plan.frame_budget]
                      for i in range(plan.frame_budget)]

    bundle = assemble_prompt(query, plan, semantic_text, frames)
    if dry_run:
        return PipelineResult(query.question_id, None, False, bundle,
                              terms_fallback)
    outcome = answer(bundle, query.choices, clients.answerer,
                     retries=answer_retries, fallback=answer_fallback,
                     sleep=sleep)
    return PipelineResult(query.question_id, outcome.choice_index,
                          outcome.fallback_used, bundle, terms_fallback)
