"""Coarse-to-fine construction, storage, and querying of textual evidence.

The coarse pass summarizes long low-FPS chunks into one global summary
per video; the fine pass re-reads short dense chunks with that summary
as context and records structured per-chunk observations. Both passes
demand a machine-readable JSON reply from the summarizer and reject
anything else.

On disk a database is UTF-8 line-delimited JSON: line 1 is the header
``{"format": "semdb", "version": 1}``, every further line one record
tagged ``kind: "summary"`` or ``kind: "fine"``.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from .errors import (
    BuildError,
    ClientError,
    FormatError,
    InvalidArgumentError,
    NotFoundError,
    ParseError,
    SchemaError,
    ValidationError,
    VersionError,
)
from .sampling import ChunkSpan, SamplingConfig, plan_chunks, plan_frames_ms

logger = logging.getLogger(__name__)

DB_FORMAT = "semdb"
DB_VERSION = 1

DEFAULT_BUILD_RETRIES = 2
DEFAULT_BUILD_BACKOFF_S = 0.5
DEFAULT_MAX_IN_FLIGHT = 4

COARSE_INSTRUCTION_TEMPLATE = (
    "You are shown {frame_count} frames sampled from seconds {start_s:g} to "
    "{end_s:g} of a kitchen video. Reply with exactly one JSON object and "
    'nothing else, with keys: "recipe_candidates" (list of strings), '
    '"coarse_ingredients" (list of strings), "activity_stages" (list of '
    'objects with "label", "start_s", "end_s" in seconds) and '
    '"major_transitions" (list of numbers, seconds).'
)

FINE_INSTRUCTION_TEMPLATE = (
    "Global context for this video:\n{summary_text}\n"
    "You are shown frames covering seconds {start_s:g} to {end_s:g} of the "
    "same video. Reply with exactly one JSON object and nothing else, with "
    'keys: "visible_operations" (list of strings), "involved_ingredients" '
    '(list of strings), "tool_interactions" (list of strings), '
    '"ingredient_additions" (list of objects with "ingredient" and '
    '"timestamp" in seconds) and "step_boundaries" (list of numbers, '
    "seconds)."
)


# ---------------------------------------------------------------------------
# Record types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActivityStage:
    label: str
    span: ChunkSpan


@dataclass(frozen=True)
class IngredientAddition:
    ingredient: str
    timestamp: float


@dataclass
class GlobalSummary:
    """Whole-video context produced by the coarse pass."""

    video_id: str
    recipe_candidates: list[str]
    coarse_ingredients: list[str]
    activity_stages: list[ActivityStage]
    major_transitions: list[float]

    def __post_init__(self):
        if not self.video_id:
            raise InvalidArgumentError("video_id must be non-empty")
        starts = [stage.span.start_ms for stage in self.activity_stages]
        if starts != sorted(starts):
            raise ValidationError(
                f"activity stages of {self.video_id} are not sorted by start"
            )


@dataclass
class FineChunkRecord:
    """Structured observations for one fine chunk."""

    video_id: str
    span: ChunkSpan
    visible_operations: list[str]
    involved_ingredients: list[str]
    tool_interactions: list[str]
    ingredient_additions: list[IngredientAddition]
    step_boundaries: list[float]

    def __post_init__(self):
        if not self.video_id:
            raise InvalidArgumentError("video_id must be non-empty")
        for addition in self.ingredient_additions:
            if not self.span.contains_s(addition.timestamp):
                raise ValidationError(
                    f"addition of {addition.ingredient!r} at "
                    f"{addition.timestamp}s lies outside chunk "
                    f"[{self.span.start_s:g}, {self.span.end_s:g})"
                )
        timestamps = [a.timestamp for a in self.ingredient_additions]
        if timestamps != sorted(timestamps):
            raise ValidationError("ingredient additions are not sorted by timestamp")
        for boundary in self.step_boundaries:
            if not self.span.contains_s(boundary):
                raise ValidationError(
                    f"step boundary {boundary}s lies outside chunk "
                    f"[{self.span.start_s:g}, {self.span.end_s:g})"
                )


class SemanticDb:
    """Per-video global summaries plus their ordered fine-chunk records.

    Immutable once built; concurrent readers need no coordination.
    """

    def __init__(self):
        self._videos: dict[str, tuple[GlobalSummary, list[FineChunkRecord]]] = {}

    def add_video(self, summary: GlobalSummary,
                  fine_records: Iterable[FineChunkRecord]) -> None:
        records = list(fine_records)
        video_id = summary.video_id
        if video_id in self._videos:
            raise ValidationError(f"video {video_id} already stored")
        for record in records:
            if record.video_id != video_id:
                raise ValidationError(
                    f"fine record for {record.video_id} attached to {video_id}"
                )
        _check_plan_shape(video_id, [r.span for r in records])
        self._videos[video_id] = (summary, records)

    def video_ids(self) -> list[str]:
        return sorted(self._videos)

    def get(self, video_id: str) -> tuple[GlobalSummary, list[FineChunkRecord]]:
        if video_id not in self._videos:
            raise NotFoundError(f"video {video_id} not in semantic db")
        summary, records = self._videos[video_id]
        return summary, list(records)

    def __contains__(self, video_id: str) -> bool:
        return video_id in self._videos

    def __len__(self) -> int:
        return len(self._videos)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SemanticDb):
            return NotImplemented
        return self._videos == other._videos


def _check_plan_shape(video_id: str, spans: list[ChunkSpan]) -> None:
    """Fine spans must look like a chunk plan: contiguous tiles from 0.

    An empty list is allowed (coarse-only video, fine pass pending).
    """
    if not spans:
        return
    if spans[0].start_ms != 0:
        raise ValidationError(f"fine records of {video_id} do not start at 0")
    chunk_len = spans[0].duration_ms
    for i, span in enumerate(spans):
        if span.index != i:
            raise ValidationError(f"fine record {i} of {video_id} has index {span.index}")
        if i > 0 and span.start_ms != spans[i - 1].end_ms:
            raise ValidationError(
                f"fine records of {video_id} have a gap or overlap at record {i}"
            )
        if i < len(spans) - 1 and span.duration_ms != chunk_len:
            raise ValidationError(
                f"fine record {i} of {video_id} has irregular length"
            )
    if spans[-1].duration_ms > chunk_len:
        raise ValidationError(f"last fine record of {video_id} exceeds chunk length")


# ---------------------------------------------------------------------------
# Reply parsing
# ---------------------------------------------------------------------------


def _strict_json_object(text: str) -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"reply is not a single JSON object: {exc}",
                          raw_text=text) from exc
    if not isinstance(obj, dict):
        raise SchemaError("reply must be a JSON object", raw_text=text)
    return obj


def _require_keys(obj: dict, keys: set[str], raw: str) -> None:
    present = set(obj)
    if present != keys:
        missing = sorted(keys - present)
        extra = sorted(present - keys)
        raise SchemaError(
            f"reply keys mismatch (missing {missing}, unexpected {extra})",
            raw_text=raw,
        )


def _string_list(value: object, name: str, raw: str) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise SchemaError(f"{name} must be a list of strings", raw_text=raw)
    return list(value)


def _number_list(value: object, name: str, raw: str) -> list[float]:
    if not isinstance(value, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        raise SchemaError(f"{name} must be a list of numbers", raw_text=raw)
    return list(value)


def parse_summary_reply(text: str) -> dict:
    """Validate one coarse-pass reply into its raw parts."""
    obj = _strict_json_object(text)
    _require_keys(obj, {"recipe_candidates", "coarse_ingredients",
                        "activity_stages", "major_transitions"}, text)
    stages = []
    if not isinstance(obj["activity_stages"], list):
        raise SchemaError("activity_stages must be a list", raw_text=text)
    for entry in obj["activity_stages"]:
        if not isinstance(entry, dict):
            raise SchemaError("activity stage must be an object", raw_text=text)
        _require_keys(entry, {"label", "start_s", "end_s"}, text)
        if not isinstance(entry["label"], str):
            raise SchemaError("stage label must be a string", raw_text=text)
        for key in ("start_s", "end_s"):
            if not isinstance(entry[key], (int, float)) or isinstance(entry[key], bool):
                raise SchemaError(f"stage {key} must be a number", raw_text=text)
        if not entry["start_s"] < entry["end_s"]:
            raise SchemaError(
                f"stage span [{entry['start_s']}, {entry['end_s']}) is empty",
                raw_text=text,
            )
        stages.append((entry["label"], float(entry["start_s"]), float(entry["end_s"])))
    return {
        "recipe_candidates": _string_list(obj["recipe_candidates"],
                                          "recipe_candidates", text),
        "coarse_ingredients": _string_list(obj["coarse_ingredients"],
                                           "coarse_ingredients", text),
        "activity_stages": stages,
        "major_transitions": _number_list(obj["major_transitions"],
                                          "major_transitions", text),
    }


def parse_fine_reply(text: str, video_id: str, span: ChunkSpan) -> FineChunkRecord:
    """Validate one fine-pass reply; out-of-span timestamps are rejected."""
    obj = _strict_json_object(text)
    _require_keys(obj, {"visible_operations", "involved_ingredients",
                        "tool_interactions", "ingredient_additions",
                        "step_boundaries"}, text)
    if not isinstance(obj["ingredient_additions"], list):
        raise SchemaError("ingredient_additions must be a list", raw_text=text)
    additions = []
    for entry in obj["ingredient_additions"]:
        if not isinstance(entry, dict):
            raise SchemaError("ingredient addition must be an object", raw_text=text)
        _require_keys(entry, {"ingredient", "timestamp"}, text)
        if not isinstance(entry["ingredient"], str):
            raise SchemaError("addition ingredient must be a string", raw_text=text)
        ts = entry["timestamp"]
        if not isinstance(ts, (int, float)) or isinstance(ts, bool):
            raise SchemaError("addition timestamp must be a number", raw_text=text)
        additions.append(IngredientAddition(entry["ingredient"], float(ts)))
    additions.sort(key=lambda a: (a.timestamp, a.ingredient))
    boundaries = sorted(_number_list(obj["step_boundaries"], "step_boundaries", text))
    try:
        return FineChunkRecord(
            video_id=video_id,
            span=span,
            visible_operations=_string_list(obj["visible_operations"],
                                            "visible_operations", text),
            involved_ingredients=_string_list(obj["involved_ingredients"],
                                              "involved_ingredients", text),
            tool_interactions=_string_list(obj["tool_interactions"],
                                           "tool_interactions", text),
            ingredient_additions=additions,
            step_boundaries=boundaries,
        )
    except ValidationError as exc:
        raise SchemaError(str(exc), raw_text=text) from exc


def _merge_summary_parts(video_id: str, parts: list[dict]) -> GlobalSummary:
    recipes: list[str] = []
    ingredients: list[str] = []
    stage_tuples: list[tuple[str, float, float]] = []
    transitions: set[float] = set()
    for part in parts:
        for name in part["recipe_candidates"]:
            if name not in recipes:
                recipes.append(name)
        for name in part["coarse_ingredients"]:
            if name not in ingredients:
                ingredients.append(name)
        stage_tuples.extend(part["activity_stages"])
        transitions.update(float(t) for t in part["major_transitions"])
    stage_tuples.sort(key=lambda s: (s[1], s[2], s[0]))
    stages = [
        ActivityStage(label, ChunkSpan.from_seconds(start, end, index=i))
        for i, (label, start, end) in enumerate(stage_tuples)
    ]
    return GlobalSummary(
        video_id=video_id,
        recipe_candidates=recipes,
        coarse_ingredients=ingredients,
        activity_stages=stages,
        major_transitions=sorted(transitions),
    )


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _call_with_retry(call: Callable[[], str], chunk_index: int, retries: int,
                     backoff_s: float, sleep: Callable[[float], None]) -> str:
    attempts = retries + 1
    last_error: ClientError | None = None
    for attempt in range(attempts):
        try:
            return call()
        except ClientError as exc:
            last_error = exc
            if attempt < attempts - 1:
                delay = backoff_s * (2 ** attempt)
                logger.warning("chunk %d failed (%s), retrying in %.2fs",
                               chunk_index, exc, delay)
                sleep(delay)
    raise BuildError(
        f"chunk {chunk_index} failed after {attempts} attempts: {last_error}",
        chunk_index=chunk_index,
    ) from last_error


def build_global_summary(video_id: str, duration_s: float, frame_provider,
                         summarizer_client, config: SamplingConfig, *,
                         instruction_template: str = COARSE_INSTRUCTION_TEMPLATE,
                         retries: int = DEFAULT_BUILD_RETRIES,
                         backoff_s: float = DEFAULT_BUILD_BACKOFF_S,
                         sleep: Callable[[float], None] = time.sleep) -> GlobalSummary:
    """Run the coarse pass: one summarizer request per coarse chunk, merged."""
    chunks = plan_chunks(duration_s, config.coarse_chunk_s)
    parts = []
    for chunk in chunks:
        frames = [frame_provider.resolve(video_id, t)
                  for t in plan_frames_ms(chunk, config.coarse_fps)]
        instruction = instruction_template.format(
            frame_count=len(frames), start_s=chunk.start_s, end_s=chunk.end_s)
        text = _call_with_retry(
            lambda: summarizer_client.summarize(frames, instruction),
            chunk.index, retries, backoff_s, sleep)
        parts.append(parse_summary_reply(text))
    return _merge_summary_parts(video_id, parts)


def build_fine_records(video_id: str, duration_s: float, summary: GlobalSummary,
                       frame_provider, summarizer_client,
                       config: SamplingConfig, *,
                       instruction_template: str = FINE_INSTRUCTION_TEMPLATE,
                       retries: int = DEFAULT_BUILD_RETRIES,
                       backoff_s: float = DEFAULT_BUILD_BACKOFF_S,
                       sleep: Callable[[float], None] = time.sleep,
                       max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
                       permissive: bool = False) -> list[FineChunkRecord]:
    """Run the fine pass over every fine chunk, in chunk order.

    Chunks may be processed concurrently (bounded by ``max_in_flight``);
    the output order is by chunk index regardless of completion order.
    Without ``permissive``, any chunk failure aborts the whole build.
    """
    if summary.video_id != video_id:
        raise InvalidArgumentError(
            f"summary belongs to {summary.video_id}, not {video_id}"
        )
    chunks = plan_chunks(duration_s, config.fine_chunk_s)
    summary_text = summary_to_text(summary)

    def build_one(chunk: ChunkSpan) -> FineChunkRecord:
        frames = [frame_provider.resolve(video_id, t)
                  for t in plan_frames_ms(chunk, config.fine_fps)]
        instruction = instruction_template.format(
            summary_text=summary_text, start_s=chunk.start_s, end_s=chunk.end_s)
        text = _call_with_retry(
            lambda: summarizer_client.summarize(frames, instruction),
            chunk.index, retries, backoff_s, sleep)
        return parse_fine_reply(text, video_id, chunk)

    results: dict[int, FineChunkRecord] = {}
    failures: list[tuple[int, str]] = []
    if max_in_flight <= 1 or len(chunks) == 1:
        for chunk in chunks:
            try:
                results[chunk.index] = build_one(chunk)
            except (BuildError, SchemaError) as exc:
                failures.append((chunk.index, str(exc)))
    else:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            futures = {chunk.index: pool.submit(build_one, chunk)
                       for chunk in chunks}
            for index in sorted(futures):
                try:
                    results[index] = futures[index].result()
                except (BuildError, SchemaError) as exc:
                    failures.append((index, str(exc)))

    if failures:
        failures.sort()
        if not permissive:
            raise BuildError(
                f"{len(failures)} fine chunk(s) failed for {video_id}: "
                + "; ".join(f"chunk {i}: {msg}" for i, msg in failures),
                chunk_index=failures[0][0],
                failures=failures,
            )
        for index, message in failures:
            logger.warning("skipping failed fine chunk %d of %s: %s",
                           index, video_id, message)
    return [results[i] for i in sorted(results)]


# ---------------------------------------------------------------------------
# Text serialization (embedded in fine requests and answer prompts)
# ---------------------------------------------------------------------------


def _fmt_seconds(value: float) -> str:
    return f"{value:g}"


def summary_to_text(summary: GlobalSummary) -> str:
    stages = "; ".join(
        f"{stage.label} [{_fmt_seconds(stage.span.start_s)}-"
        f"{_fmt_seconds(stage.span.end_s)}s]"
        for stage in summary.activity_stages
    )
    transitions = "; ".join(_fmt_seconds(t) for t in summary.major_transitions)
    return "\n".join([
        f"video: {summary.video_id}",
        f"recipe candidates: {'; '.join(summary.recipe_candidates)}",
        f"coarse ingredients: {'; '.join(summary.coarse_ingredients)}",
        f"activity stages: {stages}",
        f"major transitions: {transitions}",
    ])


def fine_record_to_text(record: FineChunkRecord) -> str:
    additions = "; ".join(
        f"{a.ingredient} @ {_fmt_seconds(a.timestamp)}s"
        for a in record.ingredient_additions
    )
    boundaries = "; ".join(_fmt_seconds(b) for b in record.step_boundaries)
    return "\n".join([
        f"chunk {record.span.index} "
        f"[{_fmt_seconds(record.span.start_s)}-{_fmt_seconds(record.span.end_s)}s]",
        f"operations: {'; '.join(record.visible_operations)}",
        f"ingredients: {'; '.join(record.involved_ingredients)}",
        f"tools: {'; '.join(record.tool_interactions)}",
        f"additions: {additions}",
        f"boundaries: {boundaries}",
    ])


def semantic_search_text(summary: GlobalSummary,
                         records: Iterable[FineChunkRecord]) -> str:
    """All text fields of one video, concatenated for token matching."""
    parts = summary.recipe_candidates + summary.coarse_ingredients
    parts.extend(stage.label for stage in summary.activity_stages)
    for record in records:
        parts.extend(record.visible_operations)
        parts.extend(record.involved_ingredients)
        parts.extend(record.tool_interactions)
        parts.extend(a.ingredient for a in record.ingredient_additions)
    return " ".join(parts)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _span_fields(span: ChunkSpan) -> dict:
    return {"start_s": span.start_s, "end_s": span.end_s, "index": span.index}


def _span_from_fields(obj: object) -> ChunkSpan:
    if not isinstance(obj, dict) or set(obj) != {"start_s", "end_s", "index"}:
        raise ValueError(f"malformed span: {obj!r}")
    return ChunkSpan.from_seconds(obj["start_s"], obj["end_s"], obj["index"])


def _summary_line(summary: GlobalSummary) -> str:
    return json.dumps({
        "kind": "summary",
        "video_id": summary.video_id,
        "recipe_candidates": summary.recipe_candidates,
        "coarse_ingredients": summary.coarse_ingredients,
        "activity_stages": [
            {"label": stage.label, "span": _span_fields(stage.span)}
            for stage in summary.activity_stages
        ],
        "major_transitions": summary.major_transitions,
    }, separators=(",", ":"), ensure_ascii=False)


def _fine_line(record: FineChunkRecord) -> str:
    return json.dumps({
        "kind": "fine",
        "video_id": record.video_id,
        "span": _span_fields(record.span),
        "visible_operations": record.visible_operations,
        "involved_ingredients": record.involved_ingredients,
        "tool_interactions": record.tool_interactions,
        "ingredient_additions": [
            {"ingredient": a.ingredient, "timestamp": a.timestamp}
            for a in record.ingredient_additions
        ],
        "step_boundaries": record.step_boundaries,
    }, separators=(",", ":"), ensure_ascii=False)


def store_semantic(db_path: str | Path, db: SemanticDb) -> None:
    """Write the db; videos are ordered by ID so output bytes are stable."""
    lines = [json.dumps({"format": DB_FORMAT, "version": DB_VERSION},
                        separators=(",", ":"))]
    for video_id in db.video_ids():
        summary, records = db.get(video_id)
        lines.append(_summary_line(summary))
        lines.extend(_fine_line(record) for record in records)
    Path(db_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_summary_record(obj: dict, lineno: int) -> GlobalSummary:
    try:
        stages = []
        for entry in obj["activity_stages"]:
            stages.append(ActivityStage(entry["label"],
                                        _span_from_fields(entry["span"])))
        return GlobalSummary(
            video_id=obj["video_id"],
            recipe_candidates=list(obj["recipe_candidates"]),
            coarse_ingredients=list(obj["coarse_ingredients"]),
            activity_stages=stages,
            major_transitions=list(obj["major_transitions"]),
        )
    except (KeyError, TypeError, ValueError, ValidationError,
            InvalidArgumentError) as exc:
        raise ParseError(f"malformed summary record at line {lineno}: {exc}",
                         line=lineno) from exc


def _parse_fine_record(obj: dict, lineno: int) -> FineChunkRecord:
    try:
        additions = [IngredientAddition(e["ingredient"], e["timestamp"])
                     for e in obj["ingredient_additions"]]
        return FineChunkRecord(
            video_id=obj["video_id"],
            span=_span_from_fields(obj["span"]),
            visible_operations=list(obj["visible_operations"]),
            involved_ingredients=list(obj["involved_ingredients"]),
            tool_interactions=list(obj["tool_interactions"]),
            ingredient_additions=additions,
            step_boundaries=list(obj["step_boundaries"]),
        )
    except (KeyError, TypeError, ValueError, ValidationError,
            InvalidArgumentError) as exc:
        raise ParseError(f"malformed fine record at line {lineno}: {exc}",
                         line=lineno) from exc


def load_semantic(db_path: str | Path) -> SemanticDb:
    path = Path(db_path)
    if not path.is_file():
        raise FileNotFoundError(f"semantic db not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError("missing header line", line=1)

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed header: {exc}", line=1) from exc
    if not isinstance(header, dict) or header.get("format") != DB_FORMAT:
        raise FormatError(f"not a semantic db header: {header!r}", line=1)
    if header.get("version") != DB_VERSION:
        raise VersionError(
            f"unsupported semantic db version {header.get('version')!r}", line=1)

    summaries: dict[str, GlobalSummary] = {}
    fines: dict[str, list[FineChunkRecord]] = {}
    order: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed record at line {lineno}: {exc}",
                             line=lineno) from exc
        if not isinstance(obj, dict):
            raise ParseError(f"record at line {lineno} is not an object",
                             line=lineno)
        kind = obj.get("kind")
        if kind == "summary":
            summary = _parse_summary_record(obj, lineno)
            if summary.video_id in summaries:
                raise ParseError(
                    f"duplicate summary for {summary.video_id} at line {lineno}",
                    line=lineno)
            summaries[summary.video_id] = summary
            order.append(summary.video_id)
        elif kind == "fine":
            record = _parse_fine_record(obj, lineno)
            if record.video_id not in summaries:
                raise ParseError(
                    f"fine record at line {lineno} precedes its summary",
                    line=lineno)
            fines.setdefault(record.video_id, []).append(record)
        else:
            raise ParseError(f"unknown record kind {kind!r} at line {lineno}",
                             line=lineno)

    db = SemanticDb()
    for video_id in order:
        db.add_video(summaries[video_id], fines.get(video_id, []))
    return db


def query_semantic(db: SemanticDb, video_id: str,
                   span: ChunkSpan | None = None
                   ) -> tuple[GlobalSummary, list[FineChunkRecord]]:
    """Fine records intersecting ``span`` (all when absent), in time order."""
    summary, records = db.get(video_id)
    if span is None:
        return summary, records
    return summary, [r for r in records if r.span.intersects(span)]
