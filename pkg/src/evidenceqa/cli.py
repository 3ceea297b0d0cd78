"""Command-line entry point binding configuration, stores, and clients.

Commands::

    evidenceqa build-semantic  VIDEO=DURATION ...   coarse-to-fine extraction
    evidenceqa build-visual    VIDEO=DURATION ...   per-frame detection ingestion
    evidenceqa ask                                  one question through the pipeline
    evidenceqa eval                                 batch answering and scoring

Precedence for every setting: command-line flag over config-file value
over built-in default. Results go to stdout (or ``--out``); diagnostics
go to stderr. Exit code 0 means no error was reported.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .clients import ClientConfig, make_clients
from .errors import EvidenceError, InvalidArgumentError, ParseError
from .evaluation import (
    LabeledItem,
    Prediction,
    emit_report,
    parse_label_line,
    parse_prediction_line,
    prediction_line,
    reference_replay,
    score,
)
from .frames import DirectoryFrameProvider
from .inference import (
    DEFAULT_FRAME_BUDGET,
    InputPlan,
    QuerySpec,
    answer_query,
    default_routing_table,
)
from .retrieval import RetrievalConfig
from .sampling import ChunkSpan, SamplingConfig, plan_frames_ms
from .semantic import (
    SemanticDb,
    build_fine_records,
    build_global_summary,
    load_semantic,
    store_semantic,
)
from .visual import DEFAULT_DETECTOR_THRESHOLD, VisualDb, load_visual, persist_visual

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


@dataclass
class AppConfig:
    """Resolved settings for one command invocation."""

    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    detector_threshold: float = DEFAULT_DETECTOR_THRESHOLD
    frame_budget: int = DEFAULT_FRAME_BUDGET
    routing_overrides: dict = field(default_factory=dict)
    endpoint: str | None = None
    model: str = "default"
    mock: bool = False
    fixtures: str | None = None
    semdb: str | None = None
    visdb: str | None = None
    frames_root: str | None = None
    out: str | None = None

    def routing_table(self) -> dict[str, InputPlan]:
        table = default_routing_table(self.frame_budget)
        for task, fields_ in self.routing_overrides.items():
            base = table.get(task, InputPlan(frame_budget=self.frame_budget))
            table[task] = InputPlan(
                use_semantic=fields_.get("use_semantic", base.use_semantic),
                use_visual=fields_.get("use_visual", base.use_visual),
                multi_video=fields_.get("multi_video", base.multi_video),
                frame_budget=fields_.get("frame_budget", base.frame_budget),
            )
        return table

    def client_config(self) -> ClientConfig:
        if self.mock:
            fixture_path = self.fixtures or ""
            return ClientConfig(model=self.model, fixture_path=fixture_path)
        return ClientConfig(endpoint=self.endpoint, model=self.model)


def _pick(flag, file_value, default):
    if flag is not None:
        return flag
    if file_value is not None:
        return file_value
    return default


def resolve_config(args: argparse.Namespace) -> AppConfig:
    file_cfg: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        file_cfg = json.loads(path.read_text(encoding="utf-8"))

    sampling_cfg = file_cfg.get("sampling", {})
    sampling = SamplingConfig(
        coarse_chunk_s=_pick(args.coarse_chunk_s, sampling_cfg.get("coarse_chunk_s"),
                             SamplingConfig().coarse_chunk_s),
        coarse_fps=_pick(args.coarse_fps, sampling_cfg.get("coarse_fps"),
                         SamplingConfig().coarse_fps),
        fine_chunk_s=_pick(args.fine_chunk_s, sampling_cfg.get("fine_chunk_s"),
                           SamplingConfig().fine_chunk_s),
        fine_fps=_pick(args.fine_fps, sampling_cfg.get("fine_fps"),
                       SamplingConfig().fine_fps),
        visual_fps=_pick(None, sampling_cfg.get("visual_fps"),
                         SamplingConfig().visual_fps),
    )
    retrieval = RetrievalConfig(
        tau=_pick(args.tau, file_cfg.get("retrieval", {}).get("tau"),
                  RetrievalConfig().tau))
    return AppConfig(
        sampling=sampling,
        retrieval=retrieval,
        detector_threshold=_pick(args.detector_threshold,
                                 file_cfg.get("detector_threshold"),
                                 DEFAULT_DETECTOR_THRESHOLD),
        frame_budget=_pick(args.frame_budget, file_cfg.get("frame_budget"),
                           DEFAULT_FRAME_BUDGET),
        routing_overrides=file_cfg.get("routing", {}),
        endpoint=_pick(args.endpoint, file_cfg.get("endpoint"), None),
        model=_pick(args.model, file_cfg.get("model"), "default"),
        mock=bool(args.mock or file_cfg.get("mock", False)),
        fixtures=_pick(args.fixtures, file_cfg.get("fixtures"), None),
        semdb=_pick(args.semdb, file_cfg.get("semdb"), None),
        visdb=_pick(args.visdb, file_cfg.get("visdb"), None),
        frames_root=_pick(args.frames_root, file_cfg.get("frames_root"), None),
        out=_pick(args.out, file_cfg.get("out"), None),
    )


def _parse_video_args(tokens: list[str]) -> list[tuple[str, float]]:
    videos = []
    for token in tokens:
        if "=" not in token:
            raise InvalidArgumentError(
                f"expected VIDEO_ID=DURATION_S, got {token!r}"
            )
        video_id, _, duration = token.partition("=")
        if not video_id:
            raise InvalidArgumentError(f"empty video id in {token!r}")
        try:
            duration_s = float(duration)
        except ValueError:
            raise InvalidArgumentError(
                f"bad duration in {token!r}"
            ) from None
        videos.append((video_id, duration_s))
    return videos


def _require(value, flag: str):
    if value is None:
        raise InvalidArgumentError(f"{flag} is required for this command")
    return value


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_build_semantic(config: AppConfig, args: argparse.Namespace) -> int:
    videos = _parse_video_args(args.videos)
    frames_root = Path(_require(config.frames_root, "--frames-root"))
    semdb_path = _require(config.semdb, "--semdb")
    provider = DirectoryFrameProvider(frames_root)
    for video_id, _ in videos:
        if not provider.video_dir(video_id).is_dir():
            raise FileNotFoundError(
                f"frame directory not found: {provider.video_dir(video_id)}"
            )
    clients = make_clients(config.client_config())
    db = SemanticDb()
    for video_id, duration_s in videos:
        logger.info("building semantic evidence for %s (%.1f s)",
                    video_id, duration_s)
        summary = build_global_summary(video_id, duration_s, provider,
                                       clients.summarizer, config.sampling)
        records = build_fine_records(video_id, duration_s, summary, provider,
                                     clients.summarizer, config.sampling)
        db.add_video(summary, records)
    store_semantic(semdb_path, db)
    print(f"wrote semantic db with {len(db)} video(s) to {semdb_path}")
    return EXIT_OK


def cmd_build_visual(config: AppConfig, args: argparse.Namespace) -> int:
    videos = _parse_video_args(args.videos)
    frames_root = Path(_require(config.frames_root, "--frames-root"))
    visdb_path = _require(config.visdb, "--visdb")
    provider = DirectoryFrameProvider(frames_root)
    clients = make_clients(config.client_config())

    db: VisualDb | None = None
    total = 0
    for video_id, duration_s in videos:
        span = ChunkSpan(0, round(duration_s * 1000), 0)
        for timestamp_ms in plan_frames_ms(span, config.sampling.visual_fps):
            frame = provider.resolve(video_id, timestamp_ms)
            detections = clients.detector.detect(frame)
            if db is None:
                dim = detections[0].embedding.shape[0] if detections else None
                if dim is None:
                    continue
                db = VisualDb(dim, config.detector_threshold)
            total += db.ingest_detections(
                video_id, timestamp_ms,
                [(d.box, d.score, d.embedding) for d in detections])
    if db is None:
        # No detections anywhere; dimension is unknowable, store a stub dim.
        db = VisualDb(1, config.detector_threshold)
    persist_visual(visdb_path, db)
    print(f"wrote visual db with {total} proposal(s) to {visdb_path}")
    return EXIT_OK


def _load_stores(config: AppConfig) -> tuple[SemanticDb | None, VisualDb | None]:
    sem_db = load_semantic(config.semdb) if config.semdb else None
    vis_db = load_visual(config.visdb) if config.visdb else None
    return sem_db, vis_db


def _query_from_args(args: argparse.Namespace) -> QuerySpec:
    if args.query_json:
        line = Path(args.query_json).read_text(encoding="utf-8").strip()
        return QuerySpec.from_json(line)
    question = _require(args.question, "--question")
    choices = tuple(_require(args.choice, "--choice"))
    task = args.task or ""
    video_ids = tuple(_require(args.video_id, "--video-id"))
    return QuerySpec(question=question, choices=choices, task=task,
                     video_ids=video_ids, question_id=args.question_id or "")


def _bundle_debug_text(result) -> str:
    lines = ["--- evidence bundle (dry run) ---"]
    lines.append(f"frames: {len(result.bundle.frames)}")
    for frame in result.bundle.frames:
        lines.append(f"  {frame.video_id} @ {frame.timestamp_ms} ms"
                     + (f" box {frame.bbox}" if frame.bbox else ""))
    lines.append("prompt:")
    lines.append(result.bundle.enhanced_question)
    return "\n".join(lines) + "\n"


def cmd_ask(config: AppConfig, args: argparse.Namespace) -> int:
    query = _query_from_args(args)
    sem_db, vis_db = _load_stores(config)
    clients = make_clients(config.client_config())
    result = answer_query(
        query, sem_db, vis_db, clients,
        retrieval_config=config.retrieval,
        routing_table=config.routing_table(),
        frame_budget=config.frame_budget,
        dry_run=args.dry_run,
    )
    if args.dry_run:
        _emit(_bundle_debug_text(result), config.out)
        return EXIT_OK
    line = prediction_line(Prediction(result.question_id, result.choice_index,
                                      result.fallback_used))
    _emit(line + "\n", config.out)
    return EXIT_OK


def _read_labels(path: str) -> list[LabeledItem]:
    labels = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if line.strip():
                labels.append(parse_label_line(line, lineno))
    return labels


def _read_questions(path: str) -> list[QuerySpec]:
    questions = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if line.strip():
                questions.append(QuerySpec.from_json(line, lineno))
    return questions


def cmd_eval(config: AppConfig, args: argparse.Namespace) -> int:
    if args.replay_reference:
        predictions, labels = reference_replay()
        report = score(predictions, labels)
        _emit(emit_report(report, args.report_format), config.out)
        return EXIT_OK

    labels = _read_labels(_require(args.labels, "--labels"))

    if args.predictions:
        with open(args.predictions, encoding="utf-8") as handle:
            predictions = [
                parse_prediction_line(line, lineno)
                for lineno, line in enumerate(handle, start=1) if line.strip()
            ]
    else:
        questions = _read_questions(_require(args.questions, "--questions"))
        sem_db, vis_db = _load_stores(config)
        clients = make_clients(config.client_config())
        predictions = []
        lines = []
        for query in questions:
            result = answer_query(
                query, sem_db, vis_db, clients,
                retrieval_config=config.retrieval,
                routing_table=config.routing_table(),
                frame_budget=config.frame_budget,
            )
            prediction = Prediction(result.question_id, result.choice_index,
                                    result.fallback_used)
            predictions.append(prediction)
            lines.append(prediction_line(prediction))
        if config.out:
            Path(config.out).write_text("\n".join(lines) + "\n",
                                        encoding="utf-8")
        else:
            sys.stdout.write("\n".join(lines) + "\n")

    report = score(predictions, labels)
    sys.stdout.write(emit_report(report, args.report_format))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--mock", action="store_true",
                        help="use fixture-backed clients; no network")
    common.add_argument("--fixtures", help="fixture file for mock clients")
    common.add_argument("--semdb", help="semantic db path")
    common.add_argument("--visdb", help="visual db path")
    common.add_argument("--frames-root", help="root of extracted frame files")
    common.add_argument("--tau", type=float, help="similarity threshold")
    common.add_argument("--detector-threshold", type=float)
    common.add_argument("--frame-budget", type=int)
    common.add_argument("--coarse-chunk-s", type=float)
    common.add_argument("--coarse-fps", type=float)
    common.add_argument("--fine-chunk-s", type=float)
    common.add_argument("--fine-fps", type=float)
    common.add_argument("--endpoint", help="model endpoint base URL")
    common.add_argument("--model", help="model name sent to the endpoint")
    common.add_argument("--out", help="write results here instead of stdout")

    parser = argparse.ArgumentParser(
        prog="evidenceqa",
        description="Evidence-database construction and question answering "
                    "for long videos.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sem = sub.add_parser("build-semantic", parents=[common],
                           help="run the coarse-to-fine semantic extraction")
    p_sem.add_argument("videos", nargs="+", metavar="VIDEO=DURATION_S")
    p_sem.set_defaults(func=cmd_build_semantic)

    p_vis = sub.add_parser("build-visual", parents=[common],
                           help="ingest per-frame detections")
    p_vis.add_argument("videos", nargs="+", metavar="VIDEO=DURATION_S")
    p_vis.set_defaults(func=cmd_build_visual)

    p_ask = sub.add_parser("ask", parents=[common],
                           help="answer one question")
    p_ask.add_argument("--query-json", help="file with one JSON question")
    p_ask.add_argument("--question")
    p_ask.add_argument("--choice", action="append",
                       help="repeat once per choice")
    p_ask.add_argument("--task", default="")
    p_ask.add_argument("--video-id", action="append")
    p_ask.add_argument("--question-id", default="")
    p_ask.add_argument("--dry-run", action="store_true",
                       help="print the assembled bundle, skip the answerer")
    p_ask.set_defaults(func=cmd_ask)

    p_eval = sub.add_parser("eval", parents=[common],
                            help="batch answer and score")
    p_eval.add_argument("--questions", help="line-delimited JSON questions")
    p_eval.add_argument("--labels", help="line-delimited JSON labels")
    p_eval.add_argument("--predictions",
                        help="score an existing prediction file instead of "
                             "running the pipeline")
    p_eval.add_argument("--replay-reference", action="store_true",
                        help="score the bundled published per-task accuracies")
    p_eval.add_argument("--report-format", choices=["text", "csv"],
                        default="text")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        return args.func(config, args)
    except (InvalidArgumentError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EvidenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
