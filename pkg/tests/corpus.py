"""Synthetic 3-video, 20-question corpus with planted visual evidence.

Each question asks where one of eight objects is in one video. Exactly
one proposal per question carries an embedding aligned with the
object's query vector (cosine = ``planted_sim``); every other proposal
is orthogonal to all query vectors. Planted timestamps are odd numbers,
so the even-stepped uniform fallback grid can never hit them: frames
containing the ground truth appear if and only if retrieval found it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from evidenceqa.clients import (
    ClientSet,
    FixtureStore,
    MockChatClient,
    MockTextEncoder,
    chat_fingerprint,
    embed_fingerprint,
)
from evidenceqa.evaluation import LabeledItem, label_line
from evidenceqa.inference import QuerySpec, answer_query
from evidenceqa.retrieval import TERM_INSTRUCTION
from evidenceqa.sampling import ChunkSpan
from evidenceqa.semantic import (
    ActivityStage,
    FineChunkRecord,
    GlobalSummary,
    SemanticDb,
    store_semantic,
)
from evidenceqa.visual import VisualDb, persist_visual

OBJECTS = ["mug", "whisk", "pan", "kettle", "spatula", "grater", "ladle",
           "tongs"]
VIDEOS = ["vid-a", "vid-b", "vid-c"]
RECIPES = {"vid-a": "pasta", "vid-b": "omelette", "vid-c": "salad"}
CHOICES = ("on the counter", "in the sink", "in the drawer", "on the stove")
TASK = "Object Location"
CATEGORY = "3D Perception"
EMBEDDING_DIM = 16
VIDEO_DURATION_S = 600
PLANTED_BOX = (0.25, 0.25, 0.75, 0.75)
LETTERS = "ABCD"


@dataclass
class CorpusQuestion:
    spec: QuerySpec
    object_index: int
    gold_index: int
    gt_ts_ms: int

    @property
    def video_id(self) -> str:
        return self.spec.video_ids[0]


def object_vector(index: int) -> np.ndarray:
    vector = np.zeros(EMBEDDING_DIM, dtype=np.float32)
    vector[index] = 1.0
    return vector


def planted_vector(index: int, planted_sim: float) -> np.ndarray:
    """Embedding whose cosine with the object's query vector is exactly
    ``planted_sim`` (remainder goes into a filler axis no query uses)."""
    vector = np.zeros(EMBEDDING_DIM, dtype=np.float32)
    vector[index] = planted_sim
    vector[8 + index] = math.sqrt(1.0 - planted_sim ** 2)
    return vector


def build_questions(count: int = 20) -> list[CorpusQuestion]:
    questions = []
    for i in range(count):
        video_id = VIDEOS[i % len(VIDEOS)]
        object_index = i % len(OBJECTS)
        spec = QuerySpec(
            question=(f"Where is the {OBJECTS[object_index]} placed in video "
                      f"{video_id}?"),
            choices=CHOICES,
            task=TASK,
            video_ids=(video_id,),
            question_id=f"q{i:02d}",
        )
        questions.append(CorpusQuestion(
            spec=spec,
            object_index=object_index,
            gold_index=i % len(CHOICES),
            gt_ts_ms=33_001 + 7_000 * i,
        ))
    return questions


def build_visual_db(questions: list[CorpusQuestion],
                    planted_sim: float = 0.9) -> VisualDb:
    db = VisualDb(embedding_dim=EMBEDDING_DIM, detector_threshold=0.3)
    for video_id in VIDEOS:
        detections: list[tuple[int, tuple, float, np.ndarray]] = []
        for k in range(12):  # orthogonal clutter on an even grid
            detections.append((
                k * 50_000, (0.05, 0.05, 0.4, 0.4), 0.6,
                object_vector(8 + (k % 8)),
            ))
        for q in questions:
            if q.video_id == video_id:
                detections.append((q.gt_ts_ms, PLANTED_BOX, 0.9,
                                   planted_vector(q.object_index, planted_sim)))
        detections.sort(key=lambda d: d[0])
        for timestamp_ms, box, score, embedding in detections:
            db.ingest_detections(video_id, timestamp_ms,
                                 [(box, score, embedding)])
    return db


def build_semantic_db() -> SemanticDb:
    db = SemanticDb()
    for video_id in VIDEOS:
        recipe = RECIPES[video_id]
        summary = GlobalSummary(
            video_id=video_id,
            recipe_candidates=[recipe],
            coarse_ingredients=["salt", "oil"],
            activity_stages=[
                ActivityStage("prep", ChunkSpan(0, 300_000, 0)),
                ActivityStage("cook", ChunkSpan(300_000, 600_000, 1)),
            ],
            major_transitions=[300.0],
        )
        records = []
        for i in range(VIDEO_DURATION_S // 60):
            start = i * 60_000
            records.append(FineChunkRecord(
                video_id=video_id,
                span=ChunkSpan(start, start + 60_000, i),
                visible_operations=[f"{recipe} step {i}"],
                involved_ingredients=[recipe] if i == 0 else [],
                tool_interactions=[],
                ingredient_additions=[],
                step_boundaries=[],
            ))
        db.add_video(summary, records)
    return db


def labels_for(questions: list[CorpusQuestion]) -> list[LabeledItem]:
    return [LabeledItem(q.spec.question_id, TASK, CATEGORY, q.gold_index)
            for q in questions]


class GatedAnswerer:
    """Answers correctly iff the planted ground-truth frame reached it.

    Also services query-term extraction chats by naming the object, so
    one double covers both chat roles the pipeline uses.
    """

    def __init__(self, questions: list[CorpusQuestion]):
        self._questions = questions

    def _target(self, prompt: str) -> CorpusQuestion:
        for q in self._questions:
            if q.spec.question in prompt:
                return q
        raise AssertionError(f"prompt mentions no known question: {prompt!r}")

    def answer_chat(self, prompt: str, frames) -> str:
        target = self._target(prompt)
        if prompt.startswith("Name the object"):
            return OBJECTS[target.object_index]
        hit = any(f.video_id == target.video_id
                  and f.timestamp_ms == target.gt_ts_ms for f in frames)
        if hit:
            return LETTERS[target.gold_index]
        return LETTERS[(target.gold_index + 1) % len(CHOICES)]


def term_entries(questions: list[CorpusQuestion], model: str) -> dict[str, str]:
    entries = {}
    for q in questions:
        instruction = TERM_INSTRUCTION.format(
            question=q.spec.question, choices="; ".join(q.spec.choices))
        entries[chat_fingerprint(model, instruction, [])] = \
            OBJECTS[q.object_index]
    return entries


def embed_entries(model: str) -> dict[str, list[float]]:
    return {
        embed_fingerprint(model, name): object_vector(i).tolist()
        for i, name in enumerate(OBJECTS)
    }


def gated_clients(questions: list[CorpusQuestion]) -> ClientSet:
    """Client set for in-process runs: gated answerer + fixture encoder."""
    store = FixtureStore(list(embed_entries("mock").items()))
    answerer = GatedAnswerer(questions)
    return ClientSet(summarizer=None, detector=None,
                     encoder=MockTextEncoder(store), answerer=answerer,
                     fixture_store=store)


def run_corpus(questions: list[CorpusQuestion], sem_db: SemanticDb,
               vis_db: VisualDb, tau: float) -> float:
    """Accuracy (0..1) of the gated pipeline over the corpus at one tau."""
    from evidenceqa.retrieval import RetrievalConfig

    clients = gated_clients(questions)
    correct = 0
    for q in questions:
        result = answer_query(q.spec, sem_db, vis_db, clients,
                              retrieval_config=RetrievalConfig(tau=tau))
        if result.choice_index == q.gold_index:
            correct += 1
    return correct / len(questions)


def write_cli_corpus(root: Path, planted_sim: float = 0.9,
                     model: str = "default") -> dict[str, Path]:
    """Materialize dbs, questions, labels, and a full fixture file so the
    CLI can replay the corpus offline and deterministically.

    Answer fixtures are keyed by the exact assembled prompt, obtained by
    dry-running the same pipeline the CLI will run.
    """
    root.mkdir(parents=True, exist_ok=True)
    questions = build_questions()
    sem_db = build_semantic_db()
    vis_db = build_visual_db(questions, planted_sim)

    paths = {
        "semdb": root / "semdb.jsonl",
        "visdb": root / "visdb.bin",
        "questions": root / "questions.jsonl",
        "labels": root / "labels.jsonl",
        "fixtures": root / "fixtures.jsonl",
    }
    store_semantic(paths["semdb"], sem_db)
    persist_visual(paths["visdb"], vis_db)
    paths["questions"].write_text(
        "\n".join(q.spec.to_json() for q in questions) + "\n", encoding="utf-8")
    paths["labels"].write_text(
        "\n".join(label_line(label) for label in labels_for(questions)) + "\n",
        encoding="utf-8")

    terms = term_entries(questions, model)
    embeds = embed_entries(model)
    dry_clients = ClientSet(
        summarizer=None, detector=None,
        encoder=MockTextEncoder(FixtureStore(list(embeds.items())), model),
        answerer=MockChatClient(FixtureStore(list(terms.items())), model),
    )
    answers = {}
    for q in questions:
        result = answer_query(q.spec, sem_db, vis_db, dry_clients, dry_run=True)
        fingerprint = chat_fingerprint(model, result.bundle.enhanced_question,
                                       result.bundle.frames)
        answers[fingerprint] = LETTERS[q.gold_index]

    entries = {**terms, **embeds, **answers}
    FixtureStore.dump(list(entries.items()), paths["fixtures"])
    return paths
