"""Scoring predictions with equal weight per category.

Task accuracy is correct/total over that task's questions; category
accuracy is the unweighted mean of its task accuracies; the overall
score is the unweighted mean of category accuracies. Missing
predictions count as incorrect.

The bundled data file maps the benchmark's task names to their seven
categories and carries the published per-task reference accuracies used
by the scorer-reproduction check.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable

from .errors import InputError, InvalidArgumentError, ParseError

TASK_DATA_RESOURCE = "benchmark_tasks.json"
REFERENCE_QUESTIONS_PER_TASK = 1000

OVERALL_ROW_KEY = "overall"


@dataclass(frozen=True)
class LabeledItem:
    question_id: str
    task: str
    category: str
    gold_index: int


@dataclass(frozen=True)
class Prediction:
    question_id: str
    choice_index: int | None
    fallback_used: bool = False


@dataclass
class CategoryReport:
    """Per-task and per-category accuracies plus the equal-weight overall.

    ``task_categories`` records which category each scored task belongs
    to; it is what lets a serialized report rebuild its grouping.
    """

    per_task: dict[str, float]
    per_category: dict[str, float]
    overall: float
    task_categories: dict[str, str] = field(default_factory=dict)


@lru_cache(maxsize=1)
def _task_data() -> dict:
    text = resources.files("evidenceqa.data").joinpath(TASK_DATA_RESOURCE) \
        .read_text(encoding="utf-8")
    return json.loads(text)


def task_category_map() -> dict[str, str]:
    """The bundled task -> category map (copy; safe to mutate)."""
    return dict(_task_data()["categories"])


def reference_accuracies() -> dict[str, float]:
    """The bundled published per-task accuracies (copy)."""
    return dict(_task_data()["reference_accuracy"])


def score(predictions: Iterable[Prediction],
          labels: Iterable[LabeledItem]) -> CategoryReport:
    """Score predictions against labels.

    Raises :class:`InputError` for predictions whose question ID is not
    labeled, for duplicated question IDs on either side, and for labels
    whose category contradicts the bundled task map.
    """
    known_categories = task_category_map()

    by_question: dict[str, LabeledItem] = {}
    for label in labels:
        if label.question_id in by_question:
            raise InputError(f"duplicate label for question {label.question_id}")
        expected = known_categories.get(label.task)
        if expected is not None and expected != label.category:
            raise InputError(
                f"task {label.task!r} belongs to category {expected!r}, "
                f"label says {label.category!r}"
            )
        by_question[label.question_id] = label

    chosen: dict[str, int | None] = {}
    for prediction in predictions:
        if prediction.question_id not in by_question:
            raise InputError(
                f"prediction for unknown question {prediction.question_id}"
            )
        if prediction.question_id in chosen:
            raise InputError(
                f"duplicate prediction for question {prediction.question_id}"
            )
        chosen[prediction.question_id] = prediction.choice_index

    totals: dict[str, int] = {}
    corrects: dict[str, int] = {}
    task_categories: dict[str, str] = {}
    for label in by_question.values():
        totals[label.task] = totals.get(label.task, 0) + 1
        task_categories[label.task] = label.category
        if chosen.get(label.question_id) == label.gold_index:
            corrects[label.task] = corrects.get(label.task, 0) + 1

    per_task = {task: 100.0 * corrects.get(task, 0) / totals[task]
                for task in totals}

    category_tasks: dict[str, list[str]] = {}
    for task, category in task_categories.items():
        category_tasks.setdefault(category, []).append(task)
    per_category = {
        category: sum(per_task[task] for task in tasks) / len(tasks)
        for category, tasks in category_tasks.items()
    }
    overall = (sum(per_category.values()) / len(per_category)
               if per_category else 0.0)

    ordered_tasks = dict(sorted(per_task.items(),
                                key=lambda kv: (task_categories[kv[0]], kv[0])))
    ordered_categories = dict(sorted(per_category.items()))
    ordered_task_categories = {task: task_categories[task]
                               for task in ordered_tasks}
    return CategoryReport(per_task=ordered_tasks,
                          per_category=ordered_categories,
                          overall=overall,
                          task_categories=ordered_task_categories)


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------


def _report_rows(report: CategoryReport) -> list[tuple[str, str, float]]:
    rows = [(report.task_categories.get(task, ""), task, accuracy)
            for task, accuracy in report.per_task.items()]
    rows.sort(key=lambda row: (row[0], row[1]))
    rows.extend((category, "", accuracy)
                for category, accuracy in sorted(report.per_category.items()))
    rows.append((OVERALL_ROW_KEY, "", report.overall))
    return rows


def emit_report(report: CategoryReport, format: str = "text") -> str:
    """Serialize a report; ``text`` rounds to one decimal for reading,
    ``csv`` keeps full precision so it reparses exactly."""
    rows = _report_rows(report)
    if format == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["category", "task", "accuracy"])
        for category, task, accuracy in rows:
            writer.writerow([category, task, repr(accuracy)])
        return buffer.getvalue()
    if format == "text":
        width_cat = max([len("category")] + [len(r[0]) for r in rows])
        width_task = max([len("task")] + [len(r[1]) for r in rows])
        lines = [f"{'category':<{width_cat}}  {'task':<{width_task}}  accuracy"]
        for category, task, accuracy in rows:
            lines.append(
                f"{category:<{width_cat}}  {task:<{width_task}}  {accuracy:8.1f}"
            )
        return "\n".join(lines) + "\n"
    raise InvalidArgumentError(f"unknown report format {format!r}")


def parse_report_csv(text: str) -> CategoryReport:
    """Rebuild a report from its CSV serialization."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise InputError("empty report csv") from None
    if header != ["category", "task", "accuracy"]:
        raise InputError(f"unexpected report header {header!r}")
    per_task: dict[str, float] = {}
    per_category: dict[str, float] = {}
    task_categories: dict[str, str] = {}
    overall = 0.0
    for row in reader:
        if len(row) != 3:
            raise InputError(f"malformed report row {row!r}")
        category, task, accuracy = row[0], row[1], float(row[2])
        if task:
            per_task[task] = accuracy
            task_categories[task] = category
        elif category == OVERALL_ROW_KEY:
            overall = accuracy
        else:
            per_category[category] = accuracy
    return CategoryReport(per_task=per_task, per_category=per_category,
                          overall=overall, task_categories=task_categories)


# ---------------------------------------------------------------------------
# Reference replay
# ---------------------------------------------------------------------------


def reference_replay(questions_per_task: int = REFERENCE_QUESTIONS_PER_TASK
                     ) -> tuple[list[Prediction], list[LabeledItem]]:
    """Synthesize a prediction/label set realizing the bundled per-task
    reference accuracies exactly (they carry at most one decimal)."""
    if questions_per_task % 1000 != 0:
        raise InvalidArgumentError(
            "questions_per_task must be a multiple of 1000 to realize "
            "one-decimal accuracies exactly"
        )
    categories = task_category_map()
    predictions = []
    labels = []
    for task, accuracy in sorted(reference_accuracies().items()):
        correct = int(accuracy * (questions_per_task / 100) + 0.5)
        slug = task.lower().replace(" ", "-")
        for i in range(questions_per_task):
            question_id = f"{slug}-{i:04d}"
            labels.append(LabeledItem(question_id, task, categories[task],
                                      gold_index=0))
            predictions.append(Prediction(question_id,
                                          0 if i < correct else 1))
    return predictions, labels


# ---------------------------------------------------------------------------
# Line-delimited IO for labels and predictions
# ---------------------------------------------------------------------------


def prediction_line(prediction: Prediction) -> str:
    return json.dumps({
        "question_id": prediction.question_id,
        "choice_index": prediction.choice_index,
        "fallback_used": prediction.fallback_used,
    }, separators=(",", ":"), ensure_ascii=False)


def parse_prediction_line(line: str, lineno: int) -> Prediction:
    try:
        obj = json.loads(line)
        return Prediction(obj["question_id"], obj["choice_index"],
                          bool(obj.get("fallback_used", False)))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed prediction at line {lineno}: {exc}",
                         line=lineno) from exc


def label_line(label: LabeledItem) -> str:
    return json.dumps({
        "question_id": label.question_id,
        "task": label.task,
        "category": label.category,
        "gold_index": label.gold_index,
    }, separators=(",", ":"), ensure_ascii=False)


def parse_label_line(line: str, lineno: int) -> LabeledItem:
    try:
        obj = json.loads(line)
        return LabeledItem(obj["question_id"], obj["task"], obj["category"],
                           int(obj["gold_index"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed label at line {lineno}: {exc}",
                         line=lineno) from exc
