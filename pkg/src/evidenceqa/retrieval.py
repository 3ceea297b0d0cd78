"""Query-object extraction and cosine-threshold retrieval over visual evidence.

A timestamp is retrieved when the best cosine between any of its
proposals and any query-term embedding strictly exceeds the threshold.
Matches from several terms are unioned and deduplicated. The scan is
exact and linear per video; there is deliberately no approximate index,
so a naive full enumeration must produce the same set.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ClientError, InvalidArgumentError, SchemaError
from .frames import BBox, FrameRef
from .semantic import SemanticDb, semantic_search_text
from .visual import VisualDb

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.2

TERM_INSTRUCTION = (
    "Name the object the following question asks about. Reply with the "
    "object name, optionally followed by comma-separated synonyms or more "
    "general names, and nothing else.\nQuestion: {question}\nChoices: {choices}"
)
TERM_INSTRUCTION_WITH_IMAGE = (
    "Name the object inside the highlighted box of the attached reference "
    "image. Reply with the object name, optionally followed by "
    "comma-separated synonyms or more general names, and nothing else.\n"
    "Question: {question}\nChoices: {choices}"
)


@dataclass(frozen=True)
class RetrievalConfig:
    """Similarity threshold for the strict-inequality timestamp test."""

    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not -1.0 <= self.tau <= 1.0:
            raise InvalidArgumentError(f"tau must lie in [-1, 1], got {self.tau}")


@dataclass
class QueryTermSet:
    """Query object names (synonyms included) and their embeddings.

    ``embeddings`` stays ``None`` until the embed step fills it.
    ``fallback`` marks term sets produced by the heuristic when the
    model client failed.
    """

    terms: list[str]
    embeddings: list[np.ndarray] | None = None
    fallback: bool = False

    def __post_init__(self):
        if not self.terms:
            raise InvalidArgumentError("a query needs at least one term")
        folded = [t.casefold() for t in self.terms]
        if len(set(folded)) != len(folded):
            raise InvalidArgumentError(f"terms not unique after case-folding: {self.terms}")
        if self.embeddings is not None and len(self.embeddings) != len(self.terms):
            raise InvalidArgumentError("embeddings not aligned with terms")


@dataclass(frozen=True)
class Match:
    """Best proposal at one retained timestamp."""

    timestamp_ms: int
    bbox: BBox
    similarity: float


@dataclass
class RetrievedEvidence:
    """Sorted, deduplicated timestamps plus the argmax proposal per timestamp."""

    timestamps_ms: list[int]
    matches: list[Match] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.timestamps_ms)


def cosine(a, b) -> float:
    """Cosine similarity; zero-norm inputs score 0 by convention."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise InvalidArgumentError(
            f"cosine requires equal-length vectors, got {a.shape} and {b.shape}"
        )
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    value = float(np.dot(a, b) / (norm_a * norm_b))
    return min(1.0, max(-1.0, value))


def retrieve_timestamps(db: VisualDb, video_id: str, terms: QueryTermSet,
                        config: RetrievalConfig) -> RetrievedEvidence:
    """All timestamps whose best proposal-to-term cosine exceeds tau.

    Unknown videos yield an empty result rather than an error. Argmax
    ties go to the earliest-ingested proposal so matches are stable.
    """
    if terms.embeddings is None:
        raise InvalidArgumentError("query terms have no embeddings yet")
    term_matrix = np.stack(
        [np.asarray(e, dtype=np.float64) for e in terms.embeddings])
    if term_matrix.shape[1] != db.embedding_dim:
        raise InvalidArgumentError(
            f"term embeddings have dim {term_matrix.shape[1]}, db holds "
            f"{db.embedding_dim}"
        )
    term_norms = np.linalg.norm(term_matrix, axis=1)
    safe_term_norms = np.where(term_norms == 0.0, 1.0, term_norms)

    timestamps: list[int] = []
    matches: list[Match] = []
    for timestamp_ms, group in db.iter_groups(video_id):
        proposal_matrix = np.stack(
            [p.embedding.astype(np.float64) for p in group])
        proposal_norms = np.linalg.norm(proposal_matrix, axis=1)
        safe_norms = np.where(proposal_norms == 0.0, 1.0, proposal_norms)
        sims = proposal_matrix @ term_matrix.T
        sims /= np.outer(safe_norms, safe_term_norms)
        sims[proposal_norms == 0.0, :] = 0.0
        sims[:, term_norms == 0.0] = 0.0
        np.clip(sims, -1.0, 1.0, out=sims)
        per_proposal = sims.max(axis=1)
        best = float(per_proposal.max())
        if best > config.tau:
            best_index = int(np.argmax(per_proposal))
            timestamps.append(timestamp_ms)
            matches.append(Match(timestamp_ms, group[best_index].bbox, best))
    return RetrievedEvidence(timestamps, matches)


# ---------------------------------------------------------------------------
# Query-term extraction
# ---------------------------------------------------------------------------


def _dedupe_terms(raw_terms: list[str]) -> list[str]:
    seen: set[str] = set()
    terms = []
    for term in raw_terms:
        term = term.strip()
        if not term:
            continue
        folded = term.casefold()
        if folded in seen:
            continue
        seen.add(folded)
        terms.append(term)
    return terms


def _parse_term_reply(text: str) -> list[str]:
    stripped = text.strip()
    if stripped.startswith("["):
        try:
            parsed = json.loads(stripped)
            if isinstance(parsed, list) and all(isinstance(t, str) for t in parsed):
                return _dedupe_terms(parsed)
        except ValueError:
            pass
    return _dedupe_terms(re.split(r"[,;\n]", stripped))


_QUOTED = re.compile(r"'([^']+)'|\"([^\"]+)\"")
_CAPITALIZED_RUN = re.compile(r"\b[A-Z][a-zA-Z]*(?:\s+[A-Z][a-zA-Z]*)*\b")
_WORD = re.compile(r"[A-Za-z][A-Za-z-]*")


def fallback_term(question: str) -> str:
    """Heuristic query object: longest quoted phrase, else the longest
    capitalized run that does not open the question, else the longest word."""
    quoted = [a or b for a, b in _QUOTED.findall(question)]
    if quoted:
        return max(quoted, key=len).strip()
    runs = [m.group(0) for m in _CAPITALIZED_RUN.finditer(question)
            if m.start() > 0]
    if runs:
        return max(runs, key=len)
    words = _WORD.findall(question)
    if words:
        return max(words, key=len)
    return question.strip() or "object"


def extract_query_terms(question: str, choices: list[str],
                        ref_image: FrameRef | None,
                        mllm_client) -> QueryTermSet:
    """Ask the chat model to name the query object (several terms allowed).

    With a reference image, the highlighted region is attached and the
    model names what is inside it. On client failure the result falls
    back to a heuristic term and is flagged as such.
    """
    if ref_image is not None:
        instruction = TERM_INSTRUCTION_WITH_IMAGE.format(
            question=question, choices="; ".join(choices))
        frames = [ref_image]
    else:
        instruction = TERM_INSTRUCTION.format(
            question=question, choices="; ".join(choices))
        frames = []
    try:
        reply = mllm_client.answer_chat(instruction, frames)
        terms = _parse_term_reply(reply)
        if not terms:
            raise SchemaError("term reply contained no usable term",
                              raw_text=reply)
    except (ClientError, SchemaError) as exc:
        term = fallback_term(question)
        logger.warning("query-term extraction failed (%s); falling back to %r",
                       exc, term)
        return QueryTermSet(terms=[term], fallback=True)
    return QueryTermSet(terms=terms)


def embed_query_terms(terms: QueryTermSet, encoder_client) -> QueryTermSet:
    """Fill term embeddings via the text encoder, preserving the flag."""
    embeddings = [encoder_client.embed_text(term) for term in terms.terms]
    return QueryTermSet(terms=list(terms.terms), embeddings=embeddings,
                        fallback=terms.fallback)


# ---------------------------------------------------------------------------
# Video narrowing
# ---------------------------------------------------------------------------


_TOKEN = re.compile(r"[a-z0-9]+")


def _tokens(text: str) -> set[str]:
    return set(_TOKEN.findall(text.casefold()))


def narrow_videos(sem_db: SemanticDb, query_text: str, k: int) -> list[str]:
    """Top-k videos by case-folded token overlap with their semantic text.

    Ties (including the all-zero case) break by video ID, so the ranking
    is deterministic.
    """
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    query_tokens = _tokens(query_text)
    ranked = []
    for video_id in sem_db.video_ids():
        summary, records = sem_db.get(video_id)
        overlap = len(query_tokens & _tokens(semantic_search_text(summary, records)))
        ranked.append((-overlap, video_id))
    ranked.sort()
    return [video_id for _, video_id in ranked[:k]]
