import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from evidenceqa.errors import ClientError, InvalidArgumentError
from evidenceqa.frames import FrameRef
from evidenceqa.retrieval import (
    QueryTermSet,
    RetrievalConfig,
    cosine,
    embed_query_terms,
    extract_query_terms,
    fallback_term,
    narrow_videos,
    retrieve_timestamps,
)
from evidenceqa.sampling import ChunkSpan
from evidenceqa.semantic import FineChunkRecord, GlobalSummary, SemanticDb
from evidenceqa.visual import VisualDb

BOX = (0.1, 0.1, 0.9, 0.9)


def f32(*values):
    return np.asarray(values, dtype=np.float32)


def oracle_retrieve(db, video_id, embeddings, tau):
    """Naive enumeration of every (timestamp, proposal, term) triple in
    plain Python arithmetic; deliberately shares no code with the scan."""
    retained = []
    for timestamp in db.timestamps(video_id):
        best = None
        for proposal in db.proposals_at(video_id, timestamp):
            vector = [float(x) for x in proposal.embedding]
            for term in embeddings:
                query = [float(x) for x in term]
                dot = sum(a * b for a, b in zip(vector, query))
                norm_v = math.sqrt(sum(a * a for a in vector))
                norm_q = math.sqrt(sum(b * b for b in query))
                sim = 0.0 if norm_v == 0.0 or norm_q == 0.0 else dot / (norm_v * norm_q)
                sim = min(1.0, max(-1.0, sim))
                if best is None or sim > best:
                    best = sim
        if best is not None and best > tau:
            retained.append(timestamp)
    return retained


class TestCosine:
    def test_identical_unit_vectors(self):
        assert cosine([1, 0], [1, 0]) == 1.0

    def test_orthogonal(self):
        assert cosine([1, 0], [0, 1]) == 0.0

    def test_forty_five_degrees(self):
        assert cosine([1, 1], [1, 0]) == pytest.approx(0.70710678, abs=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            cosine([1, 0], [1, 0, 0])

    def test_zero_norm_scores_zero(self):
        assert cosine([0, 0], [1, 0]) == 0.0
        assert cosine([1, 0], [0, 0]) == 0.0


def two_timestamp_db():
    db = VisualDb(embedding_dim=2, detector_threshold=0.3)
    db.ingest_detections("v", 3000, [(BOX, 0.9, f32(1, 0)),
                                     ((0.2, 0.2, 0.6, 0.6), 0.8, f32(0.6, 0.8))])
    db.ingest_detections("v", 7000, [(BOX, 0.9, f32(0, 1))])
    return db


class TestRetrieveTimestamps:
    def test_single_term_retains_matching_timestamp(self):
        db = two_timestamp_db()
        terms = QueryTermSet(["mug"], [f32(1, 0)])
        result = retrieve_timestamps(db, "v", terms, RetrievalConfig(tau=0.2))
        assert result.timestamps_ms == [3000]
        assert result.matches[0].similarity == 1.0
        stored_box = tuple(float(np.float32(v)) for v in BOX)
        assert result.matches[0].bbox == stored_box

    def test_union_of_two_terms(self):
        db = two_timestamp_db()
        terms = QueryTermSet(["mug", "cup"], [f32(1, 0), f32(0, 1)])
        result = retrieve_timestamps(db, "v", terms, RetrievalConfig(tau=0.2))
        assert result.timestamps_ms == [3000, 7000]

    def test_tau_one_excludes_everything(self):
        db = two_timestamp_db()
        terms = QueryTermSet(["mug"], [f32(1, 0)])
        result = retrieve_timestamps(db, "v", terms, RetrievalConfig(tau=1.0))
        assert result.timestamps_ms == []

    def test_unknown_video_is_empty_result(self):
        db = two_timestamp_db()
        terms = QueryTermSet(["mug"], [f32(1, 0)])
        result = retrieve_timestamps(db, "missing", terms, RetrievalConfig())
        assert result.timestamps_ms == [] and result.matches == []

    def test_dim_mismatch_is_an_error(self):
        db = two_timestamp_db()
        terms = QueryTermSet(["mug"], [f32(1, 0, 0)])
        with pytest.raises(InvalidArgumentError):
            retrieve_timestamps(db, "v", terms, RetrievalConfig())

    def test_unembedded_terms_are_an_error(self):
        db = two_timestamp_db()
        with pytest.raises(InvalidArgumentError):
            retrieve_timestamps(db, "v", QueryTermSet(["mug"]), RetrievalConfig())

    def test_argmax_tie_prefers_earliest_ingested(self):
        db = VisualDb(embedding_dim=2, detector_threshold=0.3)
        first_box = (0.0, 0.0, 0.5, 0.5)
        db.ingest_detections("v", 1000, [(first_box, 0.9, f32(2, 0)),
                                         (BOX, 0.9, f32(4, 0))])
        terms = QueryTermSet(["mug"], [f32(1, 0)])
        result = retrieve_timestamps(db, "v", terms, RetrievalConfig(tau=0.5))
        assert result.matches[0].bbox == first_box

    def test_zero_norm_proposal_never_matches(self):
        db = VisualDb(embedding_dim=2, detector_threshold=0.3)
        db.ingest_detections("v", 0, [(BOX, 0.9, f32(0, 0))])
        terms = QueryTermSet(["mug"], [f32(1, 0)])
        result = retrieve_timestamps(db, "v", terms, RetrievalConfig(tau=-0.5))
        assert result.timestamps_ms == [0]  # score 0 > -0.5
        assert result.matches[0].similarity == 0.0
        assert retrieve_timestamps(db, "v", terms,
                                   RetrievalConfig(tau=0.0)).timestamps_ms == []


def random_visual_db(rng, dim=16, max_groups=25):
    db = VisualDb(embedding_dim=dim, detector_threshold=0.3)
    timestamp = 0
    for _ in range(int(rng.integers(1, max_groups))):
        timestamp += int(rng.integers(1, 5000))
        detections = [
            (BOX, float(rng.uniform(0.3, 1.0)),
             rng.standard_normal(dim).astype(np.float32))
            for _ in range(int(rng.integers(1, 4)))
        ]
        db.ingest_detections("v", timestamp, detections)
    return db


def random_terms(rng, count, dim=16):
    return QueryTermSet(
        [f"t{i}" for i in range(count)],
        [rng.standard_normal(dim).astype(np.float32) for i in range(count)],
    )


class TestRetrievalLaws:
    def test_oracle_equivalence_randomized(self):
        rng = np.random.default_rng(123)
        for _ in range(40):
            db = random_visual_db(rng)
            terms = random_terms(rng, int(rng.integers(1, 4)))
            tau = float(rng.uniform(0, 1))
            result = retrieve_timestamps(db, "v", terms, RetrievalConfig(tau=tau))
            assert result.timestamps_ms == oracle_retrieve(db, "v",
                                                           terms.embeddings, tau)

    def test_monotonicity_in_tau(self):
        rng = np.random.default_rng(5)
        for _ in range(40):
            db = random_visual_db(rng)
            terms = random_terms(rng, 2)
            tau1, tau2 = sorted(rng.uniform(0, 1, size=2).tolist())
            low = retrieve_timestamps(db, "v", terms, RetrievalConfig(tau=tau1))
            high = retrieve_timestamps(db, "v", terms, RetrievalConfig(tau=tau2))
            assert set(high.timestamps_ms) <= set(low.timestamps_ms)

    def test_term_union_law(self):
        rng = np.random.default_rng(6)
        for _ in range(40):
            db = random_visual_db(rng)
            terms_a = random_terms(rng, 2)
            terms_b = QueryTermSet(
                ["u0", "u1"],
                [rng.standard_normal(16).astype(np.float32) for _ in range(2)],
            )
            merged = QueryTermSet(terms_a.terms + terms_b.terms,
                                  terms_a.embeddings + terms_b.embeddings)
            tau = float(rng.uniform(0, 1))
            config = RetrievalConfig(tau=tau)
            got = set(retrieve_timestamps(db, "v", merged, config).timestamps_ms)
            expected = (
                set(retrieve_timestamps(db, "v", terms_a, config).timestamps_ms)
                | set(retrieve_timestamps(db, "v", terms_b, config).timestamps_ms)
            )
            assert got == expected

    def test_similarity_exactly_tau_is_excluded(self):
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(40):
            db = random_visual_db(rng)
            terms = random_terms(rng, 2)
            everything = retrieve_timestamps(db, "v", terms,
                                             RetrievalConfig(tau=-1.0))
            for match in everything.matches[:3]:
                boundary = retrieve_timestamps(
                    db, "v", terms, RetrievalConfig(tau=match.similarity))
                assert match.timestamp_ms not in boundary.timestamps_ms
                checked += 1
        assert checked > 20

    def test_positive_scaling_invariance(self):
        # Power-of-two scales are exact in binary floating point, so the
        # retrieved set must be identical bit for bit.
        rng = np.random.default_rng(8)
        for _ in range(20):
            db = random_visual_db(rng)
            scale = float(2.0 ** rng.integers(-3, 4))
            scaled = VisualDb(embedding_dim=16, detector_threshold=0.3)
            for timestamp, group in db.iter_groups("v"):
                scaled.ingest_detections("v", timestamp, [
                    (p.bbox, p.score, p.embedding * np.float32(scale))
                    for p in group
                ])
            terms = random_terms(rng, 2)
            tau = float(rng.uniform(0, 1))
            config = RetrievalConfig(tau=tau)
            assert (retrieve_timestamps(db, "v", terms, config).timestamps_ms
                    == retrieve_timestamps(scaled, "v", terms, config).timestamps_ms)

    def test_output_strictly_increasing(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            db = random_visual_db(rng)
            terms = random_terms(rng, 2)
            result = retrieve_timestamps(db, "v", terms, RetrievalConfig(tau=0.0))
            assert all(a < b for a, b in
                       zip(result.timestamps_ms, result.timestamps_ms[1:]))


class TestRetrievalConfig:
    def test_tau_bounds(self):
        RetrievalConfig(tau=-1.0)
        RetrievalConfig(tau=1.0)
        with pytest.raises(InvalidArgumentError):
            RetrievalConfig(tau=1.5)

    def test_default_tau(self):
        assert RetrievalConfig().tau == 0.2


class TestQueryTermSet:
    def test_terms_unique_after_casefold(self):
        with pytest.raises(InvalidArgumentError):
            QueryTermSet(["Mug", "mug"])

    def test_embeddings_must_align(self):
        with pytest.raises(InvalidArgumentError):
            QueryTermSet(["mug"], [f32(1, 0), f32(0, 1)])


class _ScriptedChat:
    def __init__(self, reply):
        self.reply = reply
        self.calls = []

    def answer_chat(self, prompt, frames):
        self.calls.append((prompt, list(frames)))
        if isinstance(self.reply, Exception):
            raise self.reply
        return self.reply


class _ScriptedEncoder:
    def __init__(self, table):
        self.table = table

    def embed_text(self, term):
        return self.table[term]


class TestExtractQueryTerms:
    def test_multiple_terms_from_reply(self):
        client = _ScriptedChat("mug, cup")
        terms = extract_query_terms("Where is the mug after breakfast?",
                                    ["a", "b"], None, client)
        assert terms.terms == ["mug", "cup"]
        assert not terms.fallback

    def test_ref_image_is_attached(self):
        ref = FrameRef("v", 1000, bbox=(0.1, 0.1, 0.4, 0.4))
        client = _ScriptedChat("whisk")
        terms = extract_query_terms("What is this object?", ["a", "b"], ref,
                                    client)
        assert terms.terms == ["whisk"]
        _, frames = client.calls[0]
        assert frames == [ref]

    def test_client_failure_falls_back_to_quoted_phrase(self):
        client = _ScriptedChat(ClientError("down", retryable=False))
        terms = extract_query_terms(
            "Where did the 'pepper grinder' end up?", ["a", "b"], None, client)
        assert terms.terms == ["pepper grinder"]
        assert terms.fallback

    def test_empty_reply_falls_back(self):
        client = _ScriptedChat("   ")
        terms = extract_query_terms("Where is the Pepper Grinder now?",
                                    ["a", "b"], None, client)
        assert terms.fallback
        assert terms.terms == ["Pepper Grinder"]

    def test_embed_step_fills_embeddings(self):
        encoder = _ScriptedEncoder({"mug": f32(1, 0), "cup": f32(0, 1)})
        terms = embed_query_terms(QueryTermSet(["mug", "cup"]), encoder)
        assert len(terms.embeddings) == 2
        assert np.array_equal(terms.embeddings[0], f32(1, 0))


class TestFallbackTerm:
    def test_longest_quoted_wins(self):
        assert fallback_term("Find the 'red spatula' or \"pot\" now") == "red spatula"

    def test_capitalized_run_skips_question_start(self):
        assert fallback_term("Where is the Pepper Grinder?") == "Pepper Grinder"

    def test_longest_word_as_last_resort(self):
        assert fallback_term("where is the refrigerator") == "refrigerator"


def tiny_semantic_db():
    db = SemanticDb()
    for video_id, recipe in (("vid-a", "pasta"), ("vid-b", "omelette")):
        summary = GlobalSummary(
            video_id=video_id,
            recipe_candidates=[recipe],
            coarse_ingredients=["salt"],
            activity_stages=[],
            major_transitions=[],
        )
        record = FineChunkRecord(
            video_id=video_id,
            span=ChunkSpan(0, 60_000, 0),
            visible_operations=["stir"],
            involved_ingredients=[recipe],
            tool_interactions=[],
            ingredient_additions=[],
            step_boundaries=[],
        )
        db.add_video(summary, [record])
    return db


class TestNarrowVideos:
    def test_token_overlap_ranks_first(self):
        db = tiny_semantic_db()
        assert narrow_videos(db, "which pasta dish", k=2) == ["vid-a", "vid-b"]
        assert narrow_videos(db, "the omelette video", k=1) == ["vid-b"]

    def test_zero_overlap_falls_back_to_id_order(self):
        db = tiny_semantic_db()
        assert narrow_videos(db, "zzz qqq", k=2) == ["vid-a", "vid-b"]

    def test_k_larger_than_db(self):
        db = tiny_semantic_db()
        assert narrow_videos(db, "pasta", k=99) == ["vid-a", "vid-b"]

    def test_k_below_one_rejected(self):
        with pytest.raises(InvalidArgumentError):
            narrow_videos(tiny_semantic_db(), "pasta", k=0)

    def test_empty_db_gives_empty_list(self):
        assert narrow_videos(SemanticDb(), "pasta", k=3) == []
