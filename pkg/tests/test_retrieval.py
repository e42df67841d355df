from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_handbook
from handbook_divergence.chunking import ChunkingConfig, chunk_handbook
from handbook_divergence.gateway import hash_embedding
from handbook_divergence.retrieval import (DenseIndex, HandbookIndex, RankedList, RetrievalConfig, SparseIndex,
                                           bm25_score, bm25_tokens, build_handbook_index, dense_search,
                                           ensure_index, hybrid_search, rerank, rrf_fuse)
from oracles import brute_rrf, textbook_bm25

TOY = {
    "d1": "kidney diet low salt diet".split(),
    "d2": "kidney transplant clinic".split(),
    "d3": "heart diet".split(),
}


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def hash_embed(texts):
    return [unit(hash_embedding(t)) for t in texts]


class TestBM25:
    def test_absent_term_scores_zero(self):
        idx = SparseIndex.build(TOY)
        assert all(bm25_score(["liver"], idx, d) == 0.0 for d in TOY)

    def test_toy_matches_reference(self):
        idx = SparseIndex.build(TOY)
        for d in TOY:
            assert bm25_score(["kidney", "diet"], idx, d) == pytest.approx(
                textbook_bm25(["kidney", "diet"], TOY, d), abs=1e-9)

    def test_hand_computed_value(self):
        idx = SparseIndex.build(TOY)
        # "heart": df = 1, N = 3; d3 length 2, avgdl 10/3
        idf = math.log(1 + 2.5 / 1.5)
        expected = idf * 2.2 / (1 + 1.2 * (0.25 + 0.75 * 2 / (10 / 3)))
        assert bm25_score(["heart"], idx, "d3") == pytest.approx(expected, abs=1e-12)

    def test_unknown_chunk(self):
        with pytest.raises(KeyError):
            bm25_score(["kidney"], SparseIndex.build(TOY), "nope")

    def test_search_returns_only_matches(self):
        ranked = SparseIndex.build(TOY).search(["heart"], 10)
        assert ranked.ids == ["d3"]

    def test_json_round_trip(self):
        idx = SparseIndex.build(TOY)
        assert SparseIndex.from_json(idx.to_json()) == idx

    def test_tokens_lowercase_and_drop_punctuation(self):
        assert bm25_tokens("Kidney, DIET!") == ["kidney", "diet"]

    @given(st.dictionaries(st.sampled_from(["a", "b", "c", "d", "e", "f"]),
                           st.lists(st.sampled_from(["x", "y", "z", "w"]), min_size=1, max_size=12),
                           min_size=1, max_size=6),
           st.lists(st.sampled_from(["x", "y", "z", "q"]), min_size=1, max_size=4))
    def test_property_matches_reference(self, docs, query):
        idx = SparseIndex.build(docs)
        for d in docs:
            assert bm25_score(query, idx, d) == pytest.approx(textbook_bm25(query, docs, d), abs=1e-9)


class TestDense:
    def test_identity_ranks_first(self):
        rng = np.random.default_rng(0)
        vecs = [unit(rng.normal(size=8)) for _ in range(5)]
        idx = DenseIndex.build([f"c{i}" for i in range(5)], vecs)
        top = dense_search(vecs[3], idx, 1)
        assert top.ids == ["c3"]
        assert top.items[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_k_larger_than_corpus(self):
        idx = DenseIndex.build(["a", "b"], [unit([1, 0]), unit([0, 1])])
        assert len(dense_search(unit([1, 1]), idx, 10).ids) == 2

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            vecs = [unit(rng.normal(size=6)) for _ in range(5)]
            q = unit(rng.normal(size=6))
            idx = DenseIndex.build([f"c{i}" for i in range(5)], vecs)
            expected = sorted(range(5), key=lambda i: (-float(np.dot(vecs[i], q)), f"c{i}"))
            assert dense_search(q, idx, 5).ids == [f"c{i}" for i in expected]

    def test_dimension_mismatch(self):
        idx = DenseIndex.build(["a"], [unit([1, 0, 0])])
        with pytest.raises(ValueError):
            dense_search(unit([1, 0]), idx, 1)

    def test_rejects_non_unit_vectors(self):
        with pytest.raises(ValueError):
            DenseIndex(["a"], np.array([[3.0, 4.0]]))


class TestRRF:
    def test_single_list_rank_one(self):
        fused = rrf_fuse([RankedList((("a", 9.0),)), RankedList((("b", 1.0),))], 60)
        assert dict(fused.items)["a"] == pytest.approx(1 / 61)

    def test_rank_one_in_both(self):
        fused = rrf_fuse([RankedList((("a", 9.0),)), RankedList((("a", 1.0),))], 60)
        assert fused.items[0] == ("a", pytest.approx(2 / 61))

    def test_ties_by_chunk_id(self):
        fused = rrf_fuse([RankedList((("b", 1.0),)), RankedList((("a", 1.0),))], 60)
        assert fused.ids == ["a", "b"]

    def test_partial_overlap_oracle(self):
        rng = random.Random(1)
        pool = [f"c{i:02d}" for i in range(15)]
        l1, l2 = rng.sample(pool, 10), rng.sample(pool, 10)
        fused = rrf_fuse([RankedList.from_ids(l1), RankedList.from_ids(l2)], 60)
        assert [(c, pytest.approx(s, abs=1e-15)) for c, s in fused.items] == brute_rrf([l1, l2])

    def test_needs_a_list(self):
        with pytest.raises(ValueError):
            rrf_fuse([])


class TestRerank:
    def chunks(self, tiny_handbook):
        return chunk_handbook(tiny_handbook)

    def test_single_candidate_unchanged(self, tiny_handbook):
        c = self.chunks(tiny_handbook)[:1]
        assert rerank("q", c, lambda q, ps: 1 / 0).ids == [c[0].chunk_id]

    def test_reversing_scorer(self, tiny_handbook):
        cs = self.chunks(tiny_handbook)
        out = rerank("q", cs, lambda q, ps: list(range(len(ps))))
        assert out.ids == [c.chunk_id for c in reversed(cs)]

    def test_lenient_fallback_records_warning(self, tiny_handbook):
        cs = self.chunks(tiny_handbook)
        warnings: list[str] = []

        def timeout(q, ps):
            raise TimeoutError("scorer timed out")

        out = rerank("q", cs, timeout, warnings=warnings)
        assert out.ids == [c.chunk_id for c in cs]
        assert out.retriever == "fused"
        assert len(warnings) == 1 and "timed out" in warnings[0]

    def test_strict_raises(self, tiny_handbook):
        with pytest.raises(TimeoutError):
            rerank("q", self.chunks(tiny_handbook), lambda q, ps: (_ for _ in ()).throw(TimeoutError()),
                   strict=True)


class TestHybridSearch:
    def test_bounded_by_corpus(self, tiny_handbook):
        idx = build_handbook_index(tiny_handbook, hash_embed)
        out = hybrid_search("grapefruit", idx, RetrievalConfig(top_k_final=5), hash_embed,
                            lambda q, ps: [0.0] * len(ps))
        assert len(out) <= 3

    def test_hand_computed_ids(self):
        h = make_handbook(sections=[("A", "grapefruit tacrolimus"), ("B", "walking daily"), ("C", "rest often")])
        table = {"grapefruit tacrolimus?": [1, 0], "A: grapefruit tacrolimus": [0, 1],
                 "B: walking daily": [1, 0], "C: rest often": [1, 1]}

        def embed(texts):
            return [unit(table[t]) for t in texts]

        idx = build_handbook_index(h, embed)
        cfg = RetrievalConfig(top_k_final=2)
        # sparse: [A]; dense: [B, C, A]; RRF: A = 1/61 + 1/63, B = 1/61, C = 1/62
        out = hybrid_search("grapefruit tacrolimus?", idx, cfg, embed, lambda q, ps: [0.0] * len(ps))
        assert [c.chunk_id for c in out] == [f"{h.id}#0000", f"{h.id}#0001"]

    def test_dense_only_candidate_surfaces(self):
        h = make_handbook(sections=[("A", "immunosuppressant schedule"), ("B", "parking information")])
        table = {"when do I take my pills": [1, 0], "A: immunosuppressant schedule": [0.9, 0.1],
                 "B: parking information": [0, 1]}

        def embed(texts):
            return [unit(table[t]) for t in texts]

        idx = build_handbook_index(h, embed)
        assert idx.sparse.search(bm25_tokens("when do I take my pills"), 50).ids == []
        out = hybrid_search("when do I take my pills", idx, RetrievalConfig(top_k_final=1), embed,
                            lambda q, ps: [0.0] * len(ps))
        assert [c.heading for c in out] == ["A"]

    def test_rerank_depth_limits_candidates(self):
        sections = [(f"S{i}", f"kidney note {i}") for i in range(12)]
        h = make_handbook(sections=sections)
        idx = build_handbook_index(h, hash_embed)
        seen = []

        def scorer(q, ps):
            seen.append(len(ps))
            return [0.0] * len(ps)

        hybrid_search("kidney", idx, RetrievalConfig(top_k_final=3), hash_embed, scorer)
        assert seen == [6]

    def test_empty_handbook(self):
        h = make_handbook()
        idx = HandbookIndex(h.id, [], SparseIndex.build({}), DenseIndex.build([], [], dim=4))
        assert hybrid_search("x", idx, RetrievalConfig(), hash_embed, lambda q, ps: []) == []

    def test_foreign_chunks_rejected(self, tiny_handbook):
        other = make_handbook(center="center-002")
        chunks = chunk_handbook(tiny_handbook)
        with pytest.raises(ValueError):
            HandbookIndex(other.id, chunks, SparseIndex.build({}), DenseIndex.build([], [], dim=4))


class TestPersistence:
    def test_build_then_reuse_then_rebuild(self, tmp_path, tiny_handbook):
        cfg = RetrievalConfig()
        idx, built = ensure_index(tiny_handbook, tmp_path, hash_embed, "m", ChunkingConfig(), cfg)
        assert built
        again, built2 = ensure_index(tiny_handbook, tmp_path, hash_embed, "m", ChunkingConfig(), cfg)
        assert not built2
        assert [c.chunk_id for c in again.chunks] == [c.chunk_id for c in idx.chunks]
        assert np.allclose(again.dense.matrix, idx.dense.matrix)
        assert again.sparse == idx.sparse
        _, rebuilt = ensure_index(tiny_handbook, tmp_path, hash_embed, "other-model", ChunkingConfig(), cfg)
        assert rebuilt

    def test_missing_manifest_means_rebuild(self, tmp_path, tiny_handbook):
        ensure_index(tiny_handbook, tmp_path, hash_embed, "m", ChunkingConfig(), RetrievalConfig())
        (tmp_path / "manifest.json").unlink()
        _, built = ensure_index(tiny_handbook, tmp_path, hash_embed, "m", ChunkingConfig(), RetrievalConfig())
        assert built
