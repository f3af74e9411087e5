import numpy as np
import pytest

from twostage.errors import ParameterError, ShapeError
from twostage.gallery import Gallery, GalleryEntry, QueryText
from twostage.recall import recall_scores, recall_topk


def unit(v):
    v = np.asarray(v, dtype=np.float32)
    return v / np.linalg.norm(v)


def entry_with_embedding(eid, embedding):
    embedding = unit(embedding)
    tokens = np.stack([embedding, embedding])
    return GalleryEntry(eid, tokens, tokens, embedding)


def query_with_global(qid, embedding, truth=()):
    g = unit(embedding)
    return QueryText(qid, np.stack([g]), g, tuple(truth))


@pytest.fixture
def axis_gallery():
    entries = (
        entry_with_embedding("id1", [1.0, 0.0]),
        entry_with_embedding("id2", [0.0, 1.0]),
        entry_with_embedding("id3", [0.6, 0.8]),
    )
    return Gallery(dim=2, entries=entries)


class TestRecallScores:
    def test_parallel_scores_one(self, axis_gallery):
        q = query_with_global("q", [1.0, 0.0])
        scores = dict(recall_scores(axis_gallery, q))
        assert scores["id1"] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_scores_zero(self, axis_gallery):
        q = query_with_global("q", [1.0, 0.0])
        scores = dict(recall_scores(axis_gallery, q))
        assert scores["id2"] == pytest.approx(0.0, abs=1e-6)

    def test_analytic_three_entries(self, axis_gallery):
        q = query_with_global("q", [1.0, 0.0])
        scores = [s for _, s in recall_scores(axis_gallery, q)]
        assert scores == pytest.approx([1.0, 0.0, 0.6], abs=1e-6)

    def test_returned_in_gallery_order(self, axis_gallery):
        q = query_with_global("q", [0.3, 0.7])
        assert [i for i, _ in recall_scores(axis_gallery, q)] == ["id1", "id2", "id3"]

    def test_dim_mismatch(self, axis_gallery):
        q = query_with_global("q", [1.0, 0.0, 0.0])
        with pytest.raises(ShapeError):
            recall_scores(axis_gallery, q)

    def test_empty_gallery(self):
        q = query_with_global("q", [1.0, 0.0])
        assert recall_scores(Gallery(dim=2, entries=()), q) == []


class TestRecallTopK:
    def test_k_covers_gallery(self, axis_gallery):
        q = query_with_global("q", [1.0, 0.0])
        out = recall_topk(axis_gallery, q, 99)
        assert out.ids() == ["id1", "id3", "id2"]

    def test_analytic_top2(self, axis_gallery):
        q = query_with_global("q", [1.0, 0.0])
        out = recall_topk(axis_gallery, q, 2)
        assert out.candidates == [
            ("id1", pytest.approx(1.0, abs=1e-6)),
            ("id3", pytest.approx(0.6, abs=1e-6)),
        ]

    def test_k_zero_rejected(self, axis_gallery):
        q = query_with_global("q", [1.0, 0.0])
        with pytest.raises(ParameterError):
            recall_topk(axis_gallery, q, 0)

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(42)
        entries = tuple(
            entry_with_embedding(f"e{i:05d}", rng.normal(size=8)) for i in range(1000)
        )
        gallery = Gallery(dim=8, entries=entries)
        q = query_with_global("q", rng.normal(size=8))
        oracle = sorted(recall_scores(gallery, q), key=lambda p: (-p[1], p[0]))[:50]
        out = recall_topk(gallery, q, 50)
        assert out.candidates == [(i, pytest.approx(s)) for i, s in oracle]

    def test_prefix_containment(self):
        rng = np.random.default_rng(7)
        entries = tuple(
            entry_with_embedding(f"e{i:03d}", rng.normal(size=4)) for i in range(40)
        )
        gallery = Gallery(dim=4, entries=entries)
        q = query_with_global("q", rng.normal(size=4))
        previous: list[str] = []
        for k in (1, 3, 10, 25, 40):
            ids = recall_topk(gallery, q, k).ids()
            assert ids[: len(previous)] == previous
            previous = ids

    def test_full_k_is_permutation_of_gallery(self):
        rng = np.random.default_rng(8)
        entries = tuple(
            entry_with_embedding(f"e{i:03d}", rng.normal(size=4)) for i in range(17)
        )
        gallery = Gallery(dim=4, entries=entries)
        q = query_with_global("q", rng.normal(size=4))
        ids = recall_topk(gallery, q, len(gallery)).ids()
        assert sorted(ids) == sorted(gallery.ids)

    def test_sharded_scoring_is_bitwise_identical(self):
        # each entry's score depends only on its own row, so scoring the
        # gallery in independent shards (as a parallel worker would)
        # reproduces the sequential result bit for bit
        rng = np.random.default_rng(10)
        entries = [
            entry_with_embedding(f"e{i:03d}", rng.normal(size=6)) for i in range(30)
        ]
        q = query_with_global("q", rng.normal(size=6))
        whole = recall_scores(Gallery(dim=6, entries=tuple(entries)), q)
        sharded = []
        for start in range(0, 30, 7):
            shard = Gallery(dim=6, entries=tuple(entries[start : start + 7]))
            sharded.extend(recall_scores(shard, q))
        assert whole == sharded

    def test_gallery_order_invariance(self):
        rng = np.random.default_rng(9)
        entries = [
            entry_with_embedding(f"e{i:03d}", rng.normal(size=4)) for i in range(20)
        ]
        q = query_with_global("q", rng.normal(size=4))
        forward = recall_topk(Gallery(dim=4, entries=tuple(entries)), q, 5)
        backward = recall_topk(Gallery(dim=4, entries=tuple(entries[::-1])), q, 5)
        assert forward.candidates == backward.candidates
