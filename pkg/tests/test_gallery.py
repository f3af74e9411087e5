import numpy as np
import pytest

from twostage.errors import (
    BadMagicError,
    CountMismatchError,
    ShapeError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)
from twostage.gallery import (
    Gallery,
    GalleryEntry,
    QueryText,
    aggregate_recall_embedding,
    build_gallery,
    load_gallery,
    load_queries,
    save_gallery,
    save_queries,
)


def random_tokens(rng, rows, dim):
    return rng.normal(size=(rows, dim)).astype(np.float32)


def random_items(rng, count, dim, n_c=2, n_f=4):
    return [
        (f"img{i:04d}", random_tokens(rng, n_c, dim), random_tokens(rng, n_f, dim))
        for i in range(count)
    ]


def unit(v):
    v = np.asarray(v, dtype=np.float32)
    return v / np.linalg.norm(v)


def make_query(qid, dim, rng, truth=()):
    tokens = random_tokens(rng, 3, dim)
    return QueryText(qid, tokens, unit(rng.normal(size=dim)), tuple(truth))


class TestAggregation:
    def test_orthogonal_single_tokens(self):
        out = aggregate_recall_embedding(
            np.array([[1.0, 0.0]], dtype=np.float32),
            np.array([[0.0, 1.0]], dtype=np.float32),
        )
        assert np.allclose(out, [0.70711, 0.70711], atol=1e-5)

    def test_collinear_tokens(self):
        tokens = np.array([[2.0, 0.0], [2.0, 0.0]], dtype=np.float32)
        assert np.allclose(aggregate_recall_embedding(tokens, tokens), [1.0, 0.0])

    def test_hand_pooled_oracle(self):
        coarse = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        fine = np.array([[1.0, 1.0], [3.0, 1.0], [-2.0, 0.0]], dtype=np.float32)
        # mean-pool each matrix, average the two pooled vectors, normalize
        expected = unit([0.25 + 1 / 3, 0.25 + 1 / 3])
        assert np.allclose(aggregate_recall_embedding(coarse, fine), expected, atol=1e-5)

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(11)
        coarse = random_tokens(rng, 3, 5)
        fine = random_tokens(rng, 6, 5)
        base = aggregate_recall_embedding(coarse, fine)
        shuffled = aggregate_recall_embedding(coarse[::-1].copy(), fine[[3, 0, 5, 1, 4, 2]])
        assert np.allclose(base, shuffled, atol=1e-6)

    def test_empty_tokens_rejected(self):
        with pytest.raises(ShapeError):
            aggregate_recall_embedding(
                np.zeros((0, 3), dtype=np.float32), np.zeros((2, 3), dtype=np.float32)
            )


class TestEntryInvariants:
    def test_fine_must_not_be_coarser(self):
        rng = np.random.default_rng(0)
        coarse = random_tokens(rng, 4, 3)
        fine = random_tokens(rng, 2, 3)
        v = unit(rng.normal(size=3))
        with pytest.raises(ValidationError):
            GalleryEntry("x", coarse, fine, v)

    def test_recall_embedding_must_be_unit(self):
        rng = np.random.default_rng(1)
        with pytest.raises(ValidationError):
            GalleryEntry(
                "x",
                random_tokens(rng, 2, 3),
                random_tokens(rng, 4, 3),
                np.array([1.0, 1.0, 1.0], dtype=np.float32),
            )


class TestBuildGallery:
    def test_empty_with_declared_dim(self):
        g = build_gallery([], dim=8)
        assert g.dim == 8 and len(g) == 0

    def test_empty_without_dim_rejected(self):
        with pytest.raises(ShapeError):
            build_gallery([])

    def test_single_entry_unit_norm(self):
        rng = np.random.default_rng(2)
        g = build_gallery(random_items(rng, 1, 6))
        assert len(g) == 1
        assert abs(np.linalg.norm(g.entries[0].recall_embedding) - 1.0) < 1e-5

    def test_rebuild_is_bitwise_identical(self):
        rng = np.random.default_rng(3)
        items = random_items(rng, 10, 7)
        first = build_gallery(items)
        second = build_gallery(items)
        for a, b in zip(first.entries, second.entries):
            assert abs(np.linalg.norm(a.recall_embedding) - 1.0) < 1e-5
            assert np.array_equal(a.recall_embedding, b.recall_embedding)

    def test_duplicate_ids_rejected(self):
        rng = np.random.default_rng(4)
        items = random_items(rng, 2, 4)
        items[1] = (items[0][0], items[1][1], items[1][2])
        with pytest.raises(ValidationError):
            build_gallery(items)

    def test_inconsistent_dim_rejected(self):
        rng = np.random.default_rng(5)
        items = random_items(rng, 1, 4)
        items.append(("other", random_tokens(rng, 2, 5), random_tokens(rng, 4, 5)))
        with pytest.raises(ShapeError):
            build_gallery(items)

    def test_entry_order_preserved(self):
        rng = np.random.default_rng(6)
        items = random_items(rng, 5, 4)
        g = build_gallery(items)
        assert list(g.ids) == [item[0] for item in items]


class TestGalleryPersistence:
    def test_roundtrip_is_bitwise_identity(self, tmp_path):
        rng = np.random.default_rng(7)
        g = build_gallery(random_items(rng, 6, 5, n_c=3, n_f=7))
        path = tmp_path / "g.ftfg"
        save_gallery(g, path)
        loaded = load_gallery(path)
        assert loaded.dim == g.dim
        assert len(loaded) == len(g)
        for a, b in zip(g.entries, loaded.entries):
            assert a.id == b.id
            assert np.array_equal(a.coarse_tokens, b.coarse_tokens)
            assert np.array_equal(a.fine_tokens, b.fine_tokens)
            assert np.array_equal(a.recall_embedding, b.recall_embedding)

    def test_empty_gallery_roundtrip(self, tmp_path):
        path = tmp_path / "empty.ftfg"
        save_gallery(Gallery(dim=4, entries=()), path)
        loaded = load_gallery(path)
        assert loaded.dim == 4 and len(loaded) == 0

    def test_bad_magic(self, tmp_path):
        rng = np.random.default_rng(8)
        path = tmp_path / "g.ftfg"
        save_gallery(build_gallery(random_items(rng, 1, 4)), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            load_gallery(path)

    def test_unsupported_version(self, tmp_path):
        rng = np.random.default_rng(9)
        path = tmp_path / "g.ftfg"
        save_gallery(build_gallery(random_items(rng, 1, 4)), path)
        data = bytearray(path.read_bytes())
        data[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(UnsupportedVersionError):
            load_gallery(path)

    def test_truncation_names_failing_entry(self, tmp_path):
        rng = np.random.default_rng(10)
        g = build_gallery(random_items(rng, 3, 4))
        path = tmp_path / "g.ftfg"
        save_gallery(g, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 10])
        with pytest.raises(TruncatedFileError, match="entry 2"):
            load_gallery(path)

    def test_trailing_bytes_are_count_mismatch(self, tmp_path):
        rng = np.random.default_rng(11)
        path = tmp_path / "g.ftfg"
        save_gallery(build_gallery(random_items(rng, 2, 4)), path)
        path.write_bytes(path.read_bytes() + b"\x00\x01\x02")
        with pytest.raises(CountMismatchError):
            load_gallery(path)


class TestQueryPersistence:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(12)
        queries = [
            make_query(f"q{i}", 6, rng, truth=(f"img{i:04d}", f"img{i + 1:04d}"))
            for i in range(5)
        ]
        path = tmp_path / "q.ftfq"
        save_queries(queries, path)
        loaded = load_queries(path)
        assert len(loaded) == 5
        for a, b in zip(queries, loaded):
            assert a.id == b.id
            assert np.array_equal(a.token_embeddings, b.token_embeddings)
            assert np.array_equal(a.global_embedding, b.global_embedding)
            assert a.ground_truth_ids == b.ground_truth_ids

    def test_zero_token_query_rejected_on_load(self, tmp_path):
        rng = np.random.default_rng(13)
        path = tmp_path / "q.ftfq"
        query = make_query("q0", 4, rng)
        save_queries([query], path)
        data = bytearray(path.read_bytes())
        # token count lives right after header (16 bytes) and id record
        offset = 16 + 4 + len(query.id.encode())
        data[offset : offset + 4] = (0).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(ValidationError):
            load_queries(path)

    def test_zero_token_query_rejected_on_construction(self):
        with pytest.raises(ValidationError):
            QueryText(
                "q",
                np.zeros((0, 4), dtype=np.float32),
                unit(np.ones(4)),
            )

    def test_bad_magic(self, tmp_path):
        rng = np.random.default_rng(16)
        path = tmp_path / "q.ftfq"
        save_queries([make_query("q0", 4, rng)], path)
        data = bytearray(path.read_bytes())
        data[:4] = b"WHAT"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            load_queries(path)

    def test_ground_truth_preserved_in_order(self, tmp_path):
        rng = np.random.default_rng(14)
        truth = ("z-last", "a-first", "m-middle")
        path = tmp_path / "q.ftfq"
        save_queries([make_query("q0", 4, rng, truth)], path)
        assert load_queries(path)[0].ground_truth_ids == truth


class TestGalleryLookup:
    def test_unknown_id(self):
        rng = np.random.default_rng(15)
        g = build_gallery(random_items(rng, 2, 4))
        with pytest.raises(KeyError):
            g.entry("missing")
