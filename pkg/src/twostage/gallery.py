"""Multi-granular image/text embedding model and bit-exact persistence.

A gallery entry keeps two token matrices for the same image -- a coarse
grid and a finer grid over the same feature space -- plus a single
aggregated unit vector used by the recall stage. Queries carry a token
matrix and a global embedding produced by the text side of an encoder.

On-disk layouts (all integers little-endian u32, all floats f32 LE):

    gallery file:  "FTFG" | version=1 | d | n_entries |
                   per entry: id_len, id utf-8, n_c, n_f,
                   coarse tokens row-major, fine tokens row-major,
                   recall embedding (d floats)
    query file:    "FTFQ" | version=1 | d | n_queries |
                   per query: id_len, id utf-8, n_t,
                   token matrix row-major, global embedding (d floats),
                   n_gt, ground-truth ids (each length-prefixed)
"""

from __future__ import annotations

import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    CountMismatchError,
    ShapeError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)
from .numerics import EPS, as_matrix, as_vector, l2_norm

GALLERY_MAGIC = b"FTFG"
QUERY_MAGIC = b"FTFQ"
FORMAT_VERSION = 1

UNIT_NORM_TOL = 1e-5


def _check_unit(v: np.ndarray, what: str) -> None:
    norm = l2_norm(v)
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ValidationError(f"{what} must be unit-norm, got norm {norm:.6g}")


@dataclass
class GalleryEntry:
    """One indexed image: coarse tokens, fine tokens, and its recall vector."""

    id: str
    coarse_tokens: np.ndarray
    fine_tokens: np.ndarray
    recall_embedding: np.ndarray

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("entry id must be a non-empty string")
        self.coarse_tokens = as_matrix(self.coarse_tokens)
        self.fine_tokens = as_matrix(self.fine_tokens)
        self.recall_embedding = as_vector(self.recall_embedding)
        d = self.recall_embedding.shape[0]
        if self.coarse_tokens.shape[1] != d or self.fine_tokens.shape[1] != d:
            raise ShapeError(
                f"entry {self.id!r}: token width must match embedding dim {d}"
            )
        n_c, n_f = self.coarse_tokens.shape[0], self.fine_tokens.shape[0]
        if n_c < 1 or n_f < 1:
            raise ShapeError(f"entry {self.id!r}: token matrices must be non-empty")
        if n_f < n_c:
            raise ValidationError(
                f"entry {self.id!r}: fine grid has {n_f} tokens, fewer than coarse {n_c}"
            )
        _check_unit(self.recall_embedding, f"entry {self.id!r} recall embedding")

    @property
    def dim(self) -> int:
        return self.recall_embedding.shape[0]


@dataclass
class Gallery:
    """Immutable ordered collection of entries sharing one embedding dim."""

    dim: int
    entries: tuple[GalleryEntry, ...]

    def __post_init__(self) -> None:
        self.entries = tuple(self.entries)
        seen: set[str] = set()
        for entry in self.entries:
            if entry.id in seen:
                raise ValidationError(f"duplicate gallery id {entry.id!r}")
            seen.add(entry.id)
            if entry.dim != self.dim:
                raise ShapeError(
                    f"entry {entry.id!r} has dim {entry.dim}, gallery declares {self.dim}"
                )

    def __len__(self) -> int:
        return len(self.entries)

    @cached_property
    def ids(self) -> tuple[str, ...]:
        return tuple(e.id for e in self.entries)

    @cached_property
    def _by_id(self) -> dict[str, GalleryEntry]:
        return {e.id: e for e in self.entries}

    def entry(self, entry_id: str) -> GalleryEntry:
        try:
            return self._by_id[entry_id]
        except KeyError:
            raise KeyError(f"unknown gallery id {entry_id!r}") from None

    @cached_property
    def recall_matrix(self) -> np.ndarray:
        """Stacked recall embeddings, one row per entry (empty -> 0 x dim)."""
        if not self.entries:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([e.recall_embedding for e in self.entries])


@dataclass
class QueryText:
    """One text query: token matrix, global embedding, optional ground truth."""

    id: str
    token_embeddings: np.ndarray
    global_embedding: np.ndarray
    ground_truth_ids: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("query id must be a non-empty string")
        self.token_embeddings = as_matrix(self.token_embeddings)
        self.global_embedding = as_vector(self.global_embedding)
        self.ground_truth_ids = tuple(self.ground_truth_ids)
        if self.token_embeddings.shape[0] < 1:
            raise ValidationError(f"query {self.id!r} has no tokens")
        if self.token_embeddings.shape[1] != self.global_embedding.shape[0]:
            raise ShapeError(
                f"query {self.id!r}: token width must match global embedding dim"
            )
        _check_unit(self.global_embedding, f"query {self.id!r} global embedding")

    @property
    def dim(self) -> int:
        return self.global_embedding.shape[0]


class ImageTextEncoder(ABC):
    """Boundary for anything that maps raw features to embeddings."""

    @property
    @abstractmethod
    def dim(self) -> int: ...

    @abstractmethod
    def encode_image(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (coarse_tokens, fine_tokens) for one image."""

    @abstractmethod
    def encode_text(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (token_embeddings, global_embedding) for one text."""


def aggregate_recall_embedding(
    coarse_tokens: np.ndarray, fine_tokens: np.ndarray
) -> np.ndarray:
    """Pool both granularities into one unit vector.

    Each token matrix is mean-pooled, the two pooled vectors are
    averaged, and the result is L2-normalized. Parameter-free and
    invariant to row order within each matrix.
    """
    c = as_matrix(coarse_tokens)
    f = as_matrix(fine_tokens)
    if c.shape[0] < 1 or f.shape[0] < 1:
        raise ShapeError("token matrices must have at least one row")
    if c.shape[1] != f.shape[1]:
        raise ShapeError(f"token widths differ: {c.shape[1]} vs {f.shape[1]}")
    pooled = (c.astype(np.float64).mean(axis=0) + f.astype(np.float64).mean(axis=0)) / 2.0
    norm = float(np.sqrt(np.einsum("i,i->", pooled, pooled)))
    return (pooled / max(norm, EPS)).astype(np.float32)


def build_gallery(
    items: Iterable[tuple[str, np.ndarray, np.ndarray]], dim: int | None = None
) -> Gallery:
    """Assemble a gallery from (id, coarse_tokens, fine_tokens) triples.

    ``dim`` may be omitted when at least one item is given; it is then
    inferred from the first item and checked against the rest.
    """
    entries: list[GalleryEntry] = []
    for item_id, coarse, fine in items:
        embedding = aggregate_recall_embedding(coarse, fine)
        if dim is None:
            dim = embedding.shape[0]
        entries.append(GalleryEntry(item_id, coarse, fine, embedding))
    if dim is None:
        raise ShapeError("cannot build an empty gallery without a declared dim")
    return Gallery(dim=dim, entries=tuple(entries))


class _Reader:
    """Byte cursor that raises TruncatedFileError with a useful context."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, context: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"file ends while reading {context} "
                f"(needed {n} bytes at offset {self.pos}, have {len(self.data)})"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, context: str) -> int:
        return struct.unpack("<I", self.take(4, context))[0]

    def f32_array(self, count: int, context: str) -> np.ndarray:
        raw = self.take(4 * count, context)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)

    def string(self, context: str) -> str:
        length = self.u32(f"{context} length")
        return self.take(length, context).decode("utf-8")

    def done(self) -> bool:
        return self.pos == len(self.data)

    def remaining(self) -> int:
        return len(self.data) - self.pos


def _write_string(buf: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    buf += struct.pack("<I", len(raw))
    buf += raw


def _read_header(reader: _Reader, magic: bytes, kind: str) -> tuple[int, int]:
    found = reader.take(4, f"{kind} magic")
    if found != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {found!r}")
    version = reader.u32("format version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported {kind} format version {version} (expected {FORMAT_VERSION})"
        )
    dim = reader.u32("embedding dim")
    count = reader.u32("record count")
    return dim, count


def save_gallery(gallery: Gallery, path: str | Path) -> None:
    buf = bytearray()
    buf += GALLERY_MAGIC
    buf += struct.pack("<III", FORMAT_VERSION, gallery.dim, len(gallery.entries))
    for entry in gallery.entries:
        _write_string(buf, entry.id)
        buf += struct.pack(
            "<II", entry.coarse_tokens.shape[0], entry.fine_tokens.shape[0]
        )
        buf += entry.coarse_tokens.astype("<f4").tobytes()
        buf += entry.fine_tokens.astype("<f4").tobytes()
        buf += entry.recall_embedding.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_gallery(path: str | Path) -> Gallery:
    reader = _Reader(Path(path).read_bytes())
    dim, count = _read_header(reader, GALLERY_MAGIC, "gallery")
    entries: list[GalleryEntry] = []
    for i in range(count):
        where = f"entry {i}"
        entry_id = reader.string(f"{where} id")
        n_c = reader.u32(f"{where} coarse token count")
        n_f = reader.u32(f"{where} fine token count")
        coarse = reader.f32_array(n_c * dim, f"{where} coarse tokens").reshape(n_c, dim)
        fine = reader.f32_array(n_f * dim, f"{where} fine tokens").reshape(n_f, dim)
        embedding = reader.f32_array(dim, f"{where} recall embedding")
        entries.append(GalleryEntry(entry_id, coarse, fine, embedding))
    if not reader.done():
        raise CountMismatchError(
            f"gallery declares {count} entries but {reader.remaining()} bytes remain"
        )
    return Gallery(dim=dim, entries=tuple(entries))


def save_queries(queries: Sequence[QueryText], path: str | Path) -> None:
    if queries:
        dim = queries[0].dim
        for q in queries:
            if q.dim != dim:
                raise ShapeError(f"query {q.id!r} has dim {q.dim}, expected {dim}")
    else:
        dim = 0
    buf = bytearray()
    buf += QUERY_MAGIC
    buf += struct.pack("<III", FORMAT_VERSION, dim, len(queries))
    for q in queries:
        _write_string(buf, q.id)
        buf += struct.pack("<I", q.token_embeddings.shape[0])
        buf += q.token_embeddings.astype("<f4").tobytes()
        buf += q.global_embedding.astype("<f4").tobytes()
        buf += struct.pack("<I", len(q.ground_truth_ids))
        for gt in q.ground_truth_ids:
            _write_string(buf, gt)
    Path(path).write_bytes(bytes(buf))


def load_queries(path: str | Path) -> list[QueryText]:
    reader = _Reader(Path(path).read_bytes())
    dim, count = _read_header(reader, QUERY_MAGIC, "query")
    queries: list[QueryText] = []
    for i in range(count):
        where = f"query {i}"
        query_id = reader.string(f"{where} id")
        n_t = reader.u32(f"{where} token count")
        if n_t < 1:
            raise ValidationError(f"{where} ({query_id!r}) declares zero tokens")
        tokens = reader.f32_array(n_t * dim, f"{where} tokens").reshape(n_t, dim)
        global_emb = reader.f32_array(dim, f"{where} global embedding")
        n_gt = reader.u32(f"{where} ground-truth count")
        truth = tuple(reader.string(f"{where} ground-truth id") for _ in range(n_gt))
        queries.append(QueryText(query_id, tokens, global_emb, truth))
    if not reader.done():
        raise CountMismatchError(
            f"query file declares {count} queries but {reader.remaining()} bytes remain"
        )
    return queries
