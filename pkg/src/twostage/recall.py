"""Stage 1: text-agnostic scoring of the full gallery and top-K selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .gallery import Gallery, QueryText
from .numerics import EPS, l2_norm, top_k_indices


@dataclass
class CandidateSet:
    """Top-K recall output handed to the rerank stage."""

    query_id: str
    candidates: list[tuple[str, float]]
    k_requested: int

    def ids(self) -> list[str]:
        return [cid for cid, _ in self.candidates]


def recall_scores(gallery: Gallery, query: QueryText) -> list[tuple[str, float]]:
    """Cosine of the query's global embedding against every recall vector.

    Returned in gallery order. Each row is scored independently, so the
    result for an entry does not depend on its neighbors.
    """
    if gallery.dim != query.dim:
        raise ShapeError(
            f"gallery dim {gallery.dim} does not match query dim {query.dim}"
        )
    if not gallery.entries:
        return []
    m64 = gallery.recall_matrix.astype(np.float64)
    t64 = query.global_embedding.astype(np.float64)
    dots = np.einsum("nd,d->n", m64, t64)
    row_norms = np.sqrt(np.einsum("nd,nd->n", m64, m64))
    denom = np.maximum(row_norms * l2_norm(query.global_embedding), EPS)
    scores = dots / denom
    return list(zip(gallery.ids, scores.tolist()))


def recall_topk(gallery: Gallery, query: QueryText, k: int) -> CandidateSet:
    """Select the ``min(k, |gallery|)`` best recall scores, deterministically."""
    ranked = top_k_indices(recall_scores(gallery, query), k)
    return CandidateSet(query_id=query.id, candidates=ranked, k_requested=k)
