"""Stage 2: parameter-free text-guided interaction and reranking.

The block balances two normalizations over the token similarity matrix:
a temperature softmax across each query-token row (fair allocation of
each query token over the item's tokens) followed by a column
normalization (no item token may soak up all the mass). The resulting
column-stochastic assignment mixes the query's token rows into one
guided embedding per item-token slot, which is mean-pooled and
normalized. No learned state is consulted anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .gallery import Gallery, QueryText
from .numerics import EPS, cosine, l2_normalize, matmul, row_softmax
from .recall import CandidateSet


@dataclass(frozen=True)
class RerankConfig:
    """Hyperparameters of the rerank stage.

    tau is the softmax temperature; fine_weight is the mixing weight
    lambda in the final score (0 scores only the coarse branch, 1 only
    the fine branch).
    """

    tau: float = 0.07
    fine_weight: float = 0.5
    eps: float = EPS

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.fine_weight <= 1.0:
            raise ParameterError(
                f"fine_weight must be in [0, 1], got {self.fine_weight}"
            )
        if self.eps <= 0:
            raise ParameterError(f"eps must be positive, got {self.eps}")


@dataclass(frozen=True)
class GuidedEmbeddings:
    """Text-guided embeddings for the two granularities of one item."""

    coarse: np.ndarray
    fine: np.ndarray


@dataclass(frozen=True)
class RankedResult:
    id: str
    score: float
    recall_rank: int
    rerank_rank: int


def similarity_matrix(query_tokens: np.ndarray, item_tokens: np.ndarray) -> np.ndarray:
    """Raw dot-product similarities, one row per query token."""
    if query_tokens.ndim != 2 or item_tokens.ndim != 2:
        raise ShapeError("token inputs must be 2-D matrices")
    if query_tokens.shape[1] != item_tokens.shape[1]:
        raise ShapeError(
            f"token widths differ: {query_tokens.shape[1]} vs {item_tokens.shape[1]}"
        )
    return matmul(query_tokens, item_tokens.T)


def dual_normalize(s: np.ndarray, tau: float, eps: float = EPS) -> np.ndarray:
    """Row softmax at temperature ``tau`` followed by column normalization.

    Every column of the result sums to 1 (up to the ``eps`` guard on
    underflowed columns), which prevents any single item token from
    crowding out the rest.
    """
    soft = row_softmax(s, tau).astype(np.float64)
    col_sums = soft.sum(axis=0)
    return (soft / np.maximum(col_sums, eps)).astype(np.float32)


def text_guided_embed(
    query_tokens: np.ndarray,
    item_tokens: np.ndarray,
    tau: float,
    eps: float = EPS,
) -> np.ndarray:
    """Guided embedding of one item under one query.

    The dual-normalized assignment re-mixes the query's token rows into
    one row per item token; those rows are mean-pooled and normalized.
    """
    s = similarity_matrix(query_tokens, item_tokens)
    assignment = dual_normalize(s, tau, eps)
    mixed = matmul(assignment.T, query_tokens)
    pooled = mixed.astype(np.float64).mean(axis=0).astype(np.float32)
    return l2_normalize(pooled, eps)


def guided_embeddings(
    coarse_tokens: np.ndarray,
    fine_tokens: np.ndarray,
    query_tokens: np.ndarray,
    cfg: RerankConfig,
) -> GuidedEmbeddings:
    """Run the interaction block once per granularity."""
    return GuidedEmbeddings(
        coarse=text_guided_embed(query_tokens, coarse_tokens, cfg.tau, cfg.eps),
        fine=text_guided_embed(query_tokens, fine_tokens, cfg.tau, cfg.eps),
    )


def rerank_score(
    query_embedding: np.ndarray, guided: GuidedEmbeddings, fine_weight: float
) -> float:
    """Weighted mix of the two guided-branch cosines."""
    if not 0.0 <= fine_weight <= 1.0:
        raise ParameterError(f"fine_weight must be in [0, 1], got {fine_weight}")
    coarse = cosine(query_embedding, guided.coarse)
    fine = cosine(query_embedding, guided.fine)
    return (1.0 - fine_weight) * coarse + fine_weight * fine


def rerank_candidates(
    gallery: Gallery,
    candidates: CandidateSet,
    query: QueryText,
    cfg: RerankConfig,
) -> list[RankedResult]:
    """Rescore every candidate with the interaction block and sort.

    Scores descend; ties break by ascending id. The recall rank of each
    candidate (1-based position in the input) is carried through.
    """
    scored: list[tuple[str, float, int]] = []
    for position, (candidate_id, _) in enumerate(candidates.candidates, start=1):
        entry = gallery.entry(candidate_id)
        guided = guided_embeddings(
            entry.coarse_tokens, entry.fine_tokens, query.token_embeddings, cfg
        )
        score = rerank_score(query.global_embedding, guided, cfg.fine_weight)
        scored.append((candidate_id, score, position))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return [
        RankedResult(id=cid, score=score, recall_rank=recall_rank, rerank_rank=rank)
        for rank, (cid, score, recall_rank) in enumerate(scored, start=1)
    ]
