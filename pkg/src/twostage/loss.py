"""Training objective: cross-modal alignment plus within-modal structure.

The alignment part is a pairwise sigmoid objective applied to all three
visual branches of a batch against the text embeddings: for every
(text i, visual j) pair the dot product is pushed up when i == j and
down otherwise, each term being log(1 + exp(-y * dot / tau)) averaged
over the N^2 pairs.

The structure part builds a neighbor graph from the recall embeddings
(top-M most-similar batch members per sample, softmax-weighted at
temperature sigma) and penalizes the two guided branches for breaking
those neighborhoods: sum of g_ij * (1 - dot(v_i, v_j)) averaged over
the batch.

All losses and gradients are computed in float64 regardless of the
input dtype, so finite-difference checks on perturbed copies are exact.
Gradients treat the hard top-M neighbor selection as frozen but do flow
through the softmax neighbor weights into the recall embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError, ValidationError

RECALL_BRANCH, COARSE_BRANCH, FINE_BRANCH = 0, 1, 2


@dataclass(frozen=True)
class LossConfig:
    # tau 0.25 rather than the usual contrastive 0.07: at toy scale the
    # sharper temperature saturates the pairwise sigmoid and stalls learning
    tau: float = 0.25
    beta: float = 1.0
    alpha: tuple[float, float, float] = (1.0, 1.0, 1.0)
    neighbors: int = 5
    sigma: float = 0.1

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ParameterError(f"loss temperature must be positive, got {self.tau}")
        if self.beta < 0:
            raise ParameterError(f"beta must be non-negative, got {self.beta}")
        if len(self.alpha) != 3 or any(a < 0 for a in self.alpha):
            raise ParameterError(f"alpha must be three non-negative weights, got {self.alpha}")
        if self.neighbors < 1:
            raise ParameterError(f"neighbor count must be at least 1, got {self.neighbors}")
        if self.sigma <= 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")


@dataclass
class AlignmentBatch:
    """Paired batch: text embeddings plus the three visual branches.

    Rows are expected to be L2-normalized so dot products coincide with
    cosines; this is not enforced here so that losses stay well-defined
    on perturbed copies (finite differences, mid-update parameters).
    """

    text: np.ndarray
    recall: np.ndarray
    guided_coarse: np.ndarray
    guided_fine: np.ndarray

    def __post_init__(self) -> None:
        blocks = {
            "text": self.text,
            "recall": self.recall,
            "guided_coarse": self.guided_coarse,
            "guided_fine": self.guided_fine,
        }
        for name, block in blocks.items():
            arr = np.asarray(block, dtype=np.float64)
            if arr.ndim != 2:
                raise ShapeError(f"{name} block must be 2-D, got ndim={arr.ndim}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} block contains non-finite values")
            setattr(self, name, arr)
        shape = self.text.shape
        for name in ("recall", "guided_coarse", "guided_fine"):
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} block shape differs from text block {shape}")
        if shape[0] < 1:
            raise ParameterError("batch must contain at least one pair")

    @property
    def n(self) -> int:
        return self.text.shape[0]

    def branches(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.recall, self.guided_coarse, self.guided_fine


@dataclass
class NeighborGraph:
    """Per-sample top-M neighborhoods with softmax weights.

    ``indices[i]`` holds the neighbor rows of sample i (self excluded,
    ties broken by ascending index); ``weights[i]`` sums to 1.
    """

    indices: np.ndarray
    weights: np.ndarray
    similarities: np.ndarray

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def width(self) -> int:
        return self.indices.shape[1]


@dataclass
class LossBreakdown:
    total: float
    inter_total: float
    inter_branches: np.ndarray
    intra_total: float
    intra_branches: np.ndarray


@dataclass
class LossGradients:
    text: np.ndarray
    recall: np.ndarray
    guided_coarse: np.ndarray
    guided_fine: np.ndarray


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def pairwise_alignment_loss(text: np.ndarray, visual: np.ndarray, tau: float) -> float:
    """Sigmoid pairwise loss over all N^2 (text, visual) combinations.

    Diagonal pairs carry label +1, everything else -1; each term is
    log(1 + exp(-label * dot / tau)) computed via logaddexp so large
    arguments never overflow.
    """
    if tau <= 0:
        raise ParameterError(f"loss temperature must be positive, got {tau}")
    t = np.asarray(text, dtype=np.float64)
    v = np.asarray(visual, dtype=np.float64)
    if t.shape != v.shape or t.ndim != 2:
        raise ShapeError(f"batch shapes differ: {t.shape} vs {v.shape}")
    n = t.shape[0]
    if n < 1:
        raise ParameterError("batch must contain at least one pair")
    sims = t @ v.T
    labels = np.full((n, n), -1.0)
    np.fill_diagonal(labels, 1.0)
    z = -labels * sims / tau
    return float(np.logaddexp(0.0, z).sum() / (n * n))


def _alignment_grads(
    text: np.ndarray, visual: np.ndarray, tau: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss plus gradients wrt both blocks for a single visual branch."""
    n = text.shape[0]
    sims = text @ visual.T
    labels = np.full((n, n), -1.0)
    np.fill_diagonal(labels, 1.0)
    z = -labels * sims / tau
    loss = float(np.logaddexp(0.0, z).sum() / (n * n))
    # d/d sims of log(1 + e^z) with z = -y s / tau
    coeff = _stable_sigmoid(z) * (-labels / tau) / (n * n)
    return loss, coeff @ visual, coeff.T @ text


def alignment_loss(batch: AlignmentBatch, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Weighted sum of the pairwise loss over the three visual branches."""
    per_branch = np.array(
        [pairwise_alignment_loss(batch.text, v, cfg.tau) for v in batch.branches()]
    )
    total = float(np.dot(np.asarray(cfg.alpha, dtype=np.float64), per_branch))
    return total, per_branch


def neighbor_graph(vectors: np.ndarray, neighbors: int, sigma: float) -> NeighborGraph:
    """Top-M neighborhoods under dot-product similarity, self excluded.

    Each sample keeps its min(M, N-1) most similar batch mates (ties by
    ascending index) with weights softmax(similarity / sigma) over the
    kept set.
    """
    if neighbors < 1:
        raise ParameterError(f"neighbor count must be at least 1, got {neighbors}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError("neighbor_graph expects a 2-D batch")
    n = v.shape[0]
    if n < 2:
        raise ParameterError(f"neighbor graph needs at least 2 samples, got {n}")
    width = min(neighbors, n - 1)
    sims = v @ v.T
    indices = np.empty((n, width), dtype=np.int64)
    kept = np.empty((n, width), dtype=np.float64)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        others.sort(key=lambda j: (-sims[i, j], j))
        chosen = others[:width]
        indices[i] = chosen
        kept[i] = sims[i, chosen]
    scaled = kept / sigma
    scaled -= scaled.max(axis=1, keepdims=True)
    e = np.exp(scaled)
    weights = e / e.sum(axis=1, keepdims=True)
    return NeighborGraph(indices=indices, weights=weights, similarities=kept)


def structure_loss(graph: NeighborGraph, vectors: np.ndarray) -> float:
    """Weighted neighborhood residual for one guided branch."""
    loss, _ = _structure_residuals(graph, np.asarray(vectors, dtype=np.float64))
    return loss


def _structure_residuals(
    graph: NeighborGraph, v: np.ndarray
) -> tuple[float, np.ndarray]:
    if v.ndim != 2 or v.shape[0] != graph.n:
        raise ValidationError(
            f"branch has {v.shape[0] if v.ndim == 2 else '?'} rows, "
            f"graph was built over {graph.n}"
        )
    # residual r[i, s] = 1 - dot(v_i, v_{neighbor s of i})
    residuals = 1.0 - np.einsum("id,isd->is", v, v[graph.indices])
    loss = float((graph.weights * residuals).sum() / graph.n)
    return loss, residuals


def _structure_grads(graph: NeighborGraph, v: np.ndarray) -> np.ndarray:
    """Gradient of structure_loss wrt the branch, neighbor weights fixed."""
    n, width = graph.n, graph.width
    scale = -1.0 / n
    grad = scale * np.einsum("is,isd->id", graph.weights, v[graph.indices])
    flat_contrib = (scale * graph.weights[:, :, None] * v[:, None, :]).reshape(-1, v.shape[1])
    np.add.at(grad, graph.indices.reshape(-1), flat_contrib)
    return grad


def _graph_weight_grads(
    graph: NeighborGraph, recall: np.ndarray, sigma: float, residual_sum: np.ndarray
) -> np.ndarray:
    """Gradient flowing into the recall block through the softmax weights.

    ``residual_sum`` is the per-slot residual summed over the branches
    that use the graph. With the neighbor sets frozen, the derivative of
    the loss wrt a kept similarity a_il is
    g_il / (N * sigma) * (c_il - sum_s g_is c_is), and each similarity
    is a dot product of two recall rows.
    """
    n = graph.n
    weighted_mean = (graph.weights * residual_sum).sum(axis=1, keepdims=True)
    w = graph.weights * (residual_sum - weighted_mean) / (n * sigma)
    grad = np.einsum("is,isd->id", w, recall[graph.indices])
    flat_contrib = (w[:, :, None] * recall[:, None, :]).reshape(-1, recall.shape[1])
    np.add.at(grad, graph.indices.reshape(-1), flat_contrib)
    return grad


def combined_loss(batch: AlignmentBatch, cfg: LossConfig) -> LossBreakdown:
    """Full objective: alignment total plus beta times the structure total.

    The neighbor graph comes from the recall branch only and is applied
    to the two guided branches. Batches of one pair are accepted only
    when beta is zero (no graph can be built).
    """
    inter_total, inter_branches = alignment_loss(batch, cfg)
    if batch.n < 2:
        if cfg.beta > 0:
            raise ParameterError(
                "structure term requires at least 2 pairs; use beta=0 for singletons"
            )
        intra_branches = np.zeros(2)
    else:
        graph = neighbor_graph(batch.recall, cfg.neighbors, cfg.sigma)
        intra_branches = np.array(
            [
                structure_loss(graph, batch.guided_coarse),
                structure_loss(graph, batch.guided_fine),
            ]
        )
    intra_total = float(intra_branches.sum())
    return LossBreakdown(
        total=inter_total + cfg.beta * intra_total,
        inter_total=inter_total,
        inter_branches=inter_branches,
        intra_total=intra_total,
        intra_branches=intra_branches,
    )


def combined_loss_gradients(batch: AlignmentBatch, cfg: LossConfig) -> LossGradients:
    """Analytic gradients of the total loss wrt every embedding entry."""
    grads = LossGradients(
        text=np.zeros_like(batch.text),
        recall=np.zeros_like(batch.recall),
        guided_coarse=np.zeros_like(batch.guided_coarse),
        guided_fine=np.zeros_like(batch.guided_fine),
    )
    targets = (grads.recall, grads.guided_coarse, grads.guided_fine)
    for alpha, branch, target in zip(cfg.alpha, batch.branches(), targets):
        if alpha == 0.0:
            continue
        _, g_text, g_branch = _alignment_grads(batch.text, branch, cfg.tau)
        grads.text += alpha * g_text
        target += alpha * g_branch

    if cfg.beta > 0:
        if batch.n < 2:
            raise ParameterError(
                "structure term requires at least 2 pairs; use beta=0 for singletons"
            )
        graph = neighbor_graph(batch.recall, cfg.neighbors, cfg.sigma)
        residual_sum = np.zeros_like(graph.weights)
        for branch, target in (
            (batch.guided_coarse, grads.guided_coarse),
            (batch.guided_fine, grads.guided_fine),
        ):
            _, residuals = _structure_residuals(graph, branch)
            residual_sum += residuals
            target += cfg.beta * _structure_grads(graph, branch)
        grads.recall += cfg.beta * _graph_weight_grads(
            graph, batch.recall, cfg.sigma, residual_sum
        )
    return grads
