"""Plain gradient-descent training of the toy encoders.

The objective is the combined alignment/structure loss evaluated on
batch embeddings; its gradients with respect to the embeddings are
chained by hand through the encoder: L2 row normalization, mean
pooling, the dual-normalized interaction block, and the linear
projections. Only the four projection matrices are updated; the
per-token offset banks are fixed structural anchors that keep the
token sets diverse. Everything runs in float64 and the whole run is a
deterministic function of (dataset, config).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, TrainingError
from .loss import (
    LossConfig,
    _alignment_grads,
    _graph_weight_grads,
    _structure_grads,
    _structure_residuals,
    neighbor_graph,
)
from .numerics import EPS
from .toy import (
    COARSE_TOKENS,
    FINE_TOKENS,
    SyntheticDataset,
    ToyEncoderParams,
    _PARAM_FIELDS,
)
from .variants import FULL, PipelineVariant

_TRAINED_FIELDS = ("coarse_proj", "fine_proj", "text_proj", "global_proj")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 0.5
    interaction_tau: float = 0.07
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ParameterError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ParameterError(
                f"batch_size must be at least 2 (the structure term needs "
                f"neighbors), got {self.batch_size}"
            )
        if self.learning_rate < 0:
            raise ParameterError(
                f"learning_rate must be non-negative, got {self.learning_rate}"
            )
        if self.interaction_tau <= 0:
            raise ParameterError(
                f"interaction_tau must be positive, got {self.interaction_tau}"
            )


@dataclass
class EpochStats:
    epoch: int
    total: float
    inter: float
    intra: float


@dataclass
class TrainResult:
    params: ToyEncoderParams
    curve: list[EpochStats]


def _params_to_f64(params: ToyEncoderParams) -> dict[str, np.ndarray]:
    return {name: getattr(params, name).astype(np.float64) for name in _PARAM_FIELDS}


def _params_from_f64(p64: dict[str, np.ndarray]) -> ToyEncoderParams:
    return ToyEncoderParams(**{k: v.astype(np.float32) for k, v in p64.items()})


def _zero_grads(p64: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in p64.items()}


def _normalize_rows(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    return rows / np.maximum(norms, EPS)[:, None], norms


def _norm_back(grad: np.ndarray, unit: np.ndarray, norm: float) -> np.ndarray:
    if norm <= EPS:
        return grad / EPS
    return (grad - unit * float(unit @ grad)) / norm


def _norm_back_rows(
    grads: np.ndarray, units: np.ndarray, norms: np.ndarray
) -> np.ndarray:
    safe = np.maximum(norms, EPS)
    inner = np.einsum("ij,ij->i", units, grads)
    return (grads - units * inner[:, None]) / safe[:, None]


class _PairState:
    """Forward intermediates for one pair, kept for the backward pass."""

    __slots__ = (
        "x",
        "u",
        "coarse_units",
        "coarse_norms",
        "fine_units",
        "fine_norms",
        "text_units",
        "text_norms",
        "global_unit",
        "global_norm",
        "recall_unit",
        "recall_norm",
        "branches",
    )


class _BranchState:
    """Interaction (or pooling) intermediates for one granularity."""

    __slots__ = ("soft", "assignment", "col_sums", "row_mass",
                 "pooled", "pooled_norm", "unit", "pooled_only")


def _interact(text_units: np.ndarray, item_units: np.ndarray, tau: float) -> _BranchState:
    state = _BranchState()
    state.pooled_only = False
    a = (text_units @ item_units.T) / tau
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    soft = e / e.sum(axis=1, keepdims=True)
    col_sums = np.maximum(soft.sum(axis=0), EPS)
    assignment = soft / col_sums
    row_mass = assignment.sum(axis=1)
    pooled = (row_mass @ text_units) / item_units.shape[0]
    norm = float(np.sqrt(pooled @ pooled))
    state.soft = soft
    state.assignment = assignment
    state.col_sums = col_sums
    state.row_mass = row_mass
    state.pooled = pooled
    state.pooled_norm = norm
    state.unit = pooled / max(norm, EPS)
    return state


def _pool_only(item_units: np.ndarray) -> _BranchState:
    state = _BranchState()
    state.pooled_only = True
    pooled = item_units.mean(axis=0)
    norm = float(np.sqrt(pooled @ pooled))
    state.pooled = pooled
    state.pooled_norm = norm
    state.unit = pooled / max(norm, EPS)
    return state


def _interact_back(
    state: _BranchState,
    grad_out: np.ndarray,
    text_units: np.ndarray,
    item_units: np.ndarray,
    tau: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients wrt the (normalized) text and item token rows."""
    n_items = item_units.shape[0]
    g_pooled = _norm_back(grad_out, state.unit, state.pooled_norm)
    # pooled = (row_mass @ text) / n_items: one direct path through the
    # text rows and one through the assignment matrix
    g_text = (state.row_mass[:, None] / n_items) * g_pooled[None, :]
    per_row = (text_units @ g_pooled) / n_items          # d pooled / d assignment row
    g_assignment_rows = per_row                          # same value in every column
    # column normalization: assignment = soft / col_sums
    correction = g_assignment_rows @ state.assignment    # per-column weighted sum
    g_soft = (g_assignment_rows[:, None] - correction[None, :]) / state.col_sums[None, :]
    # row softmax
    inner = np.einsum("ij,ij->i", g_soft, state.soft)
    g_logits = state.soft * (g_soft - inner[:, None])
    g_text += (g_logits @ item_units) / tau
    g_items = (g_logits.T @ text_units) / tau
    return g_text, g_items


def _forward_pair(
    p64: dict[str, np.ndarray],
    x: np.ndarray,
    u: np.ndarray,
    variant: PipelineVariant,
    tau: float,
) -> _PairState:
    state = _PairState()
    state.x = x
    state.u = u
    state.coarse_units, state.coarse_norms = _normalize_rows(
        x @ p64["coarse_proj"] + p64["coarse_offsets"]
    )
    state.fine_units, state.fine_norms = _normalize_rows(
        x @ p64["fine_proj"] + p64["fine_offsets"]
    )
    state.text_units, state.text_norms = _normalize_rows(
        u @ p64["text_proj"] + p64["text_offsets"]
    )
    raw_global = u @ p64["global_proj"]
    state.global_norm = float(np.sqrt(raw_global @ raw_global))
    state.global_unit = raw_global / max(state.global_norm, EPS)

    pooled_parts = []
    if variant.use_coarse:
        pooled_parts.append(state.coarse_units.mean(axis=0))
    if variant.use_fine:
        pooled_parts.append(state.fine_units.mean(axis=0))
    recall_raw = sum(pooled_parts) / len(pooled_parts)
    state.recall_norm = float(np.sqrt(recall_raw @ recall_raw))
    state.recall_unit = recall_raw / max(state.recall_norm, EPS)

    state.branches = {}
    for name, tokens, enabled in (
        ("coarse", state.coarse_units, variant.use_coarse),
        ("fine", state.fine_units, variant.use_fine),
    ):
        if not enabled:
            continue
        if variant.text_guided:
            state.branches[name] = _interact(state.text_units, tokens, tau)
        else:
            state.branches[name] = _pool_only(tokens)
    return state


def _backward_pair(
    p64: dict[str, np.ndarray],
    state: _PairState,
    g_global: np.ndarray,
    g_recall: np.ndarray,
    g_branches: dict[str, np.ndarray],
    variant: PipelineVariant,
    tau: float,
    grads: dict[str, np.ndarray],
) -> None:
    g_coarse_units = np.zeros_like(state.coarse_units)
    g_fine_units = np.zeros_like(state.fine_units)
    g_text_units = np.zeros_like(state.text_units)

    # global text embedding
    g_raw_global = _norm_back(g_global, state.global_unit, state.global_norm)
    grads["global_proj"] += np.outer(state.u, g_raw_global)

    # recall embedding through the granularity pooling
    g_recall_raw = _norm_back(g_recall, state.recall_unit, state.recall_norm)
    n_parts = int(variant.use_coarse) + int(variant.use_fine)
    if variant.use_coarse:
        g_coarse_units += g_recall_raw[None, :] / (n_parts * COARSE_TOKENS)
    if variant.use_fine:
        g_fine_units += g_recall_raw[None, :] / (n_parts * FINE_TOKENS)

    # guided branches
    for name, grad_out in g_branches.items():
        branch = state.branches[name]
        tokens = state.coarse_units if name == "coarse" else state.fine_units
        target = g_coarse_units if name == "coarse" else g_fine_units
        if branch.pooled_only:
            g_pooled = _norm_back(grad_out, branch.unit, branch.pooled_norm)
            target += g_pooled[None, :] / tokens.shape[0]
        else:
            g_text, g_items = _interact_back(
                branch, grad_out, state.text_units, tokens, tau
            )
            g_text_units += g_text
            target += g_items

    # token rows back to projections and offsets
    g_zc = _norm_back_rows(g_coarse_units, state.coarse_units, state.coarse_norms)
    grads["coarse_offsets"] += g_zc
    grads["coarse_proj"] += np.outer(state.x, g_zc.sum(axis=0))
    g_zf = _norm_back_rows(g_fine_units, state.fine_units, state.fine_norms)
    grads["fine_offsets"] += g_zf
    grads["fine_proj"] += np.outer(state.x, g_zf.sum(axis=0))
    g_zt = _norm_back_rows(g_text_units, state.text_units, state.text_norms)
    grads["text_offsets"] += g_zt
    grads["text_proj"] += np.outer(state.u, g_zt.sum(axis=0))


def _variant_embedding_grads(
    text: np.ndarray,
    recall: np.ndarray,
    branches: dict[str, np.ndarray],
    cfg: LossConfig,
    variant: PipelineVariant,
) -> tuple[float, float, float, np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Loss terms and gradients wrt the batch embedding blocks.

    For the full variant this matches combined_loss_gradients; ablated
    variants drop whole branches rather than zeroing their weights.
    """
    g_text = np.zeros_like(text)
    g_recall = np.zeros_like(recall)
    g_branches = {name: np.zeros_like(block) for name, block in branches.items()}

    branch_alphas = {"coarse": cfg.alpha[1], "fine": cfg.alpha[2]}
    inter_total = 0.0
    aligned = [(recall, cfg.alpha[0], g_recall)]
    aligned += [
        (branches[name], branch_alphas[name], g_branches[name]) for name in branches
    ]
    for block, alpha, target in aligned:
        if alpha == 0.0:
            continue
        loss, g_t, g_v = _alignment_grads(text, block, cfg.tau)
        inter_total += alpha * loss
        g_text += alpha * g_t
        target += alpha * g_v

    intra_total = 0.0
    beta = cfg.beta if variant.use_structure_term else 0.0
    if beta > 0.0:
        if text.shape[0] < 2:
            raise ParameterError("structure term requires at least 2 pairs per batch")
        graph = neighbor_graph(recall, cfg.neighbors, cfg.sigma)
        residual_sum = np.zeros_like(graph.weights)
        for name, block in branches.items():
            loss, residuals = _structure_residuals(graph, block)
            intra_total += loss
            residual_sum += residuals
            g_branches[name] += beta * _structure_grads(graph, block)
        g_recall += beta * _graph_weight_grads(graph, recall, cfg.sigma, residual_sum)

    total = inter_total + beta * intra_total
    return total, inter_total, intra_total, g_text, g_recall, g_branches


def _batch_step(
    p64: dict[str, np.ndarray],
    images: np.ndarray,
    texts: np.ndarray,
    cfg: TrainConfig,
    variant: PipelineVariant,
) -> tuple[float, float, float, dict[str, np.ndarray]]:
    """One forward/backward pass; returns loss terms and parameter grads."""
    states = [
        _forward_pair(p64, images[i], texts[i], variant, cfg.interaction_tau)
        for i in range(images.shape[0])
    ]
    text_block = np.stack([s.global_unit for s in states])
    recall_block = np.stack([s.recall_unit for s in states])
    branch_blocks = {
        name: np.stack([s.branches[name].unit for s in states])
        for name in states[0].branches
    }
    total, inter, intra, g_text, g_recall, g_branches = _variant_embedding_grads(
        text_block, recall_block, branch_blocks, cfg.loss, variant
    )
    grads = _zero_grads(p64)
    for i, state in enumerate(states):
        _backward_pair(
            p64,
            state,
            g_text[i],
            g_recall[i],
            {name: g_branches[name][i] for name in g_branches},
            variant,
            cfg.interaction_tau,
            grads,
        )
    return total, inter, intra, grads


def _batch_loss(
    p64: dict[str, np.ndarray],
    images: np.ndarray,
    texts: np.ndarray,
    cfg: TrainConfig,
    variant: PipelineVariant,
) -> float:
    """Loss-only forward used by the finite-difference tests."""
    total, _, _, _ = _batch_step(p64, images, texts, cfg, variant)
    return total


def _interleaved_order(dataset: SyntheticDataset) -> np.ndarray:
    """Fixed batch order: cycle through the classes one pair at a time.

    Keeps every batch a mix of classes (hard negatives next to their
    positives) while staying a pure function of the dataset shape.
    """
    train_idx = dataset.train_indices()
    per_class = len(train_idx) // dataset.spec.n_classes
    if per_class * dataset.spec.n_classes == len(train_idx) and per_class > 0:
        return train_idx.reshape(dataset.spec.n_classes, per_class).T.ravel()
    return train_idx


def train(
    dataset: SyntheticDataset,
    cfg: TrainConfig,
    variant: PipelineVariant = FULL,
) -> TrainResult:
    """Gradient descent over the training split of a synthetic dataset.

    Batches are consecutive slices of a fixed class-interleaved order (the
    same in every epoch, so a zero learning rate yields a flat curve); a
    trailing singleton batch is folded into its predecessor so the
    structure term always has neighbors.
    """
    initial = ToyEncoderParams.initialize(
        dataset.spec.feature_dim, dataset.spec.dim, cfg.seed
    )
    p64 = _params_to_f64(initial)
    if len(dataset.train_indices()) < 2:
        raise ParameterError("training split must contain at least 2 pairs")
    images = dataset.image_features.astype(np.float64)
    texts = dataset.text_features.astype(np.float64)
    order = _interleaved_order(dataset)

    curve: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        starts = list(range(0, len(order), cfg.batch_size))
        if len(starts) > 1 and len(order) - starts[-1] < 2:
            starts.pop()  # fold trailing singleton into the previous batch
        totals = inters = intras = 0.0
        n_seen = 0
        for pos, start in enumerate(starts):
            stop = starts[pos + 1] if pos + 1 < len(starts) else len(order)
            batch = order[start:stop]
            total, inter, intra, grads = _batch_step(
                p64, images[batch], texts[batch], cfg, variant
            )
            if not np.isfinite(total):
                raise TrainingError(f"training diverged at epoch {epoch}")
            for name in _TRAINED_FIELDS:
                p64[name] -= cfg.learning_rate * grads[name]
            n = len(batch)
            totals += total * n
            inters += inter * n
            intras += intra * n
            n_seen += n
        curve.append(
            EpochStats(
                epoch=epoch,
                total=totals / n_seen,
                inter=inters / n_seen,
                intra=intras / n_seen,
            )
        )
    return TrainResult(params=_params_from_f64(p64), curve=curve)


def curve_csv(curve: list[EpochStats]) -> str:
    lines = ["epoch,loss,inter,intra"]
    lines += [f"{s.epoch},{s.total!r},{s.inter!r},{s.intra!r}" for s in curve]
    return "\n".join(lines) + "\n"
