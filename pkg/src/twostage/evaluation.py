"""End-to-end retrieval runs, accuracy metrics, and the ablation suite.

Text-to-image is the native direction: a text query recalls against the
image gallery and reranks the candidates. Image-to-text swaps the
roles: the image's recall embedding replaces the global text embedding
in stage 1, and in stage 2 the image's token matrices take the guiding
role against each candidate text's token matrix.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParameterError, ValidationError
from .gallery import (
    Gallery,
    GalleryEntry,
    QueryText,
    aggregate_recall_embedding,
    build_gallery,
)
from .interaction import RerankConfig, text_guided_embed
from .numerics import cosine, l2_normalize, top_k_indices
from .recall import recall_topk
from .toy import SyntheticDataset, ToyEncoderParams, encode_pair
from .train import TrainConfig, TrainResult, train
from .variants import ABLATION_VARIANTS, FULL, PipelineVariant

METRIC_KS = (1, 5, 10)


@dataclass
class RetrievalRun:
    """Ranked id lists for one retrieval pass, with per-query timings."""

    mode: str
    direction: str
    k: int | None
    rankings: dict[str, list[str]]
    candidate_hits: dict[str, bool] = field(default_factory=dict)
    timings_ns: dict[str, int] = field(default_factory=dict)


@dataclass
class MetricsReport:
    r_at: dict[str, dict[int, float]]
    mr: float
    recall_ceiling: dict[str, float]
    config: dict

    def to_dict(self) -> dict:
        return {
            "r_at": {
                direction: {str(k): v for k, v in values.items()}
                for direction, values in sorted(self.r_at.items())
            },
            "mr": self.mr,
            "recall_ceiling": dict(sorted(self.recall_ceiling.items())),
            "config": self.config,
        }


def _pooled_unit(tokens: np.ndarray) -> np.ndarray:
    pooled = tokens.astype(np.float64).mean(axis=0).astype(np.float32)
    return l2_normalize(pooled)


def _combine_branch_scores(
    scores: dict[str, float], cfg: RerankConfig, variant: PipelineVariant
) -> float:
    if variant.use_coarse and variant.use_fine:
        return (1.0 - cfg.fine_weight) * scores["coarse"] + cfg.fine_weight * scores["fine"]
    return scores["coarse"] if variant.use_coarse else scores["fine"]


def _score_image_for_text(
    entry: GalleryEntry,
    query: QueryText,
    cfg: RerankConfig,
    variant: PipelineVariant,
) -> float:
    scores: dict[str, float] = {}
    for name, tokens in (("coarse", entry.coarse_tokens), ("fine", entry.fine_tokens)):
        if name not in variant.rerank_branches:
            continue
        if variant.text_guided:
            guided = text_guided_embed(query.token_embeddings, tokens, cfg.tau, cfg.eps)
        else:
            guided = _pooled_unit(tokens)
        scores[name] = cosine(query.global_embedding, guided)
    return _combine_branch_scores(scores, cfg, variant)


def _score_text_for_image(
    entry: GalleryEntry,
    text: QueryText,
    cfg: RerankConfig,
    variant: PipelineVariant,
) -> float:
    """Role-swapped rerank: the image's tokens guide, the text is the item."""
    scores: dict[str, float] = {}
    for name, tokens in (("coarse", entry.coarse_tokens), ("fine", entry.fine_tokens)):
        if name not in variant.rerank_branches:
            continue
        if variant.text_guided:
            guided = text_guided_embed(tokens, text.token_embeddings, cfg.tau, cfg.eps)
        else:
            guided = _pooled_unit(text.token_embeddings)
        scores[name] = cosine(entry.recall_embedding, guided)
    return _combine_branch_scores(scores, cfg, variant)


def _sorted_ids(scored: Iterable[tuple[str, float]]) -> list[str]:
    return [i for i, _ in sorted(scored, key=lambda item: (-item[1], item[0]))]


def two_stage_query(
    gallery: Gallery,
    query: QueryText,
    k: int,
    cfg: RerankConfig,
    variant: PipelineVariant = FULL,
) -> tuple[list[str], list[str]]:
    """One text query through both stages; returns (final ids, candidate ids)."""
    candidates = recall_topk(gallery, query, k)
    scored = [
        (cid, _score_image_for_text(gallery.entry(cid), query, cfg, variant))
        for cid, _ in candidates.candidates
    ]
    return _sorted_ids(scored), candidates.ids()


def one_stage_query(
    gallery: Gallery,
    query: QueryText,
    cfg: RerankConfig,
    variant: PipelineVariant = FULL,
) -> list[str]:
    """Text-guided rerank applied to the entire gallery."""
    scored = [
        (entry.id, _score_image_for_text(entry, query, cfg, variant))
        for entry in gallery.entries
    ]
    return _sorted_ids(scored)


def truth_t2i(queries: Sequence[QueryText]) -> dict[str, set[str]]:
    return {q.id: set(q.ground_truth_ids) for q in queries}


def truth_i2t(queries: Sequence[QueryText]) -> dict[str, set[str]]:
    """Invert the query ground truth: image id -> ids of matching texts."""
    inverted: dict[str, set[str]] = {}
    for q in queries:
        for image_id in q.ground_truth_ids:
            inverted.setdefault(image_id, set()).add(q.id)
    return inverted


def _run_t2i(
    gallery: Gallery,
    queries: Sequence[QueryText],
    k: int | None,
    cfg: RerankConfig,
    variant: PipelineVariant,
) -> RetrievalRun:
    mode = "one_stage" if k is None else "two_stage"
    run = RetrievalRun(mode=mode, direction="t2i", k=k, rankings={})
    for query in queries:
        start = time.perf_counter_ns()
        if k is None:
            ranked = one_stage_query(gallery, query, cfg, variant)
        else:
            ranked, candidate_ids = two_stage_query(gallery, query, k, cfg, variant)
            if query.ground_truth_ids:
                run.candidate_hits[query.id] = bool(
                    set(query.ground_truth_ids) & set(candidate_ids)
                )
        run.timings_ns[query.id] = time.perf_counter_ns() - start
        run.rankings[query.id] = ranked
    return run


def _run_i2t(
    gallery: Gallery,
    queries: Sequence[QueryText],
    k: int | None,
    cfg: RerankConfig,
    variant: PipelineVariant,
) -> RetrievalRun:
    mode = "one_stage" if k is None else "two_stage"
    run = RetrievalRun(mode=mode, direction="i2t", k=k, rankings={})
    truth = truth_i2t(queries)
    image_queries = [gallery.entry(image_id) for image_id in gallery.ids if image_id in truth]
    by_id = {q.id: q for q in queries}
    for entry in image_queries:
        start = time.perf_counter_ns()
        stage1 = [
            (q.id, cosine(entry.recall_embedding, q.global_embedding)) for q in queries
        ]
        if k is None:
            kept = stage1
        else:
            kept = top_k_indices(stage1, k)
            run.candidate_hits[entry.id] = bool(
                truth[entry.id] & {qid for qid, _ in kept}
            )
        scored = [
            (qid, _score_text_for_image(entry, by_id[qid], cfg, variant))
            for qid, _ in kept
        ]
        run.timings_ns[entry.id] = time.perf_counter_ns() - start
        run.rankings[entry.id] = _sorted_ids(scored)
    return run


def run_two_stage(
    gallery: Gallery,
    queries: Sequence[QueryText],
    k: int,
    cfg: RerankConfig,
    direction: str = "t2i",
    variant: PipelineVariant = FULL,
) -> RetrievalRun:
    """Recall the top-K candidates, then rerank only those."""
    if k < 1:
        raise ParameterError(f"k must be at least 1, got {k}")
    runner = _run_t2i if direction == "t2i" else _run_i2t
    return runner(gallery, queries, k, cfg, variant)


def run_one_stage(
    gallery: Gallery,
    queries: Sequence[QueryText],
    cfg: RerankConfig,
    direction: str = "t2i",
    variant: PipelineVariant = FULL,
) -> RetrievalRun:
    """Rerank the entire gallery: the accuracy ceiling and latency baseline."""
    runner = _run_t2i if direction == "t2i" else _run_i2t
    return runner(gallery, queries, None, cfg, variant)


def recall_at_k(
    run: RetrievalRun, truth: Mapping[str, set[str]], k: int
) -> float:
    """Fraction of queries whose top-k list intersects their ground truth."""
    if not run.rankings:
        raise ValidationError("run contains no queries")
    hits = 0
    for query_id, ranked in run.rankings.items():
        expected = truth.get(query_id)
        if not expected:
            raise ValidationError(f"query {query_id!r} has no ground truth")
        if expected & set(ranked[:k]):
            hits += 1
    return hits / len(run.rankings)


def mean_recall(values: Sequence[float]) -> float:
    """Arithmetic mean of exactly six recall percentages."""
    if len(values) != 6:
        raise ParameterError(f"mean recall expects six values, got {len(values)}")
    for v in values:
        if not 0.0 <= v <= 100.0:
            raise ParameterError(f"recall percentage out of range: {v}")
    return float(sum(values) / 6.0)


def evaluate_runs(
    gallery: Gallery,
    queries: Sequence[QueryText],
    mode: str,
    k: int | None,
    cfg: RerankConfig,
    variant: PipelineVariant = FULL,
) -> dict[str, RetrievalRun]:
    """One retrieval run per direction for the requested mode."""
    if mode not in ("one_stage", "two_stage"):
        raise ParameterError(f"unknown mode {mode!r}")
    if mode == "two_stage" and (k is None or k < 1):
        raise ParameterError("two_stage mode needs a candidate size k >= 1")
    runs = {}
    for direction in ("t2i", "i2t"):
        if mode == "two_stage":
            runs[direction] = run_two_stage(gallery, queries, k, cfg, direction, variant)
        else:
            runs[direction] = run_one_stage(gallery, queries, cfg, direction, variant)
    return runs


def compute_metrics(
    gallery: Gallery,
    queries: Sequence[QueryText],
    mode: str,
    k: int | None,
    cfg: RerankConfig,
    variant: PipelineVariant = FULL,
    metric_ks: Sequence[int] = METRIC_KS,
    runs: dict[str, RetrievalRun] | None = None,
) -> MetricsReport:
    """R@{1,5,10} in both directions plus their mean, on one configuration."""
    if runs is None:
        runs = evaluate_runs(gallery, queries, mode, k, cfg, variant)
    truths = {"t2i": truth_t2i(queries), "i2t": truth_i2t(queries)}
    r_at = {
        direction: {m: recall_at_k(runs[direction], truths[direction], m) for m in metric_ks}
        for direction in runs
    }
    six = [r_at[d][m] for d in ("i2t", "t2i") for m in metric_ks]
    ceiling = {
        direction: (
            sum(run.candidate_hits.values()) / len(run.candidate_hits)
            if run.candidate_hits
            else 1.0
        )
        for direction, run in runs.items()
        if run.mode == "two_stage"
    }
    config = {
        "mode": mode,
        "k": k,
        "tau": cfg.tau,
        "fine_weight": cfg.fine_weight,
        "variant": variant.name,
        "n_gallery": len(gallery),
        "n_queries": len(queries),
    }
    return MetricsReport(
        r_at=r_at, mr=float(sum(six) / len(six)), recall_ceiling=ceiling, config=config
    )


def random_baseline_mr(
    n_images: int, n_texts: int, metric_ks: Sequence[int] = METRIC_KS
) -> float:
    """Expected mean recall of uniformly random rankings with singleton truth.

    A random permutation of n items puts the single relevant item in the
    top k with probability k / n; averaging over both directions gives
    the floor any trained model must beat.
    """
    t2i = [min(m, n_images) / n_images for m in metric_ks]
    i2t = [min(m, n_texts) / n_texts for m in metric_ks]
    return float(sum(t2i + i2t) / (len(metric_ks) * 2))


def encode_eval_split(
    dataset: SyntheticDataset,
    params: ToyEncoderParams,
    variant: PipelineVariant = FULL,
) -> tuple[Gallery, list[QueryText]]:
    """Encode the held-out pairs into a gallery and matching queries.

    The recall embedding pools only the granularities the variant keeps.
    """
    indices = dataset.eval_indices()
    if len(indices) == 0:
        raise ParameterError("dataset has no held-out pairs to evaluate")
    entries = []
    queries = []
    for i in indices:
        pid = dataset.pair_ids[i]
        coarse, fine, tokens, global_emb = encode_pair(
            params, dataset.image_features[i], dataset.text_features[i]
        )
        if variant.use_coarse and variant.use_fine:
            recall_embedding = aggregate_recall_embedding(coarse, fine)
        else:
            recall_embedding = _pooled_unit(coarse if variant.use_coarse else fine)
        entries.append(
            GalleryEntry(f"img-{pid}", coarse, fine, recall_embedding)
        )
        queries.append(
            QueryText(f"txt-{pid}", tokens, global_emb, (f"img-{pid}",))
        )
    gallery = Gallery(dim=params.dim, entries=tuple(entries))
    return gallery, queries


@dataclass
class AblationRow:
    variant: str
    i2t_r1: float
    t2i_r1: float
    mr: float


def ablation_suite(
    dataset: SyntheticDataset,
    train_cfg: TrainConfig,
    rerank_cfg: RerankConfig,
    k: int,
    variants: Sequence[PipelineVariant] = ABLATION_VARIANTS,
) -> list[AblationRow]:
    """Train and evaluate each variant identically except for the ablation."""
    rows = []
    for variant in variants:
        result = train(dataset, train_cfg, variant)
        gallery, queries = encode_eval_split(dataset, result.params, variant)
        report = compute_metrics(
            gallery, queries, "two_stage", min(k, len(gallery)), rerank_cfg, variant
        )
        rows.append(
            AblationRow(
                variant=variant.name,
                i2t_r1=report.r_at["i2t"][1],
                t2i_r1=report.r_at["t2i"][1],
                mr=report.mr,
            )
        )
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    lines = ["variant,i2t_r1,t2i_r1,mr"]
    lines += [f"{r.variant},{r.i2t_r1!r},{r.t2i_r1!r},{r.mr!r}" for r in rows]
    return "\n".join(lines) + "\n"


def metrics_csv(
    report: MetricsReport,
    runs: dict[str, RetrievalRun] | None = None,
    queries: Sequence[QueryText] | None = None,
    metric_ks: Sequence[int] = METRIC_KS,
) -> str:
    """Summary rows, plus per-query hit indicators when runs are given."""
    lines = ["direction,query_id,metric,value"]
    for direction in sorted(report.r_at):
        for m in sorted(report.r_at[direction]):
            lines.append(f"{direction},all,r@{m},{report.r_at[direction][m]!r}")
    lines.append(f"both,all,mr,{report.mr!r}")
    if runs is not None and queries is not None:
        truths = {"t2i": truth_t2i(queries), "i2t": truth_i2t(queries)}
        for direction in sorted(runs):
            run, truth = runs[direction], truths[direction]
            for query_id, ranked in run.rankings.items():
                for m in metric_ks:
                    hit = int(bool(truth.get(query_id, set()) & set(ranked[:m])))
                    lines.append(f"{direction},{query_id},hit@{m},{hit}")
    return "\n".join(lines) + "\n"


def train_and_index(
    dataset: SyntheticDataset, cfg: TrainConfig, variant: PipelineVariant = FULL
) -> tuple[TrainResult, Gallery, list[QueryText]]:
    """Convenience path: train, then encode the held-out split."""
    result = train(dataset, cfg, variant)
    gallery, queries = encode_eval_split(dataset, result.params, variant)
    return result, gallery, queries


def random_gallery(
    n_entries: int,
    dim: int,
    seed: int,
    n_coarse: int = 4,
    n_fine: int = 16,
) -> Gallery:
    """Untrained gallery of random unit tokens, for format and speed tests."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_entries):
        coarse = rng.normal(size=(n_coarse, dim)).astype(np.float32)
        fine = rng.normal(size=(n_fine, dim)).astype(np.float32)
        items.append((f"img{i:06d}", coarse, fine))
    return build_gallery(items, dim=dim)


def random_queries(
    n_queries: int,
    dim: int,
    seed: int,
    gallery: Gallery | None = None,
    n_tokens: int = 8,
) -> list[QueryText]:
    """Random unit-token queries; ground truth cycles over the gallery ids."""
    rng = np.random.default_rng(seed)
    queries = []
    for i in range(n_queries):
        tokens = rng.normal(size=(n_tokens, dim)).astype(np.float32)
        global_emb = l2_normalize(rng.normal(size=dim).astype(np.float32))
        truth: tuple[str, ...] = ()
        if gallery is not None and len(gallery) > 0:
            truth = (gallery.ids[i % len(gallery)],)
        queries.append(QueryText(f"q{i:05d}", tokens, global_emb, truth))
    return queries
