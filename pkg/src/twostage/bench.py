"""Latency/throughput measurement and the candidate-size sweep.

Per-query wall-clock time covers retrieval only (no gallery loading, no
encoding); warmup passes are discarded. Throughput is measured
independently as whole-pass wall time rather than derived from the mean
latency, so the two numbers can cross-check each other. Speedups are
ratios of mean latencies against the one-stage baseline measured in the
same session, as is the convention for average inference time per query.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from statistics import fmean, median
from typing import Callable, Sequence

from .errors import MeasurementError, ParameterError
from .evaluation import compute_metrics, one_stage_query, two_stage_query
from .gallery import Gallery, QueryText
from .interaction import RerankConfig
from .variants import FULL, PipelineVariant

Clock = Callable[[], int]


@dataclass(frozen=True)
class BenchVariant:
    mode: str
    k: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("one_stage", "two_stage"):
            raise ParameterError(f"unknown bench mode {self.mode!r}")
        if self.mode == "two_stage" and (self.k is None or self.k < 1):
            raise ParameterError("two_stage bench variant needs k >= 1")
        if self.mode == "one_stage" and self.k is not None:
            raise ParameterError("one_stage bench variant takes no k")

    @property
    def label(self) -> str:
        return self.mode if self.k is None else f"{self.mode}_k{self.k}"


ONE_STAGE = BenchVariant("one_stage")


@dataclass
class BenchReport:
    label: str
    mode: str
    k: int | None
    latency_ms_mean: float
    latency_ms_median: float
    throughput_qps: float
    speedup: float
    warmup: int
    reps: int
    n_queries: int

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "mode": self.mode,
            "k": self.k,
            "latency_ms_mean": self.latency_ms_mean,
            "latency_ms_median": self.latency_ms_median,
            "throughput_qps": self.throughput_qps,
            "speedup": self.speedup,
            "warmup": self.warmup,
            "reps": self.reps,
            "n_queries": self.n_queries,
        }


def speedup_display(speedup: float) -> str:
    """One-decimal convention for reporting speedup ratios."""
    return f"{speedup:.1f}"


def _timed_pass(
    gallery: Gallery,
    queries: Sequence[QueryText],
    variant: BenchVariant,
    cfg: RerankConfig,
    clock: Clock,
    pipeline: PipelineVariant,
) -> tuple[list[int], int]:
    """One full pass over the queries: per-query samples plus block time."""
    samples: list[int] = []
    block_start = clock()
    for query in queries:
        start = clock()
        if variant.mode == "one_stage":
            one_stage_query(gallery, query, cfg, pipeline)
        else:
            two_stage_query(gallery, query, variant.k, cfg, pipeline)
        samples.append(clock() - start)
    return samples, clock() - block_start


def _interleaved_timing(
    gallery: Gallery,
    queries: Sequence[QueryText],
    variants: Sequence[BenchVariant],
    reps: int,
    warmup: int,
    cfg: RerankConfig,
    clock: Clock,
    pipeline: PipelineVariant,
) -> tuple[dict[int, list[int]], dict[int, int]]:
    samples: dict[int, list[int]] = {i: [] for i in range(len(variants))}
    block_ns: dict[int, int] = {i: 0 for i in range(len(variants))}
    for rep in range(warmup + reps):
        # alternate the order between reps so drift within a rep cancels
        order = range(len(variants)) if rep % 2 == 0 else reversed(range(len(variants)))
        for i in order:
            pass_samples, pass_ns = _timed_pass(
                gallery, queries, variants[i], cfg, clock, pipeline
            )
            if rep >= warmup:
                samples[i].extend(pass_samples)
                block_ns[i] += pass_ns
    return samples, block_ns


def measure_bench(
    gallery: Gallery,
    queries: Sequence[QueryText],
    variants: Sequence[BenchVariant],
    reps: int,
    warmup: int,
    cfg: RerankConfig,
    clock: Clock = time.perf_counter_ns,
    pipeline: PipelineVariant = FULL,
) -> list[BenchReport]:
    """Measure every variant plus the one-stage baseline for speedups.

    Repetitions are interleaved across variants (all variants run once
    per rep, back to back) so slow machine drift hits every variant
    alike and cancels out of the speedup ratios.
    """
    if reps < 3:
        raise ParameterError(f"need at least 3 measured repetitions, got {reps}")
    if warmup < 1:
        raise ParameterError(f"need at least 1 warmup repetition, got {warmup}")
    if not queries:
        raise ParameterError("benchmark needs at least one query")
    ordered = list(variants)
    if all(v.mode != "one_stage" for v in ordered):
        ordered.insert(0, ONE_STAGE)

    samples, block_ns = _interleaved_timing(
        gallery, queries, ordered, reps, warmup, cfg, clock, pipeline
    )

    baseline_mean_ms: float | None = None
    stats: list[tuple[BenchVariant, float, float, float]] = []
    for i, variant in enumerate(ordered):
        if all(s == 0 for s in samples[i]):
            raise MeasurementError(
                f"{variant.label}: timer resolution too coarse, all samples are zero"
            )
        mean_ms = fmean(samples[i]) / 1e6
        median_ms = median(samples[i]) / 1e6
        throughput = len(samples[i]) / (block_ns[i] / 1e9)
        if variant.mode == "one_stage" and baseline_mean_ms is None:
            baseline_mean_ms = mean_ms
        stats.append((variant, mean_ms, median_ms, throughput))

    assert baseline_mean_ms is not None
    return [
        BenchReport(
            label=variant.label,
            mode=variant.mode,
            k=variant.k,
            latency_ms_mean=mean_ms,
            latency_ms_median=median_ms,
            throughput_qps=throughput,
            speedup=baseline_mean_ms / mean_ms,
            warmup=warmup,
            reps=reps,
            n_queries=len(queries),
        )
        for variant, mean_ms, median_ms, throughput in stats
    ]


def bench_csv(reports: Sequence[BenchReport]) -> str:
    lines = ["label,mode,k,latency_ms_mean,latency_ms_median,throughput_qps,speedup"]
    for r in reports:
        lines.append(
            f"{r.label},{r.mode},{'' if r.k is None else r.k},"
            f"{r.latency_ms_mean!r},{r.latency_ms_median!r},"
            f"{r.throughput_qps!r},{r.speedup!r}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class SweepRow:
    k: int
    mr: float
    latency_ms_mean: float
    throughput_qps: float

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "mr": self.mr,
            "latency_ms_mean": self.latency_ms_mean,
            "throughput_qps": self.throughput_qps,
        }


def k_sweep(
    gallery: Gallery,
    queries: Sequence[QueryText],
    ks: Sequence[int],
    cfg: RerankConfig,
    reps: int = 3,
    warmup: int = 1,
    clock: Clock = time.perf_counter_ns,
    pipeline: PipelineVariant = FULL,
) -> list[SweepRow]:
    """Accuracy and efficiency of the two-stage pipeline per candidate size."""
    if any(k < 1 for k in ks):
        raise ParameterError("sweep candidate sizes must be at least 1")
    variants = [BenchVariant("two_stage", k) for k in ks]
    samples, block_ns = _interleaved_timing(
        gallery, queries, variants, reps, warmup, cfg, clock, pipeline
    )
    rows = []
    for i, k in enumerate(ks):
        if all(s == 0 for s in samples[i]):
            raise MeasurementError(f"k={k}: timer resolution too coarse")
        report = compute_metrics(gallery, queries, "two_stage", k, cfg, pipeline)
        rows.append(
            SweepRow(
                k=k,
                mr=report.mr,
                latency_ms_mean=fmean(samples[i]) / 1e6,
                throughput_qps=len(samples[i]) / (block_ns[i] / 1e9),
            )
        )
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    lines = ["k,mr,latency_ms_mean,throughput_qps"]
    lines += [f"{r.k},{r.mr!r},{r.latency_ms_mean!r},{r.throughput_qps!r}" for r in rows]
    return "\n".join(lines) + "\n"
