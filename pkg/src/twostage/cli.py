"""Command-line entry point.

Subcommands cover the whole workflow: generate synthetic data, train
the toy encoders, build index files, retrieve for a single query, and
run the evaluation, benchmark, ablation, and candidate-size-sweep
harnesses. All randomness derives from --seed; identical invocations
over identical inputs write byte-identical report bodies (benchmark
timings excepted, since they measure the wall clock).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import BenchVariant, bench_csv, k_sweep, measure_bench, sweep_csv
from .errors import (
    FileFormatError,
    MeasurementError,
    ParameterError,
    ShapeError,
    TrainingError,
    ValidationError,
)
from .evaluation import (
    ablation_csv,
    ablation_suite,
    compute_metrics,
    evaluate_runs,
    metrics_csv,
)
from .gallery import (
    Gallery,
    GalleryEntry,
    QueryText,
    aggregate_recall_embedding,
    load_gallery,
    load_queries,
    save_gallery,
    save_queries,
)
from .interaction import RerankConfig, rerank_candidates
from .loss import LossConfig
from .recall import recall_topk
from .toy import (
    SyntheticSpec,
    ToyEncoderParams,
    encode_pair,
    generate_synthetic,
    load_dataset,
    load_params,
    save_dataset,
    save_params,
)
from .train import TrainConfig, curve_csv, train


def _add_rerank_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--tau", type=float, default=0.07,
        help="interaction softmax temperature (the rerank tau, default %(default)s)",
    )
    parser.add_argument(
        "--lambda", dest="fine_weight", type=float, default=0.5, metavar="LAMBDA",
        help="weight lambda of the fine branch in the rerank score (default %(default)s)",
    )


def _add_loss_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--tau-loss", type=float, default=0.25,
        help="alignment loss temperature tau (default %(default)s)",
    )
    parser.add_argument(
        "--beta", type=float, default=1.0,
        help="structure term weight beta (default %(default)s)",
    )
    for i in (1, 2, 3):
        parser.add_argument(
            f"--alpha{i}", type=float, default=1.0,
            help=f"alignment weight alpha{i} (default %(default)s)",
        )
    parser.add_argument(
        "--m-neighbors", type=int, default=5,
        help="neighborhood size M for the structure term (default %(default)s)",
    )
    parser.add_argument(
        "--sigma", type=float, default=0.1,
        help="neighbor weight temperature sigma (default %(default)s)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twostage",
        description="Two-stage cross-modal retrieval: recall with a single "
        "text-agnostic vector, rerank candidates with parameter-free "
        "text-guided interaction.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    gen = sub.add_parser("gen", help="generate a synthetic paired dataset")
    gen.add_argument("--classes", type=int, default=8)
    gen.add_argument("--per-class", type=int, default=16)
    gen.add_argument("--feature-dim", type=int, default=32)
    gen.add_argument("--dim", type=int, default=16)
    gen.add_argument("--noise-std", type=float, default=0.1)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="output dataset file (.npz)")

    tr = sub.add_parser("train-toy", help="train the toy encoders")
    tr.add_argument("--data", required=True, help="dataset file from `gen`")
    tr.add_argument("--epochs", type=int, default=60)
    tr.add_argument("--batch-size", type=int, default=32)
    tr.add_argument("--learning-rate", type=float, default=0.5)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--params-out", required=True, help="output parameter file")
    tr.add_argument("--curve-out", help="optional loss curve CSV")
    _add_rerank_flags(tr)
    _add_loss_flags(tr)

    idx = sub.add_parser("index", help="encode a dataset into gallery/query files")
    idx.add_argument("--data", required=True)
    idx.add_argument("--params", help="trained parameters; fresh random ones if omitted")
    idx.add_argument("--split", choices=("eval", "train", "all"), default="eval")
    idx.add_argument("--seed", type=int, default=0, help="seed for fresh parameters")
    idx.add_argument("--gallery", required=True, help="output gallery file")
    idx.add_argument("--queries", required=True, help="output query file")

    ret = sub.add_parser("retrieve", help="run one query and print the ranking")
    ret.add_argument("--gallery", required=True)
    ret.add_argument("--queries", required=True)
    ret.add_argument("--query-id", help="defaults to the first query in the file")
    ret.add_argument("--k", type=int, default=100, help="candidate size K")
    _add_rerank_flags(ret)

    ev = sub.add_parser("eval", help="accuracy metrics in both directions")
    ev.add_argument("--gallery", required=True)
    ev.add_argument("--queries", required=True)
    ev.add_argument("--k", type=int, default=100, help="candidate size K")
    ev.add_argument("--one-stage", action="store_true", help="rerank the whole gallery")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", help="directory for JSON/CSV reports")
    _add_rerank_flags(ev)

    be = sub.add_parser("bench", help="latency/throughput vs the one-stage baseline")
    be.add_argument("--gallery", required=True)
    be.add_argument("--queries", required=True)
    be.add_argument("--ks", default=None, help="comma-separated candidate sizes")
    be.add_argument("--k", type=int, default=100, help="candidate size K if --ks unset")
    be.add_argument("--reps", type=int, default=5)
    be.add_argument("--warmup", type=int, default=2)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--out", help="directory for JSON/CSV reports")
    _add_rerank_flags(be)

    ab = sub.add_parser("ablate", help="train and score every pipeline variant")
    ab.add_argument("--data", required=True)
    ab.add_argument("--epochs", type=int, default=60)
    ab.add_argument("--batch-size", type=int, default=32)
    ab.add_argument("--learning-rate", type=float, default=0.5)
    ab.add_argument("--k", type=int, default=100, help="candidate size K")
    ab.add_argument("--seed", type=int, default=0)
    ab.add_argument("--out", help="directory for JSON/CSV reports")
    _add_rerank_flags(ab)
    _add_loss_flags(ab)

    sw = sub.add_parser("sweep", help="accuracy/efficiency per candidate size")
    sw.add_argument("--gallery", required=True)
    sw.add_argument("--queries", required=True)
    sw.add_argument("--ks", default="8,16,32,64", help="comma-separated candidate sizes")
    sw.add_argument("--reps", type=int, default=3)
    sw.add_argument("--warmup", type=int, default=1)
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--out", help="directory for JSON/CSV reports")
    _add_rerank_flags(sw)

    return parser


def _parse_ks(parser: argparse.ArgumentParser, raw: str) -> list[int]:
    try:
        ks = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        parser.error(f"--ks expects comma-separated integers, got {raw!r}")
    if not ks or any(k < 1 for k in ks):
        parser.error("--ks values must be at least 1")
    return ks


def _validate_ranges(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    checks = (
        ("tau", lambda v: v > 0, "--tau must be positive"),
        ("fine_weight", lambda v: 0.0 <= v <= 1.0, "--lambda must be in [0, 1]"),
        ("k", lambda v: v >= 1, "--k must be at least 1"),
        ("tau_loss", lambda v: v > 0, "--tau-loss must be positive"),
        ("beta", lambda v: v >= 0, "--beta must be non-negative"),
        ("m_neighbors", lambda v: v >= 1, "--m-neighbors must be at least 1"),
        ("sigma", lambda v: v > 0, "--sigma must be positive"),
        ("reps", lambda v: v >= 3, "--reps must be at least 3"),
        ("warmup", lambda v: v >= 1, "--warmup must be at least 1"),
        ("epochs", lambda v: v >= 1, "--epochs must be at least 1"),
        ("batch_size", lambda v: v >= 2, "--batch-size must be at least 2"),
        ("learning_rate", lambda v: v >= 0, "--learning-rate must be non-negative"),
    )
    for name, ok, message in checks:
        if hasattr(args, name) and not ok(getattr(args, name)):
            parser.error(message)
    for name in ("alpha1", "alpha2", "alpha3"):
        if hasattr(args, name) and getattr(args, name) < 0:
            parser.error(f"--{name} must be non-negative")
    if getattr(args, "ks", None):
        _parse_ks(parser, args.ks)


def _rerank_config(args: argparse.Namespace) -> RerankConfig:
    return RerankConfig(tau=args.tau, fine_weight=args.fine_weight)


def _loss_config(args: argparse.Namespace) -> LossConfig:
    return LossConfig(
        tau=args.tau_loss,
        beta=args.beta,
        alpha=(args.alpha1, args.alpha2, args.alpha3),
        neighbors=args.m_neighbors,
        sigma=args.sigma,
    )


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        interaction_tau=args.tau,
        loss=_loss_config(args),
        seed=args.seed,
    )


def _config_echo(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "command"}


def _write_report(out_dir: str | None, stem: str, payload: dict, csv_text: str) -> None:
    if out_dir is None:
        return
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{stem}.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n"
    )
    (directory / f"{stem}.csv").write_text(csv_text)


def _encode_split(args: argparse.Namespace) -> tuple[Gallery, list[QueryText]]:
    dataset = load_dataset(args.data)
    if args.params:
        params = load_params(args.params)
    else:
        params = ToyEncoderParams.initialize(
            dataset.spec.feature_dim, dataset.spec.dim, args.seed
        )
    if params.feature_dim != dataset.spec.feature_dim:
        raise ShapeError(
            f"parameter feature dim {params.feature_dim} does not match "
            f"dataset {dataset.spec.feature_dim}"
        )
    if args.split == "eval":
        indices = dataset.eval_indices()
    elif args.split == "train":
        indices = dataset.train_indices()
    else:
        indices = range(len(dataset))
    entries = []
    queries = []
    for i in indices:
        pid = dataset.pair_ids[i]
        coarse, fine, tokens, global_emb = encode_pair(
            params, dataset.image_features[i], dataset.text_features[i]
        )
        entries.append(
            GalleryEntry(
                f"img-{pid}", coarse, fine, aggregate_recall_embedding(coarse, fine)
            )
        )
        queries.append(QueryText(f"txt-{pid}", tokens, global_emb, (f"img-{pid}",)))
    return Gallery(dim=params.dim, entries=tuple(entries)), queries


def _cmd_gen(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        n_classes=args.classes,
        n_per_class=args.per_class,
        feature_dim=args.feature_dim,
        dim=args.dim,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    dataset = generate_synthetic(spec)
    save_dataset(dataset, args.out)
    print(
        f"wrote {args.out}: {len(dataset)} pairs "
        f"({spec.n_classes} classes x {spec.n_per_class}), "
        f"feature dim {spec.feature_dim}, embedding dim {spec.dim}"
    )
    return 0


def _cmd_train_toy(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    result = train(dataset, _train_config(args))
    save_params(result.params, args.params_out)
    if args.curve_out:
        Path(args.curve_out).write_text(curve_csv(result.curve))
    first, last = result.curve[0], result.curve[-1]
    print(
        f"trained {args.epochs} epochs: loss {first.total:.6f} -> {last.total:.6f}; "
        f"parameters written to {args.params_out}"
    )
    return 0


def _cmd_index(args: argparse.Namespace) -> int:
    gallery, queries = _encode_split(args)
    save_gallery(gallery, args.gallery)
    save_queries(queries, args.queries)
    print(
        f"indexed {len(gallery)} images -> {args.gallery}, "
        f"{len(queries)} queries -> {args.queries} (split={args.split})"
    )
    return 0


def _cmd_retrieve(args: argparse.Namespace) -> int:
    gallery = load_gallery(args.gallery)
    queries = load_queries(args.queries)
    if not queries:
        raise ValidationError("query file contains no queries")
    if args.query_id is None:
        query = queries[0]
    else:
        matching = [q for q in queries if q.id == args.query_id]
        if not matching:
            raise ValidationError(f"query id {args.query_id!r} not in {args.queries}")
        query = matching[0]
    candidates = recall_topk(gallery, query, args.k)
    recall_by_id = {cid: (rank, score) for rank, (cid, score) in
                    enumerate(candidates.candidates, start=1)}
    results = rerank_candidates(gallery, candidates, query, _rerank_config(args))
    print(f"query {query.id} against {len(gallery)} images, k={args.k}")
    print(f"{'rank':>4}  {'id':<16} {'rerank':>9} {'recall':>9} {'recall_rank':>11}")
    for r in results:
        recall_rank, recall_score = recall_by_id[r.id]
        marker = " *" if r.id in query.ground_truth_ids else ""
        print(
            f"{r.rerank_rank:>4}  {r.id:<16} {r.score:>9.4f} "
            f"{recall_score:>9.4f} {recall_rank:>11}{marker}"
        )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    gallery = load_gallery(args.gallery)
    queries = load_queries(args.queries)
    mode = "one_stage" if args.one_stage else "two_stage"
    k = None if args.one_stage else min(args.k, len(gallery))
    runs = evaluate_runs(gallery, queries, mode, k, _rerank_config(args))
    report = compute_metrics(gallery, queries, mode, k, _rerank_config(args), runs=runs)
    for direction in sorted(report.r_at):
        values = report.r_at[direction]
        print(
            f"{direction}: "
            + "  ".join(f"R@{m}={values[m] * 100:.2f}" for m in sorted(values))
        )
    print(f"mR={report.mr * 100:.2f}")
    for direction, ceiling in sorted(report.recall_ceiling.items()):
        print(f"recall ceiling {direction}: {ceiling * 100:.2f}")
    payload = {"config": _config_echo(args), "metrics": report.to_dict()}
    stem = f"eval_{mode}_k{k if k is not None else 'all'}_seed{args.seed}"
    _write_report(args.out, stem, payload, metrics_csv(report, runs, queries))
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    gallery = load_gallery(args.gallery)
    queries = load_queries(args.queries)
    parser = build_parser()
    ks = _parse_ks(parser, args.ks) if args.ks else [args.k]
    variants = [BenchVariant("two_stage", k) for k in ks]
    reports = measure_bench(
        gallery, queries, variants, args.reps, args.warmup, _rerank_config(args)
    )
    print(f"{'variant':<16} {'mean ms':>9} {'median ms':>10} {'qps':>8} {'speedup':>8}")
    for r in reports:
        print(
            f"{r.label:<16} {r.latency_ms_mean:>9.2f} {r.latency_ms_median:>10.2f} "
            f"{r.throughput_qps:>8.2f} {r.speedup:>7.1f}x"
        )
    payload = {
        "config": _config_echo(args),
        "reports": [r.to_dict() for r in reports],
    }
    stem = f"bench_k{'-'.join(str(k) for k in ks)}_seed{args.seed}"
    _write_report(args.out, stem, payload, bench_csv(reports))
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    rows = ablation_suite(dataset, _train_config(args), _rerank_config(args), args.k)
    print(f"{'variant':<16} {'I2T R@1':>8} {'T2I R@1':>8} {'mR':>7}")
    for row in rows:
        print(
            f"{row.variant:<16} {row.i2t_r1 * 100:>8.2f} "
            f"{row.t2i_r1 * 100:>8.2f} {row.mr * 100:>7.2f}"
        )
    payload = {
        "config": _config_echo(args),
        "rows": [vars(row) for row in rows],
    }
    stem = f"ablation_k{args.k}_seed{args.seed}"
    _write_report(args.out, stem, payload, ablation_csv(rows))
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    gallery = load_gallery(args.gallery)
    queries = load_queries(args.queries)
    parser = build_parser()
    ks = _parse_ks(parser, args.ks)
    rows = k_sweep(
        gallery, queries, ks, _rerank_config(args), reps=args.reps, warmup=args.warmup
    )
    print(f"{'k':>5} {'mR':>7} {'mean ms':>9} {'qps':>8}")
    for row in rows:
        print(
            f"{row.k:>5} {row.mr * 100:>7.2f} "
            f"{row.latency_ms_mean:>9.2f} {row.throughput_qps:>8.2f}"
        )
    payload = {"config": _config_echo(args), "rows": [r.to_dict() for r in rows]}
    stem = f"sweep_seed{args.seed}"
    _write_report(args.out, stem, payload, sweep_csv(rows))
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train-toy": _cmd_train_toy,
    "index": _cmd_index,
    "retrieve": _cmd_retrieve,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "ablate": _cmd_ablate,
    "sweep": _cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    _validate_ranges(parser, args)
    try:
        return _COMMANDS[args.command](args)
    except (
        ParameterError,
        ValidationError,
        ShapeError,
        FileFormatError,
        TrainingError,
        MeasurementError,
        KeyError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
