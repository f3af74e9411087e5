import json

import pytest

from twostage.cli import main


def run_gen(tmp_path, **overrides):
    data = tmp_path / "data.npz"
    args = {
        "--classes": "3",
        "--per-class": "5",
        "--feature-dim": "12",
        "--dim": "6",
        "--seed": "7",
    }
    args.update(overrides)
    argv = ["gen", "--out", str(data)]
    for flag, value in args.items():
        argv += [flag, value]
    assert main(argv) == 0
    return data


def run_index(tmp_path, data, params=None):
    gallery = tmp_path / "g.ftfg"
    queries = tmp_path / "q.ftfq"
    argv = [
        "index", "--data", str(data),
        "--gallery", str(gallery), "--queries", str(queries),
    ]
    if params is not None:
        argv += ["--params", str(params)]
    assert main(argv) == 0
    return gallery, queries


class TestUsageErrors:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["--help"])
        assert excinfo.value.code == 0
        assert "COMMAND" in capsys.readouterr().out

    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == 2

    def test_retrieve_without_gallery_exits_two(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["retrieve", "--queries", "q.ftfq"])
        assert excinfo.value.code == 2

    def test_unknown_command_exits_two(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["frobnicate"])
        assert excinfo.value.code == 2

    def test_out_of_range_lambda_exits_two(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main([
                "eval", "--gallery", "g", "--queries", "q", "--lambda", "1.5",
            ])
        assert excinfo.value.code == 2
        assert "lambda" in capsys.readouterr().err

    def test_missing_file_is_runtime_error(self, tmp_path, capsys):
        code = main([
            "eval",
            "--gallery", str(tmp_path / "missing.ftfg"),
            "--queries", str(tmp_path / "missing.ftfq"),
        ])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestWorkflow:
    def test_gen_train_index_retrieve(self, tmp_path, capsys):
        data = run_gen(tmp_path)
        params = tmp_path / "enc.ftfp"
        curve = tmp_path / "curve.csv"
        assert main([
            "train-toy", "--data", str(data),
            "--epochs", "2", "--batch-size", "6",
            "--params-out", str(params), "--curve-out", str(curve),
        ]) == 0
        assert params.exists()
        assert curve.read_text().startswith("epoch,loss,inter,intra")
        gallery, queries = run_index(tmp_path, data, params)
        capsys.readouterr()
        assert main([
            "retrieve", "--gallery", str(gallery), "--queries", str(queries),
            "--k", "3",
        ]) == 0
        out = capsys.readouterr().out
        assert "rerank" in out and "recall_rank" in out
        assert "txt-" in out and "img-" in out

    def test_eval_reports_are_byte_identical(self, tmp_path):
        data = run_gen(tmp_path)
        gallery, queries = run_index(tmp_path, data)
        out = tmp_path / "reports"
        argv = [
            "eval", "--gallery", str(gallery), "--queries", str(queries),
            "--k", "3", "--seed", "7", "--out", str(out),
        ]
        name = "eval_two_stage_k3_seed7"
        assert main(argv) == 0
        first_json = (out / f"{name}.json").read_bytes()
        first_csv = (out / f"{name}.csv").read_bytes()
        assert main(argv) == 0
        assert (out / f"{name}.json").read_bytes() == first_json
        assert (out / f"{name}.csv").read_bytes() == first_csv
        payload = json.loads(first_json)
        assert payload["config"]["k"] == 3  # defaulted flags echoed too
        assert payload["config"]["tau"] == 0.07
        assert "mr" in payload["metrics"]

    def test_sweep_writes_report(self, tmp_path):
        data = run_gen(tmp_path)
        gallery, queries = run_index(tmp_path, data)
        out = tmp_path / "reports"
        assert main([
            "sweep", "--gallery", str(gallery), "--queries", str(queries),
            "--ks", "1,2,3", "--out", str(out), "--seed", "7",
        ]) == 0
        csv_text = (out / "sweep_seed7.csv").read_text()
        assert csv_text.splitlines()[0] == "k,mr,latency_ms_mean,throughput_qps"
        assert len(csv_text.strip().splitlines()) == 4

    def test_bench_prints_speedup_table(self, tmp_path, capsys):
        data = run_gen(tmp_path)
        gallery, queries = run_index(tmp_path, data)
        capsys.readouterr()
        assert main([
            "bench", "--gallery", str(gallery), "--queries", str(queries),
            "--ks", "2", "--reps", "3", "--warmup", "1",
        ]) == 0
        out = capsys.readouterr().out
        assert "one_stage" in out and "two_stage_k2" in out and "speedup" in out

    def test_ablate_emits_all_variants(self, tmp_path, capsys):
        data = run_gen(tmp_path)
        out = tmp_path / "reports"
        assert main([
            "ablate", "--data", str(data), "--epochs", "2", "--batch-size", "6",
            "--m-neighbors", "2", "--k", "3", "--out", str(out),
        ]) == 0
        table = capsys.readouterr().out
        for name in ("coarse_only", "fine_only", "no_interaction", "no_intra", "full"):
            assert name in table
        rows = json.loads((out / "ablation_k3_seed0.json").read_text())["rows"]
        assert [r["variant"] for r in rows] == [
            "coarse_only", "fine_only", "no_interaction", "no_intra", "full",
        ]
