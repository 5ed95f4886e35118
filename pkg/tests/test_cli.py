from __future__ import annotations

import csv
import json

import pytest

from mlaref.cli import main


def _csv_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class TestThreshold:
    def test_writes_table_figure_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "th"
        assert main(["threshold", "--output", str(out)]) == 0
        rows = _csv_rows(out / "threshold.csv")
        assert len(rows) == 1
        assert float(rows[0]["analytic"]) == pytest.approx(61.43790849673203)
        assert rows[0]["crossover_batch"] == "62"
        assert rows[0]["scheduling_batch"] == "64"
        assert (out / "threshold.png").exists()
        manifest = json.loads((out / "threshold.csv.manifest.json").read_text())
        assert manifest["command"] == "threshold"
        assert manifest["config"]["model_name"] == "deepseek-v3"
        assert "scheduling batch 64" in capsys.readouterr().out

    def test_no_plots(self, tmp_path):
        out = tmp_path / "th"
        assert main(["threshold", "--output", str(out), "--no-plots"]) == 0
        assert not (out / "threshold.png").exists()

    def test_hardware_flag_changes_result(self, tmp_path):
        out = tmp_path / "th"
        assert main(["threshold", "--output", str(out), "--hardware", "fig2-npu"]) == 0
        rows = _csv_rows(out / "threshold.csv")
        assert rows[0]["scheduling_batch"] == "128"


class TestRoofline:
    def test_rows_and_crossover_annotation(self, tmp_path):
        out = tmp_path / "rl"
        assert (
            main(
                [
                    "roofline",
                    "--output",
                    str(out),
                    "--batches",
                    "1,64,256",
                    "--shared-len",
                    "4096",
                ]
            )
            == 0
        )
        rows = _csv_rows(out / "roofline.csv")
        assert list(rows[0]) == [
            "method", "B", "S_q", "L_s", "L_n", "macs", "hbm_bytes", "time_s", "tokens_per_s",
        ]
        data = [r for r in rows if r["method"] != "crossover"]
        assert len(data) == 9  # 3 methods x 3 batches
        marks = [r for r in rows if r["method"] == "crossover"]
        assert len(marks) == 1 and marks[0]["B"] == "64"
        assert (out / "roofline.png").exists()

    def test_rejects_unknown_method(self, tmp_path, capsys):
        assert main(["roofline", "--output", str(tmp_path / "x"), "--methods", "flash"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_rejects_empty_context(self, tmp_path):
        assert (
            main(
                [
                    "roofline",
                    "--output",
                    str(tmp_path / "x"),
                    "--shared-len",
                    "0",
                    "--nonshared-len",
                    "0",
                ]
            )
            == 2
        )

    def test_jsonl_format(self, tmp_path):
        out = tmp_path / "rl"
        assert (
            main(
                ["roofline", "--output", str(out), "--batches", "2", "--format", "jsonl"]
            )
            == 0
        )
        lines = (out / "roofline.jsonl").read_text().splitlines()
        assert len(lines) == 4  # 3 methods + crossover mark
        assert json.loads(lines[0])["method"] == "naive"


class TestEquivalence:
    def test_pass_run(self, tmp_path, capsys):
        out = tmp_path / "eq"
        assert (
            main(["equivalence", "--output", str(out), "--trials", "10", "--no-plots"]) == 0
        )
        summary = json.loads((out / "equivalence_summary.json").read_text())
        assert summary["passed"] is True
        assert summary["trials"] == 10
        assert summary["manifest"]["extra"]["inject_fault"] is False
        rows = _csv_rows(out / "equivalence.csv")
        assert len(rows) == 10
        assert "PASS" in capsys.readouterr().out

    def test_fault_injection_fails_with_code_3(self, tmp_path, capsys):
        out = tmp_path / "eq"
        code = main(
            [
                "equivalence",
                "--output",
                str(out),
                "--trials",
                "4",
                "--inject-fault",
                "--no-plots",
            ]
        )
        assert code == 3
        assert "FAIL" in capsys.readouterr().out
        summary = json.loads((out / "equivalence_summary.json").read_text())
        assert summary["passed"] is False

    def test_float32_band(self, tmp_path):
        out = tmp_path / "eq"
        assert (
            main(
                [
                    "equivalence",
                    "--output",
                    str(out),
                    "--trials",
                    "5",
                    "--dtype",
                    "float32",
                    "--no-plots",
                ]
            )
            == 0
        )
        summary = json.loads((out / "equivalence_summary.json").read_text())
        assert summary["tolerance"] == 1e-5


class TestFootprint:
    def test_grid_rows(self, tmp_path):
        out = tmp_path / "fp"
        assert (
            main(
                [
                    "footprint",
                    "--output",
                    str(out),
                    "--batches",
                    "4096,32768",
                    "--max-seqs",
                    "32768,262144",
                ]
            )
            == 0
        )
        rows = _csv_rows(out / "footprint.csv")
        assert len(rows) == 4
        worst = max(float(r["overhead_ratio"]) for r in rows)
        best = min(float(r["overhead_ratio"]) for r in rows)
        assert worst < 0.10
        assert best == pytest.approx(0.0013144687941756572)
        assert (out / "footprint.png").exists()

    def test_no_expanded_prefix(self, tmp_path):
        out = tmp_path / "fp"
        assert (
            main(
                [
                    "footprint",
                    "--output",
                    str(out),
                    "--batches",
                    "4096",
                    "--max-seqs",
                    "32768",
                    "--no-expanded-prefix",
                ]
            )
            == 0
        )
        rows = _csv_rows(out / "footprint.csv")
        assert float(rows[0]["expanded_bytes"]) == 0.0

    def test_unknown_parallelism(self, tmp_path):
        assert (
            main(
                [
                    "footprint",
                    "--output",
                    str(tmp_path / "x"),
                    "--parallelism",
                    "mystery-pod",
                ]
            )
            == 2
        )

    def test_shared_longer_than_seq_is_usage_error(self, tmp_path):
        assert (
            main(
                [
                    "footprint",
                    "--output",
                    str(tmp_path / "x"),
                    "--batches",
                    "4096",
                    "--max-seqs",
                    "1024",
                ]
            )
            == 2
        )


class TestSimulate:
    def test_cost_only_run(self, tmp_path):
        out = tmp_path / "sim"
        assert (
            main(
                [
                    "simulate",
                    "--output",
                    str(out),
                    "--batch-size",
                    "4",
                    "--prefix-len",
                    "64",
                    "--tail",
                    "fixed:8",
                    "--gen",
                    "fixed:3",
                    "--requests",
                    "6",
                    "--no-math",
                    "--no-plots",
                ]
            )
            == 0
        )
        report = json.loads((out / "sim_report.json").read_text())
        assert report["total_tokens"] == 18
        assert report["executed_math"] is False
        assert report["manifest"]["extra"]["method"] == "hybrid"
        rows = _csv_rows(out / "sim_trace.csv")
        assert len(rows) == report["steps"]

    def test_math_run_and_figure(self, tmp_path):
        out = tmp_path / "sim"
        assert (
            main(
                [
                    "simulate",
                    "--output",
                    str(out),
                    "--batch-size",
                    "2",
                    "--prefix-len",
                    "12",
                    "--tail",
                    "fixed:3",
                    "--gen",
                    "fixed:2",
                    "--requests",
                    "3",
                ]
            )
            == 0
        )
        report = json.loads((out / "sim_report.json").read_text())
        assert report["executed_math"] is True
        assert report["output_checksum"] is not None
        assert (out / "sim_breakdown.png").exists()

    def test_capacity_exit_code(self, tmp_path, capsys):
        code = main(
            [
                "simulate",
                "--output",
                str(tmp_path / "sim"),
                "--batch-size",
                "8",
                "--prefix-len",
                "16",
                "--tail",
                "fixed:300",
                "--gen",
                "fixed:2",
                "--requests",
                "8",
                "--no-math",
                "--capacity-pages",
                "4",
                "--no-plots",
            ]
        )
        assert code == 4
        assert "capacity error" in capsys.readouterr().err

    def test_typhoon_alias_accepted(self, tmp_path):
        out = tmp_path / "sim"
        assert (
            main(
                [
                    "simulate",
                    "--output",
                    str(out),
                    "--method",
                    "typhoon",
                    "--batch-size",
                    "2",
                    "--prefix-len",
                    "8",
                    "--tail",
                    "fixed:2",
                    "--gen",
                    "fixed:2",
                    "--requests",
                    "2",
                    "--no-math",
                    "--no-plots",
                ]
            )
            == 0
        )
        report = json.loads((out / "sim_report.json").read_text())
        assert report["method"] == "hybrid"

    def test_bad_dist_is_usage_error(self, tmp_path):
        assert (
            main(
                [
                    "simulate",
                    "--output",
                    str(tmp_path / "x"),
                    "--tail",
                    "poisson:4",
                    "--no-math",
                ]
            )
            == 2
        )

    def test_sweep_outputs(self, tmp_path):
        out = tmp_path / "sim"
        assert (
            main(
                [
                    "simulate",
                    "--output",
                    str(out),
                    "--batch-size",
                    "2",
                    "--prefix-len",
                    "2048",
                    "--tail",
                    "fixed:16",
                    "--gen",
                    "fixed:2",
                    "--requests",
                    "2",
                    "--no-math",
                    "--sweep",
                    "8,128",
                    "--no-plots",
                ]
            )
            == 0
        )
        rows = _csv_rows(out / "speedup.csv")
        by = {(r["method"], r["B"]): r for r in rows}
        assert float(by[("hybrid", "8")]["speedup_vs_absorb"]) == 1.0
        assert float(by[("hybrid", "128")]["speedup_vs_absorb"]) > 1.0


class TestConfigIntegration:
    def test_config_file_feeds_commands(self, tmp_path):
        cfg = tmp_path / "engine.ini"
        cfg.write_text("[hardware]\npreset = fig2-npu\n[output]\nformat = jsonl\n")
        out = tmp_path / "th"
        assert main(["threshold", "--config", str(cfg), "--output", str(out)]) == 0
        line = json.loads((out / "threshold.jsonl").read_text().splitlines()[0])
        assert line["hardware"] == "fig2-npu"
        assert line["scheduling_batch"] == 128

    def test_flag_beats_config(self, tmp_path):
        cfg = tmp_path / "engine.ini"
        cfg.write_text("[hardware]\npreset = fig2-npu\n")
        out = tmp_path / "th"
        assert (
            main(
                [
                    "threshold",
                    "--config",
                    str(cfg),
                    "--output",
                    str(out),
                    "--hardware",
                    "ascend-910-class",
                ]
            )
            == 0
        )
        rows = _csv_rows(out / "threshold.csv")
        assert rows[0]["hardware"] == "ascend-910-class"

    def test_missing_config_is_usage_error(self, tmp_path, capsys):
        assert (
            main(["threshold", "--config", str(tmp_path / "none.ini"), "--output", str(tmp_path)])
            == 2
        )
        assert "config error" in capsys.readouterr().err
