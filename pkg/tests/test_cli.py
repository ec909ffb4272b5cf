import json
from pathlib import Path

import numpy as np
import pytest

from chesscal.cli import main

BOARD_JSON = {"rows": 8, "cols": 11, "square_size": 1.0}


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def clean_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = write_json(root / "gen.json", {"count": 6, "seed": 303, "board": BOARD_JSON})
    out = root / "data"
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    return out


class TestGenerate:
    def test_valid_config(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"count": 2, "seed": 1, "board": BOARD_JSON})
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
        printed = capsys.readouterr().out.strip()
        assert printed.endswith("manifest.json")
        assert (tmp_path / "d" / "manifest.json").exists()

    def test_negative_count_exit_2(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"count": -4, "seed": 1, "board": BOARD_JSON})
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == 2
        assert "count" in capsys.readouterr().err

    def test_unknown_field_named(self, tmp_path, capsys):
        cfg = write_json(
            tmp_path / "c.json", {"count": 2, "seed": 1, "board": BOARD_JSON, "blurx": 1}
        )
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == 2
        assert "blurx" in capsys.readouterr().err

    def test_rerun_identical_manifest(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"count": 2, "seed": 9, "board": BOARD_JSON})
        main(["generate", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["generate", "--config", cfg, "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
        assert (tmp_path / "a" / "gt.json").read_bytes() == (tmp_path / "b" / "gt.json").read_bytes()


class TestCalibrate:
    def test_gt_heatmap_source_accuracy(self, clean_dataset, tmp_path):
        out = tmp_path / "run"
        code = main(["calibrate", str(clean_dataset), "--out", str(out), "--seed", "4"])
        assert code == 0
        result = json.loads((out / "result.json").read_text())
        gt = json.loads((clean_dataset / "gt.json").read_text())
        gt_k = gt["samples"][0]["intrinsics"]
        e_fl = abs(result["intrinsics"]["fx"] - gt_k["fx"]) + abs(result["intrinsics"]["fy"] - gt_k["fy"])
        e_pp = abs(result["intrinsics"]["px"] - gt_k["px"]) + abs(result["intrinsics"]["py"] - gt_k["py"])
        assert (e_fl + e_pp) / 2 < 1e-2
        diags = json.loads((out / "diagnostics.json").read_text())
        assert len(diags["images"]) == 6
        assert all(d.get("peaks") == 88 for d in diags["images"])

    def test_deterministic_outputs(self, clean_dataset, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["calibrate", str(clean_dataset), "--out", str(a), "--seed", "7"])
        main(["calibrate", str(clean_dataset), "--out", str(b), "--seed", "7"])
        assert (a / "result.json").read_bytes() == (b / "result.json").read_bytes()
        assert (a / "diagnostics.json").read_bytes() == (b / "diagnostics.json").read_bytes()

    def test_threads_do_not_change_results(self, clean_dataset, tmp_path):
        a, b = tmp_path / "t1", tmp_path / "t4"
        main(["calibrate", str(clean_dataset), "--out", str(a), "--seed", "2", "--threads", "1"])
        main(["calibrate", str(clean_dataset), "--out", str(b), "--seed", "2", "--threads", "4"])
        assert (a / "result.json").read_bytes() == (b / "result.json").read_bytes()

    def test_too_few_images_stage_named(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"count": 2, "seed": 5, "board": BOARD_JSON})
        data = tmp_path / "d"
        main(["generate", "--config", cfg, "--out", str(data)])
        pipe = write_json(tmp_path / "p.json", {"ransac": {"subset_size": 5}})
        out = tmp_path / "run"
        assert main(["calibrate", str(data), "--config", pipe, "--out", str(out)]) == 1
        err = capsys.readouterr().err
        assert "load" in err
        diags = json.loads((out / "diagnostics.json").read_text())
        assert diags["failed_stage"] == "load"

    def test_bad_pipeline_config_exit_2(self, clean_dataset, tmp_path, capsys):
        pipe = write_json(tmp_path / "p.json", {"source": "nonsense"})
        assert main(["calibrate", str(clean_dataset), "--config", pipe, "--out", str(tmp_path / "o")]) == 2

    def test_response_detector_source(self, clean_dataset, tmp_path):
        pipe = write_json(tmp_path / "p.json", {"source": "response_detector"})
        out = tmp_path / "resp"
        assert main(["calibrate", str(clean_dataset), "--config", pipe, "--out", str(out), "--seed", "1"]) == 0
        result = json.loads((out / "result.json").read_text())
        assert result["rpe"] < 0.2

    def test_external_heatmap_dir_source(self, clean_dataset, tmp_path):
        # point the external source at the dataset's own heatmap files
        pipe = write_json(
            tmp_path / "p.json",
            {"source": "external_heatmap_dir", "external_heatmap_dir": str(clean_dataset)},
        )
        out = tmp_path / "ext"
        assert main(["calibrate", str(clean_dataset), "--config", pipe, "--out", str(out), "--seed", "3"]) == 0
        result = json.loads((out / "result.json").read_text())
        assert result["rpe"] < 1e-3


@pytest.fixture(scope="module")
def level1_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dist")
    cfg = write_json(
        root / "gen.json",
        {"count": 6, "seed": 404, "board": BOARD_JSON, "distortion_level": "level1"},
    )
    out = root / "data"
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    return out


class TestDistortedPipeline:
    def test_fit_from_known_correction(self, level1_dataset, tmp_path):
        pipe = write_json(
            tmp_path / "p.json", {"source": "gt_heatmap", "correction": "fit_from_known"}
        )
        out = tmp_path / "run"
        code = main(["calibrate", str(level1_dataset), "--config", pipe, "--out", str(out), "--seed", "8"])
        assert code == 0
        result = json.loads((out / "result.json").read_text())
        gt = json.loads((level1_dataset / "gt.json").read_text())
        gt_k = gt["samples"][0]["intrinsics"]
        e_fl = abs(result["intrinsics"]["fx"] - gt_k["fx"]) + abs(result["intrinsics"]["fy"] - gt_k["fy"])
        e_pp = abs(result["intrinsics"]["px"] - gt_k["px"]) + abs(result["intrinsics"]["py"] - gt_k["py"])
        assert (e_fl + e_pp) / 2 < 1.5

    def test_estimate_from_lines_correction(self, level1_dataset, tmp_path):
        # line-based self-estimation cannot observe the radial gain, so
        # it is held to a looser intrinsics budget than fit_from_known
        pipe = write_json(
            tmp_path / "p.json",
            {"source": "response_detector", "correction": "estimate_from_lines"},
        )
        out = tmp_path / "run"
        code = main(["calibrate", str(level1_dataset), "--config", pipe, "--out", str(out), "--seed", "2"])
        assert code == 0
        result = json.loads((out / "result.json").read_text())
        gt = json.loads((level1_dataset / "gt.json").read_text())
        gt_k = gt["samples"][0]["intrinsics"]
        e_fl = abs(result["intrinsics"]["fx"] - gt_k["fx"]) + abs(result["intrinsics"]["fy"] - gt_k["fy"])
        e_pp = abs(result["intrinsics"]["px"] - gt_k["px"]) + abs(result["intrinsics"]["py"] - gt_k["py"])
        assert (e_fl + e_pp) / 2 < 8.0
        assert result["rpe"] < 0.5

    def test_correct_subcommand(self, level1_dataset, tmp_path):
        pipe = write_json(tmp_path / "p.json", {"correction": "fit_from_known"})
        out = tmp_path / "corrected"
        assert main(["correct", str(level1_dataset), "--config", pipe, "--out", str(out)]) == 0
        gt = json.loads((level1_dataset / "gt.json").read_text())
        for entry in gt["samples"]:
            assert (out / entry["image"]).exists()
            assert (out / entry["heatmap"]).exists()

    def test_correct_requires_mode(self, level1_dataset, tmp_path):
        assert main(["correct", str(level1_dataset), "--out", str(tmp_path / "x")]) == 2


class TestDetect:
    def test_corner_export(self, clean_dataset, tmp_path):
        out = tmp_path / "det"
        assert main(["detect", str(clean_dataset), "--out", str(out)]) == 0
        corners = json.loads((out / "corners.json").read_text())
        assert len(corners["images"]) == 6
        for entry in corners["images"]:
            grid = entry["grid"]
            assert grid["rows"] == 8 and grid["cols"] == 11
            flat = [p for row in grid["points"] for p in row if p is not None]
            assert len(flat) == 88


class TestEval:
    def run_calibration(self, dataset, out):
        assert main(["calibrate", str(dataset), "--out", str(out), "--seed", "6"]) == 0
        return out / "result.json"

    def test_metrics_report(self, clean_dataset, tmp_path, capsys):
        result = self.run_calibration(clean_dataset, tmp_path / "run")
        report_path = tmp_path / "report.json"
        code = main(["eval", str(result), "--gt", str(clean_dataset / "gt.json"), "--out", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["e_ip"] < 1e-2
        assert report["rpe_mean_euclidean"] is not None
        assert report["rpe_eq10"] is not None

    def test_result_equal_to_gt_zero_metrics(self, clean_dataset, tmp_path):
        gt = json.loads((clean_dataset / "gt.json").read_text())
        fake = {"intrinsics": gt["samples"][0]["intrinsics"]}
        fake_path = write_json(tmp_path / "fake.json", fake)
        report_path = tmp_path / "rep.json"
        assert main(["eval", fake_path, "--gt", str(clean_dataset / "gt.json"), "--out", str(report_path)]) == 0
        report = json.loads(report_path.read_text())
        assert report["e_fl"] == 0.0 and report["e_pp"] == 0.0 and report["e_ip"] == 0.0

    def test_hand_built_offset_case(self, clean_dataset, tmp_path):
        gt = json.loads((clean_dataset / "gt.json").read_text())
        k = dict(gt["samples"][0]["intrinsics"])
        k["fx"] += 2.0
        k["py"] += 4.0
        fake_path = write_json(tmp_path / "fake.json", {"intrinsics": k})
        report_path = tmp_path / "rep.json"
        main(["eval", fake_path, "--gt", str(clean_dataset / "gt.json"), "--out", str(report_path)])
        report = json.loads(report_path.read_text())
        assert report["e_ip"] == 3.0

    def test_batch_reports_mean_and_variance(self, clean_dataset, tmp_path):
        results = []
        for seed in (1, 2, 3):
            out = tmp_path / f"run{seed}"
            main(["calibrate", str(clean_dataset), "--out", str(out), "--seed", str(seed)])
            results.append(str(out / "result.json"))
        report_path = tmp_path / "batch.json"
        assert main(["eval", *results, "--gt", str(clean_dataset / "gt.json"), "--out", str(report_path)]) == 0
        report = json.loads(report_path.read_text())
        assert len(report["runs"]) == 3
        e_ips = [r["e_ip"] for r in report["runs"]]
        assert report["e_ip_mean"] == pytest.approx(np.mean(e_ips))
        assert report["e_ip_variance"] == pytest.approx(np.var(e_ips))

    def test_schema_mismatch(self, clean_dataset, tmp_path, capsys):
        bad = write_json(tmp_path / "bad.json", {"unexpected": True})
        assert main(["eval", bad, "--gt", str(clean_dataset / "gt.json")]) == 1
