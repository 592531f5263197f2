import json
from pathlib import Path

import pytest

from fruitbench.cli import main

DATA = Path(__file__).parent / "data"
SYN30 = DATA / "synthetic30"


def run(capsys, *argv):
    capsys.readouterr()  # drop output of any fixture setup
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestStats:
    def test_markdown_table(self, capsys):
        code, out, _ = run(
            capsys, "stats", "--annotations", str(DATA / "fixture_stats" / "annotations.json")
        )
        assert code == 0
        assert out.startswith("| Category |")
        assert "Total" in out

    def test_output_file(self, capsys, tmp_path):
        out_path = tmp_path / "stats.csv"
        code, _, _ = run(
            capsys,
            "stats",
            "--annotations", str(DATA / "fixture_stats" / "annotations.json"),
            "--format", "csv",
            "--out", str(out_path),
        )
        assert code == 0
        assert out_path.read_text().startswith("Category,")

    def test_missing_file_exits_2(self, capsys):
        code, _, err = run(capsys, "stats", "--annotations", "nope.json")
        assert code == 2
        assert "error" in err


class TestSplit:
    def test_same_seed_same_digest(self, capsys, tmp_path):
        digests = []
        for name in ("a.json", "b.json"):
            code, out, _ = run(
                capsys,
                "split",
                "--annotations", str(SYN30 / "annotations.json"),
                "--kind", "k-shot",
                "--k", "2",
                "--fraction", "0.6",
                "--seed", "7",
                "--out", str(tmp_path / name),
            )
            assert code == 0
            digests.append(out.strip())
        assert digests[0] == digests[1]
        assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()

    def test_cross_class_by_name(self, capsys, tmp_path):
        code, _, _ = run(
            capsys,
            "split",
            "--annotations", str(SYN30 / "annotations.json"),
            "--kind", "cross-class",
            "--held-out", "lemon",
            "--fraction", "0.6",
            "--seed", "3",
            "--out", str(tmp_path / "cc.json"),
        )
        assert code == 0
        manifest = json.loads((tmp_path / "cc.json").read_text())
        assert manifest["spec"]["held_out"] == 3

    def test_unknown_category_exits_1(self, capsys, tmp_path):
        code, _, err = run(
            capsys,
            "split",
            "--annotations", str(SYN30 / "annotations.json"),
            "--kind", "cross-class",
            "--held-out", "banana",
            "--fraction", "0.6",
            "--seed", "3",
            "--out", str(tmp_path / "cc.json"),
        )
        assert code == 1
        assert "banana" in err

    def test_bad_fraction_exits_1_before_io(self, capsys, tmp_path):
        code, _, err = run(
            capsys,
            "split",
            "--annotations", "does-not-even-exist.json",
            "--kind", "train-test",
            "--fraction", "1.5",
            "--seed", "3",
            "--out", str(tmp_path / "x.json"),
        )
        assert code == 1  # validation error, not the I/O error
        assert "fraction" in err


@pytest.fixture
def split_manifest(tmp_path_factory):
    path = tmp_path_factory.mktemp("split") / "split.json"
    code = main(
        [
            "split",
            "--annotations", str(SYN30 / "annotations.json"),
            "--kind", "train-test",
            "--fraction", "0.6",
            "--seed", "77",
            "--out", str(path),
        ]
    )
    assert code == 0
    return path


class TestEvaluate:
    def test_perfect_json_report(self, capsys, split_manifest):
        code, out, _ = run(
            capsys,
            "evaluate",
            "--annotations", str(SYN30 / "annotations.json"),
            "--predictions", str(SYN30 / "predictions_perfect.json"),
            "--split", str(split_manifest),
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["aggregate"]["mAP"] == 1.0
        assert payload["aggregate"]["AP50"] == 1.0
        assert payload["aggregate"]["mAR"] == 1.0

    def test_markdown_summary(self, capsys, split_manifest):
        code, out, _ = run(
            capsys,
            "evaluate",
            "--annotations", str(SYN30 / "annotations.json"),
            "--predictions", str(SYN30 / "predictions_empty.json"),
            "--split", str(split_manifest),
            "--format", "markdown",
        )
        assert code == 0
        assert "| Category |" in out
        assert "0.0" in out

    def test_dangling_prediction_exits_1(self, capsys, split_manifest, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(
            json.dumps(
                [{"image_id": 999, "category_id": 1, "bbox": [0, 0, 5, 5], "score": 0.5}]
            )
        )
        code, _, err = run(
            capsys,
            "evaluate",
            "--annotations", str(SYN30 / "annotations.json"),
            "--predictions", str(bad),
            "--split", str(split_manifest),
        )
        assert code == 1
        assert "999" in err

    def test_json_errors_flag(self, capsys, split_manifest, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(
            json.dumps(
                [{"image_id": 999, "category_id": 1, "bbox": [0, 0, 5, 5], "score": 0.5}]
            )
        )
        code, _, err = run(
            capsys,
            "--json-errors",
            "evaluate",
            "--annotations", str(SYN30 / "annotations.json"),
            "--predictions", str(bad),
            "--split", str(split_manifest),
        )
        assert code == 1
        payload = json.loads(err.strip().splitlines()[-1])
        assert payload["error"] == "IntegrityError"
        assert "999" in payload["message"]

    def test_threads_flag_same_output(self, capsys, split_manifest):
        outputs = []
        for threads in ("1", "4"):
            code, out, _ = run(
                capsys,
                "evaluate",
                "--annotations", str(SYN30 / "annotations.json"),
                "--predictions", str(SYN30 / "predictions_noisy.json"),
                "--split", str(split_manifest),
                "--threads", threads,
            )
            assert code == 0
            outputs.append(out)
        assert outputs[0] == outputs[1]


class TestLoss:
    def test_perfect_predictions_near_zero(self, capsys, split_manifest):
        code, out, _ = run(
            capsys,
            "loss",
            "--annotations", str(SYN30 / "annotations.json"),
            "--predictions", str(SYN30 / "predictions_perfect.json"),
            "--split", str(split_manifest),
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["aggregate"]["total"] < 1e-4
        assert len(payload["per_image"]) == 15  # 6 - floor(0.6 * 6) = 3 test images per class

    def test_weights_scale_total(self, capsys, split_manifest):
        totals = []
        for weights in ("1,1,1", "2,2,2"):
            code, out, _ = run(
                capsys,
                "loss",
                "--annotations", str(SYN30 / "annotations.json"),
                "--predictions", str(SYN30 / "predictions_noisy.json"),
                "--split", str(split_manifest),
                "--weights", weights,
            )
            assert code == 0
            totals.append(json.loads(out)["aggregate"]["total"])
        assert totals[1] == pytest.approx(2 * totals[0], rel=1e-9)


class TestRecEval:
    def test_prompt_reports(self, capsys, tmp_path, split_manifest):
        filters = tmp_path / "filters.json"
        filters.write_text(json.dumps({"apple": {"any": True}}))
        preds = tmp_path / "preds.json"
        records = json.loads((SYN30 / "predictions_perfect.json").read_text())
        for r in records:
            r["prompt"] = "apple"
        preds.write_text(json.dumps(records))
        code, out, _ = run(
            capsys,
            "rec-eval",
            "--annotations", str(SYN30 / "annotations.json"),
            "--predictions", str(preds),
            "--split", str(split_manifest),
            "--filters", str(filters),
        )
        assert code == 0
        payload = json.loads(out)
        assert payload[0]["prompt"] == "apple"
        assert payload[0]["aggregate"]["mAP"] == 1.0


class TestReport:
    def test_grid(self, capsys, tmp_path, split_manifest):
        grid = tmp_path / "grid.json"
        grid.write_text(
            json.dumps(
                {
                    "format": "markdown",
                    "rows": [
                        {
                            "label": "perfect",
                            "manifest": str(split_manifest),
                            "predictions": str(SYN30 / "predictions_perfect.json"),
                        },
                        {
                            "label": "empty",
                            "manifest": str(split_manifest),
                            "predictions": str(SYN30 / "predictions_empty.json"),
                        },
                    ],
                }
            )
        )
        code, out, _ = run(
            capsys, "report",
            "--annotations", str(SYN30 / "annotations.json"),
            "--grid", str(grid),
        )
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[0].startswith("| Setting |")
        assert "100.0" in lines[2] and "perfect" in lines[2]

    def test_malformed_grid_json_exits_1(self, capsys, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text("{not json")
        code, _, err = run(
            capsys, "report",
            "--annotations", str(SYN30 / "annotations.json"),
            "--grid", str(grid),
        )
        assert code == 1
        assert "grid" in err

    def test_grid_rows_missing_keys_exit_1(self, capsys, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"rows": [{"label": "x"}]}))
        code, _, err = run(
            capsys, "report",
            "--annotations", str(SYN30 / "annotations.json"),
            "--grid", str(grid),
        )
        assert code == 1
        assert "manifest" in err

    def test_missing_grid_file_exits_1(self, capsys, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(
            json.dumps(
                {"rows": [{"label": "x", "manifest": "gone.json", "predictions": "gone2.json"}]}
            )
        )
        code, _, err = run(
            capsys, "report",
            "--annotations", str(SYN30 / "annotations.json"),
            "--grid", str(grid),
        )
        assert code == 1
        assert "gone.json" in err


class TestBench:
    def test_markdown(self, capsys):
        code, out, _ = run(capsys, "bench", "--timings", str(DATA / "timing.jsonl"))
        assert code == 0
        assert "21.9" in out and "45.7" in out
        assert "5.5" in out and "181.8" in out


class TestIngestLabelme:
    def test_roundtrip(self, capsys, tmp_path):
        src = tmp_path / "labels"
        src.mkdir()
        (src / "img1.json").write_text(
            json.dumps(
                {
                    "imagePath": "img1.jpg",
                    "imageWidth": 100,
                    "imageHeight": 80,
                    "shapes": [
                        {
                            "label": "apple",
                            "points": [[10, 10], [30, 30]],
                            "shape_type": "rectangle",
                        },
                        {"label": "Apple ", "points": [[0, 0], [5, 5]], "shape_type": "rectangle"},
                    ],
                }
            )
        )
        cats = tmp_path / "cats.json"
        cats.write_text(json.dumps([{"id": 1, "name": "apple"}]))
        out_path = tmp_path / "out.json"
        code, _, err = run(
            capsys,
            "ingest-labelme",
            "--dir", str(src),
            "--categories", str(cats),
            "--out", str(out_path),
        )
        assert code == 0
        assert "unmapped label 'Apple '" in err
        payload = json.loads(out_path.read_text())
        assert len(payload["annotations"]) == 1

    def test_fail_on_unmapped(self, capsys, tmp_path):
        src = tmp_path / "labels"
        src.mkdir()
        (src / "img1.json").write_text(
            json.dumps(
                {
                    "imageWidth": 100,
                    "imageHeight": 80,
                    "shapes": [
                        {"label": "pear", "points": [[0, 0], [5, 5]], "shape_type": "rectangle"}
                    ],
                }
            )
        )
        cats = tmp_path / "cats.json"
        cats.write_text(json.dumps([{"id": 1, "name": "apple"}]))
        code, _, _ = run(
            capsys,
            "ingest-labelme",
            "--dir", str(src),
            "--categories", str(cats),
            "--out", str(tmp_path / "out.json"),
            "--fail-on-unmapped",
        )
        assert code == 1


class TestWriteCoco:
    def test_normalizes(self, capsys, tmp_path):
        out_path = tmp_path / "normalized.json"
        code, _, _ = run(
            capsys,
            "write-coco",
            "--annotations", str(DATA / "fixture_stats" / "annotations.json"),
            "--out", str(out_path),
        )
        assert code == 0
        payload = json.loads(out_path.read_text())
        assert set(payload) == {"images", "annotations", "categories"}


class TestUsageAndConfig:
    def test_unknown_flag_exits_1(self, capsys):
        code, _, err = run(capsys, "stats", "--annotations", "x.json", "--bogus")
        assert code == 1
        assert "bogus" in err

    def test_unknown_subcommand_exits_1(self, capsys):
        code, _, _ = run(capsys, "frobnicate")
        assert code == 1

    def test_config_file_defaults_and_flag_override(self, capsys, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(
            json.dumps(
                {"stats": {"annotations": str(DATA / "fixture_stats" / "annotations.json"),
                           "format": "csv"}}
            )
        )
        code, out, _ = run(capsys, "--config", str(config), "stats")
        assert code == 0
        assert out.startswith("Category,")  # csv from config
        code, out, _ = run(
            capsys, "--config", str(config), "stats", "--format", "markdown"
        )
        assert code == 0
        assert out.startswith("| Category |")  # flag wins

    def test_config_unknown_key_rejected(self, capsys, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"stats": {"bogus_key": 1}}))
        code, _, err = run(capsys, "--config", str(config), "stats", "--annotations", "x")
        assert code == 1
        assert "bogus_key" in err
