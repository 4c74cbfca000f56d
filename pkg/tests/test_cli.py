import csv
import io
import json

import numpy as np
import pytest

from retseg.cli import (
    DEFAULT_CONFIG,
    PipelineConfig,
    ReportRow,
    emit_report,
    main,
)
from retseg.errors import ConfigError, NoRows
from retseg.image_core import load_image, load_mask
from retseg.metrics import MetricsReport


@pytest.fixture
def desk_config(tmp_path, synth_root):
    """Config for a complete desk-scale run over the 6-image synthetic set."""
    cfg = {
        "dataset_root": str(synth_root),
        "output_dir": str(tmp_path / "out"),
        "target_size": [32, 32],
        "approach": "gaussian",
        "split_counts": [12, 3, 3],
        "split_seed": 7,
        "model": "reti-unet1",
        "width_scale": 16,
        "train": {"epochs": 2, "batch_size": 2, "learning_rate": 0.001, "seed": 7},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path, tmp_path / "out"


def run(args):
    return main([str(a) for a in args])


class TestConfig:
    def test_init_template_is_valid(self, tmp_path):
        path = tmp_path / "template.json"
        assert run(["init", "--config", path]) == 0
        cfg = PipelineConfig.from_file(path)
        assert cfg.raw == DEFAULT_CONFIG

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"no_such_key": 1}))
        assert run(["preprocess", "--config", path]) == 2

    def test_bad_json_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{nope")
        assert run(["preprocess", "--config", path]) == 2

    def test_missing_config_rejected(self, tmp_path):
        assert run(["preprocess", "--config", tmp_path / "absent.json"]) == 2

    def test_indivisible_target_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"target_size": [100, 100]}))
        assert run(["preprocess", "--config", path]) == 2

    def test_malformed_value_types_rejected(self, tmp_path):
        for broken in (
            {"target_size": "big"},
            {"split_counts": [80, 20]},
            {"gaussian": {"sigma": None}},
            {"train": {"epochs": 0}},
        ):
            path = tmp_path / "c.json"
            path.write_text(json.dumps(broken))
            assert run(["preprocess", "--config", path]) == 2, broken

    def test_unet2_needs_multiple_of_32(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"target_size": [48, 48], "model": "reti-unet2"}))
        assert run(["preprocess", "--config", path]) == 2

    def test_missing_dataset_is_data_error(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(
            json.dumps({"dataset_root": str(tmp_path / "nowhere"), "target_size": [32, 32]})
        )
        assert run(["preprocess", "--config", path]) == 3


class TestStages:
    def test_preprocess_outputs(self, desk_config):
        config, out = desk_config
        assert run(["preprocess", "--config", config]) == 0
        images = sorted((out / "preprocessed/gaussian/images").glob("*.png"))
        masks = sorted((out / "preprocessed/gaussian/masks").glob("*.png"))
        assert len(images) == len(masks) == 6
        img = load_image(images[0])
        assert (img.width, img.height) == (32, 32)
        mask = load_mask(masks[0])
        assert set(np.unique(mask.data)) <= {0, 1}
        assert (out / "preprocessed/gaussian/manifest.json").exists()
        assert (out / "preprocessed/gaussian/config.resolved.json").exists()

    def test_preprocess_rerun_byte_identical(self, desk_config):
        config, out = desk_config
        assert run(["preprocess", "--config", config]) == 0
        files = sorted((out / "preprocessed/gaussian").rglob("*.png"))
        before = {f: f.read_bytes() for f in files}
        assert run(["preprocess", "--config", config]) == 0
        after = {f: f.read_bytes() for f in files}
        assert before == after

    @pytest.mark.parametrize("approach", ["gabor", "sobel"])
    def test_other_approaches_preprocess(self, desk_config, approach):
        config, out = desk_config
        assert run(["preprocess", "--config", config, "--approach", approach]) == 0
        images = sorted((out / f"preprocessed/{approach}/images").glob("*.png"))
        assert len(images) == 6

    def test_augment_expands_three_per_original(self, desk_config):
        config, out = desk_config
        assert run(["augment", "--config", config]) == 0
        manifest = json.loads((out / "augmented/gaussian/manifest.json").read_text())
        assert len(manifest) == 18
        assert {e["transform"] for e in manifest} == {"hflip", "vflip", "rot15"}

    def test_split_sizes_and_disjointness(self, desk_config):
        config, out = desk_config
        assert run(["split", "--config", config]) == 0
        split = json.loads((out / "splits/gaussian/split.json").read_text())
        assert (len(split["train"]), len(split["val"]), len(split["test"])) == (12, 3, 3)
        names = [e["image"] for part in ("train", "val", "test") for e in split[part]]
        assert len(names) == len(set(names))
        assert split["seed"] == 7

    def test_train_writes_artifacts(self, desk_config):
        config, out = desk_config
        assert run(["train", "--config", config]) == 0
        run_dir = out / "runs/gaussian/reti-unet1"
        assert (run_dir / "checkpoint.rseg").exists()
        assert (run_dir / "history.csv").exists()
        meta = json.loads((run_dir / "meta.json").read_text())
        assert meta["epochs_run"] == 2
        assert meta["train_time_s"] > 0
        assert (run_dir / "config.resolved.json").exists()

    def test_eval_writes_row_and_predictions(self, desk_config, capsys):
        config, out = desk_config
        assert run(["eval", "--config", config]) == 0
        run_dir = out / "runs/gaussian/reti-unet1"
        row = json.loads((run_dir / "row.json").read_text())
        assert row["model"] == "reti-unet1" and row["approach"] == "gaussian"
        for key in ("IS", "Acc", "Rec", "DL", "DC", "TT_s", "ER"):
            assert key in row
        assert row["TT_s"] > 0
        preds = sorted((run_dir / "pred").glob("*.png"))
        assert len(preds) == 3
        assert "reti-unet1" in capsys.readouterr().out

    def test_predict_single_image(self, desk_config, synth_root, tmp_path):
        config, out = desk_config
        assert run(["train", "--config", config]) == 0
        image = sorted((synth_root / "images").glob("*.png"))[0]
        mask_out = tmp_path / "pred.png"
        assert run(["predict", "--config", config, "--image", image, "--mask-out", mask_out]) == 0
        mask = load_mask(mask_out)
        assert (mask.width, mask.height) == (32, 32)

    def test_report_after_eval(self, desk_config):
        config, out = desk_config
        assert run(["eval", "--config", config]) == 0
        assert run(["report", "--config", config]) == 0
        assert (out / "report.csv").exists()
        assert (out / "report.md").exists()

    def test_report_without_runs_is_data_error(self, desk_config):
        config, out = desk_config
        assert run(["report", "--config", config]) == 3

    def test_seed_override_changes_split(self, desk_config):
        config, out = desk_config
        assert run(["split", "--config", config, "--seed", "99"]) == 0
        split = json.loads((out / "splits/gaussian/split.json").read_text())
        assert split["seed"] == 99


class TestGrid:
    def test_grid_runs_all_six(self, desk_config):
        config, out = desk_config
        assert run(["grid", "--config", config]) == 0
        rows = sorted(out.glob("runs/*/*/row.json"))
        assert len(rows) == 6
        md = (out / "report.md").read_text()
        assert md.count("## Approach") == 3
        assert md.count("| reti-unet1 |") == 3
        assert md.count("| reti-unet2 |") == 3
        csv_text = (out / "report.csv").read_text()
        assert len(csv_text.strip().splitlines()) == 7  # header + 6 rows


class TestEmitReport:
    def rows(self):
        m = MetricsReport(0.123456789, 0.9, 0.8, 0.4, 0.7, 12.5, 0.308641972)
        return [ReportRow("reti-unet1", "gaussian", m), ReportRow("reti-unet2", "gaussian", m)]

    def test_no_rows_rejected(self):
        with pytest.raises(NoRows):
            emit_report([], "csv")

    def test_single_table_markdown(self):
        text = emit_report(self.rows(), "markdown")
        assert text.count("## Approach") == 1
        assert "| Model | IS | Acc | Rec | DL | DC | TT_s | ER |" in text

    def test_csv_round_trips_six_significant_digits(self):
        text = emit_report(self.rows(), "csv")
        reader = csv.DictReader(io.StringIO(text))
        rows = list(reader)
        assert len(rows) == 2
        # 6 significant digits resolve values to within 5e-6 relative
        assert float(rows[0]["IS"]) == pytest.approx(0.123456789, rel=5e-6)
        assert float(rows[0]["ER"]) == pytest.approx(0.308641972, rel=5e-6)
        assert rows[0]["model"] == "reti-unet1"

    def test_unknown_format_rejected(self):
        with pytest.raises(ConfigError):
            emit_report(self.rows(), "yaml")

    def test_inf_er_serialized(self):
        m = MetricsReport(1.0, 1.0, 1.0, 0.0, 1.0, 1.0, float("inf"))
        text = emit_report([ReportRow("reti-unet1", "sobel", m)], "csv")
        assert ",inf" in text
