"""Pipeline configuration, orchestration and the `retseg` command line.

Stages write self-describing outputs under the configured output directory:

    preprocessed/<approach>/{images,masks}/   resized + filtered dataset
    preprocessed/<approach>/manifest.json     original entries
    augmented/<approach>/manifest.json        3N flip/rotation variants
    splits/<approach>/split.json              seeded train/val/test partition
    runs/<approach>/<model>/                  checkpoint, history, predictions
    report.csv / report.md                    one row per (model, approach)

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

from . import augment as aug
from . import filters, image_core, trainer
from .errors import ConfigError, DataError, NoRows, NumericError, RetSegError
from .image_core import DatasetManifest, load_image, load_manifest, save_image, save_manifest
from .metrics import MetricsReport
from .unet import MODEL_CONFIGS, build_unet, load_checkpoint, save_checkpoint

APPROACHES = ("gaussian", "gabor", "sobel")
APPROACH_TITLES = {
    "gaussian": "Approach 1 (Gaussian Blur)",
    "gabor": "Approach 2 (Gabor Filtering)",
    "sobel": "Approach 3 (Edge Detection by Sobel and Pruning)",
}
REPORT_COLUMNS = ("IS", "Acc", "Rec", "DL", "DC", "TT_s", "ER")

DEFAULT_CONFIG = {
    "dataset_root": "data",
    "output_dir": "out",
    "target_size": [512, 512],
    "gray_mode": "green-channel",
    "approach": "gaussian",
    "gaussian": {"sigma": 1.0, "radius": 3},
    "gabor": {
        "orientations": 8,
        "wavelength": 8.0,
        "sigma": 3.0,
        "gamma": 0.5,
        "psi": 0.0,
        "radius": 9,
    },
    "sobel": {"edge_threshold": 0.15, "spur_iterations": 3},
    "rotation_degrees": 15.0,
    "split_counts": [80, 20, 20],
    "split_seed": 1234,
    "grouped_split": False,
    "model": "reti-unet1",
    "width_scale": 1,
    "threshold": 0.5,
    "train": {
        "epochs": 100,
        "batch_size": 2,
        "learning_rate": 0.0001,
        "seed": 1234,
        "checkpoint_every": 0,
        "early_stop": None,
    },
}


@dataclass
class ReportRow:
    model: str
    approach: str
    metrics: MetricsReport


class PipelineConfig:
    """Resolved configuration: file values merged over defaults, flags on top."""

    def __init__(self, raw: dict):
        merged = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
        for key, value in raw.items():
            if key not in merged:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(merged[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"config key {key!r} must be an object")
                for sub, sval in value.items():
                    if sub not in merged[key]:
                        raise ConfigError(f"unknown config key {key}.{sub}")
                    merged[key][sub] = sval
            else:
                merged[key] = value
        self.raw = merged
        self.validate()

    @staticmethod
    def from_file(path) -> "PipelineConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return PipelineConfig(raw)

    def validate(self):
        c = self.raw
        if c["approach"] not in APPROACHES:
            raise ConfigError(f"approach must be one of {APPROACHES}")
        if c["model"] not in MODEL_CONFIGS:
            raise ConfigError(f"model must be one of {tuple(MODEL_CONFIGS)}")
        try:
            tw, th = (int(x) for x in c["target_size"])
            counts = [int(x) for x in c["split_counts"]]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"target_size/split_counts malformed: {e}") from e
        depth = len(MODEL_CONFIGS[c["model"]]().encoder_channels)
        step = 1 << depth
        if tw % step or th % step or tw < step or th < step:
            raise ConfigError(
                f"target_size {tw}x{th} must be a positive multiple of {step} "
                f"(2^depth of {c['model']})"
            )
        if len(counts) != 3 or any(x < 0 for x in counts):
            raise ConfigError("split_counts must be three non-negative integers")
        # constructing these validates their numeric ranges
        self.gaussian_params()
        self.gabor_bank()
        self.sobel_params()
        self.train_config()
        try:
            self.model_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"width_scale: {e}") from e

    def __getitem__(self, key):
        return self.raw[key]

    def out_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def target(self) -> tuple[int, int]:
        return int(self.raw["target_size"][0]), int(self.raw["target_size"][1])

    def gaussian_params(self) -> filters.GaussianParams:
        g = self.raw["gaussian"]
        try:
            return filters.GaussianParams(float(g["sigma"]), int(g["radius"]))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"gaussian: {e}") from e

    def gabor_bank(self) -> list[filters.GaborParams]:
        g = self.raw["gabor"]
        try:
            return filters.default_gabor_bank(
                int(g["orientations"]),
                float(g["wavelength"]),
                float(g["sigma"]),
                float(g["gamma"]),
                float(g["psi"]),
                int(g["radius"]),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"gabor: {e}") from e

    def sobel_params(self) -> filters.SobelPruneParams:
        s = self.raw["sobel"]
        try:
            return filters.SobelPruneParams(float(s["edge_threshold"]), int(s["spur_iterations"]))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"sobel: {e}") from e

    def train_config(self) -> trainer.TrainConfig:
        t = self.raw["train"]
        try:
            return trainer.TrainConfig(
                epochs=int(t["epochs"]),
                batch_size=int(t["batch_size"]),
                learning_rate=float(t["learning_rate"]),
                seed=int(t["seed"]),
                checkpoint_every=int(t["checkpoint_every"]),
                early_stop=None if t["early_stop"] is None else int(t["early_stop"]),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"train: {e}") from e

    def model_config(self):
        return MODEL_CONFIGS[self.raw["model"]](width_scale=int(self.raw["width_scale"]))

    def snapshot(self, directory: Path):
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.resolved.json").write_text(json.dumps(self.raw, indent=2) + "\n")


def _apply_filter(cfg: PipelineConfig, img: image_core.GrayImage) -> image_core.GrayImage:
    approach = cfg["approach"]
    if approach == "gaussian":
        return filters.gaussian_blur(img, cfg.gaussian_params())
    if approach == "gabor":
        return filters.gabor_response(img, cfg.gabor_bank())
    return filters.sobel_prune(img, cfg.sobel_params())


def _preprocess_dir(cfg) -> Path:
    return cfg.out_dir() / "preprocessed" / cfg["approach"]


def _augment_manifest_path(cfg) -> Path:
    return cfg.out_dir() / "augmented" / cfg["approach"] / "manifest.json"


def _split_path(cfg) -> Path:
    return cfg.out_dir() / "splits" / cfg["approach"] / "split.json"


def _run_dir(cfg) -> Path:
    return cfg.out_dir() / "runs" / cfg["approach"] / cfg["model"]


def run_preprocess(cfg: PipelineConfig) -> Path:
    """Load, resize, filter and rewrite every image/mask pair; emit a manifest."""
    manifest = image_core.discover_dataset(cfg["dataset_root"])
    tw, th = cfg.target()
    out = _preprocess_dir(cfg)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for e in manifest.entries:
        img = load_image(e.image, cfg["gray_mode"])
        mask = image_core.load_mask(e.mask)
        if (img.height, img.width) != (mask.height, mask.width):
            raise DataError(
                f"pair dimensions differ: {e.image} {img.width}x{img.height} vs "
                f"{e.mask} {mask.width}x{mask.height}"
            )
        img = image_core.resize_bilinear(img, tw, th)
        img = _apply_filter(cfg, img)
        mask = image_core.resize_nearest(mask, tw, th)
        ip = out / "images" / (Path(e.image).stem + ".png")
        mp = out / "masks" / (Path(e.mask).stem + ".png")
        save_image(img, ip)
        save_image(mask, mp)
        entries.append(image_core.ManifestEntry(str(ip), str(mp), e.origin_id, "orig"))
    result = DatasetManifest(entries)
    save_manifest(result, out / "manifest.json")
    cfg.snapshot(out)
    return out


def run_augment(cfg: PipelineConfig) -> DatasetManifest:
    pre = _preprocess_dir(cfg) / "manifest.json"
    if not pre.exists():
        run_preprocess(cfg)
    manifest = load_manifest(pre)
    augmented = aug.augment_dataset(manifest, float(cfg["rotation_degrees"]))
    path = _augment_manifest_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(augmented, path)
    cfg.snapshot(path.parent)
    return augmented


def run_split(cfg: PipelineConfig) -> aug.SplitManifest:
    path = _augment_manifest_path(cfg)
    if not path.exists():
        run_augment(cfg)
    manifest = load_manifest(path)
    counts = tuple(int(x) for x in cfg["split_counts"])
    split = aug.split_dataset(manifest, counts, int(cfg["split_seed"]), bool(cfg["grouped_split"]))
    spath = _split_path(cfg)
    spath.parent.mkdir(parents=True, exist_ok=True)
    aug.save_split(split, spath)
    cfg.snapshot(spath.parent)
    return split


def run_train(cfg: PipelineConfig):
    spath = _split_path(cfg)
    if not spath.exists():
        run_split(cfg)
    split = aug.load_split(spath)
    tc = cfg.train_config()
    run_dir = _run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    model = build_unet(cfg.model_config(), tc.seed)
    model, history = trainer.train(model, split, tc, cfg["approach"], checkpoint_dir=run_dir)
    save_checkpoint(model, None, run_dir / "checkpoint.rseg")
    trainer.write_history_csv(history, run_dir / "history.csv")
    (run_dir / "meta.json").write_text(
        json.dumps(
            {
                "model": cfg["model"],
                "approach": cfg["approach"],
                "train_time_s": history.train_time_s,
                "best_epoch": history.best_epoch,
                "epochs_run": len(history.records),
            },
            indent=2,
        )
        + "\n"
    )
    cfg.snapshot(run_dir)
    return model, history


def run_eval(cfg: PipelineConfig) -> ReportRow:
    """Evaluate the trained checkpoint on the test split and persist the row."""
    run_dir = _run_dir(cfg)
    ckpt = run_dir / "checkpoint.rseg"
    if not ckpt.exists():
        run_train(cfg)
    model, _ = load_checkpoint(ckpt)
    split = aug.load_split(_split_path(cfg))
    report = trainer.evaluate(model, split.test, float(cfg["threshold"]))
    tt = 0.0
    meta = run_dir / "meta.json"
    if meta.exists():
        tt = float(json.loads(meta.read_text()).get("train_time_s", 0.0))
    report = MetricsReport(report.is_, report.acc, report.rec, report.dl, report.dc, tt, report.er)
    row = ReportRow(cfg["model"], cfg["approach"], report)
    (run_dir / "row.json").write_text(json.dumps(_row_dict(row), indent=2) + "\n")
    # Fig. 2 analog: predicted masks for the test split
    pred_dir = run_dir / "pred"
    pred_dir.mkdir(exist_ok=True)
    for e in split.test:
        mask = trainer.predict(model, load_image(e.image), float(cfg["threshold"]))
        save_image(mask, pred_dir / (Path(e.image).stem + ".png"))
    return row


def run_experiment(cfg: PipelineConfig) -> ReportRow:
    """Train and evaluate one (model, approach) pair, running missing stages."""
    run_train(cfg)
    return run_eval(cfg)


def run_grid(cfg: PipelineConfig) -> list[ReportRow]:
    """All six combinations: 2 models x 3 approaches."""
    rows = []
    for approach in APPROACHES:
        for model_name in sorted(MODEL_CONFIGS):
            variant = PipelineConfig({**cfg.raw, "approach": approach, "model": model_name})
            rows.append(run_experiment(variant))
    _write_reports(cfg, rows)
    return rows


def _row_dict(row: ReportRow) -> dict:
    m = row.metrics
    return {
        "model": row.model,
        "approach": row.approach,
        "IS": m.is_,
        "Acc": m.acc,
        "Rec": m.rec,
        "DL": m.dl,
        "DC": m.dc,
        "TT_s": m.tt,
        "ER": m.er,
    }


def _fmt(value: float) -> str:
    if math.isinf(value):
        return "inf"
    return f"{value:.6g}"


def emit_report(rows: list[ReportRow], fmt: str = "markdown") -> str:
    """Render rows as one table per approach, models in name order."""
    if not rows:
        raise NoRows("no report rows")
    if fmt not in ("csv", "markdown"):
        raise ConfigError(f"unknown report format {fmt!r}")
    ordered = [
        row
        for approach in APPROACHES
        for row in sorted(
            (r for r in rows if r.approach == approach), key=lambda r: r.model
        )
    ]
    if fmt == "csv":
        lines = ["model,approach," + ",".join(REPORT_COLUMNS)]
        for row in ordered:
            d = _row_dict(row)
            lines.append(
                ",".join([row.model, row.approach] + [_fmt(d[c]) for c in REPORT_COLUMNS])
            )
        return "\n".join(lines) + "\n"
    out = []
    for approach in APPROACHES:
        block = [r for r in ordered if r.approach == approach]
        if not block:
            continue
        out.append(f"## {APPROACH_TITLES[approach]}")
        out.append("")
        out.append("| Model | " + " | ".join(REPORT_COLUMNS) + " |")
        out.append("|" + "---|" * (len(REPORT_COLUMNS) + 1))
        for row in block:
            d = _row_dict(row)
            out.append(
                "| " + " | ".join([row.model] + [_fmt(d[c]) for c in REPORT_COLUMNS]) + " |"
            )
        out.append("")
    return "\n".join(out)


def _collect_rows(cfg: PipelineConfig) -> list[ReportRow]:
    rows = []
    for path in sorted(cfg.out_dir().glob("runs/*/*/row.json")):
        d = json.loads(path.read_text())
        rows.append(
            ReportRow(
                d["model"],
                d["approach"],
                MetricsReport(d["IS"], d["Acc"], d["Rec"], d["DL"], d["DC"], d["TT_s"], d["ER"]),
            )
        )
    if not rows:
        raise NoRows(f"no run rows under {cfg.out_dir()}/runs")
    return rows


def _write_reports(cfg: PipelineConfig, rows: list[ReportRow]):
    cfg.snapshot(cfg.out_dir())
    (cfg.out_dir() / "report.csv").write_text(emit_report(rows, "csv"))
    (cfg.out_dir() / "report.md").write_text(emit_report(rows, "markdown"))


def run_predict(cfg: PipelineConfig, image_path, out_path) -> Path:
    """Preprocess one raw image per the config's approach and emit its mask."""
    ckpt = _run_dir(cfg) / "checkpoint.rseg"
    model, _ = load_checkpoint(ckpt)
    tw, th = cfg.target()
    img = load_image(image_path, cfg["gray_mode"])
    img = image_core.resize_bilinear(img, tw, th)
    img = _apply_filter(cfg, img)
    mask = trainer.predict(model, img, float(cfg["threshold"]))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(mask, out_path)
    return out_path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retseg",
        description="Retinal vessel segmentation pipeline: preprocess, train, evaluate, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="pipeline config JSON")
        if name != "init":
            p.add_argument("--approach", choices=APPROACHES, help="override config approach")
            p.add_argument("--model", choices=sorted(MODEL_CONFIGS), help="override config model")
            p.add_argument("--seed", type=int, help="override split and training seeds")
            p.add_argument("--width-scale", type=int, help="override config width_scale")
            p.add_argument("--out", help="override config output_dir")
        return p

    add("init", "write a complete-defaults config template")
    add("preprocess", "resize + filter the dataset for one approach")
    add("augment", "expand the preprocessed set with flips and rotation")
    add("split", "seeded train/val/test partition of the augmented set")
    add("train", "train the selected model (runs missing stages first)")
    add("eval", "evaluate the trained checkpoint on the test split")
    p = add("predict", "segment one raw image with the trained checkpoint")
    p.add_argument("--image", required=True, help="input image (PNG/PGM/PPM)")
    p.add_argument("--mask-out", required=True, help="output mask path (.png or .pgm)")
    add("report", "emit report.csv and report.md from completed runs")
    add("grid", "run all 6 model x approach experiments and report")
    return parser


def _load_cfg(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config)
    overrides = {}
    if getattr(args, "approach", None):
        overrides["approach"] = args.approach
    if getattr(args, "model", None):
        overrides["model"] = args.model
    if getattr(args, "width_scale", None) is not None:
        overrides["width_scale"] = args.width_scale
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    raw = {**cfg.raw, **overrides}
    if getattr(args, "seed", None) is not None:
        raw["split_seed"] = args.seed
        raw["train"] = {**raw["train"], "seed": args.seed}
    return PipelineConfig(raw)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "init":
            Path(args.config).write_text(json.dumps(DEFAULT_CONFIG, indent=2) + "\n")
            print(f"wrote config template to {args.config}")
            return 0
        cfg = _load_cfg(args)
        if args.command == "preprocess":
            out = run_preprocess(cfg)
            print(f"preprocessed dataset written to {out}")
        elif args.command == "augment":
            manifest = run_augment(cfg)
            print(f"augmented manifest with {len(manifest.entries)} entries")
        elif args.command == "split":
            split = run_split(cfg)
            print(
                f"split sizes: train={len(split.train)} val={len(split.val)} test={len(split.test)}"
            )
        elif args.command == "train":
            _, history = run_train(cfg)
            last = history.records[-1]
            print(
                f"trained {len(history.records)} epochs in {history.train_time_s:.1f}s; "
                f"final train loss {last.train_loss:.4f}"
            )
        elif args.command == "eval":
            row = run_eval(cfg)
            print(emit_report([row], "markdown"))
        elif args.command == "predict":
            out = run_predict(cfg, args.image, args.mask_out)
            print(f"wrote mask to {out}")
        elif args.command == "report":
            rows = _collect_rows(cfg)
            _write_reports(cfg, rows)
            print(emit_report(rows, "markdown"))
        elif args.command == "grid":
            rows = run_grid(cfg)
            print(emit_report(rows, "markdown"))
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except RetSegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
