"""Operator command line: gen-data, train, eval, quantize, infer, sim-ekf.

Configuration is one JSON file with optional sections (datagen, train,
detect, quantize, ekf); every field falls back to the module defaults,
unknown keys are rejected.  Human-readable output goes to stdout,
diagnostics to stderr, machine-readable results only to files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datagen, detect, geometry, model, quantize, uwb_ekf


class ConfigError(ValueError):
    pass


@dataclass
class QuantizeOptions:
    calib_count: int = 64

    def __post_init__(self) -> None:
        if self.calib_count < 1:
            raise ValueError("calib_count must be >= 1")


_SECTIONS = {
    "datagen": datagen.DatagenConfig,
    "train": model.TrainConfig,
    "detect": detect.DetectionConfig,
    "quantize": QuantizeOptions,
    "ekf": uwb_ekf.SimConfig,
}


def _load_run_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown section(s): {sorted(unknown)}")
    return raw


def _build_section(section: str, raw: dict, overrides: dict | None = None):
    cls = _SECTIONS[section]
    mapping = dict(raw.get(section, {}))
    if overrides:
        mapping.update({k: v for k, v in overrides.items() if v is not None})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{section}': {sorted(unknown)}")
    kwargs = {
        k: tuple(v) if isinstance(v, list) else v for k, v in mapping.items()
    }
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{section}': {exc}") from exc


def _dataset_truths(
    data_dir: Path,
) -> tuple[list[np.ndarray], list[list[geometry.RelativeLabel]]]:
    """Images plus per-image projected ground-truth labels."""
    records = datagen.read_records(data_dir / "labels.jsonl")
    images = []
    truths = []
    for rec in records:
        images.append(datagen.load_image(data_dir / rec.image))
        att = geometry.Attitude(rec.roll, rec.pitch)
        labels = []
        for robot in rec.robots:
            lab = geometry.label_from_horizontal(robot, att)
            if lab is not None:
                labels.append(lab)
        truths.append(labels)
    return images, truths


# --- commands ---------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    raw = _load_run_config(args.config)
    cfg = _build_section(
        "datagen", raw, {"seed": args.seed, "count": args.count}
    )
    if cfg.seed is None:
        raise ConfigError("gen-data needs a seed (--seed or datagen.seed)")
    pose_records = datagen.read_records(args.poses) if args.poses else None
    label_records = datagen.read_records(args.labels) if args.labels else None
    manifest = datagen.generate_dataset(cfg, args.out, pose_records, label_records)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    raw = _load_run_config(args.config)
    cfg = _build_section("train", raw)
    if cfg.seed is None:
        raise ConfigError("train needs train.seed in the config")
    train_set = model.TrainingSet.from_dataset_dir(args.data)
    if train_set.dropped:
        print(
            f"dropped {train_set.dropped} frame(s) with grid-cell collisions",
            file=sys.stderr,
        )
    init = model.load_checkpoint(args.init) if args.init else None
    ckpt, curve = model.train(cfg, train_set, init)
    model.save_checkpoint(ckpt, args.out)
    curve_path = args.curve or f"{args.out}.loss.csv"
    model.write_loss_curve(curve, curve_path)
    last = curve[-1].loss
    print(
        f"final step loss: total={last.total:.6g} "
        f"depth={last.depth:.6g} confidence={last.confidence:.6g}"
    )
    print(f"checkpoint written to {args.out}")
    print(f"loss curve written to {curve_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    raw = _load_run_config(args.config)
    cfg = _build_section("detect", raw, {"threshold": args.tc})
    data_dir = Path(args.data)
    images, truths = _dataset_truths(data_dir)
    if args.ckpt:
        ckpt = model.load_checkpoint(args.ckpt)
        grids = model.forward_images(ckpt, images)
    else:
        qmodel = quantize.load_quantized(args.qmodel)
        grids = [quantize.quantized_forward(qmodel, im) for im in images]
    metrics = detect.evaluate_grids(grids, truths, cfg)
    detect.error_report(metrics, args.out)
    print(
        f"images={metrics.n_images} truths={metrics.n_truths} "
        f"matched={metrics.n_matched} tp_rate={metrics.tp_rate:.3f} "
        f"fp_per_image={metrics.fp_per_image:.3f}"
    )
    print(
        f"pixel error p50/p80/p95 = {metrics.pixel_p50:.2f}/"
        f"{metrics.pixel_p80:.2f}/{metrics.pixel_p95:.2f} px"
    )
    print(
        f"depth error mean/median/std = {metrics.depth_mean:+.3f}/"
        f"{metrics.depth_median:+.3f}/{metrics.depth_std:.3f} m"
    )
    print(f"metrics written to {args.out}")
    return 0


def cmd_quantize(args: argparse.Namespace) -> int:
    raw = _load_run_config(args.config)
    opts = _build_section("quantize", raw)
    ckpt = model.load_checkpoint(args.ckpt)
    data_dir = Path(args.data)
    records = datagen.read_records(data_dir / "labels.jsonl")
    if not records:
        raise ConfigError(f"no calibration images in {data_dir}")
    images = [
        datagen.load_image(data_dir / rec.image)
        for rec in records[: opts.calib_count]
    ]
    qmodel = quantize.quantize_checkpoint(ckpt, images)
    quantize.save_quantized(qmodel, args.out)
    print(f"calibrated on {len(images)} image(s)")
    print(f"input scale {qmodel.qparams.input_scale:.6g}")
    print(f"quantized model written to {args.out}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    raw = _load_run_config(args.config)
    cfg = _build_section("detect", raw, {"threshold": args.tc})
    image = datagen.load_image(args.image)
    with open(args.model, "rb") as fh:
        magic = fh.read(8)
    if magic == b"PLOCCKPT":
        grid = model.forward(model.load_checkpoint(args.model), image)
    elif magic == b"PLOCQNT1":
        grid = quantize.quantized_forward(quantize.load_quantized(args.model), image)
    else:
        raise ConfigError(f"{args.model}: neither a checkpoint nor a quantized model")
    detections = detect.extract_detections(grid, cfg)
    print(json.dumps([dataclasses.asdict(d) for d in detections], indent=2))
    return 0


def cmd_sim_ekf(args: argparse.Namespace) -> int:
    raw = _load_run_config(args.config)
    cfg = _build_section("ekf", raw, {"seed": args.seed})
    if cfg.seed is None:
        raise ConfigError("sim-ekf needs a seed (--seed or ekf.seed)")
    traj, labels, truth = uwb_ekf.simulate_and_label(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    datagen.write_records(out_dir / "labels.jsonl", labels)
    datagen.write_records(out_dir / "labels_truth.jsonl", truth)
    err = traj.position_error()
    steady = err[len(err) // 2 :]
    print(
        json.dumps(
            {
                "frames": len(labels),
                "duration_s": cfg.duration_s,
                "final_position_error_m": float(err[-1]),
                "steady_state_rmse_m": float(np.sqrt(np.mean(steady**2))),
                "labels": str(out_dir / "labels.jsonl"),
                "truth": str(out_dir / "labels_truth.jsonl"),
            },
            indent=2,
            sort_keys=True,
        )
    )
    return 0


# --- parser -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peerloc",
        description="Monocular peer-robot localization pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="overrides datagen.seed")
    p.add_argument("--count", type=int, help="overrides datagen.count")
    p.add_argument("--poses", help="render poses from this records file")
    p.add_argument("--labels", help="write these records as labels instead of the poses")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train or refine the network")
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--init", help="checkpoint to refine from")
    p.add_argument("--curve", help="loss CSV path (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a dataset")
    p.add_argument("--config", help="run-config JSON")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ckpt", help="float checkpoint")
    group.add_argument("--qmodel", help="quantized model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--tc", type=float, help="confidence threshold override")
    p.add_argument("--out", default="metrics.json", help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", help="int8-quantize a checkpoint")
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--ckpt", required=True, help="float checkpoint")
    p.add_argument("--data", required=True, help="calibration dataset directory")
    p.add_argument("--out", required=True, help="quantized model output path")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("infer", help="run one image through a model")
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--model", required=True, help="checkpoint or quantized model")
    p.add_argument("--image", required=True, help="320x224 image path")
    p.add_argument("--tc", type=float, help="confidence threshold override")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("sim-ekf", help="simulate the range EKF and emit labels")
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="overrides ekf.seed")
    p.set_defaults(func=cmd_sim_ekf)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (
        FileNotFoundError,
        NotADirectoryError,
        IsADirectoryError,
        datagen.DatasetFormatError,
        datagen.SamplingExhaustedError,
        model.CheckpointFormatError,
        model.SpecMismatchError,
        model.TrainingDivergedError,
        quantize.CalibrationError,
        quantize.ZeroVarianceError,
        quantize.AccumulatorOverflowError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
