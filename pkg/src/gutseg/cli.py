"""Command-line entry point.

Subcommands: ``fixture`` (synthetic dataset), ``train``, ``predict``,
``eval``, ``rle`` (codec utility), ``curves`` (merge run histories for
plotting). Exit codes: 0 success, 1 usage/configuration error, 2 data
error, 3 training divergence.

``train`` resolves its settings as built-in defaults < ``--config`` JSON
file < command-line flags, and echoes the effective configuration into
the run directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as dataset_io
from . import fixture, trainer, unet
from .errors import (ConfigError, DatasetError, GutsegError, RleParseError,
                     TrainingDiverged, WeightsFormatError)
from .losses import CLASS_NAMES, LossKind, MetricReport
from .rle import decode_rle, encode_rle


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# defaults shared by the config file and the flags (reference recipe values)
TRAIN_DEFAULTS: dict = {
    "epochs": 80,
    "batch_size": 32,
    "lr": 5e-3,
    "lr_min": 0.0,
    "split_fraction": 0.8,
    "loss": "bce_tversky",
    "tversky_alpha": 0.5,
    "tversky_beta": 0.5,
    "smooth_eps": 1.0,
    "augment_flips": True,
    "seed": 0,
    "image_size": 288,
    "depth": 5,
    "base_channels": 64,
    "block_style": "plain",
}


def _add_train_options(p: argparse.ArgumentParser) -> None:
    d = TRAIN_DEFAULTS

    def opt(name, type_, help_):
        key = name.lstrip("-").replace("-", "_")
        p.add_argument(name, type=type_, default=None,
                       help=f"{help_} (default: {d[key]})")

    opt("--epochs", int, "number of training epochs")
    opt("--batch-size", int, "samples per optimizer step")
    opt("--lr", float, "initial learning rate of the cosine schedule")
    opt("--lr-min", float, "learning-rate floor at the end of the schedule")
    opt("--split-fraction", float, "fraction of cases used for training")
    opt("--loss", str, "loss blend: iou, bce_tversky, or iou_tversky")
    opt("--tversky-alpha", float, "false-positive weight of the tversky term")
    opt("--tversky-beta", float, "false-negative weight of the tversky term")
    opt("--smooth-eps", float, "smoothing constant of the soft overlap losses")
    opt("--seed", int, "seed controlling init, split, shuffling, augmentation")
    opt("--image-size", int, "working grid size the slices are fitted to")
    opt("--depth", int, "number of U-Net resolution levels")
    opt("--base-channels", int, "channels at the top level (doubling per level)")
    opt("--block-style", str, "plain, residual, or inverted_residual")
    p.add_argument("--augment-flips", action=argparse.BooleanOptionalAction,
                   default=None,
                   help=f"random horizontal/vertical flips (default: {d['augment_flips']})")


def _build_parser() -> _Parser:
    parser = _Parser(prog="gutseg",
                     description="GI-tract slice segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="generate a synthetic desk-scale dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--cases", type=int, default=4)
    p.add_argument("--days", type=int, default=1)
    p.add_argument("--slices", type=int, default=2, help="slices per case per day")
    p.add_argument("--size", type=int, default=64, help="square slice size")
    p.add_argument("--height", type=int, default=None, help="override slice height")
    p.add_argument("--width", type=int, default=None, help="override slice width")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a U-Net on an ingested dataset")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--annotations", default=None,
                   help="annotation CSV (default: <data>/train.csv)")
    p.add_argument("--config", default=None, help="JSON file of option overrides")
    p.add_argument("--out-root", default="runs",
                   help="parent directory for run artifacts (default: runs)")
    p.add_argument("--run-name", default=None,
                   help="run directory name (default: timestamp + seed)")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    _add_train_options(p)

    p = sub.add_parser("predict", help="patch-wise prediction to a submission CSV",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--weights", required=True, help="weight file from a training run")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--image-size", type=int, default=288,
                   help="sliding-window size (must match training)")

    p = sub.add_parser("eval", help="score a prediction CSV against a truth CSV",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--pred", required=True, help="prediction CSV")
    p.add_argument("--truth", required=True, help="ground-truth CSV")
    p.add_argument("--data", required=True,
                   help="dataset root supplying slice dimensions")
    p.add_argument("--out", default=None, help="also write per-class IoU as CSV")

    p = sub.add_parser("rle", help="run-length codec utility")
    rle_sub = p.add_subparsers(dest="rle_command", required=True)
    pd = rle_sub.add_parser("decode", help="RLE string -> flat 0/1 bitmap text")
    pd.add_argument("rle", help="RLE string ('-' reads stdin)")
    pd.add_argument("--height", type=int, required=True)
    pd.add_argument("--width", type=int, required=True)
    pe = rle_sub.add_parser("encode", help="flat 0/1 bitmap text -> RLE string")
    pe.add_argument("bits", help="row-major 0/1 string ('-' reads stdin)")

    p = sub.add_parser("curves", help="merge run histories into long-format CSV",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("histories", nargs="+", help="history.csv files from runs")
    p.add_argument("--names", nargs="*", default=None,
                   help="run names (default: parent directory names)")
    p.add_argument("--out", default=None, help="output CSV (default: stdout)")

    return parser


# ---------------------------------------------------------------------------
# command implementations


def _cmd_fixture(args) -> int:
    height = args.height if args.height is not None else args.size
    width = args.width if args.width is not None else args.size
    n = fixture.generate(args.out, cases=args.cases, days=args.days,
                         slices=args.slices, height=height, width=width,
                         seed=args.seed)
    print(f"wrote {n} slices under {args.out} (truth: {Path(args.out) / 'train.csv'})")
    return 0


def _merge_train_options(args) -> dict:
    merged = dict(TRAIN_DEFAULTS)
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        unknown = sorted(set(loaded) - set(merged))
        if unknown:
            raise ConfigError(f"config file {path}: unknown keys {unknown}")
        merged.update(loaded)
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key)
        if value is not None:
            merged[key] = value
    return merged


def _train_configs(merged: dict):
    loss = LossKind(tag=merged["loss"], tversky_alpha=merged["tversky_alpha"],
                    tversky_beta=merged["tversky_beta"], smooth_eps=merged["smooth_eps"])
    tcfg = trainer.TrainConfig(
        lr_init=merged["lr"], epochs=merged["epochs"], batch_size=merged["batch_size"],
        split_fraction=merged["split_fraction"], loss=loss,
        augment_flips=bool(merged["augment_flips"]), seed=merged["seed"],
        lr_min=merged["lr_min"], image_size=merged["image_size"])
    ucfg = unet.UNetConfig(depth=merged["depth"], base_channels=merged["base_channels"],
                           block_style=merged["block_style"], seed=merged["seed"])
    return ucfg, tcfg


def _cmd_train(args) -> int:
    merged = _merge_train_options(args)
    ucfg, tcfg = _train_configs(merged)
    annotations = args.annotations or str(Path(args.data) / "train.csv")
    index = dataset_io.ingest(args.data, annotations)
    if not index.records:
        raise DatasetError(f"no slices found under {args.data}")

    run_name = args.run_name
    if run_name is None:
        stamp = time.strftime("%Y%m%d-%H%M%S") + f"-{int(time.time() * 1000) % 1000:03d}"
        run_name = f"{stamp}-seed{merged['seed']}"
    run_dir = Path(args.out_root) / run_name
    if run_dir.exists():
        raise ConfigError(f"run directory {run_dir} already exists; runs are immutable")
    run_dir.mkdir(parents=True)

    effective = dict(merged)
    effective.update({"data": str(args.data), "annotations": str(annotations),
                      "run_dir": str(run_dir)})
    (run_dir / "config.json").write_text(json.dumps(effective, indent=2) + "\n",
                                         encoding="utf-8")

    model = unet.build_unet(ucfg)
    progress = None
    if not args.quiet:
        def progress(row):
            print(f"epoch {row.epoch}/{tcfg.epochs}  lr={row.lr:.6f}  "
                  f"loss={row.train_loss:.5f}  val_mean_iou={row.report.mean_iou:.4f}")
    trainer.train(model, index.records, tcfg, run_dir=run_dir, progress=progress)
    print(f"run artifacts in {run_dir}")
    return 0


def _cmd_predict(args) -> int:
    model = unet.load_weights(args.weights)
    index = dataset_io.ingest(args.data)
    if not index.records:
        raise DatasetError(f"no slices found under {args.data}")

    def masks():
        for rec in index.records:
            raw = dataset_io.load_image(rec)
            probs = trainer.predict_probs(model, raw, args.image_size, patch_mode=True)
            yield probs >= 0.5

    dataset_io.write_predictions(index.records, masks(), args.out)
    print(f"wrote {3 * len(index.records)} prediction rows to {args.out}")
    return 0


def _read_mask_csv(path: Path) -> dict[str, dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "class", "segmentation"]:
            raise DatasetError(f"{path}: header must be id,class,segmentation")
        out: dict[str, dict[str, str]] = {}
        for row in reader:
            if row["class"] not in CLASS_NAMES:
                raise DatasetError(f"{path}: unknown class {row['class']!r}")
            out.setdefault(row["id"], {})[row["class"]] = row["segmentation"] or ""
    return out


def _cmd_eval(args) -> int:
    from .losses import iou_hard

    pred = _read_mask_csv(Path(args.pred))
    truth = _read_mask_csv(Path(args.truth))
    missing_in_pred = sorted(set(truth) - set(pred))
    missing_in_truth = sorted(set(pred) - set(truth))
    if missing_in_pred or missing_in_truth:
        if missing_in_pred:
            print(f"ids missing from predictions: {missing_in_pred[:10]}", file=sys.stderr)
        if missing_in_truth:
            print(f"ids missing from truth: {missing_in_truth[:10]}", file=sys.stderr)
        return 2

    index = dataset_io.ingest(args.data)
    dims = {rec.id: (rec.height, rec.width) for rec in index.records}
    ids = sorted(truth, key=lambda s: dataset_io.parse_slice_id(s))
    per_class_scores: list[list[float]] = [[] for _ in CLASS_NAMES]
    for slice_id in ids:
        if slice_id not in dims:
            raise DatasetError(f"id {slice_id!r} not found under {args.data}")
        h, w = dims[slice_id]
        for ci, cls in enumerate(CLASS_NAMES):
            m_truth = decode_rle(truth[slice_id].get(cls, ""), h, w)
            m_pred = decode_rle(pred[slice_id].get(cls, ""), h, w)
            per_class_scores[ci].append(iou_hard(m_pred, m_truth))
    per_class = [float(np.mean(s)) for s in per_class_scores]
    report = MetricReport.from_per_class(per_class, split="eval")

    for cls, v in zip(CLASS_NAMES, report.per_class_iou):
        print(f"{cls:<14} {v:.6f}")
    print(f"{'mean':<14} {report.mean_iou:.6f}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["class", "iou"])
            for cls, v in zip(CLASS_NAMES, report.per_class_iou):
                writer.writerow([cls, repr(v)])
            writer.writerow(["mean", repr(report.mean_iou)])
    return 0


def _cmd_rle(args) -> int:
    if args.rle_command == "decode":
        text = sys.stdin.read().strip() if args.rle == "-" else args.rle
        mask = decode_rle(text, args.height, args.width)
        print("".join("1" if b else "0" for b in mask.reshape(-1)))
        return 0
    text = sys.stdin.read().strip() if args.bits == "-" else args.bits
    if not text or set(text) - {"0", "1"}:
        raise RleParseError("bitmap text must be a non-empty string of 0s and 1s")
    bits = np.frombuffer(text.encode("ascii"), dtype=np.uint8) == ord("1")
    print(encode_rle(bits))
    return 0


def _cmd_curves(args) -> int:
    paths = [Path(p) for p in args.histories]
    if args.names is not None and len(args.names) != len(paths):
        raise ConfigError(f"--names got {len(args.names)} names for {len(paths)} files")
    names = args.names or [p.parent.name if p.parent.name not in (".", "") else p.stem
                           for p in paths]
    rows = []
    for name, path in zip(names, paths):
        for entry in trainer.read_history(path):
            epoch = int(entry["epoch"])
            for metric in trainer.HISTORY_COLUMNS[1:]:
                rows.append([name, epoch, metric, repr(entry[metric])])
    out_fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(out_fh, lineterminator="\n")
        writer.writerow(["run", "epoch", "metric", "value"])
        writer.writerows(rows)
    finally:
        if args.out:
            out_fh.close()
    return 0


_COMMANDS = {
    "fixture": _cmd_fixture,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "rle": _cmd_rle,
    "curves": _cmd_curves,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"gutseg: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, RleParseError, WeightsFormatError, OSError) as exc:
        print(f"gutseg: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"gutseg: training diverged: {exc}", file=sys.stderr)
        return 3
    except GutsegError as exc:
        print(f"gutseg: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
