"""Command-line entry points.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .checkpoint import CheckpointError, model_arrays, model_from_arrays, read_checkpoint, write_checkpoint
from .config import ConfigError, RunConfig, describe_keys, format_config, load_config
from .conv import ConfigurationError, valid_weight_fraction
from .dataset import (CLASS_NAMES, Manifest, generate_samples, read_manifest, split_counts, write_manifest,
                      write_samples)
from .evaluate import InferenceConfig, evaluate_arrays, mean_iou, write_report
from .gradcheck import TOLERANCE, run_all
from .model import DeepLabV3
from .pnm import PnmError, write_pgm
from .train import ArrayDataset, TrainingError, run_training

log = logging.getLogger("atrousseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _scales(text: str):
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    if args.count < 0 or args.size < 2:
        raise UsageError("count must be >= 0 and size >= 2")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = generate_samples(args.seed, args.count, args.size)
    n_train, _ = split_counts(args.count)
    entries = write_samples(samples, out)
    write_manifest(Manifest(entries[:n_train], "train"), out / "train.txt")
    write_manifest(Manifest(entries[n_train:], "val"), out / "val.txt")
    print(f"wrote {n_train} train / {args.count - n_train} val samples to {out}")
    return EXIT_OK


def _resolve(base: Path, p: str) -> Optional[Path]:
    if not p:
        return None
    path = Path(p)
    return path if path.is_absolute() else base / path


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    up = {}
    if args.bootstrap_hard_classes is not None:
        up["train.hard_classes"] = tuple(args.bootstrap_hard_classes)
    if args.bootstrap_factor is not None:
        up["train.bootstrap_factor"] = args.bootstrap_factor
    if args.no_upsample_logits:
        up["train.upsample_logits"] = False
    if args.no_bn_finetune:
        up["train.bn_finetune"] = False
    if args.crop is not None:
        up["train.crop"] = args.crop
    if args.train_os is not None:
        # a single-output-stride run: both stages (if any) at the requested stride
        up["train.stage1_os"] = args.train_os
        up["train.stage2_os"] = args.train_os
    if args.batch is not None:
        up["train.batch"] = args.batch
    if args.seed is not None:
        up["run.seed"] = args.seed
    return cfg.with_values(**up)


def cmd_train(args) -> int:
    cfg_path = Path(args.config) if args.config else None
    try:
        cfg = load_config(cfg_path) if cfg_path else RunConfig()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    cfg = _apply_overrides(cfg, args)
    base = cfg_path.parent if cfg_path else Path.cwd()
    try:
        train_cfg = cfg.train_config()
        spec, aspp = cfg.network_spec(), cfg.aspp_config()
    except (ValueError, ConfigurationError) as exc:
        raise UsageError(str(exc)) from None
    train_path = _resolve(base, args.train_manifest or cfg.data.train_manifest)
    if train_path is None:
        raise UsageError("no training manifest (data.train_manifest or --train-manifest)")
    val_path = _resolve(base, args.val_manifest or cfg.data.val_manifest)
    try:
        train = ArrayDataset.from_manifest(read_manifest(train_path, "train"))
        val = ArrayDataset.from_manifest(read_manifest(val_path, "val")) if val_path else None
    except (OSError, PnmError, ValueError) as exc:
        raise UsageError(f"cannot load data: {exc}") from None
    if len(train) == 0:
        raise UsageError(f"{train_path} lists no samples")

    model = DeepLabV3(spec, aspp, seed=cfg.model.init_seed, bn_decay=cfg.model.bn_decay)
    evaluate = None
    if val is not None and len(val):
        vimg = val.images.astype(np.float64) / 255.0

        def evaluate(m, output_stride):
            conf = evaluate_arrays(m, vimg, val.labels, InferenceConfig(output_stride), aspp.num_classes)
            return mean_iou(conf)[0]

    log_path = Path(args.log) if args.log else Path(str(args.out_checkpoint) + ".csv")
    rows: List[dict] = []

    def on_log(rec):
        rows.append(rec)
        log.info("iter %d lr %.6f loss %.5f%s", rec["iter"], rec["lr"], rec["loss"],
                 f" val_miou {rec['val_miou']:.4f}" if "val_miou" in rec else "")

    result = run_training(model, train, train_cfg, cfg.run.seed, evaluate=evaluate, on_log=on_log)
    write_checkpoint(args.out_checkpoint, model_arrays(model, result.optimizer, result.iterations))
    with open(log_path, "w", newline="") as fh:
        fields = ["iter", "lr", "loss"] + (["val_miou"] if evaluate else [])
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(r[k])) if k != "iter" else r[k] for k in fields if k in r})
    print(f"trained {result.iterations} iterations -> {args.out_checkpoint} (log {log_path})")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, _, _ = model_from_arrays(read_checkpoint(args.checkpoint))
        data = ArrayDataset.from_manifest(read_manifest(args.manifest))
        icfg = InferenceConfig(args.eval_os, args.scales, args.flip)
    except (OSError, CheckpointError, PnmError, KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    images = data.images.astype(np.float64) / 255.0
    num_classes = model.aspp_config.num_classes
    conf, preds = evaluate_arrays(model, images, data.labels, icfg, num_classes, return_predictions=True)
    names = CLASS_NAMES if num_classes == len(CLASS_NAMES) else None
    write_report(args.report, conf, names)
    if args.predictions:
        out = Path(args.predictions)
        out.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(preds):
            write_pgm(out / f"pred{i:05d}.pgm", p)
    miou, _ = mean_iou(conf)
    print(f"mIOU {miou:.6f} over {len(data)} images -> {args.report}")
    return EXIT_OK


def cmd_analyze_fov(args) -> int:
    h, w = args.feature_size
    if h < 1 or w < 1 or args.kernel < 1 or args.kernel % 2 == 0 or args.max_rate < 1:
        raise UsageError("feature size and max rate must be positive, kernel positive and odd")
    with open(args.out, "w") as fh:
        fh.write("rate,valid_weight_fraction\n")
        for r in range(1, args.max_rate + 1):
            fh.write(f"{r},{valid_weight_fraction(h, w, args.kernel, r)!r}\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = run_all(args.seed)
    ok = True
    for name, err in errors.items():
        passed = err <= TOLERANCE
        ok &= passed
        print(f"{name:10s} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_default_config(args) -> int:
    sys.stdout.write(format_config(RunConfig()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="atrousseg", description="Atrous-convolution segmentation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic dataset with train/val manifests (80/20)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True, help="total images")
    g.add_argument("--size", type=int, default=65, help="square image side, N*32+1 recommended")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(fn=cmd_generate_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint and a CSV log",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="config keys (section.key = value) and defaults:\n" + describe_keys())
    t.add_argument("--config", help="config file; missing keys take the defaults below")
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--log", help="CSV log path (default: <checkpoint>.csv)")
    t.add_argument("--train-manifest", help="overrides data.train_manifest")
    t.add_argument("--val-manifest", help="overrides data.val_manifest")
    t.add_argument("--seed", type=int, help="overrides run.seed")
    t.add_argument("--bootstrap-hard-classes", type=int, nargs="+", metavar="CLASS")
    t.add_argument("--bootstrap-factor", type=int)
    t.add_argument("--no-upsample-logits", action="store_true", help="downsample the labels instead")
    t.add_argument("--no-bn-finetune", action="store_true", help="batch norm frozen from the start")
    t.add_argument("--crop", type=int)
    t.add_argument("--train-os", type=int, choices=(8, 16, 32), help="output stride for every stage")
    t.add_argument("--batch", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--eval-os", type=int, choices=(8, 16, 32), default=8)
    e.add_argument("--scales", type=_scales, default=(1.0,), help="comma separated, e.g. 0.5,0.75,1,1.25,1.5,1.75")
    e.add_argument("--flip", action="store_true")
    e.add_argument("--report", required=True, help="CSV of per-class IOU and mIOU")
    e.add_argument("--predictions", help="directory for predicted label maps (PGM)")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze-fov", help="valid-weight fraction of a k x k atrous filter per rate")
    a.add_argument("--feature-size", type=int, nargs=2, metavar=("H", "W"), default=(65, 65))
    a.add_argument("--kernel", type=int, default=3)
    a.add_argument("--max-rate", type=int, default=70)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_analyze_fov)

    c = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    d = sub.add_parser("default-config", help="print the default config file")
    d.set_defaults(fn=cmd_default_config)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
