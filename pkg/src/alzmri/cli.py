"""Command-line entry point: ``alzmri <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 input/validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import data, explain, metrics, synth, weights
from .config import ConfigError, RunConfig, parse_pairs
from .layers import RngState
from .model import build_model
from .training import ArraySet, predict, train

logger = logging.getLogger("alzmri")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2

WEIGHTS_FILE = "weights.amri"
CONFIG_FILE = "run.cfg"
LOG_FILE = "trainlog.csv"
CLASSES_FILE = "classes.txt"


class InputError(Exception):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig().validate()
    overrides = parse_pairs(getattr(args, "set", None) or [])
    for key in ("epochs", "seed", "batch_size", "lr"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    return cfg.updated(overrides) if overrides else cfg


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


# ---------------------------------------------------------------- commands


def cmd_prep(args) -> int:
    src, dst = Path(args.input), Path(args.output)
    if not src.is_dir():
        raise InputError(f"{src} is not a directory")
    files = sorted(p for p in src.rglob("*") if p.is_file() and p.suffix.lower() in data.IMAGE_SUFFIXES)

    def work(p: Path):
        try:
            sample = data.preprocess(p, args.size, args.sharpen)
        except ValueError as e:
            return p, str(e)
        out = (dst / p.relative_to(src)).with_suffix(".png")
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(data.to_uint8(sample.pixels), mode="RGB").save(out, format="PNG")
        return p, None

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(work, files))
    failed = [(p, err) for p, err in results if err]
    for p, err in failed:
        print(f"error: {err}", file=sys.stderr)
    print(f"prep: {len(files) - len(failed)} written, {len(failed)} failed")
    return EXIT_INPUT if failed else EXIT_OK


def cmd_split(args) -> int:
    manifest = data.scan_dataset(args.data, data.parse_merge(args.merge))
    result = data.split(manifest, args.seed, args.test_frac, args.val_frac)
    result.write(args.out)
    for name in result.class_names:
        counts = [sum(1 for e in result.entries if e.label == name and e.split == s) for s in data.SPLITS]
        print(f"{name}: train={counts[0]} val={counts[1]} test={counts[2]}")
    print(f"manifest sha256 {result.content_hash()}")
    return EXIT_OK


def _store(cfg: RunConfig, root) -> data.ImageStore:
    return data.ImageStore(Path(root), cfg.image_size, cfg.sharpen)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = data.DatasetManifest.read(args.manifest, args.data)
    if not manifest.select("train"):
        raise InputError("manifest has no train entries")
    if cfg.augment:
        manifest = data.balance_training_set(manifest, RngState(cfg.seed, stream=3), cfg.balance_threshold)
    store = _store(cfg, args.data)
    train_set = ArraySet(*store.arrays(manifest, "train", "gradient"))
    val_set = ArraySet(*store.arrays(manifest, "val", "validation"))
    model = build_model(cfg.model_config(len(manifest.class_names)), RngState(cfg.seed))
    logger.info("model has %d parameters", model.parameter_count())
    model, log = train(model, train_set, val_set, cfg.train_config())

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    weights.save(out / WEIGHTS_FILE, model.state_arrays())
    _write_text(out / CONFIG_FILE, cfg.to_text())
    _write_text(out / LOG_FILE, log.to_csv())
    _write_text(out / CLASSES_FILE, "\n".join(manifest.class_names) + "\n")
    train_acc = float(np.mean(predict(model, train_set.x).argmax(axis=1) == train_set.y))
    print(f"trained {len(log.records)} epochs, best epoch {log.best_epoch}, train accuracy {train_acc:.4f}")
    return EXIT_OK


def load_run(run_dir):
    run = Path(run_dir)
    for name in (WEIGHTS_FILE, CONFIG_FILE, CLASSES_FILE):
        if not (run / name).exists():
            raise InputError(f"{run / name} not found")
    cfg = RunConfig.from_file(run / CONFIG_FILE)
    classes = (run / CLASSES_FILE).read_text(encoding="utf-8").split()
    model = build_model(cfg.model_config(len(classes)), RngState(cfg.seed))
    model.load_state_arrays(weights.load(run / WEIGHTS_FILE))
    return model.eval(), cfg, classes


def cmd_eval(args) -> int:
    model, cfg, classes = load_run(args.run)
    manifest = data.DatasetManifest.read(args.manifest, args.data)
    unknown = set(manifest.class_names) - set(classes)
    if unknown:
        raise InputError(f"manifest labels not known to the model: {sorted(unknown)}")
    manifest.class_names = classes
    x, y = _store(cfg, args.data).arrays(manifest, args.split, "evaluation")
    if len(y) == 0:
        raise InputError(f"split {args.split!r} is empty")
    report, cm = metrics.evaluate(y, predict(model, x))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "metrics.json", report.to_json() + "\n")
    _write_text(out / "confusion.csv", metrics.confusion_csv(cm))
    print(f"{args.split}: accuracy {report.accuracy:.4f}, f1-macro {report.f1_macro:.4f}, auc {report.auc}")
    return EXIT_OK


def cmd_explain(args) -> int:
    model, cfg, classes = load_run(args.run)
    sample = data.preprocess(args.image, cfg.image_size, cfg.sharpen)
    method = args.method or cfg.cam_method
    layer = args.layer or cfg.cam_layer
    heat = explain.explain(model, sample, method, args.target, layer, top_k=cfg.cam_top_k, eta=cfg.cam_eta)
    alpha = cfg.cam_alpha if args.alpha is None else args.alpha
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    explain.write_overlay(out, explain.render_overlay(heat, sample, alpha), heat)
    print(f"{method}: class {classes[heat.target_class]} -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    synth.generate_synthetic_dataset(args.out, args.classes, args.per_class, args.seed)
    print(f"wrote {args.classes} x {args.per_class} images to {args.out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest

    return EXIT_OK if selftest.run() else EXIT_RUNTIME


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="alzmri", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="preprocess an image tree")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--sharpen", action="store_true")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("split", help="write a seeded train/val/test manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=43)
    p.add_argument("--merge", default="", help="'A->B,C->B' or a preset (kaggle3, kaggle2)")
    p.add_argument("--test-frac", type=float, default=0.15)
    p.add_argument("--val-frac", type=float, default=0.15)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics for one split")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="CAM overlay for one image")
    p.add_argument("--run", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=explain.METHODS)
    p.add_argument("--layer")
    p.add_argument("--target", type=int)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("selftest", help="gradient checks and invariants")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, weights.WeightFileError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:
        logger.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
