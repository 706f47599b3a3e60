"""Command-line entry point: ``fungnet <command> ...``.

Commands mirror the pipeline stages: ingest, split, train, evaluate,
predict, report, plus ``experiment`` for the repeated train/test protocol.
Every command writes its outputs atomically and exits with status 1 and a
one-line ``error:`` message on failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .dataset import LABELS, DatasetManifest, ManifestData, SplitSpec, ingest, load_image, split
from .layers import softmax
from .metrics import emit_report, metrics_csv, read_metrics_csv
from .models import DISPLAY_NAMES, apply_weights, build_model, forward, freeze_backbone, replace_head
from .preprocess import NormalizationConstants, preprocess_eval
from .training import evaluate_model, run_experiment, train_model

log = logging.getLogger("fungnet")


def read_manifest(path) -> DatasetManifest:
    """Load a manifest CSV, resolving relative image paths against its folder."""
    path = Path(path)
    m = DatasetManifest.from_csv(path.read_text(encoding="utf-8"))
    base = path.resolve().parent
    m.records = [r.__class__(str(base / r.path) if not os.path.isabs(r.path) else r.path, r.label, r.split)
                 for r in m.records]
    return m


def write_manifest(m: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.resolve().parent
    rel = DatasetManifest([r.__class__(os.path.relpath(Path(r.path).resolve(), base), r.label, r.split)
                           for r in m.records], m.skipped)
    atomic_write(path, rel.to_csv())


def _preprocessing(cfg: ExperimentConfig) -> dict:
    return {"norm_mean": list(cfg.norm_mean), "norm_std": list(cfg.norm_std),
            "image_resize": cfg.image_resize, "crop": cfg.crop}


def _make_model(cfg: ExperimentConfig, rng, init_weights=None):
    if init_weights is None:
        model = build_model(cfg.architecture, cfg.num_classes, rng, cfg.width_multiplier)
    else:
        tensors, prov = load_checkpoint(init_weights)
        if prov.get("arch", cfg.architecture) != cfg.architecture:
            raise ValueError(f"init weights are for {prov['arch']}, config asks for {cfg.architecture}")
        width = float(prov.get("width_multiplier", cfg.width_multiplier))
        classes = int(prov.get("num_classes", cfg.num_classes))
        model = build_model(cfg.architecture, classes, rng, width)
        apply_weights(model, tensors)
        if classes != cfg.num_classes:
            replace_head(model, cfg.num_classes, rng)
    if cfg.freeze_backbone:
        freeze_backbone(model)
    return model


def _model_from_checkpoint(path):
    tensors, prov = load_checkpoint(path)
    model = build_model(prov["arch"], int(prov["num_classes"]), width_multiplier=float(prov.get("width_multiplier", 1.0)))
    apply_weights(model, tensors)
    norm = NormalizationConstants(tuple(prov.get("norm_mean", (0.485, 0.456, 0.406))),
                                  tuple(prov.get("norm_std", (0.229, 0.224, 0.225))))
    return model, prov, norm


def _print_epoch(stats) -> None:
    print(f"epoch {stats.epoch} train_loss {stats.train_loss:.6f} "
          f"val_loss {stats.val_loss:.6f} val_acc {stats.val_accuracy:.4f}", flush=True)


def cmd_ingest(args) -> None:
    m = ingest(args.data_root)
    write_manifest(m, args.manifest)
    fp = m.fingerprint()
    print(f"{len(m)} images ({fp['edible']} edible, {fp['poisonous']} poisonous), {m.skipped} skipped")


def cmd_split(args) -> None:
    m = split(read_manifest(args.manifest),
              SplitSpec(args.test_count, args.val_count, not args.uniform, args.seed))
    write_manifest(m, args.out or args.manifest)
    print(" ".join(f"{s} {len(m.subset(s))}" for s in ("train", "val", "test")))


def cmd_train(args) -> None:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    m = read_manifest(args.manifest)
    data = ManifestData(m, cfg.batch_size, cfg.seed, cfg.normalization, cfg.image_resize, cfg.crop)
    rng = np.random.default_rng(cfg.seed)
    model = _make_model(cfg, rng, args.init_weights)
    model, rec = train_model(model, data, cfg.train_config(), rng, _print_epoch)
    print(f"best epoch {rec.best_epoch} (val_loss {rec.best_val_loss:.6f}), stopped at {rec.stop_epoch}")
    if args.log:
        atomic_write(args.log, rec.to_csv())
    save_checkpoint(model, args.out, cfg.seed, _preprocessing(cfg))


def cmd_evaluate(args) -> None:
    model, prov, norm = _model_from_checkpoint(args.model)
    m = read_manifest(args.manifest)
    data = ManifestData(m, 4, 0, norm, int(prov.get("image_resize", 256)), int(prov.get("crop", 224)))
    report = evaluate_model(model, data, args.split)
    atomic_write(args.out, metrics_csv({args.name or DISPLAY_NAMES[model.arch]: report}))
    print(emit_report({args.name or DISPLAY_NAMES[model.arch]: report}), end="")


def cmd_predict(args) -> None:
    model, prov, norm = _model_from_checkpoint(args.model)
    x = preprocess_eval(load_image(args.image), norm, int(prov.get("image_resize", 256)), int(prov.get("crop", 224)))
    logits = forward(model, x.__class__(x.data[None]), "eval").data
    p = softmax(logits.astype(np.float64))[0, 1]
    label = LABELS[1] if p >= 0.5 else LABELS[0]
    print(f"{label} {p:.6f}")


def cmd_report(args) -> None:
    named = {}
    for path in args.inputs.split(","):
        for name, r in read_metrics_csv(Path(path).read_text(encoding="utf-8")).items():
            named[name] = r
    atomic_write(args.out, emit_report(named))


def cmd_experiment(args) -> None:
    cfgs = [load_config(p) for p in args.config.split(",")]
    m = read_manifest(args.manifest)
    base = cfgs[0]
    data = ManifestData(m, base.batch_size, base.seed, base.normalization, base.image_resize, base.crop)
    train_cfgs = [c.train_config() for c in cfgs]
    lookup = {id(tc): c for tc, c in zip(train_cfgs, cfgs)}

    def make(tc, rng):
        return _make_model(lookup[id(tc)], rng, args.init_weights)

    result = run_experiment(train_cfgs, data, make, _print_epoch)
    name = DISPLAY_NAMES[result.config.arch]
    table = emit_report({name: result.mean})
    atomic_write(args.out, table)
    if args.details:
        atomic_write(args.details, metrics_csv({f"{name}#{i}": r for i, r in enumerate(result.reports, 1)}))
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fungnet", description="Edible vs poisonous mushroom CNN pipeline")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="build a manifest from DIR/edible and DIR/poisonous")
    s.add_argument("--data-root", required=True)
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", help="assign train/val/test splits")
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--test-count", type=int, default=None, help="default 20%% of records (90 of 450)")
    s.add_argument("--val-count", type=int, default=None, help="default 8.9%% of records (40 of 450)")
    s.add_argument("--uniform", action="store_true", help="unstratified draws")
    s.add_argument("--out", help="write here instead of updating the manifest")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train one model with early stopping")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init-weights")
    s.add_argument("--log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a checkpoint on one split")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.add_argument("--out", required=True)
    s.add_argument("--name", help="row label (default: architecture name)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="classify one image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("report", help="merge metrics files into one table")
    s.add_argument("--inputs", required=True, help="comma-separated metrics CSVs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("experiment", help="repeated train/test runs, mean metrics")
    s.add_argument("--config", required=True, help="one or more comma-separated candidate configs")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init-weights")
    s.add_argument("--details", help="per-repeat metrics CSV")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001 - every failure becomes a one-line diagnostic
        msg = e.args[0] if isinstance(e, KeyError) and e.args else str(e)
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
