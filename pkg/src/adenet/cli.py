"""Command-line entry point: ``adenet <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric abort.
Machine-readable results go to files or stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, experiment, explain, features, models, train
from .data import ManifestError, crop_insulators, load_manifest, resize_gray, stratified_holdout
from .forest import ForestConfig
from .metrics import emit_report, evaluate, roc_auc
from .synth import SynthConfig, crop_relative, load_defects, synth_dataset

log = logging.getLogger("adenet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "msg": record.getMessage()})


def _setup_logging(json_logs, verbose):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if json_logs else logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("adenet")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    g.add_argument("--early-stopping", action="store_true")
    g.add_argument("--patience", type=int, default=3)
    g.add_argument("--class-weights", action="store_true")
    g.add_argument("--no-bn-recalibration", action="store_true",
                   help="keep the moving-average batch-norm statistics as they stand after each epoch")
    g.add_argument("--precision", choices=("float32", "float64"), default="float32")


def build_parser():
    p = _Parser(prog="adenet", description="Insulator damage classification experiments.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS and timing-free reports, for bit-identical reruns")
    p.add_argument("--json-logs", action="store_true")
    p.add_argument("--config", help="file of key=value lines supplying flag defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic insulator dataset")
    s.add_argument("--n", type=int, default=600)
    s.add_argument("--damaged-ratio", type=float, default=1 / 3)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--out", default="data")

    t = sub.add_parser("train", help="train one model on a stratified holdout split")
    t.add_argument("--manifest", default="data/manifest.csv")
    t.add_argument("--arch", choices=("adenet", "lenet5"), default="adenet")
    t.add_argument("--no-batchnorm", action="store_true")
    t.add_argument("--train-fraction", type=float, default=0.8)
    t.add_argument("--out", default="runs/train")
    _train_flags(t)

    c = sub.add_parser("cv", help="k-fold comparison of AdeNet, LeNet-5 and the random forest")
    c.add_argument("--manifest", default="data/manifest.csv")
    c.add_argument("--k", type=int, default=5)
    c.add_argument("--arms", default="adenet,lenet5,forest",
                   help="comma-separated subset of adenet,lenet5,forest")
    c.add_argument("--ablation", action="store_true", help="also run AdeNet without batch norm")
    c.add_argument("--gradcam", action="store_true", help="score Grad-CAM localization per fold")
    c.add_argument("--trees", type=int, default=100)
    c.add_argument("--out", default="runs/cv_report.json")
    _train_flags(c)

    e = sub.add_parser("eval", help="score a checkpoint on every record of a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", default="data/manifest.csv")
    e.add_argument("--format", choices=("json", "csv"), default="json")
    e.add_argument("--out")
    e.add_argument("--roc", help="also write the ROC curve as fpr,tpr CSV")
    e.add_argument("--batch-size", type=int, default=16)

    g = sub.add_parser("gradcam", help="Grad-CAM overlay for one manifest record")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--manifest", default="data/manifest.csv")
    g.add_argument("--index", type=int, default=0)
    g.add_argument("--target-class", type=int, default=1)
    g.add_argument("--method", choices=("bilinear", "nearest"), default="bilinear")
    g.add_argument("--alpha", type=float, default=0.4)
    g.add_argument("--out", default="gradcam.png")
    g.add_argument("--csv", help="also write the raw heatmap grid")

    f = sub.add_parser("features", help="write the 68-value handcrafted feature table")
    f.add_argument("--manifest", default="data/manifest.csv")
    f.add_argument("--out", default="features.csv")

    q = sub.add_parser("params", help="print parameter counts")
    q.add_argument("--arch", choices=("adenet", "lenet5"), default="adenet")
    q.add_argument("--no-batchnorm", action="store_true")
    q.add_argument("--in-channels", type=int, default=3)
    return p


def read_config(path):
    """Flat ``key=value`` pairs; blank lines and ``#`` comments ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(parser, argv, pairs):
    """Re-parse with config values as defaults; explicit flags still win."""
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices.get(args.command) if args.command else None
    actions = {a.dest: a for a in parser._actions}
    if sub is not None:
        actions.update({a.dest: a for a in sub._actions})
    for key, raw in pairs.items():
        a = actions.get(key)
        if a is None or key in ("help", "command", "config"):
            raise UsageError(f"config key {key!r} is not a flag of {args.command or 'adenet'}")
        if isinstance(a, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                value = a.type(raw) if a.type else raw
            except ValueError:
                raise UsageError(f"config key {key!r}: bad value {raw!r}") from None
            if a.choices and value not in a.choices:
                raise UsageError(f"config key {key!r}: {value!r} not in {list(a.choices)}")
        a.default = value
    return parser.parse_args(argv)


def _train_config(args):
    try:
        return train.TrainConfig(
            epochs=args.epochs, batch_size=args.batch_size, optimizer=args.optimizer, lr=args.lr,
            momentum=args.momentum, early_stopping=args.early_stopping, patience=args.patience,
            class_weights=args.class_weights,
            bn_recalibration=not args.no_bn_recalibration, seed=args.seed, precision=args.precision)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _inputs_for(model, crops):
    if model.meta.get("arch") == "lenet5":
        return resize_gray(crops, model.meta.get("input_size", 32))
    return crops


def _write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = SynthConfig(n_images=args.n, damaged_ratio=args.damaged_ratio, image_size=args.image_size)
    path = synth_dataset(cfg, args.seed, args.out)
    log.info("wrote %d images to %s", args.n, args.out)
    print(path)


def cmd_params(args):
    m = models.build(args.arch, in_channels=args.in_channels, with_batchnorm=not args.no_batchnorm)
    trainable, frozen = models.count_params(m)
    print(f"trainable={trainable} non_trainable={frozen}")


def cmd_train(args):
    manifest = load_manifest(args.manifest)
    plan = stratified_holdout(manifest, args.train_fraction, seed=args.seed)
    crops = [c for c, _ in crop_insulators(manifest)]
    labels = manifest.labels
    model = models.build(args.arch, seed=args.seed, with_batchnorm=not args.no_batchnorm)
    inputs = _inputs_for(model, crops)
    pick = (lambda idx: inputs[idx]) if isinstance(inputs, np.ndarray) else (lambda idx: [inputs[i] for i in idx])
    cfg = _train_config(args)
    model, hist = train.train(model, (pick(plan.train), labels[plan.train]),
                              (pick(plan.test), labels[plan.test]), cfg)
    scores = train.predict_scores(model, pick(plan.test), cfg.batch_size)
    report, cm = evaluate(labels[plan.test], scores)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save_checkpoint(model.astype(np.float32), out / "model.ckpt")
    _write_json(hist.to_dict(timing=not args.deterministic), out / "history.json")
    _write_json(plan.to_dict(), out / "split.json")
    emit_report(report, out / "report.json")
    log.info("test f1 %.4f, checkpoint %s", report.f1, out / "model.ckpt")
    print(json.dumps({"report": report.to_dict(), "confusion": cm.to_dict()}, indent=2))


def cmd_cv(args):
    arms = tuple(a.strip() for a in args.arms.split(",") if a.strip())
    if set(arms) - set(experiment.ARMS) or "adenet" not in arms:
        raise UsageError(f"--arms must include adenet and come from {','.join(experiment.ARMS)}")
    manifest = load_manifest(args.manifest)
    report, _ = experiment.cross_validate(
        manifest, k=args.k, config=_train_config(args), arms=arms, ablation=args.ablation,
        forest_config=ForestConfig(n_trees=args.trees, seed=args.seed), gradcam=args.gradcam,
        timing=not args.deterministic)
    _write_json(report, args.out)
    for name, arm in report["arms"].items():
        log.info("%-7s fold-mean f1 %.4f", name, arm["fold_mean"]["f1"])
    print(json.dumps(report["arms"]["adenet"]["fold_mean"], indent=2))


def cmd_eval(args):
    model = checkpoint.load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    crops = [c for c, _ in crop_insulators(manifest)]
    scores = train.predict_scores(model, _inputs_for(model, crops), args.batch_size)
    labels = manifest.labels
    report, cm = evaluate(labels, scores)
    if args.out:
        emit_report(report, args.out, args.format)
    if args.roc:
        emit_report(roc_auc(scores, labels)[1], args.roc)
    print(json.dumps({"report": report.to_dict(), "confusion": cm.to_dict()}, indent=2))


def cmd_gradcam(args):
    model = checkpoint.load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if not 0 <= args.index < len(manifest):
        raise UsageError(f"--index {args.index} outside 0..{len(manifest) - 1}")
    crop, label = crop_insulators(manifest.subset([args.index]))[0]
    hm = explain.gradcam(model, crop, args.target_class, args.method,
                         provenance={"checkpoint": str(args.checkpoint), "record": args.index})
    explain.overlay(hm, crop, args.out, args.alpha)
    if args.csv:
        explain.heatmap_csv(hm, args.csv)
    result = {"record": args.index, "label": int(label), "target_class": args.target_class,
              "raw_shape": list(hm.raw.shape), "overlay": str(args.out)}
    sidecar = Path(manifest.root) / "defects.jsonl"
    if sidecar.exists():
        defects = load_defects(sidecar)
        if args.index in defects:
            rel = crop_relative(defects[args.index], manifest.records[args.index].bbox)
            result["localization"] = explain.localization_score(hm, rel)
    print(json.dumps(result, indent=2))


def cmd_features(args):
    manifest = load_manifest(args.manifest)
    crops = [c for c, _ in crop_insulators(manifest)]
    features.write_feature_csv(features.extract_all(crops), manifest.labels, args.out)
    log.info("wrote %d x %d features to %s", len(crops), features.N_FEATURES, args.out)
    print(args.out)


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "cv": cmd_cv, "eval": cmd_eval,
    "gradcam": cmd_gradcam, "features": cmd_features, "params": cmd_params,
}


def run(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            args = _apply_config(build_parser(), argv, read_config(args.config))
        if args.command is None:
            raise UsageError(parser.format_usage())
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"adenet: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE

    _setup_logging(args.json_logs, args.verbose)
    try:
        with train.deterministic_mode(args.deterministic):
            COMMANDS[args.command](args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except train.TrainingAborted as exc:
        log.error("training aborted: %s", exc)
        return EXIT_NUMERIC
    except (ManifestError, checkpoint.CheckpointError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
