"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import svm as S
from .config import ConfigError, load_config
from .container import ContainerError
from .trainer import NumericalError, evaluate, train, write_confusion

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("xraynet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", help="flat section.key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--seed", type=int, help="overrides train.seed / svm.seed / split seed")
    p.add_argument("--out-dir", required=out_required)
    p.add_argument("--threads", type=int, default=1, help="1 forces the bit-reproducible mode")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xraynet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="flatten, filter and split a path,label_code manifest")
    p.add_argument("manifest")
    p.add_argument("--min-count", type=int, default=50)
    p.add_argument("--train-frac", type=float, default=0.9)
    _common(p, out_required=True)

    p = sub.add_parser("synth-data", help="render the synthetic radiograph corpus")
    p.add_argument("--classes", type=int, default=24)
    p.add_argument("--per-class", type=int, default=60)
    _common(p, out_required=True)

    p = sub.add_parser("train-cnn", help="train the CNN on a split manifest")
    p.add_argument("manifest")
    _common(p, out_required=True)

    p = sub.add_parser("eval-cnn", help="evaluate a CNN checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", default="test")
    _common(p)

    p = sub.add_parser("train-svm", help="grid-search C and train the one-vs-rest SVM")
    p.add_argument("features")
    p.add_argument("--test-features")
    _common(p, out_required=True)

    p = sub.add_parser("eval-svm", help="evaluate a trained SVM on a feature file")
    p.add_argument("model")
    p.add_argument("features")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    _common(p)
    return parser


def _config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"train.seed = {args.seed}", f"svm.seed = {args.seed}"]
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        overrides.append(f"train.threads = {args.threads}")
    return load_config(args.config, overrides)


def cmd_prepare(args) -> int:
    cfg = _config(args)
    if args.min_count < 1 or not 0 < args.train_frac < 1:
        raise ConfigError("--min-count must be >= 1 and --train-frac in (0, 1)")
    src = Path(args.manifest)
    records = D.read_records(src)
    out = Path(args.out_dir)
    seed = args.seed if args.seed is not None else cfg.train.seed
    # paths are rewritten relative to the output directory
    rel = [D.Record(os.path.relpath(src.parent / r.path, out) if not Path(r.path).is_absolute() else r.path,
                    r.label_code) for r in records]
    manifest, removed = D.prepare(rel, args.min_count, args.train_frac, seed, out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_manifest(out / "manifest_split.csv", manifest)
    train_n, test_n = manifest.counts("train"), manifest.counts("test")
    with open(out / "class_counts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "label_code", "total", "train", "test"])
        for i, code in enumerate(manifest.classes):
            w.writerow([i, code, train_n[i] + test_n[i], train_n[i], test_n[i]])
    with open(out / "removed_classes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label_code", "count"])
        w.writerows(removed)
    print(f"{manifest.num_classes} classes, {sum(train_n)} train / {sum(test_n)} test records, "
          f"{len(removed)} classes removed")
    for i, code in enumerate(manifest.classes):
        print(f"  {i:3d} {code}: {train_n[i] + test_n[i]} ({train_n[i]} train, {test_n[i]} test)")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    from .synth import MAX_CLASSES, generate_synthetic_corpus
    if not 1 <= args.classes <= MAX_CLASSES:
        raise ConfigError(f"--classes must be in [1, {MAX_CLASSES}]")
    if args.per_class < 1:
        raise ConfigError("--per-class must be positive")
    seed = args.seed if args.seed is not None else cfg.train.seed
    records = generate_synthetic_corpus(args.classes, args.per_class, seed, args.out_dir)
    print(f"wrote {len(records)} images in {args.classes} classes to {args.out_dir}")
    return EXIT_OK


def cmd_train_cnn(args) -> int:
    cfg = _config(args)
    manifest = D.read_manifest(args.manifest)
    if manifest.num_classes != cfg.model.num_classes:
        raise ConfigError(f"manifest has {manifest.num_classes} classes but model.num_classes = "
                          f"{cfg.model.num_classes}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    model = M.build_model(cfg.model, cfg.init_seed)
    log.info("model: %d parameters, shape chain %s, flatten width %d",
             M.param_count(model), model.shapes, model.flatten_width)
    _, history = train(model, manifest, cfg.train, out)
    best = history.best()
    print(f"best test accuracy {best.test_acc:.4f} at epoch {best.epoch}; last {history.epochs[-1].test_acc:.4f}")
    return EXIT_OK


def cmd_eval_cnn(args) -> int:
    cfg = _config(args)
    model = M.load_checkpoint(args.checkpoint)
    manifest = D.read_manifest(args.manifest)
    target = tuple(model.spec.input_shape[1:])
    images, labels = D.load_split(manifest, args.split, target)
    if len(images) == 0:
        raise D.EmptyDatasetError(f"split {args.split!r} is empty")
    from .augment import eval_view
    run_cfg = Path(args.checkpoint).parent / "config.txt"
    aug = load_config(run_cfg).train.augment if run_cfg.exists() else cfg.train.augment
    views = np.stack([eval_view(im, aug, target) for im in images])
    acc, conf = evaluate(model, views, labels, max(model.spec.num_classes, manifest.num_classes))
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_confusion(out / "confusion.csv", conf, manifest.classes)
    print(f"accuracy {acc:.6f} ({int(np.trace(conf))}/{int(conf.sum())})")
    return EXIT_OK


def cmd_train_svm(args) -> int:
    cfg = _config(args)
    fs = D.load_feature_set(args.features)
    test = D.load_feature_set(args.test_features, expected_dim=fs.dim) if args.test_features else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    best_C, table = S.grid_search_cv(fs, cfg.svm.grid, cfg.svm.folds, cfg.svm.seed, cfg.svm)
    S.write_cv_table(out / "cv_table.csv", table)
    model = S.train_ovr(fs, best_C, cfg.svm)
    S.save_svm(model, out / "svm.model")
    print(f"best C {best_C:g}; training accuracy {S.accuracy(model, fs):.6f}")
    if test is not None:
        print(f"test accuracy {S.accuracy(model, test):.6f}")
    return EXIT_OK


def cmd_eval_svm(args) -> int:
    _config(args)
    model = S.load_svm(args.model)
    fs = D.load_feature_set(args.features, expected_dim=model.dim)
    if fs.dim != model.dim:
        raise D.FeatureDimensionError(f"{args.features}: dimension {fs.dim}, model expects {model.dim}")
    print(f"accuracy {S.accuracy(model, fs):.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _config(args)
    from .gradcheck import run_suite
    results = run_suite(args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:24s} max_rel_err={r.error:.3e} "
              f"threshold={r.threshold:.0e} ({r.seconds:.2f}s)")
    ok = all(r.passed for r in results)
    print("gradient check " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "prepare": cmd_prepare, "synth-data": cmd_synth_data, "train-cnn": cmd_train_cnn,
    "eval-cnn": cmd_eval_cnn, "train-svm": cmd_train_svm, "eval-svm": cmd_eval_svm,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, M.SpecError, S.SvmError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, ContainerError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
