"""Command-line entry point.

Commands: ``synth`` (generate a synthetic dataset as CSV), ``train`` (single
fold), ``cv`` (full cross-validation), ``grid`` (tau/k search), ``ablate``
(fusion-combiner swap), ``etf-check`` (prototype geometry audit), ``angles``
(train one fold and dump classifier weight angles).

Exit codes: 0 success, 2 configuration errors (unknown keys, bad values),
3 data errors (missing/malformed input files), 4 numerical divergence
(non-finite loss, reported with epoch and batch).
"""

import argparse
import os
import sys

import numpy as np

from . import train as tr
from .classifier import generate_etf
from .config import resolve
from .data import (
    generate_synthetic,
    load_recordings,
    make_windows,
    read_label_table,
    rebalance_minority,
    split,
    windows_to_dataset,
    write_label_table,
)
from .errors import ConfigError, DivergenceError, ParameterError, ParseError
from .metrics import pairwise_angles


def _add_common(parser):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--profile", help="named preset (goat, cattle, horse, goat-like)")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[],
        metavar="KEY=VALUE", help="override one config key (repeatable)",
    )
    parser.add_argument("--out", help="output directory (out.dir)")
    parser.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    parser.add_argument("--seed", type=int, help="shorthand for train.seed")
    parser.add_argument(
        "--print-effective-config", action="store_true",
        help="dump the fully resolved configuration to stdout",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ibanet",
        description="Imbalanced multi-rate activity recognition pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    _add_common(p_synth)

    for name, help_text in (
        ("train", "train and evaluate a single fold"),
        ("cv", "full cross-validation"),
        ("angles", "single fold plus classifier weight-angle dump"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--variant", help="shorthand for model.variant")

    p_grid = sub.add_parser("grid", help="tau/k grid search")
    _add_common(p_grid)
    p_grid.add_argument("--variant", help="shorthand for model.variant")

    p_abl = sub.add_parser("ablate", help="fusion-combiner ablation")
    _add_common(p_abl)
    p_abl.add_argument("--mode", help="shorthand for ablation.mode")

    p_etf = sub.add_parser("etf-check", help="verify prototype geometry")
    _add_common(p_etf)
    p_etf.add_argument("--classes", type=int, help="shorthand for etf.classes")
    p_etf.add_argument("--dim", type=int, help="shorthand for etf.dim")

    return parser


def _resolve_config(args):
    config = resolve(
        profile=args.profile, config_path=args.config, overrides=args.overrides
    )
    if args.out:
        config.set("out.dir", args.out)
    if args.seed is not None:
        config.set("train.seed", str(args.seed))
        config.set("synth.seed", str(args.seed))
        config.set("etf.seed", str(args.seed))
    if getattr(args, "variant", None):
        config.set("model.variant", args.variant)
    if getattr(args, "mode", None):
        config.set("ablation.mode", args.mode)
    if getattr(args, "classes", None):
        config.set("etf.classes", str(args.classes))
    if getattr(args, "dim", None):
        config.set("etf.dim", str(args.dim))
    config.validate()
    if args.print_effective_config:
        sys.stdout.write(config.effective_text())
    return config


def load_dataset(config):
    """Dataset per config: a recordings CSV if given, else synthetic."""
    csv_path = config["data.csv"]
    if csv_path:
        label_order = None
        if config["data.label_table"]:
            label_order = read_label_table(config["data.label_table"])
        recordings, label_names = load_recordings(csv_path, label_order=label_order)
        stride = config["data.stride_seconds"] or None
        seed = config["data.window_seed"]
        windows = make_windows(
            recordings,
            config["data.window_seconds"],
            stride_seconds=stride,
            seed=None if seed < 0 else seed,
        )
        dataset = windows_to_dataset(windows, label_names)
    else:
        spec = config.synth_spec()
        windows = generate_synthetic(spec, config["synth.seed"])
        names = [f"class_{i}" for i in range(spec.n_classes)]
        dataset = windows_to_dataset(windows, names)
    if config["data.rebalance_keep_fraction"] < 1.0:
        dataset = rebalance_minority(
            dataset,
            config["data.rebalance_keep_fraction"],
            config["data.rebalance_threshold"],
            config["data.rebalance_seed"],
        )
    return dataset


def _prepare_outdir(config):
    outdir = config["out.dir"]
    os.makedirs(outdir, exist_ok=True)
    with open(
        os.path.join(outdir, "effective_config.txt"), "w", encoding="utf-8"
    ) as fh:
        fh.write(config.effective_text())
    return outdir


def _emit(outdir, cv_result, dataset):
    tr.write_run_artifacts(outdir, cv_result, dataset.label_names)
    write_label_table(os.path.join(outdir, "labels.csv"), dataset.label_names)


def cmd_synth(config):
    spec = config.synth_spec()
    windows = generate_synthetic(spec, config["synth.seed"])
    outdir = _prepare_outdir(config)
    names = [f"class_{i}" for i in range(spec.n_classes)]
    path = os.path.join(outdir, "synthetic.csv")
    write_windows_csv(path, windows, names, spec.base_rate_hz)
    write_label_table(os.path.join(outdir, "labels.csv"), names)
    counts = np.bincount([w.label for w in windows], minlength=spec.n_classes)
    print(
        f"synth: {len(windows)} windows, {spec.n_classes} classes "
        f"{counts.tolist()} -> {path}"
    )
    return 0


def write_windows_csv(path, windows, label_names, rate_hz):
    """Serialize windows in the recordings CSV format, loadable as-is.

    Windows sharing (subject, label) are written back to back as one
    contiguous segment with a continuous time column, so re-windowing the
    file at the same length reproduces the original windows exactly.
    """
    n_channels = windows[0].data.shape[0]
    groups = {}
    for w in windows:
        groups.setdefault((w.subject_id, w.label), []).append(w)
    lines = ["subject,label,t," + ",".join(f"ch{i}" for i in range(n_channels))]
    for (subject, label), group in groups.items():
        name = label_names[label]
        pos = 0
        for w in group:
            for col in range(w.data.shape[1]):
                t = repr(pos / rate_hz)
                row = ",".join(repr(float(v)) for v in w.data[:, col])
                lines.append(f"{subject},{name},{t},{row}")
                pos += 1
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _single_fold(config, dataset):
    folds = split(dataset, config.split_plan())
    result = tr.run_fold(config.train_config(), dataset, folds[0])
    return tr.CvResult(folds=[result], aggregate=result.test_report)


def cmd_train(config, jobs):
    dataset = load_dataset(config)
    outdir = _prepare_outdir(config)
    cv_result = _single_fold(config, dataset)
    _emit(outdir, cv_result, dataset)
    r = cv_result.aggregate
    print(
        f"train: fold 0 accuracy {r.accuracy:.2f}% "
        f"macro_recall {r.macro_recall:.2f}% macro_f1 {r.macro_f1:.2f}%"
    )
    return 0


def cmd_cv(config, jobs):
    dataset = load_dataset(config)
    outdir = _prepare_outdir(config)
    cv_result = tr.run_cross_validation(
        config.train_config(), dataset, config.split_plan(), jobs=jobs
    )
    _emit(outdir, cv_result, dataset)
    r = cv_result.aggregate
    print(
        f"cv: {len(cv_result.folds)} folds, accuracy {r.accuracy:.2f}% "
        f"macro_recall {r.macro_recall:.2f}% macro_f1 {r.macro_f1:.2f}%"
    )
    return 0


def cmd_grid(config, jobs):
    dataset = load_dataset(config)
    outdir = _prepare_outdir(config)
    result = tr.grid_search(
        config.train_config(),
        dataset,
        config.split_plan(),
        taus=config["grid.taus"],
        ks=config["grid.ks"],
        cell_epochs=config["grid.epochs"] or None,
        jobs=jobs,
    )
    tr.write_grid_csv(os.path.join(outdir, "grid.csv"), result)
    print(f"grid: best tau={result.best_tau} k={result.best_k}")
    return 0


def cmd_ablate(config, jobs):
    dataset = load_dataset(config)
    outdir = _prepare_outdir(config)
    cv_result = tr.fusion_ablation(
        config.train_config(),
        dataset,
        config.split_plan(),
        config["ablation.mode"],
        jobs=jobs,
    )
    _emit(outdir, cv_result, dataset)
    r = cv_result.aggregate
    print(
        f"ablate[{config['ablation.mode']}]: accuracy {r.accuracy:.2f}% "
        f"macro_recall {r.macro_recall:.2f}%"
    )
    return 0


def cmd_etf_check(config):
    n_classes = config["etf.classes"]
    dim = config["etf.dim"] or None
    prototypes = generate_etf(n_classes, dim, seed=config["etf.seed"])
    outdir = _prepare_outdir(config)
    gram = prototypes.gram()
    lines = [",".join(f"c{i}" for i in range(n_classes))]
    for row in gram:
        lines.append(",".join(repr(float(v)) for v in row))
    with open(os.path.join(outdir, "gram.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    deviation = prototypes.max_gram_deviation()
    print(
        f"etf-check: {n_classes} classes in {prototypes.d} dims, "
        f"max Gram deviation {deviation:.3e}"
    )
    return 0


def cmd_angles(config, jobs):
    dataset = load_dataset(config)
    outdir = _prepare_outdir(config)
    folds = split(dataset, config.split_plan())
    train_cfg = config.train_config()
    train_ds = dataset.subset(folds[0].train_idx)
    val_ds = dataset.subset(folds[0].val_idx)
    model, record, factors = tr.train(train_cfg, train_ds, val_ds)
    report, cm, class_rates = tr.evaluate(
        model, dataset.subset(folds[0].test_idx), train_cfg, factors
    )
    result = tr.FoldResult(
        fold_id=0,
        history=record.history,
        best_epoch=record.best_epoch,
        best_val_accuracy=record.best_val_accuracy,
        test_report=report,
        confusion=cm,
        angle_report=pairwise_angles(model.head.fc_weight_matrix()),
        router_class_rates=class_rates,
        warnings=record.warnings,
    )
    cv_result = tr.CvResult(folds=[result], aggregate=report)
    _emit(outdir, cv_result, dataset)
    tr.write_fc_weights_csv(
        os.path.join(outdir, "fc_weights.csv"),
        model.head.fc_weight_matrix(),
        dataset.label_names,
    )
    a = result.angle_report
    print(
        f"angles: min {a.min_off_diagonal:.2f} max {a.max_off_diagonal:.2f} "
        f"spread {a.spread:.2f} degrees"
    )
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _resolve_config(args)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "train":
            return cmd_train(config, args.jobs)
        if args.command == "cv":
            return cmd_cv(config, args.jobs)
        if args.command == "grid":
            return cmd_grid(config, args.jobs)
        if args.command == "ablate":
            return cmd_ablate(config, args.jobs)
        if args.command == "etf-check":
            return cmd_etf_check(config)
        if args.command == "angles":
            return cmd_angles(config, args.jobs)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
