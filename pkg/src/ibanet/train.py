"""Training loop, cross-validation driver, grid search, and run artifacts.

Every run is a pure function of (config, dataset, split plan): parameter
init, batch shuffling, and checkpoint selection all derive from the config
seed, and artifact writers format numbers with ``repr`` so identical runs
produce byte-identical files. Fold workers share nothing, which is what
makes the optional process-parallel cross-validation safe.
"""

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .classifier import predict
from .data import split
from .errors import ConfigError, DivergenceError
from .losses import class_weights, make_loss
from .metrics import (
    confusion_matrix,
    mean_report,
    metrics_from_confusion,
    pairwise_angles,
)
from .model import ActivityModel, batch_views, parse_variant
from .optim import AdamState, adam_step, lr_at_epoch


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-4
    tau: float = 0.4
    k: float = 0.3
    factors: tuple = (2, 4, 8)
    loss_kind: str = "auto"  # auto: cb_focal, but cross_entropy for single_rate
    beta: float = 0.9999
    gamma: float = 0.5
    seed: int = 0
    variant: str = "iba_net"
    enc_channels: tuple = (8, 16, 32)
    kernel: int = 5
    conv_stride: int = 2
    conv_pad: int = 2
    head_dim: int = 0  # 0 means: match the class count
    lr_drop_every: int = 20
    lr_drop_factor: float = 0.1
    etf_seed: int = 0
    fold_salt: int = 0  # set by the CV driver so folds train differently


@dataclass
class TrainRecord:
    history: list
    best_epoch: int
    best_val_accuracy: float
    warnings: list


@dataclass
class FoldResult:
    fold_id: int
    history: list
    best_epoch: int
    best_val_accuracy: float
    test_report: object
    confusion: np.ndarray
    angle_report: object
    router_class_rates: object  # (classes, rates) means, or None
    warnings: list


@dataclass
class CvResult:
    folds: list
    aggregate: object


def resolved_loss_kind(config):
    if config.loss_kind != "auto":
        return config.loss_kind
    mode, _ = parse_variant(config.variant)
    return "cross_entropy" if mode == "single" else "cb_focal"


def effective_factors(config, base_rate_hz):
    """Decimation factors for this run; single-rate variants derive theirs."""
    mode, rate = parse_variant(config.variant)
    if mode != "single":
        return mode, tuple(int(f) for f in config.factors)
    ratio = base_rate_hz / rate
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9:
        raise ConfigError(
            f"baseline rate {rate} Hz does not divide the base rate "
            f"{base_rate_hz} Hz"
        )
    return mode, (factor,)


def build_model(config, n_classes, base_rate_hz):
    mode, factors = effective_factors(config, base_rate_hz)
    rng = np.random.default_rng((config.seed, config.fold_salt, 37))
    model = ActivityModel(
        rng,
        n_rates=len(factors),
        n_classes=n_classes,
        fusion_mode=mode,
        enc_channels=tuple(config.enc_channels),
        kernel=config.kernel,
        stride=config.conv_stride,
        pad=config.conv_pad,
        head_dim=config.head_dim or None,
        k=config.k,
        etf_seed=config.etf_seed,
    )
    return model, factors


def _training_class_counts(train_ds, val_ds):
    """CB-loss counts from the train split; absent classes clamp to 1."""
    counts = np.bincount(train_ds.y, minlength=train_ds.n_classes)
    warnings = []
    val_present = set(np.unique(val_ds.y).tolist())
    for c in np.flatnonzero(counts == 0):
        if int(c) in val_present:
            warnings.append(
                f"class {train_ds.label_names[c]} present in val but absent "
                "from train; loss weight uses count 1"
            )
    return np.maximum(counts, 1), warnings


def train(config, train_ds, val_ds):
    """Fit one model; returns it restored to its best-validation state."""
    model, factors = build_model(config, train_ds.n_classes, train_ds.base_rate_hz)
    params = model.param_tensors()
    adam = AdamState(params, lr=config.lr, weight_decay=config.weight_decay)

    counts, warnings = _training_class_counts(train_ds, val_ds)
    kind = resolved_loss_kind(config)
    weights = class_weights(counts, config.beta) if kind == "cb_focal" else None
    loss_fn = make_loss(kind, weights, config.gamma)

    shuffle_rng = np.random.default_rng((config.seed, config.fold_salt, 43))
    n = len(train_ds)
    history = []
    best_val = -np.inf
    best_state = model.state_copy()
    best_epoch = -1

    for epoch in range(config.epochs):
        lr = lr_at_epoch(
            config.lr, epoch, config.lr_drop_every, config.lr_drop_factor
        )
        perm = shuffle_rng.permutation(n)
        correct = 0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            batch = train_ds.X[idx]
            targets = train_ds.y[idx]
            views = batch_views(batch, factors)
            with T.Tape() as tape:
                for p in params:
                    tape.watch(p)
                logits, _ = model.forward(
                    [T.Tensor(v) for v in views], config.tau
                )
                loss = loss_fn(logits, targets)
            if not np.isfinite(loss.data):
                raise DivergenceError(epoch, batch_index)
            grads = tape.gradients_for(params, tape.backward(loss))
            adam_step(adam, params, grads, lr=lr)
            correct += int(np.sum(predict(logits) == targets))

        train_acc = correct / n * 100.0
        val_acc = accuracy(model, val_ds, config, factors)
        history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_accuracy": train_acc,
                "val_accuracy": val_acc,
            }
        )
        if val_acc > best_val:
            best_val = val_acc
            best_state = model.state_copy()
            best_epoch = epoch

    model.load_state(best_state)
    record = TrainRecord(
        history=history,
        best_epoch=best_epoch,
        best_val_accuracy=float(best_val) if best_epoch >= 0 else 0.0,
        warnings=warnings,
    )
    return model, record, factors


def _forward_batches(model, ds, config, factors):
    for start in range(0, len(ds), config.batch_size):
        batch = ds.X[start : start + config.batch_size]
        targets = ds.y[start : start + config.batch_size]
        views = batch_views(batch, factors)
        logits, diag = model.forward([T.Tensor(v) for v in views], config.tau)
        yield logits, diag, targets


def accuracy(model, ds, config, factors):
    correct = 0
    for logits, _, targets in _forward_batches(model, ds, config, factors):
        correct += int(np.sum(predict(logits) == targets))
    return correct / len(ds) * 100.0


def evaluate(model, ds, config, factors):
    """Metrics, confusion matrix, and per-class mean router rates."""
    preds = []
    rate_sums = None
    for logits, diag, targets in _forward_batches(model, ds, config, factors):
        preds.append(predict(logits))
        if diag["rates"] is not None:
            r = diag["rates"].data
            if rate_sums is None:
                rate_sums = np.zeros((ds.n_classes, r.shape[1]))
            np.add.at(rate_sums, targets, r)
    y_pred = np.concatenate(preds)
    cm = confusion_matrix(ds.y, y_pred, ds.n_classes)
    report = metrics_from_confusion(cm)
    class_rates = None
    if rate_sums is not None:
        counts = np.bincount(ds.y, minlength=ds.n_classes).astype(np.float64)
        class_rates = rate_sums / np.maximum(counts, 1.0)[:, None]
    return report, cm, class_rates


def run_fold(config, dataset, fold):
    """Train and evaluate one cross-validation fold (process-safe)."""
    cfg = replace(config, fold_salt=fold.fold_id)
    train_ds = dataset.subset(fold.train_idx)
    val_ds = dataset.subset(fold.val_idx)
    test_ds = dataset.subset(fold.test_idx)
    model, record, factors = train(cfg, train_ds, val_ds)
    report, cm, class_rates = evaluate(model, test_ds, cfg, factors)
    return FoldResult(
        fold_id=fold.fold_id,
        history=record.history,
        best_epoch=record.best_epoch,
        best_val_accuracy=record.best_val_accuracy,
        test_report=report,
        confusion=cm,
        angle_report=pairwise_angles(model.head.fc_weight_matrix()),
        router_class_rates=class_rates,
        warnings=list(fold.warnings) + record.warnings,
    )


def _run_fold_args(args):
    return run_fold(*args)


def run_cross_validation(config, dataset, plan, jobs=1):
    folds = split(dataset, plan)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(_run_fold_args, [(config, dataset, f) for f in folds])
            )
    else:
        results = [run_fold(config, dataset, f) for f in folds]
    results.sort(key=lambda r: r.fold_id)
    aggregate = mean_report([r.test_report for r in results])
    return CvResult(folds=results, aggregate=aggregate)


@dataclass
class GridResult:
    rows: list  # dicts: tau, k, val_accuracy, test metrics
    best_tau: float
    best_k: float


def grid_search(config, dataset, plan, taus, ks, cell_epochs=None, jobs=1):
    """One CV run per (tau, k) cell; selects on mean best-val accuracy.

    Ties resolve to the lexicographically smallest (tau, k). ``cell_epochs``
    trims per-cell training so a full grid stays desk-scale.
    """
    if not taus or not ks:
        raise ConfigError("grid search needs nonempty tau and k grids")
    rows = []
    for tau in taus:
        for k in ks:
            cfg = replace(
                config,
                tau=tau,
                k=k,
                epochs=cell_epochs if cell_epochs else config.epochs,
            )
            cv = run_cross_validation(cfg, dataset, plan, jobs=jobs)
            val_acc = float(np.mean([f.best_val_accuracy for f in cv.folds]))
            rows.append(
                {
                    "tau": float(tau),
                    "k": float(k),
                    "val_accuracy": val_acc,
                    "test_accuracy": cv.aggregate.accuracy,
                    "test_macro_recall": cv.aggregate.macro_recall,
                    "test_macro_f1": cv.aggregate.macro_f1,
                }
            )
    best = min(rows, key=lambda r: (-r["val_accuracy"], r["tau"], r["k"]))
    return GridResult(rows=rows, best_tau=best["tau"], best_k=best["k"])


def fusion_ablation(config, dataset, plan, mode, jobs=1):
    """CV with the fusion combiner swapped; soft_weighted is the identity."""
    return run_cross_validation(
        replace(config, variant=f"fusion:{mode}"), dataset, plan, jobs=jobs
    )


# -- artifact writers ---------------------------------------------------------
# Lines are assembled by hand (not the csv module) so every byte is pinned:
# repr() floats, "\n" newlines, stable key order.


def _fmt(value):
    return repr(float(value))


def write_metrics_json(path, cv_result):
    folds = []
    for f in cv_result.folds:
        folds.append(
            {
                "fold": f.fold_id,
                "best_epoch": f.best_epoch,
                "best_val_accuracy": f.best_val_accuracy,
                "metrics": f.test_report.as_dict(),
                "angles": f.angle_report.as_dict(),
                "warnings": f.warnings,
            }
        )
    payload = {"aggregate": cv_result.aggregate.as_dict(), "folds": folds}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_confusion_csv(path, cv_result, label_names):
    lines = ["fold,true_class," + ",".join(label_names)]
    total = None
    for f in cv_result.folds:
        total = f.confusion if total is None else total + f.confusion
        for i, name in enumerate(label_names):
            row = ",".join(str(int(v)) for v in f.confusion[i])
            lines.append(f"{f.fold_id},{name},{row}")
    for i, name in enumerate(label_names):
        row = ",".join(str(int(v)) for v in total[i])
        lines.append(f"total,{name},{row}")
    _write_lines(path, lines)


def write_history_csv(path, cv_result):
    lines = ["fold,epoch,lr,train_accuracy,val_accuracy"]
    for f in cv_result.folds:
        for h in f.history:
            lines.append(
                f"{f.fold_id},{h['epoch']},{_fmt(h['lr'])},"
                f"{_fmt(h['train_accuracy'])},{_fmt(h['val_accuracy'])}"
            )
    _write_lines(path, lines)


def write_angles_csv(path, cv_result, label_names):
    lines = ["fold,class_i,class_j,angle_degrees"]
    for f in cv_result.folds:
        a = f.angle_report.angles
        for i in range(len(label_names)):
            for j in range(i + 1, len(label_names)):
                lines.append(
                    f"{f.fold_id},{label_names[i]},{label_names[j]},{_fmt(a[i, j])}"
                )
    _write_lines(path, lines)


def write_router_rates_csv(path, cv_result, label_names):
    n_rates = None
    for f in cv_result.folds:
        if f.router_class_rates is not None:
            n_rates = f.router_class_rates.shape[1]
            break
    header = "fold,class"
    if n_rates:
        header += "," + ",".join(f"rate_{i}" for i in range(n_rates))
    lines = [header]
    if n_rates:
        for f in cv_result.folds:
            if f.router_class_rates is None:
                continue
            for i, name in enumerate(label_names):
                row = ",".join(_fmt(v) for v in f.router_class_rates[i])
                lines.append(f"{f.fold_id},{name},{row}")
    _write_lines(path, lines)


def write_fc_weights_csv(path, weight_matrix, label_names):
    lines = ["dim," + ",".join(label_names)]
    for i, row in enumerate(np.asarray(weight_matrix)):
        lines.append(f"{i}," + ",".join(_fmt(v) for v in row))
    _write_lines(path, lines)


def write_grid_csv(path, grid_result):
    lines = ["tau,k,val_accuracy,test_accuracy,test_macro_recall,test_macro_f1"]
    for r in grid_result.rows:
        lines.append(
            f"{_fmt(r['tau'])},{_fmt(r['k'])},{_fmt(r['val_accuracy'])},"
            f"{_fmt(r['test_accuracy'])},{_fmt(r['test_macro_recall'])},"
            f"{_fmt(r['test_macro_f1'])}"
        )
    _write_lines(path, lines)


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_run_artifacts(outdir, cv_result, label_names):
    os.makedirs(outdir, exist_ok=True)
    write_metrics_json(os.path.join(outdir, "metrics.json"), cv_result)
    write_confusion_csv(
        os.path.join(outdir, "confusion.csv"), cv_result, label_names
    )
    write_history_csv(os.path.join(outdir, "history.csv"), cv_result)
    write_angles_csv(os.path.join(outdir, "angles.csv"), cv_result, label_names)
    write_router_rates_csv(
        os.path.join(outdir, "router_rates.csv"), cv_result, label_names
    )
