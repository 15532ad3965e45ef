"""Sensor data pipeline.

Covers CSV ingestion of labeled multi-channel recordings, fixed-duration
windowing, multi-rate views via strided decimation, seeded synthetic
imbalanced datasets, cross-validation splits, and imbalance transforms.

Input CSV contract: header ``subject,label,t,<ch0>,<ch1>,...`` with at least
one channel column; rows are grouped into maximal contiguous segments of the
same (subject, label); timestamps are strictly increasing and uniformly
spaced within a segment, and the sampling rate is inferred from that spacing.
Decimation is pure strided subsampling (no anti-alias filter): aliasing is
the very mechanism that makes the lower rates carry distinct information, so
filtering it away would defeat the point.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ParseError

_RATE_REL_TOL = 1e-6


@dataclass
class Recording:
    """One maximal contiguous same-subject same-label segment."""

    subject_id: str
    label: int
    sampling_rate_hz: float
    data: np.ndarray  # (channels, samples)


@dataclass
class SensorWindow:
    subject_id: str
    label: int
    sampling_rate_hz: float
    data: np.ndarray  # (channels, samples)


@dataclass
class MultiRateSample:
    """One window materialized at strictly decreasing sampling rates."""

    label: int
    subject_id: str
    windows: list


@dataclass
class SyntheticSpec:
    """Recipe for a seeded imbalanced dataset of sinusoid-signature classes.

    ``signatures[c]`` is a list of (frequency_hz, amplitude) pairs; every
    window of class ``c`` is the sum of those sinusoids with fresh random
    phases per channel, plus white Gaussian noise.
    """

    n_classes: int
    proportions: tuple
    signatures: tuple  # per class: tuple of (freq_hz, amplitude)
    noise_std: float
    base_rate_hz: float
    window_seconds: float
    total: int
    n_subjects: int
    n_channels: int = 3

    def __post_init__(self):
        if self.n_classes < 2:
            raise ParameterError("synthetic spec needs at least 2 classes")
        if len(self.proportions) != self.n_classes:
            raise ParameterError("one proportion per class required")
        if len(self.signatures) != self.n_classes:
            raise ParameterError("one frequency signature per class required")
        if abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ParameterError(
                f"proportions sum to {sum(self.proportions)!r}, expected 1"
            )
        nyquist = self.base_rate_hz / 2.0
        for sig in self.signatures:
            for freq, _amp in sig:
                if not 0 < freq < nyquist:
                    raise ParameterError(
                        f"signature frequency {freq} Hz outside (0, {nyquist})"
                    )


@dataclass
class Dataset:
    """Stacked windows sharing one sampling rate and channel layout."""

    X: np.ndarray  # (N, channels, samples)
    y: np.ndarray  # (N,) dense class indices
    subjects: np.ndarray  # (N,) subject ids
    label_names: list
    base_rate_hz: float

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_classes(self):
        return len(self.label_names)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            X=self.X[idx],
            y=self.y[idx],
            subjects=self.subjects[idx],
            label_names=self.label_names,
            base_rate_hz=self.base_rate_hz,
        )


@dataclass
class SplitPlan:
    scheme: str  # "loso" | "stratified"
    k: int = 5
    seed: int = 0


@dataclass
class Fold:
    fold_id: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    warnings: list = field(default_factory=list)


# -- ingestion ----------------------------------------------------------------


def load_recordings(path, label_order=None):
    """Parse a recordings CSV into segments plus the label table.

    Returns ``(recordings, label_names)``. Labels map to dense indices in
    first-appearance order unless ``label_order`` pins the table up front.
    """
    label_names = list(label_order) if label_order is not None else []
    label_index = {name: i for i, name in enumerate(label_names)}
    recordings = []

    seg_rows = []
    seg_times = []
    seg_key = None
    seg_start_line = 0

    def flush():
        if not seg_rows:
            return
        subject, label_name = seg_key
        rate = _infer_rate(seg_times, seg_start_line)
        data = np.array(seg_rows, dtype=np.float64).T
        recordings.append(
            Recording(
                subject_id=subject,
                label=label_index[label_name],
                sampling_rate_hz=rate,
                data=np.ascontiguousarray(data),
            )
        )

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", line=1)
        header = [h.strip() for h in header]
        if header[:3] != ["subject", "label", "t"] or len(header) < 4:
            raise ParseError(
                "header must be subject,label,t plus at least one channel column",
                line=1,
            )
        n_channels = len(header) - 3

        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + n_channels:
                raise ParseError(
                    f"expected {3 + n_channels} columns, got {len(row)}",
                    line=lineno,
                )
            subject, label_name = row[0].strip(), row[1].strip()
            try:
                t = float(row[2])
                values = [float(v) for v in row[3:]]
            except ValueError:
                raise ParseError("non-numeric cell", line=lineno) from None
            if not np.isfinite(t) or not all(np.isfinite(v) for v in values):
                raise ParseError("non-finite value", line=lineno)
            if label_name not in label_index:
                if label_order is not None:
                    raise ParseError(
                        f"label {label_name!r} not in the provided label table",
                        line=lineno,
                    )
                label_index[label_name] = len(label_names)
                label_names.append(label_name)

            key = (subject, label_name)
            if key != seg_key:
                flush()
                seg_rows, seg_times = [], []
                seg_key = key
                seg_start_line = lineno
            elif t <= seg_times[-1]:
                raise ParseError(
                    "non-monotone timestamp within a segment", line=lineno
                )
            seg_rows.append(values)
            seg_times.append(t)
    flush()
    return recordings, label_names


def _infer_rate(times, start_line):
    if len(times) < 2:
        raise ParseError(
            "segment too short to infer a sampling rate", line=start_line
        )
    diffs = np.diff(np.asarray(times))
    dt = diffs[0]
    if np.any(np.abs(diffs - dt) > _RATE_REL_TOL * abs(dt)):
        bad = int(np.argmax(np.abs(diffs - dt) > _RATE_REL_TOL * abs(dt)))
        raise ParseError(
            "non-uniform timestamp spacing within a segment",
            line=start_line + 1 + bad,
        )
    return 1.0 / dt


def write_label_table(path, label_names):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "index"])
        for i, name in enumerate(label_names):
            writer.writerow([name, i])


def read_label_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["label", "index"]:
            raise ParseError("label table header must be label,index", line=1)
        pairs = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                pairs.append((row[0], int(row[1])))
            except (IndexError, ValueError):
                raise ParseError("malformed label table row", line=lineno) from None
    pairs.sort(key=lambda p: p[1])
    if [i for _, i in pairs] != list(range(len(pairs))):
        raise ParseError("label table indices must be dense 0..M-1")
    return [name for name, _ in pairs]


# -- windowing and decimation -------------------------------------------------


def make_windows(recordings, window_seconds, stride_seconds=None, seed=None):
    """Cut fixed-duration windows; partial tails are discarded.

    Default stride equals the window length (non-overlapping). Passing a
    ``seed`` draws one deterministic start offset per recording in
    ``[0, stride)``, the sliding-window mode.
    """
    if window_seconds <= 0:
        raise ParameterError("window_seconds must be positive")
    if stride_seconds is None:
        stride_seconds = window_seconds
    if stride_seconds <= 0:
        raise ParameterError("stride_seconds must be positive")
    rng = np.random.default_rng((seed, 11)) if seed is not None else None

    windows = []
    for rec in recordings:
        size = int(round(window_seconds * rec.sampling_rate_hz))
        step = max(1, int(round(stride_seconds * rec.sampling_rate_hz)))
        offset = int(rng.integers(0, step)) if rng is not None else 0
        n_samples = rec.data.shape[1]
        start = offset
        while start + size <= n_samples:
            windows.append(
                SensorWindow(
                    subject_id=rec.subject_id,
                    label=rec.label,
                    sampling_rate_hz=rec.sampling_rate_hz,
                    data=np.ascontiguousarray(rec.data[:, start : start + size]),
                )
            )
            start += step
    return windows


def decimate(x, factor):
    """Keep every ``factor``-th sample along the trailing (time) axis."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ParameterError(f"decimation factor must be a positive integer, got {factor!r}")
    return np.ascontiguousarray(x[..., ::factor])


def build_multirate(window, decimation_factors):
    """Materialize one window at every configured rate."""
    factors = list(decimation_factors)
    if not factors:
        raise ParameterError("at least one decimation factor required")
    for a, b in zip(factors, factors[1:]):
        if b <= a:
            raise ParameterError("decimation factors must be strictly increasing")
    views = []
    for s in factors:
        views.append(
            SensorWindow(
                subject_id=window.subject_id,
                label=window.label,
                sampling_rate_hz=window.sampling_rate_hz / s,
                data=decimate(window.data, s),
            )
        )
    return MultiRateSample(
        label=window.label, subject_id=window.subject_id, windows=views
    )


def windows_to_dataset(windows, label_names):
    """Stack same-rate, same-channel-count windows into a Dataset."""
    if not windows:
        raise ParameterError("no windows to stack")
    rate = windows[0].sampling_rate_hz
    shape = windows[0].data.shape
    for w in windows:
        if w.data.shape != shape or w.sampling_rate_hz != rate:
            raise ParameterError("windows disagree on shape or sampling rate")
    return Dataset(
        X=np.stack([w.data for w in windows]),
        y=np.array([w.label for w in windows], dtype=np.int64),
        subjects=np.array([w.subject_id for w in windows], dtype=object),
        label_names=list(label_names),
        base_rate_hz=rate,
    )


# -- synthetic generation -----------------------------------------------------


def largest_remainder_counts(proportions, total):
    """Integer apportionment summing exactly to ``total``.

    Floors each share, then hands the leftover units to the largest
    fractional remainders, ties broken toward the lower class index.
    """
    shares = [p * total for p in proportions]
    counts = [int(np.floor(s)) for s in shares]
    leftover = total - sum(counts)
    order = sorted(
        range(len(shares)), key=lambda i: (-(shares[i] - counts[i]), i)
    )
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def generate_synthetic(spec, seed):
    """Seeded imbalanced dataset of sinusoid-signature windows.

    A pure function of ``(spec, seed)``: per class, ``largest-remainder``
    many windows, each the class's sinusoids with independent uniform phases
    per channel plus Gaussian noise; subjects rotate round-robin inside each
    class.
    """
    counts = largest_remainder_counts(spec.proportions, spec.total)
    n_samples = int(round(spec.window_seconds * spec.base_rate_hz))
    t = np.arange(n_samples) / spec.base_rate_hz
    rng = np.random.default_rng((seed, 17))

    windows = []
    for c, count in enumerate(counts):
        sig = spec.signatures[c]
        for j in range(count):
            x = np.zeros((spec.n_channels, n_samples))
            for freq, amp in sig:
                phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.n_channels)
                x += amp * np.sin(
                    2.0 * np.pi * freq * t[None, :] + phases[:, None]
                )
            if spec.noise_std > 0:
                x += spec.noise_std * rng.standard_normal(x.shape)
            windows.append(
                SensorWindow(
                    subject_id=f"s{j % spec.n_subjects}",
                    label=c,
                    sampling_rate_hz=spec.base_rate_hz,
                    data=x,
                )
            )
    return windows


# -- splits and imbalance transforms ------------------------------------------


def split(dataset, plan):
    """Cross-validation folds as index triples (train, val, test)."""
    if plan.scheme == "loso":
        return _split_loso(dataset)
    if plan.scheme == "stratified":
        return _split_stratified(dataset, plan.k, plan.seed)
    raise ParameterError(f"unknown split scheme {plan.scheme!r}")


def _first_appearance_order(values):
    seen = {}
    for v in values:
        if v not in seen:
            seen[v] = len(seen)
    return sorted(seen, key=seen.get)


def _split_loso(dataset):
    subjects = _first_appearance_order(dataset.subjects)
    if len(subjects) < 3:
        raise ParameterError(
            f"leave-one-subject-out needs at least 3 subjects, got {len(subjects)}"
        )
    by_subject = {
        s: np.flatnonzero(dataset.subjects == s) for s in subjects
    }
    folds = []
    n = len(subjects)
    for i, test_subject in enumerate(subjects):
        val_subject = subjects[(i + 1) % n]
        train_subjects = [
            s for s in subjects if s not in (test_subject, val_subject)
        ]
        train_idx = np.sort(np.concatenate([by_subject[s] for s in train_subjects]))
        fold = Fold(
            fold_id=i,
            train_idx=train_idx,
            val_idx=np.sort(by_subject[val_subject]),
            test_idx=np.sort(by_subject[test_subject]),
        )
        present = set(np.unique(dataset.y[train_idx]).tolist())
        for c in range(dataset.n_classes):
            if c not in present:
                fold.warnings.append(
                    f"class {dataset.label_names[c]} absent from training split"
                )
        folds.append(fold)
    return folds


def _split_stratified(dataset, k, seed):
    if k < 3:
        raise ParameterError("stratified splitting needs k >= 3 for train/val/test")
    counts = np.bincount(dataset.y, minlength=dataset.n_classes)
    for c, count in enumerate(counts):
        if count < k:
            raise ParameterError(
                f"class {dataset.label_names[c]} has {count} samples, fewer than k={k}"
            )
    rng = np.random.default_rng((seed, 23))
    groups = [[] for _ in range(k)]
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.y == c)
        idx = idx[rng.permutation(len(idx))]
        for j, sample in enumerate(idx):
            groups[j % k].append(sample)
    groups = [np.sort(np.array(g, dtype=np.int64)) for g in groups]

    folds = []
    for i in range(k):
        val = (i + 1) % k
        train_groups = [g for j, g in enumerate(groups) if j not in (i, val)]
        folds.append(
            Fold(
                fold_id=i,
                train_idx=np.sort(np.concatenate(train_groups)),
                val_idx=groups[val],
                test_idx=groups[i],
            )
        )
    return folds


def rebalance_minority(dataset, keep_fraction, minority_threshold, seed):
    """Shrink minority classes to sharpen the imbalance, deterministically.

    Classes whose count falls below ``minority_threshold * max_count`` keep
    ``round(count * keep_fraction)`` randomly chosen samples; the rest of the
    dataset is untouched and original ordering is preserved.
    """
    if not 0 < keep_fraction <= 1:
        raise ParameterError("keep_fraction must be in (0, 1]")
    counts = np.bincount(dataset.y, minlength=dataset.n_classes)
    max_count = counts.max()
    rng = np.random.default_rng((seed, 29))
    keep = np.ones(len(dataset), dtype=bool)
    for c in range(dataset.n_classes):
        # draw per class unconditionally so rng use doesn't depend on the cut
        idx = np.flatnonzero(dataset.y == c)
        picked = rng.permutation(len(idx))
        if counts[c] < minority_threshold * max_count:
            n_keep = int(round(counts[c] * keep_fraction))
            keep[idx] = False
            keep[idx[np.sort(picked[:n_keep])]] = True
    return dataset.subset(np.flatnonzero(keep))


def class_stats(dataset):
    """Per-class counts and the max/min imbalance ratio."""
    if len(dataset) == 0:
        raise ParameterError("dataset is empty")
    counts = np.bincount(dataset.y, minlength=dataset.n_classes)
    low = counts.min()
    ratio = float(counts.max()) / low if low > 0 else float("inf")
    return counts, ratio
