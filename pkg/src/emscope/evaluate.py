"""Evaluation procedures: stratified k-fold cross-validation, random-search
hyperparameter optimization, grid leakage mapping, and whole-program code
recognition.

Fold assignment depends only on (seed, labels, example content): examples
are keyed by a stable BLAKE2b hash of their feature bytes, sorted per class,
then dealt into folds after a seeded shuffle. Reordering the input rows
therefore never changes the folds. All per-item work (folds, trials, grid
cells) runs on seeds derived from the master seed, so results are identical
under any execution order or thread count.
"""

from __future__ import annotations

import hashlib
from collections.abc import Callable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import BandSpec, band_feature_matrix, default_band_spec
from .forest import ForestParams, knn_predict_matrix, predict_matrix, train_forest, train_tsf
from .parallel import par_map
from .rng import child_rng, child_seed
from .segment import TriggerSpec, detect_triggers, extract_windows
from .simulate import SimConfig
from .trace import LabeledDataset, Trace, format_float, split_size

Trainer = Callable[[LabeledDataset, int], Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class ConfusionMatrix:
    """Square count matrix indexed [true class][predicted class]."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if counts.shape != (k, k):
            raise DataError("ConfusionMatrix: counts must be square over class_names")
        if np.any(counts < 0):
            raise DataError("ConfusionMatrix: negative count")
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        total = self.total
        if total == 0:
            raise DataError("ConfusionMatrix: empty matrix has no accuracy")
        return float(np.trace(self.counts)) / total

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def render_text(self) -> str:
        width = max(5, max(len(n) for n in self.class_names) + 1)
        head = " " * width + "".join(f"{n:>{width}}" for n in self.class_names)
        lines = [head]
        for i, name in enumerate(self.class_names):
            row = "".join(f"{int(c):>{width}}" for c in self.counts[i])
            lines.append(f"{name:>{width}}" + row)
        return "\n".join(lines)


def confusion_from_predictions(
    y_true: np.ndarray, y_pred: np.ndarray, class_names: tuple[str, ...]
) -> ConfusionMatrix:
    k = len(class_names)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return ConfusionMatrix(counts, class_names)


@dataclass(frozen=True)
class LeakageMap:
    """Per-grid-cell recognition accuracy, row-major."""

    rows: int
    cols: int
    accuracy: np.ndarray

    def __post_init__(self) -> None:
        acc = np.asarray(self.accuracy, dtype=np.float64)
        if acc.shape != (self.rows, self.cols):
            raise DataError("LeakageMap: accuracy shape must be (rows, cols)")
        if np.any(acc < 0) or np.any(acc > 1):
            raise DataError("LeakageMap: accuracies must lie in [0, 1]")
        acc.flags.writeable = False
        object.__setattr__(self, "accuracy", acc)

    def argmax_cell(self) -> tuple[int, int]:
        flat = int(np.argmax(self.accuracy))  # row-major, first max wins
        return flat // self.cols, flat % self.cols


@dataclass(frozen=True)
class SearchSpace:
    """Hyperparameter values to sample: each entry is a list of choices or
    an inclusive integer (low, high) range."""

    params: dict[str, list | tuple[int, int]]
    n_iterations: int

    def __post_init__(self) -> None:
        if self.n_iterations < 1:
            raise DataError("SearchSpace: n_iterations must be >= 1")
        if not self.params:
            raise DataError("SearchSpace: empty parameter space")
        for name, spec in self.params.items():
            if isinstance(spec, tuple):
                if len(spec) != 2 or spec[0] > spec[1]:
                    raise DataError(f"SearchSpace: bad range for {name!r}")
            elif not isinstance(spec, list) or not spec:
                raise DataError(f"SearchSpace: empty value set for {name!r}")


# ---------------------------------------------------------------------------
# cross-validation


def _row_hashes(features: np.ndarray) -> np.ndarray:
    out = np.empty(features.shape[0], dtype=np.uint64)
    for i in range(features.shape[0]):
        digest = hashlib.blake2b(features[i].tobytes(), digest_size=8).digest()
        out[i] = int.from_bytes(digest, "little")
    return out


def fold_assignments(ds: LabeledDataset, k: int, seed: int) -> np.ndarray:
    """Stratified fold ids in [0, k); invariant under row reordering."""
    if k < 2:
        raise DataError("fold_assignments: k must be >= 2")
    hashes = _row_hashes(ds.features)
    folds = np.empty(ds.n_examples, dtype=np.int64)
    for ci, name in enumerate(ds.class_names):
        ids = np.flatnonzero(ds.labels == ci)
        if ids.size < k:
            raise DataError(f"class {name!r} has {ids.size} examples, fewer than k={k}")
        canonical = ids[np.argsort(hashes[ids], kind="stable")]
        shuffled = canonical[child_rng(seed, "fold", ci).permutation(ids.size)]
        folds[shuffled] = np.arange(ids.size) % k
    return folds


def kfold_cv(ds: LabeledDataset, k: int, trainer: Trainer, seed: int) -> ConfusionMatrix:
    """Stratified k-fold cross-validation; the matrix accumulates every
    fold's held-out predictions."""
    folds = fold_assignments(ds, k, seed)

    def run_fold(f: int) -> tuple[np.ndarray, np.ndarray]:
        test_ids = np.flatnonzero(folds == f)
        train_ids = np.flatnonzero(folds != f)
        predictor = trainer(ds.subset(train_ids), child_seed(seed, "train", f))
        return ds.labels[test_ids], predictor(ds.features[test_ids])

    k_classes = len(ds.class_names)
    counts = np.zeros((k_classes, k_classes), dtype=np.int64)
    for y_true, y_pred in par_map(run_fold, range(k)):
        np.add.at(counts, (y_true, np.asarray(y_pred)), 1)
    return ConfusionMatrix(counts, ds.class_names)


def forest_trainer(params: ForestParams) -> Trainer:
    def trainer(train_ds: LabeledDataset, seed: int):
        model = train_forest(train_ds, params, seed)
        return lambda X: predict_matrix(model, X)[0]

    return trainer


def tsf_trainer(params: ForestParams) -> Trainer:
    def trainer(train_ds: LabeledDataset, seed: int):
        model = train_tsf(train_ds, params, seed)
        return lambda X: predict_matrix(model, X)[0]

    return trainer


def knn_trainer(k_neighbors: int) -> Trainer:
    def trainer(train_ds: LabeledDataset, seed: int):
        return lambda X: knn_predict_matrix(train_ds, X, k_neighbors)

    return trainer


# ---------------------------------------------------------------------------
# random-search hyperparameter optimization


def _sample_params(space: SearchSpace, rng: np.random.Generator) -> dict:
    out = {}
    for name in sorted(space.params):
        spec = space.params[name]
        if isinstance(spec, tuple):
            out[name] = int(rng.integers(spec[0], spec[1] + 1))
        else:
            out[name] = spec[int(rng.integers(len(spec)))]
    return out


def random_search(
    space: SearchSpace,
    ds: LabeledDataset,
    trainer_family: Callable[[dict], Trainer],
    cv_k: int,
    seed: int,
) -> tuple[dict, float, list[tuple[dict, float]]]:
    """Uniformly sample parameter points, score each by k-fold CV accuracy,
    return the argmax (earlier trial wins ties) plus the full trial log."""

    def run_trial(t: int) -> tuple[dict, float]:
        params = _sample_params(space, child_rng(seed, "trial", t))
        cm = kfold_cv(ds, cv_k, trainer_family(params), child_seed(seed, "cv", t))
        return params, cm.accuracy

    trials = par_map(run_trial, range(space.n_iterations))
    best_params, best_acc = trials[0]
    for params, acc in trials[1:]:
        if acc > best_acc:
            best_params, best_acc = params, acc
    return best_params, best_acc, trials


# ---------------------------------------------------------------------------
# grid leakage scan


def grid_leakage_scan(
    cell_datasets: Mapping[tuple[int, int], LabeledDataset],
    tsf_params: ForestParams,
    seed: int,
    cv_k: int = 4,
) -> LeakageMap:
    """Per-cell time-series-forest CV accuracy over the probe grid."""
    if not cell_datasets:
        raise DataError("grid_leakage_scan: no cell datasets")
    rows = max(r for r, _ in cell_datasets) + 1
    cols = max(c for _, c in cell_datasets) + 1
    classes = None
    for (r, c), ds in cell_datasets.items():
        if classes is None:
            classes = ds.class_names
        elif ds.class_names != classes:
            raise DataError(f"grid_leakage_scan: cell ({r}, {c}) has different classes")
    missing = [(r, c) for r in range(rows) for c in range(cols) if (r, c) not in cell_datasets]
    if missing:
        raise DataError(f"grid_leakage_scan: missing cell data {missing[:4]}")

    cells = [(r, c) for r in range(rows) for c in range(cols)]

    def run_cell(cell: tuple[int, int]) -> float:
        r, c = cell
        cm = kfold_cv(cell_datasets[cell], cv_k, tsf_trainer(tsf_params), child_seed(seed, "cell", r, c))
        return cm.accuracy

    acc = np.asarray(par_map(run_cell, cells)).reshape(rows, cols)
    return LeakageMap(rows, cols, acc)


# ---------------------------------------------------------------------------
# code recognition


def code_recognition(
    traces: list[Trace],
    program: list[str] | tuple[str, ...],
    cfg: SimConfig,
    fraction: float,
    params: ForestParams,
    seed: int,
    bands: BandSpec | None = None,
    template_ds: LabeledDataset | None = None,
    pad_factor: int = 512,
) -> ConfusionMatrix:
    """Recognize every instruction slot of held-out program runs.

    Each trace is trigger-segmented into one window per program slot; the
    training fraction of traces (plus the optional single-instruction
    template set) trains a band-feature forest, which then classifies every
    slot of the remaining traces. Splitting happens at trace level so that
    no run contributes windows to both sides.
    """
    program = tuple(program)
    if len(set(program)) < 2:
        raise DataError("code_recognition: program needs at least 2 distinct mnemonics")
    if not traces:
        raise DataError("code_recognition: no traces")
    bands = bands or default_band_spec()
    cycles = [cfg.profile(m).cycles for m in program]
    spec = TriggerSpec(min_gap_samples=cfg.samples_per_cycle * cfg.trigger_cycles)

    names = set(program)
    if template_ds is not None:
        names.update(template_ds.class_names)
    class_names = tuple(sorted(names))
    label_of = {name: i for i, name in enumerate(class_names)}
    slot_labels = np.asarray([label_of[m] for m in program])

    all_windows: list[np.ndarray] = []
    for ti, trace in enumerate(traces):
        try:
            triggers = detect_triggers(trace, spec)
            if triggers.size != len(program) + 1:
                raise DataError(
                    f"expected {len(program) + 1} triggers, found {triggers.size}"
                )
            windows = extract_windows(trace, triggers, cycles, spec.threshold_fraction)
        except DataError as exc:
            raise DataError(f"trace {ti}: segmentation failed: {exc}")
        all_windows.extend(w.samples for w in windows)

    # batch the FFTs by window length (slots of equal cycle count)
    n_slots = len(program)
    n_feat = len(bands)
    rows = np.empty((len(all_windows), n_feat))
    by_len: dict[int, list[int]] = {}
    for i, w in enumerate(all_windows):
        by_len.setdefault(w.size, []).append(i)
    for _, idx in sorted(by_len.items()):
        mat = np.vstack([all_windows[i] for i in idx])
        rows[idx] = band_feature_matrix(mat, traces[0].sample_rate_hz, bands, pad_factor)
    per_trace_rows = [rows[ti * n_slots : (ti + 1) * n_slots] for ti in range(len(traces))]

    n = len(traces)
    perm = child_rng(seed, "trace-split").permutation(n)
    n_train = split_size(n, fraction)
    train_traces = set(perm[:n_train].tolist())

    train_rows = [per_trace_rows[i] for i in range(n) if i in train_traces]
    test_rows = [per_trace_rows[i] for i in range(n) if i not in train_traces]
    X_train = np.vstack(train_rows)
    y_train = np.tile(slot_labels, len(train_rows))
    if template_ds is not None:
        remap = np.asarray([label_of[name] for name in template_ds.class_names])
        X_train = np.vstack([X_train, template_ds.features])
        y_train = np.concatenate([y_train, remap[template_ds.labels]])
    train_ds = LabeledDataset(X_train, y_train, class_names)

    model = train_forest(train_ds, params, child_seed(seed, "train"))
    X_test = np.vstack(test_rows)
    y_test = np.tile(slot_labels, len(test_rows))
    y_pred, _ = predict_matrix(model, X_test)
    return confusion_from_predictions(y_test, y_pred, class_names)


# ---------------------------------------------------------------------------
# report writers (deterministic bytes: no timestamps, fixed formatting)


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("true_class," + ",".join(cm.class_names) + "\n")
        for i, name in enumerate(cm.class_names):
            fh.write(name + "," + ",".join(str(int(c)) for c in cm.counts[i]) + "\n")


def read_confusion_csv(path) -> ConfusionMatrix:
    lines = Path(path).read_text().splitlines()
    names = tuple(lines[0].split(",")[1:])
    counts = []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(",")
        counts.append([int(v) for v in parts[1:]])
    return ConfusionMatrix(np.asarray(counts), names)


def write_leakage_csv(lmap: LeakageMap, path) -> None:
    with open(path, "w", newline="") as fh:
        for r in range(lmap.rows):
            fh.write(",".join(format_float(v) for v in lmap.accuracy[r]) + "\n")


def write_leakage_ppm(lmap: LeakageMap, path, scale: int = 24) -> None:
    """Grayscale P6 image, accuracy 0 -> black, 1 -> white; each cell is a
    scale x scale pixel block."""
    gray = np.clip(np.rint(lmap.accuracy * 255), 0, 255).astype(np.uint8)
    img = np.repeat(np.repeat(gray, scale, axis=0), scale, axis=1)
    rgb = np.stack([img, img, img], axis=2)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.tobytes())


def write_trials_csv(trials: list[tuple[dict, float]], path) -> None:
    if not trials:
        raise DataError("write_trials_csv: empty trial log")
    names = sorted(trials[0][0])
    with open(path, "w", newline="") as fh:
        fh.write("trial," + ",".join(names) + ",accuracy\n")
        for t, (params, acc) in enumerate(trials):
            vals = []
            for name in names:
                v = params[name]
                vals.append(format_float(v) if isinstance(v, float) else str(v))
            fh.write(f"{t}," + ",".join(vals) + f",{format_float(acc)}\n")
