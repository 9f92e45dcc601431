"""From-scratch ensemble classifiers.

* CART decision trees split on (feature, threshold) pairs minimizing
  weighted Gini impurity; thresholds are midpoints of consecutive distinct
  sorted values. An impure node is split even at zero impurity gain as long
  as some feature varies, so an unrestricted tree always fits consistent
  training data exactly.
* The random forest bags bootstrap resamples, one derived RNG stream per
  tree, which makes training schedule-independent and bit-reproducible.
* The time-series forest draws random intervals per tree (uniform over all
  valid (start, length) pairs), summarizes each as (mean, std, slope), and
  grows a CART tree on those features; no bootstrap, sqrt feature subsets.
* k-NN classifies by majority over the k nearest z-scored Euclidean
  neighbors.

Ties break low everywhere (lowest feature index, lowest threshold, lowest
class index, lowest example index) so that every prediction is a pure
function of (data, params, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .errors import DataError
from .features import IntervalSums
from .parallel import par_map
from .rng import child_rng
from .trace import InstructionWindow, LabeledDataset


@dataclass
class TreeNode:
    """Internal node (feature_index/threshold/left/right) or leaf
    (class_counts set, children None)."""

    feature_index: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    class_counts: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return self.class_counts is not None

    def vote(self) -> int:
        return int(np.argmax(self.class_counts))


@dataclass(frozen=True)
class ForestParams:
    """Hyperparameters shared by the forest variants.

    min_interval / n_intervals apply to the time-series forest only;
    n_intervals defaults to round(sqrt(window length)) when unset.
    """

    n_estimators: int = 1000
    max_features: str | int = "sqrt"
    min_samples_leaf: int = 1
    max_depth: int | None = None
    min_interval: int = 2
    n_intervals: int | None = None

    def __post_init__(self) -> None:
        if self.n_estimators < 1:
            raise DataError("ForestParams: n_estimators must be >= 1")
        if isinstance(self.max_features, str):
            if self.max_features not in ("sqrt", "all"):
                raise DataError(f"ForestParams: unknown max_features {self.max_features!r}")
        elif int(self.max_features) < 1:
            raise DataError("ForestParams: integer max_features must be >= 1")
        if self.min_samples_leaf < 1:
            raise DataError("ForestParams: min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise DataError("ForestParams: max_depth must be >= 1 or None")
        if self.min_interval < 1:
            raise DataError("ForestParams: min_interval must be >= 1")
        if self.n_intervals is not None and self.n_intervals < 1:
            raise DataError("ForestParams: n_intervals must be >= 1 or None")


@dataclass(frozen=True)
class ForestModel:
    """Trained ensemble; immutable and safe for concurrent prediction.

    feature_kind "band" models consume tabular feature vectors of width
    n_features; "interval" models consume raw windows of length n_features
    and carry per-tree interval lists.
    """

    trees: tuple[TreeNode, ...]
    params: ForestParams
    class_names: tuple[str, ...]
    master_seed: int
    feature_kind: str
    n_features: int
    intervals: tuple[tuple[tuple[int, int], ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.feature_kind not in ("band", "interval"):
            raise DataError(f"ForestModel: unknown feature kind {self.feature_kind!r}")
        if len(self.trees) != self.params.n_estimators:
            raise DataError("ForestModel: tree count != n_estimators")
        if self.feature_kind == "interval":
            if self.intervals is None or len(self.intervals) != len(self.trees):
                raise DataError("ForestModel: interval models need per-tree intervals")
        elif self.intervals is not None:
            raise DataError("ForestModel: band models carry no intervals")


def _resolve_max_features(max_features: str | int, n_features: int) -> int:
    if max_features == "all":
        return n_features
    if max_features == "sqrt":
        return max(1, int(np.sqrt(n_features)))
    return min(n_features, int(max_features))


@njit(cache=True)
def _split_kernel(X, y, n_classes, min_samples_leaf):  # pragma: no cover - jitted
    """Best (column, lower value, upper value) over all columns of X by
    weighted Gini impurity.

    Scans columns in ascending order and boundaries in ascending value
    order, keeping a split only when strictly better, so ties resolve to
    the lowest column index and then the lowest threshold. The impurity of
    a candidate split is

        (n_left * (1 - sum_c (c_left/n_left)^2)
         + n_right * (1 - sum_c (c_right/n_right)^2)) / n

    evaluated sequentially per class; an exhaustive enumeration using the
    same expression reproduces every returned split bit-exactly.
    """
    n, m = X.shape
    best_w = np.inf
    best_col = -1
    best_lo = 0.0
    best_hi = 0.0
    tot = np.zeros(n_classes, np.int64)
    for i in range(n):
        tot[y[i]] += 1
    counts = np.zeros(n_classes, np.int64)
    for col in range(m):
        x = X[:, col].copy()
        order = np.argsort(x)
        counts[:] = 0
        for p in range(n - 1):
            counts[y[order[p]]] += 1
            lo = x[order[p]]
            hi = x[order[p + 1]]
            if lo < hi:
                ln = p + 1
                rn = n - ln
                if ln >= min_samples_leaf and rn >= min_samples_leaf:
                    sl = 0.0
                    sr = 0.0
                    for cls in range(n_classes):
                        pl = counts[cls] / ln
                        sl += pl * pl
                        pr = (tot[cls] - counts[cls]) / rn
                        sr += pr * pr
                    w = (ln * (1.0 - sl) + rn * (1.0 - sr)) / n
                    if w < best_w:
                        best_w = w
                        best_col = col
                        best_lo = lo
                        best_hi = hi
    return best_col, best_lo, best_hi


def _best_split(
    X: np.ndarray, y: np.ndarray, n_classes: int, min_samples_leaf: int
) -> tuple[int, float] | None:
    """Best (column, threshold) by weighted Gini; thresholds are midpoints
    of consecutive distinct sorted values. None when no valid split."""
    n = X.shape[0]
    if n < 2:
        return None
    col, lo, hi = _split_kernel(
        np.ascontiguousarray(X), y, n_classes, min_samples_leaf
    )
    if col < 0:
        return None
    return int(col), float(0.5 * (lo + hi))


def _grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    params: ForestParams,
    rng: np.random.Generator,
) -> TreeNode:
    n_features = X.shape[1]
    if n_features == 0:
        raise DataError("train_tree: dataset has zero features")
    m = _resolve_max_features(params.max_features, n_features)
    root = TreeNode()
    # stack discipline (left child popped first) fixes the rng draw order
    stack: list[tuple[TreeNode, np.ndarray, int]] = [(root, np.arange(y.size), 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = np.bincount(y[idx], minlength=n_classes)
        if (
            np.count_nonzero(counts) <= 1
            or idx.size < 2 * params.min_samples_leaf
            or (params.max_depth is not None and depth >= params.max_depth)
        ):
            node.class_counts = counts
            continue
        if m < n_features:
            candidates = np.sort(rng.choice(n_features, size=m, replace=False))
        else:
            candidates = np.arange(n_features)
        found = _best_split(X[idx][:, candidates], y[idx], n_classes, params.min_samples_leaf)
        if found is None:
            node.class_counts = counts
            continue
        node.feature_index = int(candidates[found[0]])
        node.threshold = found[1]
        node.left = TreeNode()
        node.right = TreeNode()
        mask = X[idx, node.feature_index] <= node.threshold
        stack.append((node.right, idx[~mask], depth + 1))
        stack.append((node.left, idx[mask], depth + 1))
    return root


def train_tree(ds: LabeledDataset, params: ForestParams, rng: np.random.Generator) -> TreeNode:
    """Grow a single CART tree on the dataset (no bootstrap)."""
    return _grow_tree(ds.features, ds.labels, len(ds.class_names), params, rng)


def train_forest(ds: LabeledDataset, params: ForestParams, seed: int) -> ForestModel:
    """Bagged forest: tree i trains on a bootstrap resample drawn from the
    derived stream (seed, "tree", i)."""
    counts = ds.class_counts()
    empty = [name for name, c in zip(ds.class_names, counts) if c == 0]
    if empty:
        raise DataError(f"train_forest: empty classes {empty}")
    if np.count_nonzero(counts) < 2:
        raise DataError("train_forest: need at least 2 classes")
    X, y, k = ds.features, ds.labels, len(ds.class_names)
    n = y.size

    def build(i: int) -> TreeNode:
        rng = child_rng(seed, "tree", i)
        boot = rng.integers(0, n, size=n)
        return _grow_tree(X[boot], y[boot], k, params, rng)

    trees = par_map(build, range(params.n_estimators))
    return ForestModel(
        trees=tuple(trees),
        params=params,
        class_names=ds.class_names,
        master_seed=seed,
        feature_kind="band",
        n_features=ds.n_features,
    )


def _draw_intervals(
    rng: np.random.Generator, length: int, n_intervals: int, min_interval: int
) -> tuple[tuple[int, int], ...]:
    """Uniform draw over all valid (start, length) pairs with
    length >= min_interval and start + length <= window length."""
    lengths = np.arange(min_interval, length + 1)
    weights = length - lengths + 1
    cum = np.concatenate(([0], np.cumsum(weights)))
    us = rng.integers(int(cum[-1]), size=n_intervals)
    js = np.searchsorted(cum, us, side="right") - 1
    starts = us - cum[js]
    return tuple(zip(starts.tolist(), lengths[js].tolist()))


def _windows_matrix(windows: list[InstructionWindow]) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    if not windows:
        raise DataError("train_tsf: no windows")
    if any(w.label is None for w in windows):
        raise DataError("train_tsf: every window needs a label")
    lengths = {len(w) for w in windows}
    if len(lengths) != 1:
        raise DataError(f"train_tsf: windows must share one length, got {sorted(lengths)}")
    names = tuple(sorted({w.label for w in windows}))
    index = {nm: i for i, nm in enumerate(names)}
    X = np.vstack([w.samples for w in windows])
    y = np.asarray([index[w.label] for w in windows])
    return X, y, names


def train_tsf(
    windows: list[InstructionWindow] | LabeledDataset,
    params: ForestParams,
    seed: int,
) -> ForestModel:
    """Time-series forest over raw same-length windows.

    Accepts labeled InstructionWindows or a LabeledDataset whose feature
    rows are the raw samples. Each tree draws its own intervals and trains
    on the induced (mean, std, slope) features with sqrt feature subsets.
    """
    if isinstance(windows, LabeledDataset):
        X, y, names = windows.features, windows.labels, windows.class_names
    else:
        X, y, names = _windows_matrix(windows)
    if np.unique(y).size < 2:
        raise DataError("train_tsf: need at least 2 classes")
    length = X.shape[1]
    if length < params.min_interval:
        raise DataError(
            f"train_tsf: window length {length} shorter than min_interval {params.min_interval}"
        )
    n_intervals = params.n_intervals or max(1, round(np.sqrt(length)))
    tree_params = ForestParams(
        n_estimators=1,
        max_features="sqrt",
        min_samples_leaf=params.min_samples_leaf,
        max_depth=params.max_depth,
        min_interval=params.min_interval,
        n_intervals=n_intervals,
    )
    k = len(names)
    sums = IntervalSums(X)
    # draw every tree's intervals up front, then evaluate all of them in one
    # prefix-sum gather; each tree keeps consuming its own stream afterwards
    rngs = [child_rng(seed, "tree", i) for i in range(params.n_estimators)]
    per_tree = [
        _draw_intervals(rngs[i], length, n_intervals, params.min_interval)
        for i in range(params.n_estimators)
    ]
    all_feats = sums.features([iv for ivs in per_tree for iv in ivs])
    width = 3 * n_intervals

    def build(i: int) -> TreeNode:
        feats = all_feats[:, width * i : width * (i + 1)]
        return _grow_tree(feats, y, k, tree_params, rngs[i])

    trees = par_map(build, range(params.n_estimators))
    return ForestModel(
        trees=tuple(trees),
        params=params,
        class_names=names,
        master_seed=seed,
        feature_kind="interval",
        n_features=length,
        intervals=tuple(per_tree),
    )


# ---------------------------------------------------------------------------
# prediction


def _apply_tree(root: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.int64)
    stack: list[tuple[TreeNode, np.ndarray]] = [(root, np.arange(X.shape[0]))]
    while stack:
        node, idx = stack.pop()
        if idx.size == 0:
            continue
        if node.is_leaf:
            out[idx] = node.vote()
            continue
        mask = X[idx, node.feature_index] <= node.threshold
        stack.append((node.left, idx[mask]))
        stack.append((node.right, idx[~mask]))
    return out


def predict_matrix(model: ForestModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ensemble vote: (labels, probability matrix)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise DataError(
            f"predict: dimension mismatch (model expects {model.n_features}, got {X.shape})"
        )
    n = X.shape[0]
    k = len(model.class_names)
    counts = np.zeros((n, k), dtype=np.int64)
    rows = np.arange(n)
    if model.feature_kind == "interval":
        all_feats = IntervalSums(X).features([iv for ivs in model.intervals for iv in ivs])
        pos = 0
        for t, tree in enumerate(model.trees):
            width = 3 * len(model.intervals[t])
            counts[rows, _apply_tree(tree, all_feats[:, pos : pos + width])] += 1
            pos += width
    else:
        for tree in model.trees:
            counts[rows, _apply_tree(tree, X)] += 1
    probs = counts / len(model.trees)
    return counts.argmax(axis=1), probs


def predict(model: ForestModel, fv) -> tuple[int, np.ndarray]:
    """Classify one feature vector (or raw window for interval models):
    each tree votes its leaf majority, probabilities are vote shares,
    vote ties go to the lowest class index."""
    values = fv.values if hasattr(fv, "values") else np.asarray(fv, dtype=np.float64)
    labels, probs = predict_matrix(model, values[None, :])
    return int(labels[0]), probs[0]


# ---------------------------------------------------------------------------
# k-nearest neighbors


def _knn_stats(train: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)  # constant features carry no distance
    return mu, sd


def knn_predict_matrix(train: LabeledDataset, X: np.ndarray, k: int) -> np.ndarray:
    if k <= 0:
        raise DataError("knn_predict: k must be positive")
    if k > train.n_examples:
        raise DataError(f"knn_predict: k={k} exceeds {train.n_examples} training examples")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != train.n_features:
        raise DataError("knn_predict: dimension mismatch")
    mu, sd = _knn_stats(train)
    ref = (train.features - mu) / sd
    queries = (X - mu) / sd
    n_classes = len(train.class_names)
    out = np.empty(X.shape[0], dtype=np.int64)
    for i, q in enumerate(queries):
        d2 = ((ref - q) ** 2).sum(axis=1)
        nearest = np.argsort(d2, kind="stable")[:k]  # stable: index breaks ties
        votes = np.bincount(train.labels[nearest], minlength=n_classes)
        out[i] = int(np.argmax(votes))
    return out


def knn_predict(train: LabeledDataset, fv, k: int) -> int:
    """Majority class among the k nearest neighbors in z-scored feature
    space; distance ties prefer the lower example index, vote ties the
    lowest class index."""
    values = fv.values if hasattr(fv, "values") else np.asarray(fv, dtype=np.float64)
    return int(knn_predict_matrix(train, values[None, :], k)[0])


# ---------------------------------------------------------------------------
# model serialization (versioned binary, magic EMRF)

_MODEL_MAGIC = b"EMRF"
_MODEL_VERSION = 1
_KIND_CODE = {"band": 0, "interval": 1}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}
_MF_CODE = {"sqrt": (0, 0), "all": (1, 0)}


def _encode_tree(tree: TreeNode, n_classes: int, out: bytearray) -> None:
    stack = [tree]
    while stack:
        node = stack.pop()
        if node.is_leaf:
            out.append(1)
            counts = np.asarray(node.class_counts, dtype=np.int64)
            if counts.size != n_classes:
                raise DataError("serialize: leaf count width mismatch")
            out += counts.astype("<u4").tobytes()
        else:
            out.append(0)
            out += struct.pack("<I", node.feature_index)
            out += struct.pack("<d", node.threshold)
            stack.append(node.right)
            stack.append(node.left)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"model file truncated at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_tree(r: _Reader, n_classes: int) -> TreeNode:
    root = TreeNode()
    pending: list[TreeNode] = [root]  # nodes awaiting their preorder payload
    while pending:
        node = pending.pop()
        tag = r.u8()
        if tag == 1:
            counts = np.frombuffer(r.take(4 * n_classes), dtype="<u4").astype(np.int64)
            node.class_counts = counts
        elif tag == 0:
            (node.feature_index,) = r.unpack("<I")
            (node.threshold,) = r.unpack("<d")
            node.left = TreeNode()
            node.right = TreeNode()
            # preorder: left subtree streams first
            pending.append(node.right)
            pending.append(node.left)
        else:
            raise DataError(f"model file: unknown node tag {tag} at offset {r.pos - 1}")
    return root


def model_to_bytes(model: ForestModel) -> bytes:
    out = bytearray()
    out += _MODEL_MAGIC
    out.append(_MODEL_VERSION)
    out.append(_KIND_CODE[model.feature_kind])
    out += struct.pack("<Q", model.master_seed % 2**64)
    out += struct.pack("<I", model.n_features)
    p = model.params
    out += struct.pack("<I", p.n_estimators)
    mf_mode, mf_value = _MF_CODE.get(p.max_features, (2, 0))
    if mf_mode == 2:
        mf_value = int(p.max_features)
    out.append(mf_mode)
    out += struct.pack("<I", mf_value)
    out += struct.pack("<I", p.min_samples_leaf)
    out += struct.pack("<i", -1 if p.max_depth is None else p.max_depth)
    out += struct.pack("<I", p.min_interval)
    out += struct.pack("<i", -1 if p.n_intervals is None else p.n_intervals)
    out += struct.pack("<H", len(model.class_names))
    for name in model.class_names:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw))
        out += raw
    out += struct.pack("<I", len(model.trees))
    n_classes = len(model.class_names)
    for t, tree in enumerate(model.trees):
        if model.feature_kind == "interval":
            ivs = model.intervals[t]
            out += struct.pack("<I", len(ivs))
            for start, length in ivs:
                out += struct.pack("<II", start, length)
        _encode_tree(tree, n_classes, out)
    return bytes(out)


def model_from_bytes(data: bytes) -> ForestModel:
    r = _Reader(data)
    if r.take(4) != _MODEL_MAGIC:
        raise DataError("model file: bad magic at offset 0")
    version = r.u8()
    if version != _MODEL_VERSION:
        raise DataError(f"model file: unknown version {version} at offset 4")
    kind = _KIND_NAME.get(r.u8())
    if kind is None:
        raise DataError("model file: unknown feature kind at offset 5")
    (master_seed,) = r.unpack("<Q")
    (n_features,) = r.unpack("<I")
    (n_estimators,) = r.unpack("<I")
    mf_mode = r.u8()
    (mf_value,) = r.unpack("<I")
    (msl,) = r.unpack("<I")
    (max_depth,) = r.unpack("<i")
    (min_interval,) = r.unpack("<I")
    (n_intervals,) = r.unpack("<i")
    (n_classes,) = r.unpack("<H")
    names = []
    for _ in range(n_classes):
        (ln,) = r.unpack("<H")
        names.append(r.take(ln).decode("utf-8"))
    (n_trees,) = r.unpack("<I")
    max_features: str | int
    if mf_mode == 0:
        max_features = "sqrt"
    elif mf_mode == 1:
        max_features = "all"
    else:
        max_features = mf_value
    params = ForestParams(
        n_estimators=n_estimators,
        max_features=max_features,
        min_samples_leaf=msl,
        max_depth=None if max_depth < 0 else max_depth,
        min_interval=min_interval,
        n_intervals=None if n_intervals < 0 else n_intervals,
    )
    trees = []
    intervals = []
    for _ in range(n_trees):
        if kind == "interval":
            (n_iv,) = r.unpack("<I")
            ivs = []
            for _ in range(n_iv):
                start, length = r.unpack("<II")
                ivs.append((start, length))
            intervals.append(tuple(ivs))
        trees.append(_decode_tree(r, n_classes))
    if r.pos != len(data):
        raise DataError(f"model file: {len(data) - r.pos} trailing bytes at offset {r.pos}")
    return ForestModel(
        trees=tuple(trees),
        params=params,
        class_names=tuple(names),
        master_seed=master_seed,
        feature_kind=kind,
        n_features=n_features,
        intervals=tuple(intervals) if kind == "interval" else None,
    )


def save_model(model: ForestModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> ForestModel:
    return model_from_bytes(Path(path).read_bytes())
