"""Frequency-domain feature extraction and discriminative band selection.

The classifier input is the mean FFT magnitude over a handful of narrow
frequency bands near the clock sub-harmonic at ~31.45 MHz (twice the 16 MHz
device clock minus ~0.55 MHz). Windows are short (16-48 samples at the
default rates), so spectra are zero-padded heavily before band averaging:
the default padding factor of 512 puts at least one bin inside every
0.05 MHz band at 250 MS/s.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .trace import InstructionWindow, LabeledDataset, format_float

DEFAULT_PAD_FACTOR = 512

# Band region reported by spectral profiling of the reference device: the
# 31.3-31.6 MHz stretch around the second clock sub-harmonic, split into six
# 0.05 MHz bands.
DEFAULT_BAND_LOW_HZ = 31.3e6
DEFAULT_BAND_HIGH_HZ = 31.6e6
DEFAULT_BAND_COUNT = 6


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


@dataclass(frozen=True)
class Spectrum:
    """One-sided magnitude spectrum; bins cover [0, Nyquist]."""

    bin_freqs_hz: np.ndarray
    magnitudes: np.ndarray

    def __post_init__(self) -> None:
        freqs = np.asarray(self.bin_freqs_hz, dtype=np.float64)
        mags = np.asarray(self.magnitudes, dtype=np.float64)
        if freqs.shape != mags.shape or freqs.ndim != 1 or freqs.size == 0:
            raise DataError("Spectrum: frequency and magnitude arrays must match")
        if np.any(np.diff(freqs) <= 0) or freqs[0] != 0.0:
            raise DataError("Spectrum: bin frequencies must ascend from 0")
        if not np.all(np.isfinite(mags)) or np.any(mags < 0):
            raise DataError("Spectrum: magnitudes must be finite and non-negative")
        freqs.flags.writeable = False
        mags.flags.writeable = False
        object.__setattr__(self, "bin_freqs_hz", freqs)
        object.__setattr__(self, "magnitudes", mags)

    @property
    def nyquist_hz(self) -> float:
        return float(self.bin_freqs_hz[-1])


@dataclass(frozen=True)
class BandSpec:
    """Sorted, pairwise-disjoint frequency bands [low, high)."""

    bands: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        bands = tuple((float(lo), float(hi)) for lo, hi in self.bands)
        if not bands:
            raise DataError("BandSpec: at least one band required")
        for lo, hi in bands:
            if not 0 <= lo < hi:
                raise DataError(f"BandSpec: invalid band [{lo}, {hi})")
        for (_, hi), (lo2, _) in zip(bands, bands[1:]):
            if lo2 < hi:
                raise DataError("BandSpec: bands must be sorted and disjoint")
        object.__setattr__(self, "bands", bands)

    def __len__(self) -> int:
        return len(self.bands)

    def to_file(self, path) -> None:
        with open(path, "w", newline="") as fh:
            for lo, hi in self.bands:
                fh.write(f"{format_float(lo)},{format_float(hi)}\n")

    @classmethod
    def from_file(cls, path) -> "BandSpec":
        bands = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataError(f"band file line {lineno} is not 'low_hz,high_hz'")
            try:
                bands.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise DataError(f"band file line {lineno}: unparseable frequency")
        return cls(tuple(bands))


def default_band_spec() -> BandSpec:
    width = (DEFAULT_BAND_HIGH_HZ - DEFAULT_BAND_LOW_HZ) / DEFAULT_BAND_COUNT
    return BandSpec(
        tuple(
            (DEFAULT_BAND_LOW_HZ + i * width, DEFAULT_BAND_LOW_HZ + (i + 1) * width)
            for i in range(DEFAULT_BAND_COUNT)
        )
    )


@dataclass(frozen=True)
class FeatureVector:
    """Per-band aggregated magnitudes (or raw samples for interval models)."""

    values: np.ndarray
    label: int | None = None

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size == 0 or not np.all(np.isfinite(vals)):
            raise DataError("FeatureVector: values must be finite and non-empty")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)


def _window_samples(window) -> np.ndarray:
    if isinstance(window, InstructionWindow):
        return window.samples
    arr = np.asarray(window, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError("fft_magnitude: window must be a non-empty 1-D sequence")
    return arr


def fft_length(n: int, pad_factor: int = DEFAULT_PAD_FACTOR) -> int:
    """Transform length: the window length itself when pad_factor == 1 (so
    bin-exact closed forms hold for any n), else the next power of two of
    n * pad_factor."""
    if pad_factor < 1:
        raise DataError("pad_factor must be >= 1")
    return n if pad_factor == 1 else next_pow2(n * pad_factor)


def fft_magnitude(window, sample_rate_hz: float, pad_factor: int = DEFAULT_PAD_FACTOR) -> Spectrum:
    """One-sided FFT magnitude, normalized by the window length so a
    unit-amplitude sinusoid centred on a bin reads 0.5 (DC reads its level)."""
    x = _window_samples(window)
    if not sample_rate_hz > 0:
        raise DataError("fft_magnitude: sample_rate_hz must be positive")
    n = x.size
    nfft = fft_length(n, pad_factor)
    mags = np.abs(np.fft.rfft(x, nfft)) / n
    freqs = np.fft.rfftfreq(nfft, d=1.0 / sample_rate_hz)
    return Spectrum(freqs, mags)


def band_features(spectrum: Spectrum, bands: BandSpec, agg: str = "mean") -> FeatureVector:
    """Aggregate magnitude per band over bins whose centre lies in [low, high)."""
    if agg not in ("mean", "max"):
        raise DataError(f"unknown band aggregation {agg!r}")
    freqs = spectrum.bin_freqs_hz
    values = []
    for lo, hi in bands.bands:
        if lo > spectrum.nyquist_hz:
            raise DataError(f"band [{lo}, {hi}) lies beyond Nyquist {spectrum.nyquist_hz}")
        sel = (freqs >= lo) & (freqs < hi)
        if not np.any(sel):
            raise DataError(f"band [{lo}, {hi}) contains no spectrum bins")
        chunk = spectrum.magnitudes[sel]
        values.append(chunk.mean() if agg == "mean" else chunk.max())
    return FeatureVector(np.asarray(values))


def band_feature_matrix(
    windows_matrix: np.ndarray,
    sample_rate_hz: float,
    bands: BandSpec,
    pad_factor: int = DEFAULT_PAD_FACTOR,
    agg: str = "mean",
) -> np.ndarray:
    """Vectorized band features for same-length windows (rows)."""
    m, n = windows_matrix.shape
    nfft = fft_length(n, pad_factor)
    freqs = np.fft.rfftfreq(nfft, d=1.0 / sample_rate_hz)
    mags = np.abs(np.fft.rfft(windows_matrix, nfft, axis=1)) / n
    cols = []
    for lo, hi in bands.bands:
        sel = (freqs >= lo) & (freqs < hi)
        if not np.any(sel):
            raise DataError(f"band [{lo}, {hi}) contains no spectrum bins")
        chunk = mags[:, sel]
        cols.append(chunk.mean(axis=1) if agg == "mean" else chunk.max(axis=1))
    return np.stack(cols, axis=1)


def windows_to_dataset(
    windows: list[InstructionWindow],
    sample_rate_hz: float,
    bands: BandSpec,
    class_names: tuple[str, ...] | None = None,
    pad_factor: int = DEFAULT_PAD_FACTOR,
    agg: str = "mean",
) -> LabeledDataset:
    """Band-feature dataset from labeled windows; class order is sorted
    lexicographically unless given."""
    if not windows:
        raise DataError("windows_to_dataset: no windows")
    if any(w.label is None for w in windows):
        raise DataError("windows_to_dataset: every window needs a label")
    if class_names is None:
        class_names = tuple(sorted({w.label for w in windows}))
    index = {name: i for i, name in enumerate(class_names)}
    rows = []
    labels = []
    for w in windows:
        if w.label not in index:
            raise DataError(f"window label {w.label!r} not in class_names")
        spec = fft_magnitude(w, sample_rate_hz, pad_factor)
        rows.append(band_features(spec, bands, agg).values)
        labels.append(index[w.label])
    return LabeledDataset(np.vstack(rows), np.asarray(labels), class_names)


def select_bands(
    windows: list[InstructionWindow],
    sample_rate_hz: float,
    search_range: tuple[float, float],
    band_width_hz: float,
    k: int,
    pad_factor: int = DEFAULT_PAD_FACTOR,
    agg: str = "mean",
) -> BandSpec:
    """Pick the k most class-discriminative candidate bands.

    The search range is partitioned into contiguous bands of the given
    width; each candidate is scored by the Fisher ratio of its band feature
    (between-class variance over pooled within-class variance) and the top
    k are returned, ties broken toward lower frequency.
    """
    lo, hi = float(search_range[0]), float(search_range[1])
    if not 0 < lo < hi:
        raise DataError("select_bands: invalid search range")
    if band_width_hz <= 0:
        raise DataError("select_bands: band width must be positive")
    if any(w.label is None for w in windows):
        raise DataError("select_bands: every window needs a label")
    labels_str = [w.label for w in windows]
    names = sorted(set(labels_str))
    if len(names) < 2:
        raise DataError("select_bands: need at least 2 classes")
    for name in names:
        if labels_str.count(name) < 2:
            raise DataError(f"select_bands: class {name!r} needs at least 2 windows")
    n_cand = int((hi - lo) / band_width_hz + 1e-9)
    if n_cand < k:
        raise DataError(f"select_bands: only {n_cand} candidate bands for k={k}")
    cand = [(lo + i * band_width_hz, lo + (i + 1) * band_width_hz) for i in range(n_cand)]
    candidate_spec = BandSpec(tuple(cand))

    by_len: dict[int, list[int]] = {}
    for i, w in enumerate(windows):
        by_len.setdefault(len(w), []).append(i)
    feats = np.empty((len(windows), n_cand))
    for _, idx in sorted(by_len.items()):
        mat = np.vstack([windows[i].samples for i in idx])
        feats[idx] = band_feature_matrix(mat, sample_rate_hz, candidate_spec, pad_factor, agg)

    y = np.asarray([names.index(s) for s in labels_str])
    scores = np.empty(n_cand)
    overall = feats.mean(axis=0)
    between = np.zeros(n_cand)
    within = np.zeros(n_cand)
    total = len(windows)
    for ci in range(len(names)):
        rows = feats[y == ci]
        mu = rows.mean(axis=0)
        between += rows.shape[0] * (mu - overall) ** 2
        within += ((rows - mu) ** 2).sum(axis=0)
    between /= total
    within /= total
    for i in range(n_cand):
        if within[i] > 0:
            scores[i] = between[i] / within[i]
        else:
            scores[i] = np.inf if between[i] > 0 else 0.0

    order = sorted(range(n_cand), key=lambda i: (-scores[i], cand[i][0]))
    picked = sorted(order[:k], key=lambda i: cand[i][0])
    return BandSpec(tuple(cand[i] for i in picked))


def interval_features(window, intervals: list[tuple[int, int]]) -> np.ndarray:
    """Per interval (start, length): mean, population std, least-squares
    slope of the raw samples, concatenated in interval order."""
    x = _window_samples(window)
    out = np.empty(3 * len(intervals))
    for j, (start, length) in enumerate(intervals):
        if length < 1:
            raise DataError(f"interval ({start}, {length}) has zero length")
        if start < 0 or start + length > x.size:
            raise DataError(f"interval ({start}, {length}) outside window of {x.size}")
        seg = x[start : start + length]
        out[3 * j] = seg.mean()
        out[3 * j + 1] = seg.std()
        out[3 * j + 2] = _slope(seg)
    return out


def _slope(seg: np.ndarray) -> float:
    n = seg.size
    if n < 2:
        return 0.0
    t = np.arange(n) - (n - 1) / 2.0
    return float((t @ seg) / (t @ t))


class IntervalSums:
    """Prefix sums of a window matrix, reused across many interval sets
    (the time-series forest evaluates fresh intervals per tree)."""

    def __init__(self, windows_matrix: np.ndarray):
        X = np.asarray(windows_matrix, dtype=np.float64)
        if X.ndim != 2:
            raise DataError("IntervalSums: expected a 2-D window matrix")
        m, n = X.shape
        zero = np.zeros((m, 1))
        self.n = n
        self.s1 = np.concatenate([zero, np.cumsum(X, axis=1)], axis=1)
        self.s2 = np.concatenate([zero, np.cumsum(X * X, axis=1)], axis=1)
        self.st = np.concatenate([zero, np.cumsum(X * np.arange(n), axis=1)], axis=1)

    def features(self, intervals: list[tuple[int, int]]) -> np.ndarray:
        starts = np.asarray([s for s, _ in intervals], dtype=np.int64)
        lens = np.asarray([l for _, l in intervals], dtype=np.int64)
        if np.any(lens < 1) or np.any(starts < 0) or np.any(starts + lens > self.n):
            bad = next((s, l) for s, l in intervals if l < 1 or s < 0 or s + l > self.n)
            raise DataError(f"interval {bad} invalid for window length {self.n}")
        ends = starts + lens
        sums = self.s1[:, ends] - self.s1[:, starts]
        means = sums / lens
        var = np.maximum((self.s2[:, ends] - self.s2[:, starts]) / lens - means**2, 0.0)
        stds = np.sqrt(var)
        # centred slope: sum((t - (L-1)/2) x) / sum((t - (L-1)/2)^2), local t
        tx_local = (self.st[:, ends] - self.st[:, starts]) - starts * sums
        tc_x = tx_local - ((lens - 1) / 2.0) * sums
        denom = lens * (lens.astype(np.float64) ** 2 - 1.0) / 12.0
        slopes = np.divide(tc_x, denom, out=np.zeros_like(tc_x), where=denom > 0)
        out = np.empty((means.shape[0], 3 * len(intervals)))
        out[:, 0::3] = means
        out[:, 1::3] = stds
        out[:, 2::3] = slopes
        return out


def interval_feature_matrix(windows_matrix: np.ndarray, intervals: list[tuple[int, int]]) -> np.ndarray:
    """Vectorized interval features over same-length windows (rows).

    Prefix-sum based, so cost is independent of interval lengths; agrees
    with interval_features to ~1e-13 (sum-of-squares vs two-pass variance).
    """
    return IntervalSums(windows_matrix).features(intervals)


# ---------------------------------------------------------------------------
# feature CSV interchange


def write_features_csv(ds: LabeledDataset, bands: BandSpec | None, path) -> None:
    """One row per example: label name, then feature values. The header
    carries band ranges when available, else generic column names."""
    if bands is not None and len(bands) != ds.n_features:
        raise DataError("band count does not match feature dimension")
    if bands is not None:
        cols = [f"{format_float(lo)}-{format_float(hi)}" for lo, hi in bands.bands]
    else:
        cols = [f"f{i}" for i in range(ds.n_features)]
    with open(path, "w", newline="") as fh:
        fh.write("label," + ",".join(cols) + "\n")
        for i in range(ds.n_examples):
            row = ",".join(format_float(v) for v in ds.features[i])
            fh.write(f"{ds.class_names[ds.labels[i]]},{row}\n")


def read_features_csv(path) -> tuple[LabeledDataset, BandSpec | None]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DataError(f"empty features file {path}")
    header = lines[0].split(",")
    if header[0] != "label":
        raise DataError("features CSV must start with a 'label' column")
    bands = None
    try:
        parsed = [tuple(float(p) for p in col.split("-")) for col in header[1:]]
        if parsed and all(len(b) == 2 for b in parsed):
            bands = BandSpec(tuple(parsed))
    except (ValueError, DataError):
        bands = None
    labels_str: list[str] = []
    rows: list[list[float]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise DataError(f"features CSV line {lineno}: wrong column count")
        labels_str.append(parts[0])
        try:
            rows.append([float(p) for p in parts[1:]])
        except ValueError:
            raise DataError(f"features CSV line {lineno}: unparseable value")
    names = tuple(sorted(set(labels_str)))
    labels = np.asarray([names.index(s) for s in labels_str])
    return LabeledDataset(np.asarray(rows), labels, names), bands


def attach_labels(windows: list[InstructionWindow], labels: list[str]) -> list[InstructionWindow]:
    if len(windows) != len(labels):
        raise DataError("attach_labels: length mismatch")
    return [replace(w, label=lab) for w, lab in zip(windows, labels)]
