"""Core data types and trace file I/O.

Two interchange formats are supported:

* binary: magic ``EMTR``, version byte 0x01, u32-LE meta-block length, a
  UTF-8 meta block of ``key=value\\n`` lines (``sample_rate_hz`` and
  ``clock_hz`` mandatory), u64-LE sample count, then samples as LE float32.
* CSV: ``# key=value`` header lines followed by one decimal sample per line.

Samples are stored in single precision (matching oscilloscope exports), so
``Trace`` quantizes to float32-representable values on construction; all
downstream arithmetic runs in double precision. With that storage contract
``read(write(t)) == t`` holds bit-exactly for binary and exactly for CSV,
which uses shortest round-trip decimal formatting.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, TraceFormatError
from .rng import child_rng

_MAGIC = b"EMTR"
_VERSION = 1
_RESERVED_KEYS = ("sample_rate_hz", "clock_hz")


def format_float(x: float) -> str:
    """Shortest decimal string that parses back to the exact same float64."""
    return np.format_float_positional(np.float64(x), unique=True, trim="-")


def _as_sample_array(samples, what: str) -> np.ndarray:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError(f"{what}: samples must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{what}: samples contain non-finite values")
    return arr


@dataclass(frozen=True)
class Trace:
    """A raw voltage time series with acquisition metadata.

    ``meta`` is an ordered key->string map carried verbatim through file
    round-trips (keys may not contain ``=`` or newlines).
    """

    samples: np.ndarray
    sample_rate_hz: float
    clock_hz: float
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        arr = _as_sample_array(self.samples, "Trace")
        # storage contract: every sample is exactly representable in float32
        arr = np.float32(arr).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise DataError("Trace: sample magnitude exceeds float32 range")
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))
        object.__setattr__(self, "clock_hz", float(self.clock_hz))
        if not self.sample_rate_hz > 0:
            raise DataError("Trace: sample_rate_hz must be positive")
        if not self.clock_hz > 0:
            raise DataError("Trace: clock_hz must be positive")
        meta = {str(k): str(v) for k, v in dict(self.meta).items()}
        for k, v in meta.items():
            if "=" in k or "\n" in k or "\n" in v:
                raise DataError(f"Trace: illegal character in meta entry {k!r}")
            if k in _RESERVED_KEYS:
                raise DataError(f"Trace: meta key {k!r} is reserved")
        object.__setattr__(self, "meta", meta)

    @property
    def samples_per_cycle(self) -> int:
        return round(self.sample_rate_hz / self.clock_hz)

    def __len__(self) -> int:
        return int(self.samples.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            np.array_equal(self.samples, other.samples)
            and self.sample_rate_hz == other.sample_rate_hz
            and self.clock_hz == other.clock_hz
            and list(self.meta.items()) == list(other.meta.items())
        )

    def with_meta(self, **entries: str) -> "Trace":
        merged = dict(self.meta)
        merged.update({k: str(v) for k, v in entries.items()})
        return replace(self, meta=merged)


@dataclass(frozen=True)
class InstructionWindow:
    """One instruction's samples, cut out of a source trace between triggers."""

    samples: np.ndarray
    start_index: int
    cycles: int
    label: str | None = None

    def __post_init__(self) -> None:
        arr = _as_sample_array(self.samples, "InstructionWindow")
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)
        if self.start_index < 0:
            raise DataError("InstructionWindow: start_index must be >= 0")
        if self.cycles < 1:
            raise DataError("InstructionWindow: cycles must be >= 1")

    def __len__(self) -> int:
        return int(self.samples.size)


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix with integer class labels.

    Rows are examples; columns are feature dimensions (for time-series
    classifiers the "features" are simply the raw window samples).
    """

    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] == 0 or feats.shape[1] == 0:
            raise DataError("LabeledDataset: features must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(feats)):
            raise DataError("LabeledDataset: features contain non-finite values")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise DataError("LabeledDataset: labels must match feature rows")
        names = tuple(str(n) for n in self.class_names)
        if len(names) == 0 or len(set(names)) != len(names):
            raise DataError("LabeledDataset: class_names must be unique and non-empty")
        if labels.min() < 0 or labels.max() >= len(names):
            raise DataError("LabeledDataset: label outside class_names range")
        feats.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", names)

    @property
    def n_examples(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))


# ---------------------------------------------------------------------------
# trace serialization


def _meta_lines(trace: Trace) -> list[tuple[str, str]]:
    pairs = [
        ("sample_rate_hz", format_float(trace.sample_rate_hz)),
        ("clock_hz", format_float(trace.clock_hz)),
    ]
    pairs.extend(trace.meta.items())
    return pairs


def _parse_meta_pairs(pairs: list[tuple[str, str]], where: str) -> tuple[float, float, dict[str, str]]:
    required: dict[str, float] = {}
    meta: dict[str, str] = {}
    for key, value in pairs:
        if key in _RESERVED_KEYS:
            try:
                parsed = float(value)
            except ValueError:
                raise TraceFormatError(f"malformed header: bad {key} value {value!r} {where}")
            if not parsed > 0 or not np.isfinite(parsed):
                raise TraceFormatError(f"malformed header: non-positive {key} {where}")
            required[key] = parsed
        else:
            meta[key] = value
    for key in _RESERVED_KEYS:
        if key not in required:
            raise TraceFormatError(f"malformed header: missing {key} {where}")
    return required["sample_rate_hz"], required["clock_hz"], meta


def write_trace(trace: Trace, format: str) -> bytes:
    """Serialize a trace; the result parses back to an equal Trace."""
    if format == "binary":
        meta_block = "".join(f"{k}={v}\n" for k, v in _meta_lines(trace)).encode("utf-8")
        out = bytearray()
        out += _MAGIC
        out.append(_VERSION)
        out += struct.pack("<I", len(meta_block))
        out += meta_block
        out += struct.pack("<Q", trace.samples.size)
        out += np.float32(trace.samples).astype("<f4").tobytes()
        return bytes(out)
    if format == "csv":
        lines = [f"# {k}={v}" for k, v in _meta_lines(trace)]
        lines.extend(format_float(s) for s in trace.samples)
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise ValueError(f"unknown trace format {format!r}")


def _read_binary(data: bytes) -> Trace:
    if len(data) < 4 or data[:4] != _MAGIC:
        raise TraceFormatError("malformed header: bad magic at offset 0")
    if len(data) < 5:
        raise TraceFormatError("truncated payload at offset 4 (missing version byte)")
    if data[4] != _VERSION:
        raise TraceFormatError(f"unknown format version 0x{data[4]:02x} at offset 4")
    if len(data) < 9:
        raise TraceFormatError("truncated payload at offset 5 (missing meta length)")
    (meta_len,) = struct.unpack_from("<I", data, 5)
    meta_end = 9 + meta_len
    if len(data) < meta_end:
        raise TraceFormatError(f"truncated payload at offset 9 (meta block of {meta_len} bytes)")
    try:
        meta_text = data[9:meta_end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TraceFormatError(f"malformed header: invalid UTF-8 at offset {9 + exc.start}")
    pairs = []
    for line in meta_text.split("\n"):
        if not line:
            continue
        if "=" not in line:
            raise TraceFormatError(f"malformed header: meta line {line!r} at offset 9")
        key, _, value = line.partition("=")
        pairs.append((key, value))
    rate, clock, meta = _parse_meta_pairs(pairs, f"at offset 9")
    if len(data) < meta_end + 8:
        raise TraceFormatError(f"truncated payload at offset {meta_end} (missing sample count)")
    (count,) = struct.unpack_from("<Q", data, meta_end)
    payload_off = meta_end + 8
    if count == 0:
        raise TraceFormatError(f"truncated payload: empty trace at offset {payload_off}")
    expected = count * 4
    got = len(data) - payload_off
    if got < expected:
        raise TraceFormatError(
            f"truncated payload at offset {payload_off} (expected {expected} bytes, got {got})"
        )
    raw = np.frombuffer(data, dtype="<f4", count=count, offset=payload_off)
    bad = np.flatnonzero(~np.isfinite(raw))
    if bad.size:
        raise TraceFormatError(f"non-finite sample at offset {payload_off + 4 * int(bad[0])}")
    return Trace(raw.astype(np.float64), rate, clock, meta)


def _read_csv(data: bytes) -> Trace:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TraceFormatError(f"malformed header: invalid UTF-8 at offset {exc.start}")
    pairs: list[tuple[str, str]] = []
    values: list[float] = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped[1:].strip()
            if "=" not in body:
                raise TraceFormatError(f"malformed header at line {lineno}: {stripped!r}")
            key, _, value = body.partition("=")
            pairs.append((key, value))
            continue
        try:
            v = float(stripped)
        except ValueError:
            raise TraceFormatError(f"malformed sample at line {lineno}: {stripped!r}")
        if not np.isfinite(v):
            raise TraceFormatError(f"non-finite sample at line {lineno}")
        values.append(v)
    rate, clock, meta = _parse_meta_pairs(pairs, "in CSV header")
    if not values:
        raise TraceFormatError("truncated payload: no samples in CSV body")
    return Trace(np.asarray(values), rate, clock, meta)


def read_trace(source, format: str) -> Trace:
    """Parse a trace from bytes, a file path, or a binary file object."""
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif isinstance(source, (str, os.PathLike)):
        data = Path(source).read_bytes()
    elif hasattr(source, "read"):
        data = source.read()
        if isinstance(data, str):
            data = data.encode("utf-8")
    else:
        raise TypeError(f"unsupported trace source {type(source)!r}")
    if format == "binary":
        return _read_binary(data)
    if format == "csv":
        return _read_csv(data)
    raise ValueError(f"unknown trace format {format!r}")


def write_trace_file(trace: Trace, path, format: str) -> None:
    Path(path).write_bytes(write_trace(trace, format))


def read_trace_file(path, format: str | None = None) -> Trace:
    """Read a trace file; format inferred from the EMTR magic when omitted."""
    data = Path(path).read_bytes()
    if format is None:
        format = "binary" if data[:4] == _MAGIC else "csv"
    return read_trace(data, format)


# ---------------------------------------------------------------------------
# instruction-window files (trace format plus label/cycles/start metadata)


def save_window(window: InstructionWindow, sample_rate_hz: float, clock_hz: float, path, format: str = "csv") -> None:
    meta = {"cycles": str(window.cycles), "start_index": str(window.start_index)}
    if window.label is not None:
        meta["label"] = window.label
    t = Trace(window.samples, sample_rate_hz, clock_hz, meta)
    write_trace_file(t, path, format)


def load_window(path, format: str | None = None) -> tuple[InstructionWindow, float, float]:
    """Load a window file; returns (window, sample_rate_hz, clock_hz)."""
    t = read_trace_file(path, format)
    try:
        cycles = int(t.meta.get("cycles", "1"))
        start = int(t.meta.get("start_index", "0"))
    except ValueError:
        raise TraceFormatError(f"malformed window metadata in {path}")
    label = t.meta.get("label")
    return InstructionWindow(t.samples, start, cycles, label), t.sample_rate_hz, t.clock_hz


# ---------------------------------------------------------------------------
# dataset split and manifest


def split_size(n: int, fraction: float) -> int:
    """First-side size of an n-item split: round(fraction * n), clamped so
    both sides stay non-empty."""
    return min(n - 1, max(1, round(fraction * n)))


def split_dataset(ds: LabeledDataset, fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified split: per-class counts stay within one example of the
    requested fraction, both sides see every class, and the result depends
    only on the seed."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"split fraction {fraction} outside (0, 1)")
    first: list[np.ndarray] = []
    second: list[np.ndarray] = []
    for ci, name in enumerate(ds.class_names):
        ids = np.flatnonzero(ds.labels == ci)
        if ids.size == 0:
            continue
        if ids.size < 2:
            raise DataError(f"class {name!r} has fewer than 2 examples; cannot split")
        perm = child_rng(seed, "split", ci).permutation(ids.size)
        take = split_size(ids.size, fraction)
        first.append(ids[perm[:take]])
        second.append(ids[perm[take:]])
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    return ds.subset(a), ds.subset(b)


def write_manifest(entries: list[tuple[str, str]], path) -> None:
    """Write a dataset manifest: one ``label,trace_path`` line per entry."""
    with open(path, "w", newline="") as fh:
        for label, p in entries:
            fh.write(f"{label},{p}\n")


def read_manifest(path) -> list[tuple[str, str]]:
    entries = []
    base = Path(path).parent
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "," not in line:
            raise DataError(f"manifest line {lineno} is not 'label,trace_path'")
        label, _, p = line.partition(",")
        rel = Path(p)
        entries.append((label, str(rel if rel.is_absolute() else base / rel)))
    return entries
