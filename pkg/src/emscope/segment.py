"""Trigger detection and instruction-window extraction.

The firmware under observation flips a GPIO around every instruction slot,
producing square pulses that dwarf the signal. Detection is threshold-based
and relative to the trace's own maximum, so it survives gain changes; each
window of a known cycle count starts right after its leading pulse ends.
"""

from __future__ import annotations

from dataclasses import dataclass
from collections.abc import Sequence

import numpy as np

from .errors import DataError
from .trace import InstructionWindow, Trace


@dataclass(frozen=True)
class TriggerSpec:
    """Threshold as a fraction of max |sample|; detections closer than
    min_gap_samples merge into the first."""

    threshold_fraction: float = 0.5
    min_gap_samples: int = 1
    edge: str = "rising"

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold_fraction <= 1.0:
            raise DataError("TriggerSpec: threshold_fraction outside (0, 1]")
        if self.min_gap_samples < 1:
            raise DataError("TriggerSpec: min_gap_samples must be >= 1")
        if self.edge not in ("rising", "falling"):
            raise DataError(f"TriggerSpec: unknown edge {self.edge!r}")


def default_trigger_spec(trace: Trace) -> TriggerSpec:
    return TriggerSpec(min_gap_samples=trace.samples_per_cycle)


def detect_triggers(trace: Trace, spec: TriggerSpec) -> np.ndarray:
    """Sample indices where |sample| crosses the relative threshold on the
    requested edge, ascending. A trace that opens above threshold counts as
    a rising crossing at index 0 (level before the record is taken as 0)."""
    amp = np.abs(trace.samples)
    peak = amp.max()
    if peak == 0.0:
        raise DataError("detect_triggers: zero dynamic range (all samples are 0)")
    above = amp >= spec.threshold_fraction * peak
    prev = np.concatenate(([False], above[:-1]))
    if spec.edge == "rising":
        hits = np.flatnonzero(above & ~prev)
    else:
        hits = np.flatnonzero(~above & prev)
    merged: list[int] = []
    for idx in hits:
        if not merged or idx - merged[-1] >= spec.min_gap_samples:
            merged.append(int(idx))
    return np.asarray(merged, dtype=np.int64)


def _pulse_end(amp: np.ndarray, start: int, threshold: float) -> int:
    j = start
    while j < amp.size and amp[j] >= threshold:
        j += 1
    return j


def extract_windows(
    trace: Trace,
    triggers: Sequence[int] | np.ndarray,
    cycles: int | Sequence[int],
    threshold_fraction: float = 0.5,
) -> list[InstructionWindow]:
    """Cut one fixed-length window per adjacent trigger pair.

    The window begins where its leading pulse drops back below threshold
    and spans cycles * samples_per_cycle samples; it never overlaps trigger
    samples. `cycles` is one integer per slot (or one for all slots).
    """
    trig = np.asarray(triggers, dtype=np.int64)
    if trig.size < 2:
        raise DataError("extract_windows: insufficient triggers (need at least 2)")
    n_slots = trig.size - 1
    if isinstance(cycles, (int, np.integer)):
        per_slot = [int(cycles)] * n_slots
    else:
        per_slot = [int(c) for c in cycles]
        if len(per_slot) != n_slots:
            raise DataError(
                f"extract_windows: {len(per_slot)} cycle counts for {n_slots} slots"
            )
    amp = np.abs(trace.samples)
    peak = amp.max()
    if peak == 0.0:
        raise DataError("extract_windows: zero dynamic range")
    threshold = threshold_fraction * peak
    spc = trace.samples_per_cycle

    windows: list[InstructionWindow] = []
    for i in range(n_slots):
        start = _pulse_end(amp, int(trig[i]), threshold)
        if start >= int(trig[i + 1]):
            raise DataError(f"extract_windows: trigger pulse at {int(trig[i])} occupies entire span")
        length = per_slot[i] * spc
        if start + length > int(trig[i + 1]):
            raise DataError(
                f"extract_windows: span after trigger {i} too short for "
                f"{per_slot[i]} cycles ({length} samples)"
            )
        windows.append(
            InstructionWindow(
                trace.samples[start : start + length].copy(),
                start_index=start,
                cycles=per_slot[i],
            )
        )
    return windows
