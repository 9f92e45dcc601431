"""End-to-end workflow wiring used by the CLI and the acceptance suite.

The canonical flow mirrors the measurement methodology: calibrate the
synthetic noise level against the nearest-mean oracle, synthesize template
traces, segment them by triggers, select discriminative bands, train and
cross-validate the band-feature forest, then recognize program traces.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .evaluate import (
    ConfusionMatrix,
    code_recognition,
    forest_trainer,
    kfold_cv,
    write_confusion_csv,
)
from .features import (
    BandSpec,
    attach_labels,
    select_bands,
    windows_to_dataset,
    write_features_csv,
)
from .forest import ForestParams
from .rng import child_rng, child_seed
from .segment import TriggerSpec, detect_triggers, extract_windows
from .simulate import (
    SimConfig,
    calibrate_noise,
    oracle_accuracy,
    save_sim_config,
    synth_instruction_batch,
    synth_program_trace,
    write_boundaries,
)
from .trace import InstructionWindow, LabeledDataset, Trace, format_float, write_trace_file

BAND_SEARCH_RANGE_HZ = (31.0e6, 31.9e6)
BAND_SEARCH_WIDTH_HZ = 0.05e6
BAND_SEARCH_K = 6
CALIBRATION_TARGET = 0.89


def hot_cell(cfg: SimConfig) -> tuple[int, int]:
    return cfg.grid_hot_cell


def segment_trace(
    trace: Trace,
    cycles: list[int],
    boundaries: list[tuple[int, int, str]] | None = None,
    spec: TriggerSpec | None = None,
) -> list[InstructionWindow]:
    """Trigger-segment a trace into one window per slot; labels come from
    the ground-truth sidecar when provided."""
    if spec is None:
        spec = TriggerSpec(min_gap_samples=trace.samples_per_cycle)
    triggers = detect_triggers(trace, spec)
    if triggers.size != len(cycles) + 1:
        raise DataError(
            f"segment_trace: expected {len(cycles) + 1} triggers, found {triggers.size}"
        )
    windows = extract_windows(trace, triggers, cycles, spec.threshold_fraction)
    if boundaries is not None:
        if len(boundaries) != len(windows):
            raise DataError("segment_trace: sidecar length does not match windows")
        windows = attach_labels(windows, [label for _, _, label in boundaries])
    return windows


def template_traces(
    cfg: SimConfig,
    repetitions: int,
    seed: int,
    cell: tuple[int, int] | None = None,
    mnemonics: tuple[str, ...] | None = None,
) -> list[tuple[str, Trace, list[tuple[int, int, str]]]]:
    """One trace per mnemonic, the instruction repeated `repetitions` times."""
    cell = cell or cfg.grid_hot_cell
    mnemonics = mnemonics or tuple(cfg.profiles)
    out = []
    for mnemonic in mnemonics:
        trace, bounds = synth_program_trace(
            [mnemonic] * repetitions, cfg, cell, child_seed(seed, "template", mnemonic)
        )
        out.append((mnemonic, trace.with_meta(program_id=f"template-{mnemonic}"), bounds))
    return out


def template_windows(
    cfg: SimConfig,
    repetitions: int,
    seed: int,
    cell: tuple[int, int] | None = None,
    mnemonics: tuple[str, ...] | None = None,
) -> list[InstructionWindow]:
    """Labeled template windows recovered through real trigger segmentation."""
    windows: list[InstructionWindow] = []
    for mnemonic, trace, bounds in template_traces(cfg, repetitions, seed, cell, mnemonics):
        cycles = [cfg.profile(mnemonic).cycles] * repetitions
        windows.extend(segment_trace(trace, cycles, bounds))
    return windows


def template_dataset(
    cfg: SimConfig,
    repetitions: int,
    bands: BandSpec,
    seed: int,
    pad_factor: int = 512,
) -> LabeledDataset:
    windows = template_windows(cfg, repetitions, seed)
    return windows_to_dataset(windows, cfg.sample_rate_hz, bands, pad_factor=pad_factor)


def grid_cell_dataset(
    cfg: SimConfig,
    cell: tuple[int, int],
    classes: tuple[str, ...],
    windows_per_class: int,
    seed: int,
) -> LabeledDataset:
    """Raw-window dataset for one grid cell, cropped to the shortest class
    window so the time-series forest sees one common length."""
    gain = cfg.coupling_gain(*cell)
    spc = cfg.samples_per_cycle
    crop = min(cfg.profile(m).cycles for m in classes) * spc
    names = tuple(sorted(classes))
    rows = []
    labels = []
    for ci, name in enumerate(names):
        rng = child_rng(seed, "grid", cell[0], cell[1], ci)
        w = synth_instruction_batch(cfg.profile(name), cfg, gain, windows_per_class, rng)
        rows.append(w[:, :crop])
        labels.extend([ci] * windows_per_class)
    return LabeledDataset(np.vstack(rows), np.asarray(labels), names)


def grid_datasets(
    cfg: SimConfig,
    classes: tuple[str, ...] = ("MUL", "NOP"),
    windows_per_class: int = 20,
    seed: int = 0,
) -> dict[tuple[int, int], LabeledDataset]:
    out = {}
    for r in range(cfg.grid_rows):
        for c in range(cfg.grid_cols):
            out[(r, c)] = grid_cell_dataset(cfg, (r, c), classes, windows_per_class, seed)
    return out


def program_traces(
    cfg: SimConfig,
    program: tuple[str, ...],
    runs: int,
    seed: int,
    cell: tuple[int, int] | None = None,
) -> list[Trace]:
    cell = cell or cfg.grid_hot_cell
    return [
        synth_program_trace(program, cfg, cell, child_seed(seed, "run", i))[0]
        for i in range(runs)
    ]


# ---------------------------------------------------------------------------
# the full reproduction workflow


@dataclass(frozen=True)
class ReproduceProfile:
    name: str
    windows_per_class: int
    coderec_runs: int
    n_estimators: int
    calibration_trials: int


PROFILES = {
    "paper-like": ReproduceProfile("paper-like", 100, 500, 100, 1000),
    "quick": ReproduceProfile("quick", 25, 60, 25, 1000),
}


def run_reproduce(
    cfg: SimConfig,
    out_dir: Path | str,
    seed: int,
    profile: str = "paper-like",
    folds: int = 4,
    fraction: float = 0.75,
    program: tuple[str, ...] = ("LD", "ST", "ADD", "MOV", "RJMP"),
) -> dict:
    """calibrate -> simulate -> segment -> select-bands -> cv -> coderec.

    Writes template traces with boundary sidecars, the selected band file,
    the feature CSV, both confusion matrices, the calibrated simulator
    config, and a summary; returns the summary as a dict.
    """
    try:
        prof = PROFILES[profile]
    except KeyError:
        raise DataError(f"unknown reproduce profile {profile!r} (have {sorted(PROFILES)})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    sigma = calibrate_noise(
        cfg, CALIBRATION_TARGET, trials=prof.calibration_trials, seed=child_seed(seed, "cal")
    )
    cal_cfg = replace(cfg, noise_sigma_volts=sigma)
    save_sim_config(cal_cfg, out / "sim_config_calibrated.cfg")
    bayes = oracle_accuracy(
        cal_cfg, sigma, trials=prof.calibration_trials, seed=child_seed(seed, "bayes")
    )

    traces_dir = out / "traces"
    traces_dir.mkdir(exist_ok=True)
    windows: list[InstructionWindow] = []
    for mnemonic, trace, bounds in template_traces(cal_cfg, prof.windows_per_class, seed):
        write_trace_file(trace, traces_dir / f"template_{mnemonic}.emtr", "binary")
        write_boundaries(bounds, traces_dir / f"template_{mnemonic}.boundaries.csv")
        cycles = [cal_cfg.profile(mnemonic).cycles] * prof.windows_per_class
        windows.extend(segment_trace(trace, cycles, bounds))

    bands = select_bands(
        windows,
        cal_cfg.sample_rate_hz,
        BAND_SEARCH_RANGE_HZ,
        BAND_SEARCH_WIDTH_HZ,
        BAND_SEARCH_K,
    )
    bands.to_file(out / "bands.csv")

    ds = windows_to_dataset(windows, cal_cfg.sample_rate_hz, bands)
    write_features_csv(ds, bands, out / "features.csv")

    params = ForestParams(n_estimators=prof.n_estimators)
    cv_cm = kfold_cv(ds, folds, forest_trainer(params), child_seed(seed, "cv"))
    write_confusion_csv(cv_cm, out / "confusion.csv")

    runs = program_traces(cal_cfg, program, prof.coderec_runs, child_seed(seed, "coderec"))
    coderec_cm = code_recognition(
        runs,
        program,
        cal_cfg,
        fraction,
        params,
        child_seed(seed, "coderec-eval"),
        bands=bands,
        template_ds=ds,
    )
    write_confusion_csv(coderec_cm, out / "coderec_confusion.csv")

    summary = {
        "profile": profile,
        "noise_sigma_volts": sigma,
        "oracle_accuracy": bayes,
        "cv_accuracy": cv_cm.accuracy,
        "coderec_accuracy": coderec_cm.accuracy,
        "classes": len(ds.class_names),
        "folds": folds,
        "program": ",".join(program),
        "runs": prof.coderec_runs,
    }
    lines = [f"{k}={_fmt(v)}" for k, v in summary.items()]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary


def _fmt(v) -> str:
    if isinstance(v, float):
        return format_float(round(v, 6))
    return str(v)
