"""Deterministic synthetic EM trace generator.

Replaces the physical acquisition rig: each instruction class has a tonal
signature inside the 31.0-31.9 MHz region around the second harmonic of the
16 MHz device clock, scaled by a probe-position coupling gain and buried in
Gaussian amplitude noise. Trigger pulses (a GPIO flip in the measured
firmware) delimit instruction windows, and ground-truth window boundaries
are returned alongside every synthesized trace.

Class identity lives in the in-band amplitude level: the twelve default
profiles form a ladder of distinct total amplitudes, with per-class tone
layouts (2-4 tones) adding minor spectral texture. The five mnemonics used
by the default driver program sit on a deliberately tighter sub-ladder, so
whole-program recognition is measurably harder than isolated-instruction
recognition at the same noise level.

All randomness flows through per-block streams derived from the master
seed, so traces are bit-identical regardless of generation order or thread
count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalibrationError, ConfigError, DataError
from .features import BandSpec, default_band_spec, fft_length
from .rng import child_rng, child_seed
from .trace import Trace, format_float

DEFAULT_CLOCK_HZ = 16e6
DEFAULT_SAMPLE_RATE_HZ = 250e6
SIGNATURE_CENTER_HZ = 31.45e6
DEFAULT_PHASE_JITTER_RAD = 0.05

# (cycles, total signature amplitude in volts); the ladder orders classes by
# in-band level. ADD/MOV/LD/ST/RJMP are spaced 0.06 apart versus 0.10 for
# the rest: they are the default driver-program mnemonics (see
# DEFAULT_PROGRAM) and form the hard-to-separate subset.
_CLASS_TABLE: dict[str, tuple[int, float]] = {
    "NOP": (1, 0.02),
    "MUL": (2, 0.40),
    "ADD": (1, 1.00),
    "SUB": (1, 0.90),
    "AND": (1, 0.50),
    "OR": (1, 0.60),
    "EOR": (1, 0.70),
    "LDI": (1, 0.80),
    "MOV": (1, 1.06),
    "LD": (2, 1.12),
    "ST": (2, 1.18),
    "RJMP": (2, 1.24),
}

DEFAULT_PROGRAM = ("LD", "ST", "ADD", "MOV", "RJMP")


@dataclass(frozen=True)
class InstructionProfile:
    """Tonal signature of one instruction class."""

    mnemonic: str
    cycles: int
    tones: tuple[tuple[float, float, float], ...]  # (freq_hz, amplitude_v, phase_jitter_rad)

    def __post_init__(self) -> None:
        if self.cycles not in (1, 2, 3):
            raise ConfigError(f"profile {self.mnemonic}: cycles must be 1, 2 or 3")
        tones = tuple((float(f), float(a), float(j)) for f, a, j in self.tones)
        if not tones:
            raise ConfigError(f"profile {self.mnemonic}: at least one tone required")
        for f, a, j in tones:
            if f <= 0 or a < 0 or j < 0:
                raise ConfigError(f"profile {self.mnemonic}: invalid tone ({f}, {a}, {j})")
        object.__setattr__(self, "tones", tones)

    @property
    def total_amplitude(self) -> float:
        return sum(a for _, a, _ in self.tones)


def _tone_layout(index: int, amplitude: float, jitter: float) -> tuple[tuple[float, float, float], ...]:
    delta = 30e3 + 10e3 * index
    c = SIGNATURE_CENTER_HZ
    kind = index % 3
    if kind == 0:
        split = ((c - delta, 0.6), (c + delta, 0.4))
    elif kind == 1:
        split = ((c - delta, 0.25), (c, 0.5), (c + delta, 0.25))
    else:
        split = ((c - delta, 0.2), (c - delta / 3, 0.3), (c + delta / 3, 0.3), (c + delta, 0.2))
    return tuple((f, frac * amplitude, jitter) for f, frac in split)


def default_profiles(jitter: float = DEFAULT_PHASE_JITTER_RAD) -> dict[str, InstructionProfile]:
    profiles = {}
    for i, (mnemonic, (cycles, amplitude)) in enumerate(_CLASS_TABLE.items()):
        profiles[mnemonic] = InstructionProfile(mnemonic, cycles, _tone_layout(i, amplitude, jitter))
    return profiles


@dataclass(frozen=True)
class ProgramSpec:
    """Instruction sequence to synthesize, optionally NOP-padded per slot."""

    instructions: tuple[str, ...]
    pad_with_nop: bool = False

    def __post_init__(self) -> None:
        instrs = tuple(str(m) for m in self.instructions)
        if not instrs:
            raise DataError("ProgramSpec: empty program")
        object.__setattr__(self, "instructions", instrs)


@dataclass(frozen=True)
class SimConfig:
    """Full description of the synthetic acquisition setup.

    The probe-position grid uses a smooth coupling bump centred on one hot
    cell (the "leaky component" location); exactly that cell reaches the
    maximal gain of 1.0 and the floor gain applies far away.
    """

    profiles: dict[str, InstructionProfile] = field(default_factory=default_profiles)
    clock_hz: float = DEFAULT_CLOCK_HZ
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    noise_sigma_volts: float = 0.18
    trigger_amplitude_volts: float = 12.0
    trigger_cycles: int = 1
    grid_rows: int = 8
    grid_cols: int = 10
    grid_hot_cell: tuple[int, int] = (3, 4)
    grid_width_cells: float = 0.75
    grid_floor_gain: float = 0.06
    seed: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "profiles", dict(self.profiles))
        if not self.profiles:
            raise ConfigError("SimConfig: at least one instruction profile required")
        if self.clock_hz <= 0 or self.sample_rate_hz <= 0:
            raise ConfigError("SimConfig: clock_hz and sample_rate_hz must be positive")
        if self.samples_per_cycle < 1:
            raise ConfigError("SimConfig: sample rate below one sample per clock cycle")
        nyquist = self.sample_rate_hz / 2
        max_amp = 0.0
        for name, p in self.profiles.items():
            if p.mnemonic != name:
                raise ConfigError(f"SimConfig: profile key {name!r} != mnemonic {p.mnemonic!r}")
            for f, _, _ in p.tones:
                if f >= nyquist:
                    raise ConfigError(f"profile {name}: tone {f} Hz at or above Nyquist")
            max_amp = max(max_amp, p.total_amplitude)
        if self.noise_sigma_volts < 0:
            raise ConfigError("SimConfig: noise sigma must be >= 0")
        floor = 5.0 * (max_amp + 4.0 * self.noise_sigma_volts)
        if self.trigger_amplitude_volts < floor:
            raise ConfigError(
                f"SimConfig: trigger amplitude {self.trigger_amplitude_volts} below "
                f"unambiguous floor {floor:.3g}"
            )
        if self.trigger_cycles < 1:
            raise ConfigError("SimConfig: trigger_cycles must be >= 1")
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ConfigError("SimConfig: grid must be at least 1x1")
        hr, hc = self.grid_hot_cell
        if not (0 <= hr < self.grid_rows and 0 <= hc < self.grid_cols):
            raise ConfigError("SimConfig: hot cell outside grid")
        if not 0 < self.grid_floor_gain <= 1 or self.grid_width_cells <= 0:
            raise ConfigError("SimConfig: invalid grid coupling parameters")
        gains = self.grid_gains()
        if np.count_nonzero(gains == gains.max()) != 1:
            raise ConfigError("SimConfig: coupling gain maximum must be unique")

    @property
    def samples_per_cycle(self) -> int:
        return round(self.sample_rate_hz / self.clock_hz)

    def coupling_gain(self, row: int, col: int) -> float:
        if not (0 <= row < self.grid_rows and 0 <= col < self.grid_cols):
            raise DataError(f"grid cell ({row}, {col}) outside {self.grid_rows}x{self.grid_cols} grid")
        hr, hc = self.grid_hot_cell
        d2 = (row - hr) ** 2 + (col - hc) ** 2
        w2 = 2.0 * self.grid_width_cells**2
        return self.grid_floor_gain + (1.0 - self.grid_floor_gain) * math.exp(-d2 / w2)

    def grid_gains(self) -> np.ndarray:
        r = np.arange(self.grid_rows)[:, None]
        c = np.arange(self.grid_cols)[None, :]
        hr, hc = self.grid_hot_cell
        d2 = (r - hr) ** 2 + (c - hc) ** 2
        w2 = 2.0 * self.grid_width_cells**2
        return self.grid_floor_gain + (1.0 - self.grid_floor_gain) * np.exp(-d2 / w2)

    def profile(self, mnemonic: str) -> InstructionProfile:
        try:
            return self.profiles[mnemonic]
        except KeyError:
            raise DataError(f"unknown mnemonic {mnemonic!r}")


# ---------------------------------------------------------------------------
# waveform synthesis


def synth_instruction(
    profile: InstructionProfile,
    cfg: SimConfig,
    gain: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Samples of one instruction execution: gain-scaled tone sum with
    per-execution phase jitter, plus unscaled Gaussian probe noise."""
    n = profile.cycles * cfg.samples_per_cycle
    nyquist = cfg.sample_rate_hz / 2
    t = np.arange(n) / cfg.sample_rate_hz
    x = np.zeros(n)
    for f, a, j in profile.tones:
        if f >= nyquist:
            raise DataError(f"tone {f} Hz at or above Nyquist {nyquist} Hz")
        phase = rng.uniform(-j, j)
        x += a * np.cos(2 * np.pi * f * t + phase)
    x *= gain
    if cfg.noise_sigma_volts > 0:
        x = x + rng.normal(0.0, cfg.noise_sigma_volts, n)
    return x


def _batch_executions(
    profile: InstructionProfile,
    sample_rate_hz: float,
    samples_per_cycle: int,
    gain: float,
    count: int,
    noise_sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    n = profile.cycles * samples_per_cycle
    t = np.arange(n) / sample_rate_hz
    x = np.zeros((count, n))
    for f, a, j in profile.tones:
        if f >= sample_rate_hz / 2:
            raise DataError(f"tone {f} Hz at or above Nyquist")
        phases = rng.uniform(-j, j, size=(count, 1))
        x += a * np.cos(2 * np.pi * f * t + phases)
    x *= gain
    if noise_sigma > 0:
        x = x + rng.normal(0.0, noise_sigma, size=(count, n))
    return x


def synth_instruction_batch(
    profile: InstructionProfile,
    cfg: SimConfig,
    gain: float,
    count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Matrix of `count` independent executions (rows); one shared stream."""
    return _batch_executions(
        profile,
        cfg.sample_rate_hz,
        cfg.samples_per_cycle,
        gain,
        count,
        cfg.noise_sigma_volts,
        rng,
    )


def _trigger_pulse(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.trigger_cycles * cfg.samples_per_cycle
    pulse = np.full(n, cfg.trigger_amplitude_volts)
    if cfg.noise_sigma_volts > 0:
        pulse = pulse + rng.normal(0.0, cfg.noise_sigma_volts, n)
    return pulse


def synth_program_trace(
    prog: ProgramSpec | list[str] | tuple[str, ...],
    cfg: SimConfig,
    grid_cell: tuple[int, int],
    seed: int,
) -> tuple[Trace, list[tuple[int, int, str]]]:
    """Synthesize one program run at a grid cell.

    Layout: a trigger pulse before every instruction slot and a trailing one
    after the last, so n instructions emit n+1 pulses. Returns the trace and
    ground-truth boundaries as (start, end, label) sample spans: exactly the
    windows that trigger-based segmentation should recover (for NOP-padded
    slots the span covers the padded block).
    """
    if not isinstance(prog, ProgramSpec):
        prog = ProgramSpec(tuple(prog))
    profiles = [cfg.profile(m) for m in prog.instructions]
    row, col = grid_cell
    gain = cfg.coupling_gain(row, col)
    nop = cfg.profile("NOP") if prog.pad_with_nop else None

    chunks: list[np.ndarray] = []
    boundaries: list[tuple[int, int, str]] = []
    pos = 0
    for i, p in enumerate(profiles):
        pulse = _trigger_pulse(cfg, child_rng(seed, "trigger", i))
        chunks.append(pulse)
        pos += pulse.size
        start = pos
        wrng = child_rng(seed, "window", i)
        parts = []
        if nop is not None:
            parts.append(synth_instruction(nop, cfg, gain, wrng))
        parts.append(synth_instruction(p, cfg, gain, wrng))
        if nop is not None:
            parts.append(synth_instruction(nop, cfg, gain, wrng))
        block = np.concatenate(parts)
        chunks.append(block)
        pos += block.size
        boundaries.append((start, pos, p.mnemonic))
    chunks.append(_trigger_pulse(cfg, child_rng(seed, "trigger", len(profiles))))

    meta = {
        "program": ",".join(prog.instructions),
        "grid_cell": f"{row},{col}",
        "seed": str(seed),
    }
    if prog.pad_with_nop:
        meta["pad_with_nop"] = "1"
    trace = Trace(np.concatenate(chunks), cfg.sample_rate_hz, cfg.clock_hz, meta)
    return trace, boundaries


def write_boundaries(boundaries: list[tuple[int, int, str]], path) -> None:
    with open(path, "w", newline="") as fh:
        for start, end, label in boundaries:
            fh.write(f"{start},{end},{label}\n")


def read_boundaries(path) -> list[tuple[int, int, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise DataError(f"boundaries line {lineno} is not 'start,end,label'")
        out.append((int(parts[0]), int(parts[1]), parts[2]))
    return out


# ---------------------------------------------------------------------------
# noise calibration against a nearest-mean oracle


class _BandProjection:
    """Direct DFT onto the padded-grid bins inside each band.

    Produces exactly the values band_feature_matrix would compute from the
    zero-padded FFT, but only evaluates the dozen needed bins, which keeps
    the Monte-Carlo calibration loop fast.
    """

    def __init__(self, n: int, sample_rate_hz: float, bands: BandSpec, pad_factor: int):
        nfft = fft_length(n, pad_factor)
        freqs = np.fft.rfftfreq(nfft, d=1.0 / sample_rate_hz)
        ks: list[int] = []
        groups: list[slice] = []
        for lo, hi in bands.bands:
            sel = np.flatnonzero((freqs >= lo) & (freqs < hi))
            if sel.size == 0:
                raise DataError(f"band [{lo}, {hi}) contains no spectrum bins")
            groups.append(slice(len(ks), len(ks) + sel.size))
            ks.extend(int(k) for k in sel)
        t = np.arange(n)
        self.matrix = np.exp(-2j * np.pi * np.outer(t, np.asarray(ks) / nfft)) / n
        self.groups = groups

    def features(self, windows_matrix: np.ndarray) -> np.ndarray:
        mags = np.abs(windows_matrix @ self.matrix)
        return np.stack([mags[:, g].mean(axis=1) for g in self.groups], axis=1)


def _oracle_projections(cfg: SimConfig, bands: BandSpec, pad_factor: int) -> dict[int, _BandProjection]:
    spc = cfg.samples_per_cycle
    return {
        cyc: _BandProjection(cyc * spc, cfg.sample_rate_hz, bands, pad_factor)
        for cyc in sorted({p.cycles for p in cfg.profiles.values()})
    }


def oracle_accuracy(
    cfg: SimConfig,
    sigma: float,
    bands: BandSpec | None = None,
    trials: int = 1000,
    seed: int = 0,
    mean_samples: int = 256,
    pad_factor: int = 512,
) -> float:
    """Accuracy of a nearest-mean classifier on band features, with class
    means and test examples both drawn fresh from the generative model at
    the given noise level. This is the pipeline's operational Bayes proxy."""
    bands = bands or default_band_spec()
    sigma = float(sigma)
    rate = cfg.sample_rate_hz
    spc = cfg.samples_per_cycle
    proj = _oracle_projections(cfg, bands, pad_factor)
    names = list(cfg.profiles)
    means = []
    for ci, name in enumerate(names):
        p = cfg.profiles[name]
        rng = child_rng(seed, "means", ci)
        w = _batch_executions(p, rate, spc, 1.0, mean_samples, sigma, rng)
        means.append(proj[p.cycles].features(w).mean(axis=0))
    centroid = np.vstack(means)
    correct = 0
    total = 0
    for ci, name in enumerate(names):
        p = cfg.profiles[name]
        rng = child_rng(seed, "trials", ci)
        w = _batch_executions(p, rate, spc, 1.0, trials, sigma, rng)
        f = proj[p.cycles].features(w)
        d2 = ((f[:, None, :] - centroid[None, :, :]) ** 2).sum(axis=2)
        correct += int((d2.argmin(axis=1) == ci).sum())
        total += trials
    return correct / total


def calibrate_noise(
    cfg: SimConfig,
    target_bayes_accuracy: float,
    trials: int = 1000,
    seed: int = 0,
    bands: BandSpec | None = None,
    tolerance: float = 0.02,
    iterations: int = 30,
) -> float:
    """Binary-search the noise sigma at which the nearest-mean oracle hits
    the target accuracy (within tolerance)."""
    n_classes = len(cfg.profiles)
    if not 1.0 / n_classes < target_bayes_accuracy <= 1.0:
        raise CalibrationError(
            f"target {target_bayes_accuracy} outside (1/{n_classes}, 1]"
        )
    if trials < 1000:
        raise CalibrationError("calibration needs at least 1000 trials per class")
    bands = bands or default_band_spec()
    sigma_max = 10.0 * max(p.total_amplitude for p in cfg.profiles.values())

    def probe(sigma: float, tag: int, n: int = trials) -> float:
        return oracle_accuracy(cfg, sigma, bands, n, child_seed(seed, "calibrate", tag))

    acc0 = probe(0.0, 0)
    if abs(acc0 - target_bayes_accuracy) <= tolerance:
        return 0.0
    if acc0 < target_bayes_accuracy:
        raise CalibrationError(
            f"target unreachable: noiseless oracle accuracy is only {acc0:.4f}"
        )
    acc_hi = probe(sigma_max, 1)
    if acc_hi > target_bayes_accuracy + tolerance:
        raise CalibrationError(
            f"target unreachable: accuracy at sigma={sigma_max:.3g} is still {acc_hi:.4f}"
        )

    lo, hi = 0.0, sigma_max
    for it in range(iterations):
        mid = 0.5 * (lo + hi)
        if probe(mid, 2 + it) > target_bayes_accuracy:
            lo = mid
        else:
            hi = mid
    sigma = 0.5 * (lo + hi)
    final = probe(sigma, 9999, 2 * trials)
    if abs(final - target_bayes_accuracy) > tolerance:
        raise CalibrationError(
            f"calibration failed: accuracy {final:.4f} at sigma {sigma:.4g} misses "
            f"target {target_bayes_accuracy} by more than {tolerance}"
        )
    return sigma


# ---------------------------------------------------------------------------
# config file I/O (flat key = value, plus per-instruction tone tables)


def save_sim_config(cfg: SimConfig, path) -> None:
    lines = [
        f"clock_hz = {format_float(cfg.clock_hz)}",
        f"sample_rate_hz = {format_float(cfg.sample_rate_hz)}",
        f"noise_sigma_volts = {format_float(cfg.noise_sigma_volts)}",
        f"trigger_amplitude_volts = {format_float(cfg.trigger_amplitude_volts)}",
        f"trigger_cycles = {cfg.trigger_cycles}",
        f"grid_rows = {cfg.grid_rows}",
        f"grid_cols = {cfg.grid_cols}",
        f"grid_hot_row = {cfg.grid_hot_cell[0]}",
        f"grid_hot_col = {cfg.grid_hot_cell[1]}",
        f"grid_width_cells = {format_float(cfg.grid_width_cells)}",
        f"grid_floor_gain = {format_float(cfg.grid_floor_gain)}",
        f"seed = {cfg.seed}",
    ]
    for name, p in cfg.profiles.items():
        lines.append(f"profile.{name}.cycles = {p.cycles}")
        tones = ",".join(
            f"{format_float(f)}:{format_float(a)}:{format_float(j)}" for f, a, j in p.tones
        )
        lines.append(f"profile.{name}.tones = {tones}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_sim_config(path) -> SimConfig:
    kv: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}: line {lineno} is not 'key = value'")
        key, _, value = stripped.partition("=")
        kv[key.strip()] = value.strip()

    def take(key: str, conv, default):
        if key in kv:
            try:
                return conv(kv.pop(key))
            except ValueError:
                raise ConfigError(f"{path}: bad value for {key}")
        return default

    clock = take("clock_hz", float, DEFAULT_CLOCK_HZ)
    rate = take("sample_rate_hz", float, DEFAULT_SAMPLE_RATE_HZ)
    noise = take("noise_sigma_volts", float, 0.18)
    trig_amp = take("trigger_amplitude_volts", float, 12.0)
    trig_cyc = take("trigger_cycles", int, 1)
    rows = take("grid_rows", int, 8)
    cols = take("grid_cols", int, 10)
    hot = (take("grid_hot_row", int, 3), take("grid_hot_col", int, 4))
    width = take("grid_width_cells", float, 0.75)
    floor = take("grid_floor_gain", float, 0.06)
    seed = take("seed", int, 1)

    profile_keys = [k for k in kv if k.startswith("profile.")]
    mnemonics: list[str] = []
    for k in profile_keys:
        parts = k.split(".")
        if len(parts) != 3 or parts[2] not in ("cycles", "tones"):
            raise ConfigError(f"{path}: unknown key {k!r}")
        if parts[1] not in mnemonics:
            mnemonics.append(parts[1])
    for k in list(kv):
        if not k.startswith("profile."):
            raise ConfigError(f"{path}: unknown key {k!r}")

    if mnemonics:
        profiles = {}
        for m in mnemonics:
            try:
                cycles = int(kv[f"profile.{m}.cycles"])
                tone_text = kv[f"profile.{m}.tones"]
            except KeyError as exc:
                raise ConfigError(f"{path}: profile {m} missing {exc.args[0]}")
            tones = []
            for item in tone_text.split(","):
                fields = item.strip().split(":")
                if len(fields) != 3:
                    raise ConfigError(f"{path}: profile {m} tone {item!r} is not f:a:j")
                tones.append(tuple(float(v) for v in fields))
            profiles[m] = InstructionProfile(m, cycles, tuple(tones))
    else:
        profiles = default_profiles()

    return SimConfig(
        profiles=profiles,
        clock_hz=clock,
        sample_rate_hz=rate,
        noise_sigma_volts=noise,
        trigger_amplitude_volts=trig_amp,
        trigger_cycles=trig_cyc,
        grid_rows=rows,
        grid_cols=cols,
        grid_hot_cell=hot,
        grid_width_cells=width,
        grid_floor_gain=floor,
        seed=seed,
    )
