"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/config error. Every command is
a pure function of its inputs and --seed: re-running writes byte-identical
artifacts. EMSCOPE_THREADS caps internal parallelism (0 = all cores)
without affecting any output byte.

--config points at a flat "key = value" run-config file whose entries are
overridden by explicit flags; `simulate` instead takes the simulator config
itself (the file written by save_sim_config / `reproduce`).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluate, pipeline
from .errors import EmscopeError
from .features import (
    BandSpec,
    default_band_spec,
    read_features_csv,
    select_bands,
    windows_to_dataset,
    write_features_csv,
)
from .forest import ForestParams, load_model, predict_matrix, save_model, train_forest, train_tsf
from .pipeline import PROFILES, run_reproduce
from .segment import TriggerSpec
from .simulate import (
    ProgramSpec,
    SimConfig,
    load_sim_config,
    read_boundaries,
    synth_program_trace,
    write_boundaries,
)
from .trace import (
    LabeledDataset,
    format_float,
    load_window,
    read_manifest,
    read_trace_file,
    save_window,
    write_manifest,
    write_trace_file,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _load_run_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    cfg: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise EmscopeError(f"{path}: line {lineno} is not 'key = value'")
        key, _, value = stripped.partition("=")
        cfg[key.strip()] = value.strip()
    return cfg


def _opt(args, run_cfg: dict[str, str], key: str, default, conv=str):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in run_cfg:
        raw = run_cfg[key]
        try:
            return conv(raw)
        except ValueError:
            raise EmscopeError(f"run config: bad value {raw!r} for {key}")
    return default


def _sim_config(args, run_cfg) -> SimConfig:
    path = _opt(args, run_cfg, "sim_config", None)
    return load_sim_config(path) if path else SimConfig()


def _forest_params(args, run_cfg) -> ForestParams:
    mf = _opt(args, run_cfg, "max_features", "sqrt")
    if mf not in ("sqrt", "all"):
        mf = int(mf)
    depth = _opt(args, run_cfg, "max_depth", None, int)
    return ForestParams(
        n_estimators=_opt(args, run_cfg, "trees", 1000, int),
        max_features=mf,
        min_samples_leaf=_opt(args, run_cfg, "min_samples_leaf", 1, int),
        max_depth=depth,
        min_interval=_opt(args, run_cfg, "min_interval", 2, int),
        n_intervals=_opt(args, run_cfg, "n_intervals", None, int),
    )


def _out_dir(args, run_cfg) -> Path:
    out = Path(_opt(args, run_cfg, "out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_cell(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise EmscopeError(f"cell {text!r} is not 'row,col'")
    return int(parts[0]), int(parts[1])


def _load_windows(manifest_path: str):
    """Windows + sample rate from a `label,path` manifest."""
    entries = read_manifest(manifest_path)
    if not entries:
        raise EmscopeError(f"empty manifest {manifest_path}")
    windows = []
    rate = None
    for label, path in entries:
        w, r, _ = load_window(path)
        if rate is None:
            rate = r
        elif rate != r:
            raise EmscopeError("manifest mixes sample rates")
        windows.append(w if w.label is not None else replace(w, label=label))
    return windows, rate


def _window_dataset(windows, rate) -> LabeledDataset:
    lengths = {len(w) for w in windows}
    if len(lengths) != 1:
        raise EmscopeError("interval models need equal-length windows")
    names = tuple(sorted({w.label for w in windows}))
    X = np.vstack([w.samples for w in windows])
    y = np.asarray([names.index(w.label) for w in windows])
    return LabeledDataset(X, y, names)


# ---------------------------------------------------------------------------
# command implementations


def _cmd_simulate(args) -> int:
    cfg = load_sim_config(args.config) if args.config else SimConfig()
    program = tuple(args.program.split(","))
    cell = _parse_cell(args.cell) if args.cell else cfg.grid_hot_cell
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    seq = tuple(m for m in program for _ in range(args.repeat))
    prog = ProgramSpec(seq, pad_with_nop=args.pad_nop)
    for run in range(args.runs):
        trace, bounds = synth_program_trace(prog, cfg, cell, _seed(args) + run)
        stem = out / f"run_{run:05d}"
        ext = "emtr" if args.format == "binary" else "csv"
        write_trace_file(trace, f"{stem}.{ext}", args.format)
        write_boundaries(bounds, f"{stem}.boundaries.csv")
    print(f"traces={args.runs} instructions={len(seq)} cell={cell[0]},{cell[1]} out={out}")
    return 0


def _cmd_segment(args) -> int:
    trace = read_trace_file(args.trace)
    bounds = None
    if args.boundaries:
        bounds = read_boundaries(args.boundaries)
        spc = trace.samples_per_cycle
        cycles = [(end - start) // spc for start, end, _ in bounds]
    elif args.cycles:
        cycles = [int(c) for c in args.cycles.split(",")]
    else:
        raise _UsageError("segment needs --boundaries or --cycles")
    spec = TriggerSpec(
        threshold_fraction=args.threshold,
        min_gap_samples=args.min_gap or trace.samples_per_cycle,
    )
    windows = pipeline.segment_trace(trace, cycles, bounds, spec)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    ext = "emtr" if args.format == "binary" else "csv"
    with open(out / "index.csv", "w", newline="") as fh:
        fh.write("window_id,start,len,label\n")
        for i, w in enumerate(windows):
            name = f"window_{i:05d}.{ext}"
            save_window(w, trace.sample_rate_hz, trace.clock_hz, out / name, args.format)
            fh.write(f"{i},{w.start_index},{len(w)},{w.label or ''}\n")
            manifest.append((w.label or "?", name))
    write_manifest(manifest, out / "windows.manifest")
    print(f"windows={len(windows)} out={out}")
    return 0


def _cmd_select_bands(args) -> int:
    windows, rate = _load_windows(args.manifest)
    lo, hi = (float(v) for v in args.range.split(","))
    bands = select_bands(windows, rate, (lo, hi), args.width, args.k, args.pad_factor)
    bands.to_file(args.out or "bands.csv")
    joined = ";".join(f"{format_float(a)}-{format_float(b)}" for a, b in bands.bands)
    print(f"bands={joined}")
    return 0


def _cmd_features(args) -> int:
    windows, rate = _load_windows(args.manifest)
    bands = BandSpec.from_file(args.bands) if args.bands else default_band_spec()
    ds = windows_to_dataset(windows, rate, bands, pad_factor=args.pad_factor, agg=args.agg)
    write_features_csv(ds, bands, args.out or "features.csv")
    print(f"examples={ds.n_examples} features={ds.n_features} classes={len(ds.class_names)}")
    return 0


def _cmd_train(args) -> int:
    run_cfg = _load_run_config(args.config)
    params = _forest_params(args, run_cfg)
    seed = _seed(args)
    if args.kind == "interval":
        if not args.manifest:
            raise _UsageError("train --kind interval needs --manifest")
        windows, rate = _load_windows(args.manifest)
        ds = _window_dataset(windows, rate)
        model = train_tsf(ds, params, seed)
    else:
        features_path = _opt(args, run_cfg, "features", None)
        if not features_path:
            raise _UsageError("train --kind band needs --features")
        ds, _ = read_features_csv(features_path)
        model = train_forest(ds, params, seed)
    out = _opt(args, run_cfg, "model", None) or str(_out_dir(args, run_cfg) / "model.emrf")
    save_model(model, out)
    print(f"trees={params.n_estimators} classes={len(model.class_names)} model={out}")
    return 0


def _cmd_classify(args) -> int:
    model = load_model(args.model)
    if model.feature_kind == "interval":
        if not args.manifest:
            raise _UsageError("classify with an interval model needs --manifest")
        windows, _ = _load_windows(args.manifest)
        X = np.vstack([w.samples for w in windows])
        truth = [w.label for w in windows]
    else:
        if not args.features:
            raise _UsageError("classify with a band model needs --features")
        ds, _ = read_features_csv(args.features)
        X = ds.features
        truth = [ds.class_names[i] for i in ds.labels]
    labels, probs = predict_matrix(model, X)
    out = args.out or "predictions.csv"
    with open(out, "w", newline="") as fh:
        fh.write("index,predicted,probability\n")
        for i, lab in enumerate(labels):
            fh.write(f"{i},{model.class_names[lab]},{format_float(probs[i, lab])}\n")
    predicted = [model.class_names[i] for i in labels]
    known = [i for i, t in enumerate(truth) if t is not None and t != "?"]
    if known:
        acc = sum(predicted[i] == truth[i] for i in known) / len(known)
        print(f"examples={len(labels)} accuracy={acc:.4f} predictions={out}")
    else:
        print(f"examples={len(labels)} predictions={out}")
    return 0


def _cmd_cv(args) -> int:
    run_cfg = _load_run_config(args.config)
    features_path = _opt(args, run_cfg, "features", None)
    if not features_path:
        raise _UsageError("cv needs --features")
    ds, _ = read_features_csv(features_path)
    params = _forest_params(args, run_cfg)
    folds = _opt(args, run_cfg, "folds", 4, int)
    seed = _seed(args, run_cfg)
    if _opt(args, run_cfg, "classifier", "forest") == "knn":
        trainer = evaluate.knn_trainer(_opt(args, run_cfg, "neighbors", 100, int))
    else:
        trainer = evaluate.forest_trainer(params)
    cm = evaluate.kfold_cv(ds, folds, trainer, seed)
    out = _out_dir(args, run_cfg)
    evaluate.write_confusion_csv(cm, out / "confusion.csv")
    print(f"accuracy={cm.accuracy:.4f} classes={len(ds.class_names)} folds={folds}")
    return 0


def _cmd_hyperopt(args) -> int:
    run_cfg = _load_run_config(args.config)
    features_path = _opt(args, run_cfg, "features", None)
    if not features_path:
        raise _UsageError("hyperopt needs --features")
    ds, _ = read_features_csv(features_path)
    folds = _opt(args, run_cfg, "folds", 4, int)
    seed = _seed(args, run_cfg)
    family = _opt(args, run_cfg, "family", "forest")
    if family == "forest":
        space = evaluate.SearchSpace(
            {"n_estimators": [50, 100, 200], "max_features": ["sqrt", "all"], "min_samples_leaf": [1, 2, 4]},
            n_iterations=args.iterations,
        )

        def make(p: dict):
            return evaluate.forest_trainer(ForestParams(
                n_estimators=p["n_estimators"],
                max_features=p["max_features"],
                min_samples_leaf=p["min_samples_leaf"],
            ))

    elif family == "knn":
        space = evaluate.SearchSpace({"n_neighbors": (1, 100)}, n_iterations=args.iterations)

        def make(p: dict):
            return evaluate.knn_trainer(p["n_neighbors"])

    else:
        raise _UsageError(f"unknown family {family!r} (forest or knn)")
    best, best_acc, trials = evaluate.random_search(space, ds, make, folds, seed)
    out = _out_dir(args, run_cfg)
    evaluate.write_trials_csv(trials, out / "trials.csv")
    desc = ";".join(f"{k}={v}" for k, v in sorted(best.items()))
    print(f"best_accuracy={best_acc:.4f} params={desc} trials={len(trials)}")
    return 0


def _cmd_gridscan(args) -> int:
    run_cfg = _load_run_config(args.config)
    cfg = _sim_config(args, run_cfg)
    classes = tuple(_opt(args, run_cfg, "classes", "MUL,NOP").split(","))
    wpc = _opt(args, run_cfg, "windows_per_class", 20, int)
    seed = _seed(args, run_cfg)
    params = ForestParams(
        n_estimators=_opt(args, run_cfg, "trees", 25, int),
        min_interval=_opt(args, run_cfg, "min_interval", 2, int),
    )
    datasets = pipeline.grid_datasets(cfg, classes, wpc, seed)
    lmap = evaluate.grid_leakage_scan(datasets, params, seed, _opt(args, run_cfg, "folds", 4, int))
    out = _out_dir(args, run_cfg)
    evaluate.write_leakage_csv(lmap, out / "leakage_map.csv")
    evaluate.write_leakage_ppm(lmap, out / "leakage_map.ppm")
    r, c = lmap.argmax_cell()
    print(f"hot_cell={r},{c} accuracy={lmap.accuracy[r, c]:.4f} cells={lmap.rows * lmap.cols}")
    return 0


def _cmd_coderec(args) -> int:
    run_cfg = _load_run_config(args.config)
    cfg = _sim_config(args, run_cfg)
    program = tuple(_opt(args, run_cfg, "program", "LD,ST,ADD,MOV,RJMP").split(","))
    runs = _opt(args, run_cfg, "runs", 500, int)
    fraction = _opt(args, run_cfg, "fraction", 0.75, float)
    seed = _seed(args, run_cfg)
    params = _forest_params(args, run_cfg)
    bands = default_band_spec()
    template_ds = None
    templates = _opt(args, run_cfg, "templates", 0, int)
    if templates:
        template_ds = pipeline.template_dataset(cfg, templates, bands, seed)
    traces = pipeline.program_traces(cfg, program, runs, seed)
    cm = evaluate.code_recognition(
        traces, program, cfg, fraction, params, seed, bands=bands, template_ds=template_ds
    )
    out = _out_dir(args, run_cfg)
    evaluate.write_confusion_csv(cm, out / "confusion.csv")
    print(f"accuracy={cm.accuracy:.4f} runs={runs} fraction={format_float(fraction)}")
    return 0


def _cmd_reproduce(args) -> int:
    run_cfg = _load_run_config(args.config)
    cfg = _sim_config(args, run_cfg)
    out = _out_dir(args, run_cfg)
    summary = run_reproduce(cfg, out, _seed(args, run_cfg), profile=args.profile)
    print(
        f"cv_accuracy={summary['cv_accuracy']:.4f} "
        f"coderec_accuracy={summary['coderec_accuracy']:.4f} "
        f"sigma={format_float(round(summary['noise_sigma_volts'], 6))} "
        f"classes={summary['classes']} folds={summary['folds']}"
    )
    return 0


def _seed(args, run_cfg: dict[str, str] | None = None) -> int:
    if args.seed is not None:
        return args.seed
    if run_cfg and "seed" in run_cfg:
        return int(run_cfg["seed"])
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser, *, config=True, out=True, fmt=False) -> None:
    if config:
        p.add_argument("--config", help="run-config file (flat key = value)")
    p.add_argument("--seed", type=lambda v: int(v) % 2**64, help="master seed (u64)")
    if out:
        p.add_argument("--out", help="output directory or file")
    if fmt:
        p.add_argument("--format", choices=("csv", "binary"), default="binary")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emscope", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("simulate", help="synthesize program traces plus boundary sidecars")
    p.add_argument("--config", help="simulator config file (defaults built in)")
    p.add_argument("--program", default="NOP", help="comma-separated mnemonics")
    p.add_argument("--repeat", type=int, default=1, help="repeat each mnemonic N times")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--cell", help="grid cell row,col (default: hot cell)")
    p.add_argument("--pad-nop", action="store_true", help="NOP-pad every instruction slot")
    p.add_argument("--seed", type=lambda v: int(v) % 2**64)
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "binary"), default="binary")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("segment", help="cut a trace into instruction windows by triggers")
    p.add_argument("--trace", required=True)
    p.add_argument("--boundaries", help="ground-truth sidecar supplying cycles and labels")
    p.add_argument("--cycles", help="comma-separated cycle count per slot")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-gap", type=int)
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "binary"), default="csv")
    p.set_defaults(fn=_cmd_segment)

    p = sub.add_parser("select-bands", help="pick discriminative frequency bands")
    p.add_argument("--manifest", required=True, help="label,path manifest of window files")
    p.add_argument("--range", default="31.0e6,31.9e6", help="search range low_hz,high_hz")
    p.add_argument("--width", type=float, default=0.05e6)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--pad-factor", type=int, default=512)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_select_bands)

    p = sub.add_parser("features", help="band-magnitude features for windows")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bands", help="band file (default: 6 bands over 31.3-31.6 MHz)")
    p.add_argument("--pad-factor", type=int, default=512)
    p.add_argument("--agg", choices=("mean", "max"), default="mean")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_features)

    p = sub.add_parser("train", help="train a forest model")
    p.add_argument("--kind", choices=("band", "interval"), default="band")
    p.add_argument("--features", help="features CSV (band models)")
    p.add_argument("--manifest", help="window manifest (interval models)")
    p.add_argument("--trees", type=int, dest="trees")
    p.add_argument("--max-features", dest="max_features")
    p.add_argument("--min-samples-leaf", type=int, dest="min_samples_leaf")
    p.add_argument("--max-depth", type=int, dest="max_depth")
    p.add_argument("--min-interval", type=int, dest="min_interval")
    p.add_argument("--n-intervals", type=int, dest="n_intervals")
    p.add_argument("--model", help="output model path")
    _add_common(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("classify", help="classify windows or feature rows with a model")
    p.add_argument("--model", required=True)
    p.add_argument("--features")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_classify)

    p = sub.add_parser("cv", help="stratified k-fold cross-validation")
    p.add_argument("--features")
    p.add_argument("--folds", type=int)
    p.add_argument("--trees", type=int, dest="trees")
    p.add_argument("--classifier", choices=("forest", "knn"))
    p.add_argument("--neighbors", type=int)
    _add_common(p)
    p.set_defaults(fn=_cmd_cv)

    p = sub.add_parser("hyperopt", help="random-search hyperparameter optimization")
    p.add_argument("--features")
    p.add_argument("--family", choices=("forest", "knn"))
    p.add_argument("--iterations", type=int, default=8)
    p.add_argument("--folds", type=int)
    _add_common(p)
    p.set_defaults(fn=_cmd_hyperopt)

    p = sub.add_parser("gridscan", help="per-cell leakage map via time-series forest")
    p.add_argument("--sim-config", dest="sim_config")
    p.add_argument("--classes")
    p.add_argument("--windows-per-class", type=int, dest="windows_per_class")
    p.add_argument("--trees", type=int, dest="trees")
    p.add_argument("--folds", type=int)
    _add_common(p)
    p.set_defaults(fn=_cmd_gridscan)

    p = sub.add_parser("coderec", help="whole-program instruction recognition")
    p.add_argument("--sim-config", dest="sim_config")
    p.add_argument("--program")
    p.add_argument("--runs", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--templates", type=int, help="template windows per class to merge in")
    p.add_argument("--trees", type=int, dest="trees")
    _add_common(p)
    p.set_defaults(fn=_cmd_coderec)

    p = sub.add_parser("reproduce", help="full workflow: calibrate, simulate, segment, select-bands, cv, coderec")
    p.add_argument("--profile", choices=tuple(PROFILES), default="paper-like")
    p.add_argument("--sim-config", dest="sim_config")
    _add_common(p)
    p.set_defaults(fn=_cmd_reproduce)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            sys.stderr.write("error: missing command\n")
            return 1
        return args.fn(args)
    except _UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except EmscopeError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
