"""Command-line entry point: ``gazesa <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .eval import baselines, cross_validate, select_features
from .features import (
    CONTEXT_FEATURES,
    Dataset,
    DatasetError,
    eye_only_view,
    extract_features,
    load_dataset,
    write_dataset,
)
from .gaze_events import AoiLayout, GazeDataError, GazeSamples, default_layout, detect_events, pupil_pipeline
from .gbdt import ModelFormatError, RegistryError, TrainConfig, TreeEnsemble, fit, validation_split
from .sa_score import Scene, SceneError, score_sa, validate_truth
from .shap_explain import (
    explain_instance,
    global_importance,
    main_effects,
    shap_values,
    write_importance_csv,
    write_importance_svg,
    write_main_effects_csv,
    write_shap_csv,
)
from .synth import generate_study, write_study

GAZE_FILE = re.compile(r"^p(\d+)_t(\d+)\.csv$")
SCENE_FILE = re.compile(r"^p(\d+)_t(\d+)_(truth|rec)\.json$")


class CliError(Exception):
    """User-facing failure; printed as one line."""


class _Run:
    """Collects manifest fields and per-phase timings."""

    def __init__(self, args):
        self.args = args
        self.t0 = time.perf_counter()
        self.timings = {}
        self.outputs = []

    def phase(self, name, start):
        self.timings[name] = round((time.perf_counter() - start) * 1000.0, 3)

    def write_manifest(self, out: Path, extra=None):
        self.timings["total"] = round((time.perf_counter() - self.t0) * 1000.0, 3)
        manifest = {
            "command": self.args.command,
            "version": __version__,
            "seed": getattr(self.args, "seed", None),
            "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(self.args).items()
                     if k not in ("func",)},
            "inputs": {k: str(getattr(self.args, k)) for k in ("data", "config", "model", "layout", "input")
                       if getattr(self.args, k, None)},
            "outputs": sorted(self.outputs),
            "timings_ms": self.timings,
        }
        if extra:
            manifest.update(extra)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> TrainConfig:
    cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            cfg = json.loads(path.read_text())
        except FileNotFoundError:
            raise CliError(f"{path}: no such file") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
        if not isinstance(cfg, dict):
            raise CliError(f"{path}: config must be a JSON object")
    if getattr(args, "seed", None) is not None and "seed" not in cfg:
        cfg["seed"] = args.seed
    try:
        return TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{args.config or 'config'}: {exc}") from None


def _dataset(args) -> Dataset:
    if not args.data:
        raise CliError("--data is required")
    path = Path(args.data)
    if path.is_dir():
        path = path / "dataset.csv"
    if not path.exists():
        raise CliError(f"{path}: no such file")
    ds = load_dataset(path)
    if getattr(args, "eye_only", False):
        ds = eye_only_view(ds)
    return ds


def _json_dump(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# --- commands ---

def cmd_synth(args, run: _Run) -> None:
    out = _out_dir(args)
    t = time.perf_counter()
    study = generate_study(args.participants, args.trials, args.seed, args.noise)
    run.phase("generate", t)
    t = time.perf_counter()
    study_manifest = write_study(study, out)
    run.phase("write", t)
    run.outputs += ["gaze/", "scenes/", "meta.csv", "labels.csv", "ledger.csv"]
    run.write_manifest(out, {"study": study_manifest})


def _read_table(path: Path, required) -> dict:
    """``(participant_id, trial_id) -> row`` for a small CSV keyed by ids."""
    if not path.exists():
        raise CliError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("participant_id", "trial_id", *required) if c not in (reader.fieldnames or [])]
        if missing:
            raise CliError(f"{path}: missing column {missing[0]}")
        out = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                key = (int(row["participant_id"]), int(row["trial_id"]))
            except ValueError:
                raise CliError(f"{path}: row {lineno}: ids must be integers") from None
            vals = {}
            for col in required:
                cell = row[col].strip()
                if cell == "":
                    vals[col] = None
                    continue
                try:
                    vals[col] = float(cell)
                except ValueError:
                    raise CliError(f"{path}: row {lineno}, column {col}: non-numeric value {cell!r}") from None
            out[key] = vals
    return out


def cmd_extract(args, run: _Run) -> None:
    data = Path(args.data or "")
    gaze_dir = data / "gaze"
    if not gaze_dir.is_dir():
        raise CliError(f"{gaze_dir}: no gaze directory")
    out = _out_dir(args)
    layout = AoiLayout.from_json(args.layout) if args.layout else default_layout()
    meta = _read_table(data / "meta.csv", CONTEXT_FEATURES)
    labels = _read_table(data / "labels.csv", ["sa"]) if (data / "labels.csv").exists() else {}
    files = []
    for p in sorted(gaze_dir.iterdir()):
        m = GAZE_FILE.match(p.name)
        if m:
            files.append(((int(m.group(1)), int(m.group(2))), p))
    if not files:
        raise CliError(f"{gaze_dir}: no p<pp>_t<tt>.csv files")
    files.sort()
    t = time.perf_counter()
    records = []
    for key, path in files:
        if key not in meta:
            raise CliError(f"{data / 'meta.csv'}: no row for participant {key[0]} trial {key[1]}")
        samples = GazeSamples.from_csv(path)
        events = detect_events(samples, layout)
        pupil = pupil_pipeline(samples, events.blinks, scale=args.pupil_scale)
        sa = labels.get(key, {}).get("sa")
        records.append(extract_features(events, pupil, meta[key], key[0], key[1], sa))
    run.phase("extract", t)
    write_dataset(Dataset.from_records(records), out / "dataset.csv")
    run.outputs.append("dataset.csv")
    run.write_manifest(out, {"rows": len(records)})


def cmd_score(args, run: _Run) -> None:
    data = Path(args.data or "")
    if not data.is_dir():
        raise CliError(f"{data}: not a directory")
    out = _out_dir(args)
    pairs = {}
    for p in sorted(data.iterdir()):
        m = SCENE_FILE.match(p.name)
        if m:
            pairs.setdefault((int(m.group(1)), int(m.group(2))), {})[m.group(3)] = p
    if not pairs:
        raise CliError(f"{data}: no p<pp>_t<tt>_truth.json / _rec.json files")
    rows = []
    for key in sorted(pairs):
        if set(pairs[key]) != {"truth", "rec"}:
            lacking = ({"truth", "rec"} - set(pairs[key])).pop()
            raise CliError(f"{data}: participant {key[0]} trial {key[1]} has no {lacking} file")
        truth = Scene.from_json(pairs[key]["truth"])
        validate_truth(truth)
        s = score_sa(truth, Scene.from_json(pairs[key]["rec"]))
        rows.append([key[0], key[1], repr(float(s.s1)), repr(float(s.s2)), repr(float(s.s3)), repr(float(s.sa))])
    with (out / "scores.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["participant_id", "trial_id", "s1", "s2", "s3", "sa"])
        w.writerows(rows)
    run.outputs.append("scores.csv")
    run.write_manifest(out, {"rows": len(rows)})


def cmd_train(args, run: _Run) -> None:
    ds = _dataset(args)
    cfg = _config(args)
    out = _out_dir(args)
    if np.isnan(ds.sa).any():
        raise CliError(f"{args.data}: {int(np.isnan(ds.sa).sum())} rows have no sa label")
    tr, va = validation_split(ds.n_rows, cfg.seed)
    t = time.perf_counter()
    ens, state = fit(ds.X[tr], ds.sa[tr], cfg, ds.X[va], ds.sa[va], ds.feature_names)
    run.phase("fit", t)
    ens.save(out / "model.json")
    _json_dump(out / "train_state.json", state.to_dict())
    run.outputs += ["model.json", "train_state.json"]
    run.write_manifest(out, {"config": cfg.to_dict(), "best_round": state.best_round})


def cmd_evaluate(args, run: _Run) -> None:
    ds = _dataset(args)
    cfg = _config(args)
    out = _out_dir(args)
    t = time.perf_counter()
    rep = cross_validate(ds, cfg, "gbdt", args.folds, args.seed, args.group_by_participant, args.jobs)
    run.phase("cross_validate", t)
    report = rep.to_dict()
    report["eye_only"] = bool(args.eye_only)
    report["group_by_participant"] = bool(args.group_by_participant)
    if args.baselines:
        t = time.perf_counter()
        report["baselines"] = [b.to_dict() for b in baselines(ds, args.folds, args.seed,
                                                              args.group_by_participant, args.jobs)]
        run.phase("baselines", t)
    _json_dump(out / "report.json", report)
    with (out / "predictions.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["participant_id", "trial_id", "sa", "sa_hat"])
        for i in range(ds.n_rows):
            w.writerow([int(ds.participant_id[i]), int(ds.trial_id[i]), repr(float(ds.sa[i])),
                        repr(float(rep.predictions[i]))])
    run.outputs += ["report.json", "predictions.csv"]
    run.write_manifest(out, {"config": cfg.to_dict()})


def cmd_explain(args, run: _Run) -> None:
    ds = _dataset(args)
    out = _out_dir(args)
    t = time.perf_counter()
    if args.model:
        ens = TreeEnsemble.load(args.model)
        missing = [f for f in ens.feature_names if f not in ds.feature_names]
        if missing:
            raise CliError(f"{args.data}: lacks model feature {missing[0]!r}")
        X = ds.select(ens.feature_names).X
        expl = shap_values(ens, X)
        source = "model"
    else:
        cfg = _config(args)
        rep = cross_validate(ds, cfg, "gbdt", args.folds, args.seed, args.group_by_participant, args.jobs,
                             explain=True)
        expl = rep.explanation
        source = "held_out_folds"
    run.phase("shap", t)
    ids = list(zip(ds.participant_id.tolist(), ds.trial_id.tolist()))
    write_shap_csv(out / "shap.csv", expl, ids)
    table = global_importance(expl)
    write_importance_csv(out / "importance.csv", table)
    write_main_effects_csv(out / "main_effects.csv", main_effects(expl))
    write_importance_svg(out / "importance.svg", table)
    run.outputs += ["shap.csv", "importance.csv", "main_effects.csv", "importance.svg"]
    if args.instance is not None:
        if not args.model:
            raise CliError("--instance needs --model")
        if not 0 <= args.instance < ds.n_rows:
            raise CliError(f"--instance {args.instance} is outside 0..{ds.n_rows - 1}")
        rep_i = explain_instance(ens, X[args.instance])
        sys.stdout.write(rep_i.to_text())
        rep_i.write_csv(out / "instance.csv")
        run.outputs.append("instance.csv")
    run.write_manifest(out, {"source": source, "local_accuracy_max_error": expl.local_accuracy_error()})


def cmd_select_features(args, run: _Run) -> None:
    ds = _dataset(args)
    cfg = _config(args)
    out = _out_dir(args)
    t = time.perf_counter()
    curve = select_features(ds, cfg, args.folds, args.seed, args.group_by_participant, args.jobs)
    run.phase("select", t)
    rows = curve.rows()
    with (out / "curve.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    _json_dump(out / "selection.json", {
        "best_k": curve.best_k,
        "features": list(curve.best_features),
        "order": list(curve.order),
        "rule": "smallest k with pooled RMSE <= min RMSE + fold standard error at the minimum",
        "seed": args.seed,
        "folds": args.folds,
    })
    run.outputs += ["curve.csv", "selection.json"]
    run.write_manifest(out, {"config": cfg.to_dict()})


def cmd_predict(args, run: _Run) -> None:
    try:
        ens = TreeEnsemble.load(args.model)
    except FileNotFoundError:
        raise CliError(f"{args.model}: no such file") from None
    ens.predict_row(np.full(len(ens.feature_names), np.nan))  # load compiled kernels before timing
    src = open(args.input, newline="") if args.input and args.input != "-" else sys.stdin
    dst = open(args.output, "w") if args.output and args.output != "-" else sys.stdout
    err = sys.stderr
    latencies = []
    n_bad = 0
    try:
        reader = csv.reader(src)
        header = next(reader, None)
        if header is None:
            run.write_manifest(_out_dir(args), {"rows": 0, "errors": 0})
            return
        header = [h.strip() for h in header]
        ignored = {"participant_id", "trial_id", "sa"}
        cols = [h for h in header if h not in ignored]
        unknown = [c for c in cols if c not in ens.feature_names]
        if unknown:
            raise RegistryError(f"feature {unknown[0]!r} is not in the model registry")
        lacking = [f for f in ens.feature_names if f not in cols]
        if lacking:
            raise RegistryError(f"input lacks model feature {lacking[0]!r}")
        pos = [header.index(f) for f in ens.feature_names]
        dst.write("sa_hat,latency_us\n")
        dst.flush()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                x = np.empty(len(pos))
                for j, k in enumerate(pos):
                    cell = row[k].strip()
                    try:
                        x[j] = np.nan if cell == "" else float(cell)
                    except ValueError:
                        raise ValueError(f"column {header[k]}: non-numeric value {cell!r}") from None
                    if math.isinf(x[j]):
                        raise ValueError(f"column {header[k]}: infinite value")
            except ValueError as exc:
                n_bad += 1
                err.write(f"error: row {lineno}: {exc}\n")
                err.flush()
                continue
            t = time.perf_counter_ns()
            y = ens.predict_row(x)
            dt = (time.perf_counter_ns() - t) / 1000.0
            latencies.append(dt)
            dst.write(f"{float(y)!r},{dt:.3f}\n")
            dst.flush()
    finally:
        if src is not sys.stdin:
            src.close()
        if dst is not sys.stdout:
            dst.close()
    if args.output and args.output != "-":
        run.outputs.append(str(args.output))
    lat = np.array(latencies)
    summary = {"rows": len(latencies), "errors": n_bad}
    if lat.size:
        summary["latency_us"] = {"p50": float(np.percentile(lat, 50)), "p99": float(np.percentile(lat, 99)),
                                 "max": float(lat.max())}
    run.write_manifest(_out_dir(args), summary)


# --- parser ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazesa", description="Situation-awareness prediction from gaze data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, data=True, model=False, train=False, folds=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out", help="output directory (default: out)")
        if data:
            p.add_argument("--data", help="input file or directory")
        if model:
            p.add_argument("--model", help="model JSON")
        if train:
            p.add_argument("--config", help="JSON object with TrainConfig fields")
            p.add_argument("--eye-only", action="store_true", help="use only the 16 gaze features")
        if folds:
            p.add_argument("--folds", type=int, default=10)
            p.add_argument("--group-by-participant", action="store_true",
                           help="keep each participant's trials in one fold")
            p.add_argument("--jobs", type=int, default=1, help="worker processes for folds")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic study", data=False)
    p.add_argument("--participants", type=int, default=32)
    p.add_argument("--trials", type=int, default=33)
    p.add_argument("--noise", type=float, default=0.05, help="label noise SD (0 for the noiseless variant)")

    p = add("extract", cmd_extract, "detect events and build dataset.csv from a study directory")
    p.add_argument("--layout", help="AOI layout JSON")
    p.add_argument("--pupil-scale", type=float, default=1.0, help="area-to-diameter unit scale")

    add("score", cmd_score, "score scene recreations into SA labels")
    add("train", cmd_train, "fit a model on dataset.csv", train=True)
    p = add("evaluate", cmd_evaluate, "k-fold cross-validation report", train=True, folds=True)
    p.add_argument("--baselines", action="store_true", help="also evaluate linear and single-tree baselines")
    p = add("explain", cmd_explain, "SHAP values, importance and main effects", model=True, train=True, folds=True)
    p.add_argument("--instance", type=int, help="row index to report (needs --model)")
    add("select-features", cmd_select_features, "importance-ordered feature selection curve", train=True, folds=True)
    p = add("predict", cmd_predict, "stream CSV rows to predictions", data=False, model=True)
    p.add_argument("--input", help="CSV input (default: stdin)")
    p.add_argument("--output", help="prediction output (default: stdout)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "predict" and not args.model:
        print("error: --model is required", file=sys.stderr)
        return 2
    try:
        args.func(args, _Run(args))
    except (CliError, DatasetError, GazeDataError, SceneError, ModelFormatError, RegistryError,
            ValueError, OSError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        if isinstance(exc, KeyError) and len(exc.args) == 1:
            msg = str(exc.args[0])
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
