"""Per-trial predictor table: contextual variables plus gaze-derived measures."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .gaze_events import AOI_NAMES, EventSet, FIXATION, SACCADE, PupilSeries

CONTEXT_FEATURES = (
    "age", "gender", "yearDriving", "drivingFrequency", "videoLength", "decisionTime",
    "decisionMade", "correctDecision", "danger", "difficulty", "carPlacedLeft", "carPlacedRight",
)
EYE_FEATURES = (
    "numS", "sAmpMean", "sAmpStd", "sAmpMax", "numF", "fMean", "fStd", "fMax",
    *AOI_NAMES, "pupilChange", "pupilMean", "pupilStd",
)
FEATURES = CONTEXT_FEATURES + EYE_FEATURES
NOMINAL_FEATURES = frozenset({"gender", "drivingFrequency", "decisionMade", "correctDecision"})
VIDEO_LENGTHS = (1, 3, 6, 9, 12, 20)

ID_COLUMNS = ("participant_id", "trial_id")
LABEL_COLUMN = "sa"

PUPIL_CHANGE_WINDOW_S = 0.200


class DatasetError(ValueError):
    """Dataset validation failure; the message names the offending row/column."""


@dataclass(frozen=True)
class TrialRecord:
    participant_id: int
    trial_id: int
    values: Mapping[str, Optional[float]]
    sa: Optional[float] = None

    def __post_init__(self):
        unknown = sorted(set(self.values) - set(FEATURES))
        if unknown:
            raise DatasetError(f"unknown feature(s): {', '.join(unknown)}")

    def __getitem__(self, name: str) -> Optional[float]:
        return self.values.get(name)


def _moments(xs: Sequence[float]) -> tuple:
    """(mean, sample sd, max); sd needs two values."""
    if not xs:
        return None, None, None
    arr = np.asarray(xs, dtype=float)
    sd = float(arr.std(ddof=1)) if arr.size >= 2 else None
    return float(arr.mean()), sd, float(arr.max())


def eye_features(events: EventSet, pupil: PupilSeries) -> dict:
    """Table I measures 13-28 for one trial; missing measures are ``None``."""
    saccades = [e for e in events.events if e.kind == SACCADE]
    fixations = [e for e in events.events if e.kind == FIXATION]
    out = {"numS": float(len(saccades)), "numF": float(len(fixations))}

    out["sAmpMean"], out["sAmpStd"], out["sAmpMax"] = _moments([s.amplitude for s in saccades])
    # fixation durations reported in ms
    out["fMean"], out["fStd"], out["fMax"] = _moments([f.duration * 1000.0 for f in fixations])

    for name in AOI_NAMES:
        out[name] = float(sum(1 for f in fixations if f.aoi == name))

    ok = pupil.ok
    if not ok.any():
        out["pupilChange"] = out["pupilMean"] = out["pupilStd"] = None
        return out
    d = pupil.diameter[ok]
    out["pupilMean"] = float(d.mean())
    out["pupilStd"] = float(d.std(ddof=1)) if d.size >= 2 else None

    t = pupil.t
    period = float(np.median(np.diff(t))) if t.size > 1 else 0.0
    t_end = t[-1] + period
    first = ok & (t < t[0] + PUPIL_CHANGE_WINDOW_S - 1e-9)
    last = ok & (t >= t_end - PUPIL_CHANGE_WINDOW_S - 1e-9)
    if first.any() and last.any():
        out["pupilChange"] = float(pupil.diameter[last].mean() - pupil.diameter[first].mean())
    else:
        out["pupilChange"] = None
    return out


def extract_features(events: EventSet, pupil: PupilSeries, meta: Mapping[str, Optional[float]],
                     participant_id: int = 0, trial_id: int = 0, sa: Optional[float] = None) -> TrialRecord:
    missing = [k for k in CONTEXT_FEATURES if k not in meta]
    if missing:
        raise DatasetError(f"metadata lacks: {', '.join(missing)}")
    values = {k: (None if meta[k] is None else float(meta[k])) for k in CONTEXT_FEATURES}
    values.update(eye_features(events, pupil))
    return TrialRecord(participant_id, trial_id, values, sa)


@dataclass(frozen=True)
class Dataset:
    """Immutable trial table. Masked cells are NaN in ``X``; unscored labels are NaN in ``sa``."""

    participant_id: np.ndarray
    trial_id: np.ndarray
    X: np.ndarray
    sa: np.ndarray
    feature_names: tuple

    def __post_init__(self):
        X = np.array(self.X, dtype=float, copy=True)
        if X.ndim != 2:
            raise DatasetError("X must be two-dimensional")
        n, p = X.shape
        names = tuple(self.feature_names)
        if len(names) != p:
            raise DatasetError(f"{p} columns but {len(names)} feature names")
        unknown = [f for f in names if f not in FEATURES]
        if unknown:
            raise DatasetError(f"unknown column {unknown[0]!r}")
        if len(set(names)) != len(names):
            raise DatasetError("duplicate feature names")
        pid = np.asarray(self.participant_id, dtype=np.int64).copy()
        tid = np.asarray(self.trial_id, dtype=np.int64).copy()
        sa = np.array(self.sa, dtype=float, copy=True)
        if not (pid.shape == tid.shape == sa.shape == (n,)):
            raise DatasetError("id/label columns do not match the row count")
        seen = {}
        for i, key in enumerate(zip(pid.tolist(), tid.tolist())):
            if key in seen:
                raise DatasetError(
                    f"row {i + 1}: duplicate (participant_id, trial_id) {key}, first at row {seen[key] + 1}"
                )
            seen[key] = i
        for arr in (pid, tid, X, sa):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "sa", sa)
        object.__setattr__(self, "participant_id", pid)
        object.__setattr__(self, "trial_id", tid)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    def __len__(self) -> int:
        return self.n_rows

    @property
    def mask(self) -> np.ndarray:
        return np.isnan(self.X)

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.feature_names.index(name)]

    def select(self, names: Iterable[str]) -> "Dataset":
        names = tuple(names)
        missing = [f for f in names if f not in self.feature_names]
        if missing:
            raise DatasetError(f"dataset has no column {missing[0]!r}")
        idx = [self.feature_names.index(f) for f in names]
        return Dataset(self.participant_id, self.trial_id, self.X[:, idx], self.sa, names)

    def rows(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.participant_id[idx], self.trial_id[idx], self.X[idx], self.sa[idx],
                       self.feature_names)

    def with_labels(self, sa) -> "Dataset":
        return Dataset(self.participant_id, self.trial_id, self.X, sa, self.feature_names)

    @classmethod
    def from_records(cls, records: Sequence[TrialRecord], feature_names: Sequence[str] = FEATURES) -> "Dataset":
        names = tuple(feature_names)
        X = np.array(
            [[np.nan if r[f] is None else r[f] for f in names] for r in records], dtype=float
        ).reshape(len(records), len(names))
        sa = np.array([np.nan if r.sa is None else r.sa for r in records], dtype=float)
        return cls(
            np.array([r.participant_id for r in records], dtype=np.int64),
            np.array([r.trial_id for r in records], dtype=np.int64),
            X, sa, names,
        )

    def records(self) -> list:
        out = []
        for i in range(self.n_rows):
            vals = {f: (None if math.isnan(v) else float(v)) for f, v in zip(self.feature_names, self.X[i])}
            sa = None if math.isnan(self.sa[i]) else float(self.sa[i])
            out.append(TrialRecord(int(self.participant_id[i]), int(self.trial_id[i]), vals, sa))
        return out


def eye_only_view(ds: Dataset) -> Dataset:
    """Restrict to the 16 gaze-derived columns."""
    return ds.select(EYE_FEATURES)


def _cell(v: float) -> str:
    return "" if math.isnan(v) else format(float(v), ".17g")


def write_dataset(ds: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*ID_COLUMNS, *ds.feature_names, LABEL_COLUMN])
        for i in range(ds.n_rows):
            w.writerow([
                int(ds.participant_id[i]), int(ds.trial_id[i]),
                *(_cell(v) for v in ds.X[i]), _cell(ds.sa[i]),
            ])


def load_dataset(path) -> Dataset:
    """Read a dataset CSV; the header must carry the full or the eye-only registry."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DatasetError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:2] != list(ID_COLUMNS) or header[-1] != LABEL_COLUMN:
            raise DatasetError(f"{path}: header must start with participant_id,trial_id and end with sa")
        names = header[2:-1]
        for col in names:
            if col not in FEATURES:
                raise DatasetError(f"{path}: unknown column {col!r}")
        registry = EYE_FEATURES if set(names) <= set(EYE_FEATURES) else FEATURES
        for col in registry:
            if col not in names:
                raise DatasetError(f"{path}: missing column {col!r}")
        if names != list(registry):
            raise DatasetError(f"{path}: columns out of registry order")

        pids, tids, rows, labels = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}: row {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                pids.append(int(row[0]))
                tids.append(int(row[1]))
            except ValueError:
                raise DatasetError(f"{path}: row {lineno}: ids must be integers") from None
            vals = []
            for col, cell in zip(header[2:], row[2:]):
                cell = cell.strip()
                if cell == "":
                    vals.append(np.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DatasetError(
                        f"{path}: row {lineno}, column {col}: non-numeric value {cell!r}"
                    ) from None
                if math.isnan(v):
                    raise DatasetError(f"{path}: row {lineno}, column {col}: NaN is not allowed, leave empty")
                vals.append(v)
            rows.append(vals[:-1])
            labels.append(vals[-1])
    X = np.array(rows, dtype=float).reshape(len(rows), len(names))
    try:
        return Dataset(np.array(pids, dtype=np.int64), np.array(tids, dtype=np.int64), X,
                       np.array(labels, dtype=float), tuple(names))
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from None
