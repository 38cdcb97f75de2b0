"""Gaze event detection and pupil preprocessing for 2 kHz eye-tracker streams.

Samples are held column-wise in :class:`GazeSamples`. Every duration is read
off timestamps: sample ``i`` owns the interval ``[t[i], t[i+1])`` and the last
sample owns one nominal sample period.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

SAMPLE_RATE_HZ = 2000.0
MIN_FIXATION_S = 0.040
MIN_SACCADE_S = 0.015
MAX_SACCADE_S = 0.150
MAX_BLINK_S = 0.200
SACCADE_SPEED_PX_S = 2000.0
FILTER_WINDOW = 100

FRAME_WIDTH = 1920
FRAME_HEIGHT = 1080
AOI_NAMES = ("backMirror", "leftMirror", "rightMirror", "road", "sky")

# CSV timestamps carry 0.1 ms resolution; thresholds are inclusive up to this slack.
_TIME_TOL = 1e-6
_SPEED_RTOL = 1e-9

GAZE_HEADER = ("t", "x", "y", "pupil_area", "valid")
EVENT_HEADER = ("kind", "onset", "duration", "centroid_x", "centroid_y", "amplitude", "aoi")

FIXATION = "Fixation"
SACCADE = "Saccade"
BLINK = "Blink"

PUPIL_MEASURED = 0
PUPIL_INTERPOLATED = 1
PUPIL_INVALID = 2


class GazeDataError(ValueError):
    """Raised for malformed gaze streams or AOI layouts."""


@dataclass(frozen=True)
class GazeSamples:
    """Column-wise gaze stream of one trial.

    ``valid`` is the tracker flag; a sample with ``pupil_area <= 0`` is treated
    as eyelid-closed regardless of the flag.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    pupil_area: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in GAZE_HEADER:
            dtype = bool if name == "valid" else float
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            if arr.ndim != 1:
                raise GazeDataError(f"{name} must be one-dimensional")
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        n = arrays["t"].size
        if any(a.size != n for a in arrays.values()):
            raise GazeDataError("sample columns differ in length")
        if n > 1 and not np.all(np.diff(arrays["t"]) > 0):
            bad = int(np.argmax(np.diff(arrays["t"]) <= 0)) + 1
            raise GazeDataError(f"timestamps not strictly increasing at sample {bad}")

    def __len__(self) -> int:
        return self.t.size

    @property
    def usable(self) -> np.ndarray:
        return self.valid & (self.pupil_area > 0)

    @property
    def period(self) -> float:
        if len(self) < 2:
            return 1.0 / SAMPLE_RATE_HZ
        return float(np.median(np.diff(self.t)))

    @property
    def edges(self) -> np.ndarray:
        """Interval boundaries, one more than the sample count."""
        if len(self) == 0:
            return np.zeros(1)
        return np.append(self.t, self.t[-1] + self.period)

    @property
    def duration(self) -> float:
        e = self.edges
        return float(e[-1] - e[0])

    @classmethod
    def from_csv(cls, path) -> "GazeSamples":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != GAZE_HEADER:
                raise GazeDataError(f"{path}: header must be {','.join(GAZE_HEADER)}")
            cols = [[] for _ in GAZE_HEADER]
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(GAZE_HEADER):
                    raise GazeDataError(f"{path}:{lineno}: expected {len(GAZE_HEADER)} fields")
                for j, cell in enumerate(row):
                    try:
                        cols[j].append(float(cell))
                    except ValueError:
                        raise GazeDataError(
                            f"{path}:{lineno}: column {GAZE_HEADER[j]} is not numeric: {cell!r}"
                        ) from None
        t, x, y, area, valid = (np.asarray(c, dtype=float) for c in cols)
        try:
            return cls(t=t, x=x, y=y, pupil_area=area, valid=valid != 0)
        except GazeDataError as exc:
            raise GazeDataError(f"{path}: {exc}") from None

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            fh.write(",".join(GAZE_HEADER) + "\n")
            lines = (
                f"{t:.7f},{x:.3f},{y:.3f},{a:.4f},{int(v)}\n"
                for t, x, y, a, v in zip(self.t, self.x, self.y, self.pupil_area, self.valid)
            )
            fh.writelines(lines)


@dataclass(frozen=True)
class GazeEvent:
    kind: str
    onset: float
    duration: float
    centroid_x: Optional[float] = None
    centroid_y: Optional[float] = None
    amplitude: Optional[float] = None
    aoi: Optional[str] = None
    # sample index range [start, stop) of the event
    start: int = -1
    stop: int = -1

    def with_aoi(self, aoi: Optional[str]) -> "GazeEvent":
        return GazeEvent(
            self.kind, self.onset, self.duration, self.centroid_x, self.centroid_y,
            self.amplitude, aoi, self.start, self.stop,
        )


@dataclass(frozen=True)
class Gap:
    """Invalid run too long to be a blink."""

    onset: float
    duration: float
    start: int
    stop: int


@dataclass(frozen=True)
class EventSet:
    fixations: list
    saccades: list
    blinks: list
    gaps: list
    trial_duration: float
    unclassified_duration: float

    @property
    def events(self) -> list:
        """All events ordered by onset (fixations, saccades and blinks)."""
        out = [*self.fixations, *self.saccades, *self.blinks]
        return sorted(out, key=lambda e: (e.onset, e.kind))


def _runs(mask: np.ndarray) -> list:
    """(start, stop) pairs of maximal True runs."""
    if mask.size == 0:
        return []
    padded = np.concatenate(([False], mask, [False])).astype(np.int8)
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    stops = np.flatnonzero(d == -1)
    return list(zip(starts.tolist(), stops.tolist()))


def detect_blinks(samples: GazeSamples) -> tuple:
    """Split invalid runs into blinks (<= 200 ms) and data-loss gaps.

    Returns ``(blinks, gaps)``.
    """
    if len(samples) == 0:
        return [], []
    edges = samples.edges
    blinks, gaps = [], []
    for start, stop in _runs(~samples.usable):
        onset = float(edges[start])
        dur = float(edges[stop] - edges[start])
        if dur <= MAX_BLINK_S + _TIME_TOL:
            blinks.append(GazeEvent(BLINK, onset, dur, start=start, stop=stop))
        else:
            gaps.append(Gap(onset, dur, start, stop))
    return blinks, gaps


def sample_speeds(samples: GazeSamples) -> np.ndarray:
    """Point-to-point speed in px/s for each consecutive pair; NaN where a side is invalid."""
    if len(samples) < 2:
        return np.zeros(0)
    dt = np.diff(samples.t)
    speed = np.hypot(np.diff(samples.x), np.diff(samples.y)) / dt
    ok = samples.usable[:-1] & samples.usable[1:]
    return np.where(ok, speed, np.nan)


def detect_saccades(samples: GazeSamples) -> list:
    """Runs of above-threshold pair speeds whose duration lies in the saccade band.

    A run over pairs ``p0 .. p1-1`` occupies samples ``[p0, p1)``; sample ``p1``
    is the landing point and starts whatever follows.
    """
    if int(samples.usable.sum()) < 2:
        return []
    speed = sample_speeds(samples)
    fast = np.nan_to_num(speed, nan=0.0) >= SACCADE_SPEED_PX_S * (1.0 - _SPEED_RTOL)
    t = samples.t
    out = []
    for p0, p1 in _runs(fast):
        dur = float(t[p1] - t[p0])
        if dur < MIN_SACCADE_S - _TIME_TOL or dur > MAX_SACCADE_S + _TIME_TOL:
            continue
        amp = math.hypot(samples.x[p1] - samples.x[p0], samples.y[p1] - samples.y[p0])
        out.append(GazeEvent(SACCADE, float(t[p0]), dur, amplitude=float(amp), start=p0, stop=p1))
    return out


def detect_fixations(samples: GazeSamples, saccades, blinks, invalid_gaps) -> list:
    """Maximal usable runs left after removing saccades, blinks and gaps (>= 40 ms)."""
    if len(samples) == 0:
        return []
    free = samples.usable.copy()
    for ev in (*saccades, *blinks, *invalid_gaps):
        free[ev.start:ev.stop] = False
    edges = samples.edges
    out = []
    for start, stop in _runs(free):
        dur = float(edges[stop] - edges[start])
        if dur < MIN_FIXATION_S - _TIME_TOL:
            continue
        out.append(
            GazeEvent(
                FIXATION,
                float(edges[start]),
                dur,
                centroid_x=float(samples.x[start:stop].mean()),
                centroid_y=float(samples.y[start:stop].mean()),
                start=start,
                stop=stop,
            )
        )
    return out


def detect_events(samples: GazeSamples, layout: Optional["AoiLayout"] = None) -> EventSet:
    blinks, gaps = detect_blinks(samples)
    saccades = detect_saccades(samples)
    fixations = detect_fixations(samples, saccades, blinks, gaps)
    if layout is not None:
        fixations = assign_aoi(fixations, layout)
    total = samples.duration
    classified = sum(e.duration for e in (*fixations, *saccades, *blinks)) + sum(g.duration for g in gaps)
    return EventSet(fixations, saccades, blinks, gaps, total, max(total - classified, 0.0))


# ---------------------------------------------------------------------------
# AOI assignment


@dataclass(frozen=True)
class AoiRegion:
    name: str
    x0: float
    y0: float
    x1: float
    y1: float
    priority: int

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


@dataclass(frozen=True)
class AoiLayout:
    """Named screen rectangles; on overlap the lowest ``priority`` number wins."""

    regions: tuple

    def __post_init__(self):
        names = [r.name for r in self.regions]
        unknown = sorted(set(names) - set(AOI_NAMES))
        if unknown:
            raise GazeDataError(f"unknown AOI region(s): {', '.join(unknown)}")
        if len(set(names)) != len(names):
            raise GazeDataError("duplicate AOI region names")
        for r in self.regions:
            if not (0 <= r.x0 < r.x1 <= FRAME_WIDTH and 0 <= r.y0 < r.y1 <= FRAME_HEIGHT):
                raise GazeDataError(f"AOI {r.name} lies outside the {FRAME_WIDTH}x{FRAME_HEIGHT} frame")
        ordered = tuple(sorted(self.regions, key=lambda r: (r.priority, AOI_NAMES.index(r.name))))
        object.__setattr__(self, "regions", ordered)

    def label(self, x: float, y: float) -> Optional[str]:
        for region in self.regions:
            if region.contains(x, y):
                return region.name
        return None

    @classmethod
    def from_dict(cls, data: dict) -> "AoiLayout":
        regions = []
        for name, spec in data.items():
            try:
                regions.append(
                    AoiRegion(name, float(spec["x0"]), float(spec["y0"]), float(spec["x1"]),
                              float(spec["y1"]), int(spec["priority"]))
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise GazeDataError(f"AOI {name}: malformed region ({exc})") from None
        return cls(tuple(regions))

    @classmethod
    def from_json(cls, path) -> "AoiLayout":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            r.name: {"x0": r.x0, "y0": r.y0, "x1": r.x1, "y1": r.y1, "priority": r.priority}
            for r in self.regions
        }


def default_layout() -> AoiLayout:
    """Driver's-view layout for a 1920x1080 frame: mirrors over road over sky."""
    return AoiLayout((
        AoiRegion("backMirror", 840, 40, 1080, 150, 1),
        AoiRegion("leftMirror", 40, 560, 300, 720, 2),
        AoiRegion("rightMirror", 1620, 560, 1880, 720, 3),
        AoiRegion("road", 0, 420, 1920, 900, 4),
        AoiRegion("sky", 0, 0, 1920, 380, 5),
    ))


def assign_aoi(fixations: Iterable[GazeEvent], layout: AoiLayout) -> list:
    return [f.with_aoi(layout.label(f.centroid_x, f.centroid_y)) for f in fixations]


# ---------------------------------------------------------------------------
# Pupil


@dataclass(frozen=True)
class PupilSeries:
    t: np.ndarray
    diameter: np.ndarray  # mm, NaN where flag is invalid
    flag: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return self.flag != PUPIL_INVALID

    @property
    def all_invalid(self) -> bool:
        return not bool(self.ok.any())


def _window_bounds(n: int, window: int) -> tuple:
    half = window // 2
    idx = np.arange(n)
    lo = np.clip(idx - half, 0, n)
    hi = np.clip(idx - half + window, 0, n)
    return lo, hi


def moving_mean(values: np.ndarray, window: int = FILTER_WINDOW) -> np.ndarray:
    """Centred moving mean ignoring NaN, truncated at the edges.

    The window for sample ``i`` is ``[i - window//2, i - window//2 + window)``.
    """
    n = values.size
    ok = ~np.isnan(values)
    csum = np.concatenate(([0.0], np.cumsum(np.where(ok, values, 0.0))))
    ccount = np.concatenate(([0], np.cumsum(ok)))
    lo, hi = _window_bounds(n, window)
    count = ccount[hi] - ccount[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (csum[hi] - csum[lo]) / count
    out[count == 0] = np.nan
    return out


def moving_median(values: np.ndarray, window: int = FILTER_WINDOW) -> np.ndarray:
    """Centred moving median ignoring NaN, truncated at the edges (same window as moving_mean)."""
    n = values.size
    if n == 0:
        return values.copy()
    nan = np.isnan(values)
    lo, hi = _window_bounds(n, window)
    filled = np.where(nan, 0.0, values)
    if window % 2:
        out = ndimage.median_filter(filled, size=window, mode="nearest")
    else:
        # even window: mean of the two middle order statistics, as np.median
        lo_mid = ndimage.rank_filter(filled, rank=window // 2 - 1, size=window, mode="nearest")
        hi_mid = ndimage.rank_filter(filled, rank=window // 2, size=window, mode="nearest")
        out = 0.5 * (lo_mid + hi_mid)
    cnan = np.concatenate(([0], np.cumsum(nan)))
    redo = (hi - lo < window) | ((cnan[hi] - cnan[lo]) > 0)
    for i in np.flatnonzero(redo):
        win = values[lo[i]:hi[i]]
        win = win[~np.isnan(win)]
        out[i] = np.median(win) if win.size else np.nan
    return out


def area_to_diameter(area, scale: float = 1.0):
    return 2.0 * np.sqrt(np.asarray(area, dtype=float) / np.pi) * scale


def pupil_pipeline(samples: GazeSamples, blinks: Sequence[GazeEvent], scale: float = 1.0,
                   window: int = FILTER_WINDOW) -> PupilSeries:
    """Moving mean, blink interpolation, median filter, then area to diameter."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    n = len(samples)
    usable = samples.usable
    area = np.where(usable, samples.pupil_area, np.nan)
    smoothed = moving_mean(area, window)
    flag = np.where(usable, PUPIL_MEASURED, PUPIL_INVALID).astype(np.int8)

    for blink in blinks:
        s, e = blink.start, blink.stop
        left = s - 1 if s > 0 and usable[s - 1] else None
        right = e if e < n and usable[e] else None
        if left is None and right is None:
            continue
        if left is None:
            fill = np.full(e - s, smoothed[right])
        elif right is None:
            fill = np.full(e - s, smoothed[left])
        else:
            fill = np.interp(samples.t[s:e], [samples.t[left], samples.t[right]],
                             [smoothed[left], smoothed[right]])
        smoothed[s:e] = fill
        flag[s:e] = PUPIL_INTERPOLATED

    filtered = moving_median(smoothed, window)
    filtered[flag == PUPIL_INVALID] = np.nan
    diameter = area_to_diameter(filtered, scale)
    return PupilSeries(samples.t.copy(), diameter, flag)


# ---------------------------------------------------------------------------
# Event CSV


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_events(events: Iterable[GazeEvent], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for ev in events:
            w.writerow([_fmt(getattr(ev, name)) for name in EVENT_HEADER])


def read_events(path) -> list:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != EVENT_HEADER:
            raise GazeDataError(f"{path}: header must be {','.join(EVENT_HEADER)}")
        for row in reader:
            opt = lambda k: float(row[k]) if row[k] != "" else None  # noqa: E731
            out.append(GazeEvent(
                row["kind"], float(row["onset"]), float(row["duration"]),
                opt("centroid_x"), opt("centroid_y"), opt("amplitude"), row["aoi"] or None,
            ))
    return out
