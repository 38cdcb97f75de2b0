"""Synthetic takeover study: scenarios, simulated participants, raw 2 kHz gaze and SA labels.

Labels come from a fixed latent model over quantities the gaze script realizes
(mirror checks, road fixations, fixation durations, clip length) plus a latent
skill term and optional Gaussian noise. Every trial draws from its own RNG
streams keyed by ``(seed, participant, trial, stream)``, so output does not
depend on generation order or worker count.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .features import CONTEXT_FEATURES, Dataset, extract_features
from .gaze_events import (
    AOI_NAMES,
    FRAME_HEIGHT,
    FRAME_WIDTH,
    SAMPLE_RATE_HZ,
    AoiLayout,
    GazeSamples,
    default_layout,
    detect_events,
    pupil_pipeline,
)
from .sa_score import EGO_SPEED_KMH, LANES, Scene, Vehicle

GENERATOR_VERSION = 1
VIDEO_CYCLE = (1, 3, 6, 9, 12, 20)
HAZARD_CYCLE = (1, 3, 6, 9)
N_HAZARD_DEFAULT = 16

# SA = clamp01(intercept + sum_k weight_k * term_k + noise)
WEIGHTS = {
    "intercept": 0.40,
    "video_length": 0.20,      # ln(L) / ln(20)
    "back_mirror": 0.30,       # min(backMirror, 8) / 8
    "fixation_duration": 0.15,  # clip((fMean_ms - 150) / 400, 0, 1)
    "road_overfixation": -0.30,  # min(max(road - 6, 0), 24) / 24
    "skill": 0.05,
}
NOISE_SD = 0.05

MIN_FIX_SAMPLES = 160     # 80 ms
MIN_SPLIT_SAMPLES = 120   # 60 ms on each side of a blink
MIN_AMPLITUDE_PX = 80.0
AOI_MARGIN_PX = 6.0
JITTER_PX = 0.2
PUPIL_DRIFT_PER_S = 0.08
PUPIL_WOBBLE = 0.015

STREAM_GAZE, STREAM_CONTEXT, STREAM_NOISE, STREAM_PARTICIPANT, STREAM_SCENE = range(5)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


# --- scenarios ---

@dataclass(frozen=True)
class ScenarioSpec:
    trial_id: int
    video_length: int
    hazard: bool
    decision: int          # 1 no need to take over, 2 evade left, 3 evade right, 4 brake
    scene: Scene


def _scene(rng: np.random.Generator, hazard: bool) -> Scene:
    """Rejection-sample 5-6 vehicles under the lane, position and speed-mix constraints."""
    while True:
        n = int(rng.integers(5, 7))
        per_lane = np.ones(3, dtype=int)
        for lane in rng.choice(3, size=n - 3, replace=False):
            per_lane[lane] += 1
        lanes = [LANES[i] for i in range(3) for _ in range(per_lane[i])]
        n_front = int(rng.integers(2, 5))
        front = np.zeros(n, dtype=bool)
        front[rng.choice(n, size=min(n_front, n), replace=False)] = True
        far = float(rng.uniform(50, 80))
        pos = np.where(front, rng.uniform(5, far, n), -rng.uniform(5, far, n))
        pos[int(np.argmax(np.abs(pos)))] = far if pos[int(np.argmax(np.abs(pos)))] > 0 else -far
        speeds = rng.choice([80, 100, 120], size=n)
        counts = {s: int(np.sum(speeds == s)) for s in (80, 100, 120)}
        if not (counts[80] <= 3 and 1 <= counts[100] <= 3 and 1 <= counts[120] <= 3):
            continue
        vehicles = [Vehicle(l, round(float(p), 1), int(s)) for l, p, s in zip(lanes, pos, speeds)]
        if hazard:
            ahead = [i for i, v in enumerate(vehicles) if v.lane == "middle" and v.pos_m > 0]
            if not ahead:
                continue
            i = ahead[0]
            vehicles[i] = Vehicle("middle", round(float(rng.uniform(19, 22)), 1), vehicles[i].speed_kmh)
            if max(abs(v.pos_m) for v in vehicles) < 50:
                continue
        return Scene(tuple(vehicles))


def make_scenarios(n_trials: int, seed: int) -> list:
    """Trial lengths: hazard clips cycle 1/3/6/9 s, the rest cycle 1..20 s; order shuffled."""
    n_hazard = min(n_trials, int(round(n_trials * N_HAZARD_DEFAULT / 33)))
    lengths = [(HAZARD_CYCLE[i % 4], True) for i in range(n_hazard)]
    lengths += [(VIDEO_CYCLE[i % 6], False) for i in range(n_trials - n_hazard)]
    order = _rng(seed, 0, 0, STREAM_SCENE).permutation(n_trials)
    out = []
    for tid, k in enumerate(order, start=1):
        length, hazard = lengths[int(k)]
        rng = _rng(seed, 0, tid, STREAM_SCENE)
        decision = int(rng.integers(2, 5)) if hazard else 1
        out.append(ScenarioSpec(tid, length, hazard, decision, _scene(rng, hazard)))
    return out


# --- participants ---

@dataclass(frozen=True)
class SimParticipant:
    participant_id: int
    skill: float
    age: int
    gender: int
    year_driving: int
    driving_frequency: int
    fixation_scale_ms: float
    aoi_probs: tuple        # aligned with AOI_NAMES
    pupil_base: float
    blink_prob: float


def make_participant(pid: int, seed: int) -> SimParticipant:
    rng = _rng(seed, pid, 0, STREAM_PARTICIPANT)
    skill = float(rng.uniform())
    age = int(rng.integers(22, 30))
    gender = int(rng.random() < 29 / 32)
    year_driving = int(np.clip(round(1 + skill * (age - 19) + rng.uniform(-1, 1)), 1, age - 18))
    freq = int(np.clip(round(1 + (1 - skill) * 4 + rng.uniform(-0.6, 0.6)), 1, 6))
    back = 0.06 + 0.22 * skill
    side = 0.04 + 0.04 * skill
    sky = 0.06
    probs = {"backMirror": back, "leftMirror": side, "rightMirror": side, "sky": sky,
             "road": 1.0 - back - 2 * side - sky}
    return SimParticipant(
        participant_id=pid,
        skill=skill,
        age=age,
        gender=gender,
        year_driving=year_driving,
        driving_frequency=freq,
        fixation_scale_ms=float(200 + 250 * skill + rng.uniform(-30, 30)),
        aoi_probs=tuple(probs[a] for a in AOI_NAMES),
        pupil_base=float(rng.uniform(3.0, 4.5)),
        blink_prob=float(rng.uniform(0.08, 0.2)),
    )


# --- gaze script ---

@dataclass(frozen=True)
class Segment:
    kind: str                 # "fix", "sac" or "blink"
    n: int                    # samples
    target: tuple = (0.0, 0.0)
    aoi: Optional[str] = None


@dataclass(frozen=True)
class GazeScript:
    segments: tuple
    n_fixations: int
    n_saccades: int
    n_blinks: int
    aoi_counts: dict
    fixation_ms: tuple
    amplitudes: tuple


def saccade_samples(amplitude: float) -> int:
    """Duration grows with amplitude: clip(15 ms + A / 40000 px/s, 16 ms, 120 ms)."""
    d = min(max(0.015 + amplitude / 40000.0, 0.016), 0.12)
    return int(round(d * SAMPLE_RATE_HZ))


def _target(rng, layout: AoiLayout, aoi: str, pos) -> tuple:
    region = next(r for r in layout.regions if r.name == aoi)
    for _ in range(200):
        x = float(rng.uniform(region.x0 + AOI_MARGIN_PX, region.x1 - AOI_MARGIN_PX))
        y = float(rng.uniform(region.y0 + AOI_MARGIN_PX, region.y1 - AOI_MARGIN_PX))
        if layout.label(x, y) != aoi or any(
            layout.label(x + dx, y + dy) != aoi for dx in (-AOI_MARGIN_PX, AOI_MARGIN_PX) for dy in (-AOI_MARGIN_PX, AOI_MARGIN_PX)
        ):
            continue
        if pos is None or math.hypot(x - pos[0], y - pos[1]) >= MIN_AMPLITUDE_PX:
            return (x, y)
    raise RuntimeError(f"could not place a target in {aoi}")


def script_trial(rng: np.random.Generator, participant: SimParticipant, video_length: float,
                 layout: AoiLayout) -> GazeScript:
    """Alternate fixations and saccades until the clip ends; blinks may split a fixation."""
    total = int(round(video_length * SAMPLE_RATE_HZ))
    probs = np.array(participant.aoi_probs)
    shape = 6.0
    segs = []
    aoi = "road"
    pos = _target(rng, layout, aoi, None)
    remaining = total
    while True:
        ms = max(rng.gamma(shape, participant.fixation_scale_ms / shape), MIN_FIX_SAMPLES / 2)
        n_fix = max(int(round(ms * SAMPLE_RATE_HZ / 1000)), MIN_FIX_SAMPLES)
        next_aoi = AOI_NAMES[int(rng.choice(len(AOI_NAMES), p=probs))]
        next_pos = _target(rng, layout, next_aoi, pos)
        n_sac = saccade_samples(math.hypot(next_pos[0] - pos[0], next_pos[1] - pos[1]))
        last = remaining - n_fix < n_sac + MIN_FIX_SAMPLES
        if last:
            n_fix = remaining
        segs += _fixation(rng, n_fix, pos, aoi, participant.blink_prob)
        if last:
            break
        segs.append(Segment("sac", n_sac, next_pos))
        remaining -= n_fix + n_sac
        pos, aoi = next_pos, next_aoi

    fixes = [s for s in segs if s.kind == "fix"]
    counts = {a: sum(1 for s in fixes if s.aoi == a) for a in AOI_NAMES}
    amps, prev = [], None
    for s in segs:
        if s.kind == "fix":
            prev = s.target
        elif s.kind == "sac":
            amps.append(math.hypot(s.target[0] - prev[0], s.target[1] - prev[1]))
    return GazeScript(
        segments=tuple(segs),
        n_fixations=len(fixes),
        n_saccades=sum(1 for s in segs if s.kind == "sac"),
        n_blinks=sum(1 for s in segs if s.kind == "blink"),
        aoi_counts=counts,
        fixation_ms=tuple(s.n * 1000.0 / SAMPLE_RATE_HZ for s in fixes),
        amplitudes=tuple(amps),
    )


def _fixation(rng, n: int, pos, aoi: str, blink_prob: float) -> list:
    blink_n = int(round(rng.uniform(0.06, 0.18) * SAMPLE_RATE_HZ))
    if rng.random() < blink_prob and n >= 2 * MIN_SPLIT_SAMPLES + blink_n:
        a = int(rng.integers(MIN_SPLIT_SAMPLES, n - blink_n - MIN_SPLIT_SAMPLES + 1))
        return [Segment("fix", a, pos, aoi), Segment("blink", blink_n, pos),
                Segment("fix", n - blink_n - a, pos, aoi)]
    return [Segment("fix", n, pos, aoi)]


def render(script: GazeScript, rng: np.random.Generator, participant: SimParticipant) -> GazeSamples:
    """Sample the script at 2 kHz. Saccade sample k sits at fraction k/n of the path."""
    n = sum(s.n for s in script.segments)
    x = np.empty(n)
    y = np.empty(n)
    valid = np.ones(n, dtype=bool)
    i, pos = 0, np.asarray(script.segments[0].target, dtype=float)
    for s in script.segments:
        sl = slice(i, i + s.n)
        if s.kind == "fix":
            pos = np.asarray(s.target, dtype=float)
            x[sl] = pos[0] + rng.uniform(-JITTER_PX, JITTER_PX, s.n)
            y[sl] = pos[1] + rng.uniform(-JITTER_PX, JITTER_PX, s.n)
        elif s.kind == "sac":
            tgt = np.asarray(s.target, dtype=float)
            frac = np.arange(s.n) / s.n
            x[sl] = pos[0] + (tgt[0] - pos[0]) * frac
            y[sl] = pos[1] + (tgt[1] - pos[1]) * frac
            pos = tgt
        else:
            x[sl], y[sl] = pos
            valid[sl] = False
        i += s.n
    t = np.arange(n) / SAMPLE_RATE_HZ
    phase = rng.uniform(0, 2 * np.pi)
    diameter = participant.pupil_base + PUPIL_DRIFT_PER_S * t + PUPIL_WOBBLE * np.sin(2 * np.pi * t / 1.3 + phase)
    area = np.where(valid, np.pi * (diameter / 2) ** 2, 0.0)
    return GazeSamples(t, np.round(x, 3), np.round(y, 3), np.round(area, 4), valid)


# --- context and labels ---

def context_row(rng: np.random.Generator, p: SimParticipant, sc: ScenarioSpec) -> dict:
    """Table I variables 1-12. They depend on skill and the scenario, never on the label."""
    correct_prob = 0.45 + 0.45 * p.skill
    if rng.random() < correct_prob:
        correct = {1: 1, 2: 2, 3: 3, 4: 5}[sc.decision]
    else:
        correct = 0
    decision_time = float(np.round(np.exp(rng.normal(math.log(3.0 - 1.5 * p.skill), 0.25)), 3))
    danger = float(np.clip(round((75 if sc.hazard else 30) + rng.normal(0, 12)), 0, 100))
    difficulty = float(np.clip(round(70 - 35 * p.skill - 10 * math.log(sc.video_length) / math.log(20)
                                     + rng.normal(0, 10)), 0, 100))
    placed = {}
    for lane in ("left", "right"):
        true_n = sum(1 for v in sc.scene.vehicles if v.lane == lane)
        err = int(rng.random() > 0.5 + 0.4 * p.skill) * int(rng.choice([-1, 1]))
        placed[lane] = float(max(true_n + err, 0))
    return {
        "age": float(p.age),
        "gender": float(p.gender),
        "yearDriving": float(p.year_driving),
        "drivingFrequency": float(p.driving_frequency),
        "videoLength": float(sc.video_length),
        "decisionTime": decision_time,
        "decisionMade": float(sc.decision),
        "correctDecision": float(correct),
        "danger": danger,
        "difficulty": difficulty,
        "carPlacedLeft": placed["left"],
        "carPlacedRight": placed["right"],
    }


def latent_terms(script: GazeScript, video_length: float, skill: float) -> dict:
    f_mean = float(np.mean(script.fixation_ms))
    return {
        "video_length": math.log(video_length) / math.log(20.0),
        "back_mirror": min(script.aoi_counts["backMirror"], 8) / 8.0,
        "fixation_duration": min(max((f_mean - 150.0) / 400.0, 0.0), 1.0),
        "road_overfixation": min(max(script.aoi_counts["road"] - 6, 0), 24) / 24.0,
        "skill": skill,
    }


def sa_label(terms: dict, noise: float) -> tuple:
    raw = WEIGHTS["intercept"] + sum(WEIGHTS[k] * v for k, v in terms.items()) + noise
    return raw, min(max(raw, 0.0), 1.0)


# --- study ---

@dataclass
class SimTrial:
    participant_id: int
    trial_id: int
    scenario: ScenarioSpec
    script: GazeScript
    meta: dict
    terms: dict
    noise: float
    sa_raw: float
    sa: float
    samples: Optional[GazeSamples] = field(default=None, repr=False)


@dataclass
class Study:
    seed: int
    noise_sd: float
    scenarios: list
    participants: list
    trials: list

    @property
    def n_trials(self) -> int:
        return len(self.trials)


def simulate_trial(seed: int, p: SimParticipant, sc: ScenarioSpec, noise_sd: float,
                   layout: AoiLayout, render_samples: bool = True) -> SimTrial:
    g = _rng(seed, p.participant_id, sc.trial_id, STREAM_GAZE)
    script = script_trial(g, p, sc.video_length, layout)
    samples = render(script, g, p) if render_samples else None
    meta = context_row(_rng(seed, p.participant_id, sc.trial_id, STREAM_CONTEXT), p, sc)
    terms = latent_terms(script, sc.video_length, p.skill)
    noise = float(_rng(seed, p.participant_id, sc.trial_id, STREAM_NOISE).normal(0.0, 1.0)) * noise_sd
    raw, sa = sa_label(terms, noise)
    return SimTrial(p.participant_id, sc.trial_id, sc, script, meta, terms, noise, raw, sa, samples)


def generate_study(n_participants: int = 32, n_trials: int = 33, seed: int = 0, noise_sd: float = NOISE_SD,
                   render_samples: bool = True) -> Study:
    if n_participants < 1 or n_trials < 1:
        raise ValueError("need at least one participant and one trial")
    if not 0 <= noise_sd <= NOISE_SD:
        raise ValueError(f"noise_sd must lie in [0, {NOISE_SD}]")
    layout = default_layout()
    scenarios = make_scenarios(n_trials, seed)
    participants = [make_participant(pid, seed) for pid in range(1, n_participants + 1)]
    trials = [simulate_trial(seed, p, sc, noise_sd, layout, render_samples)
              for p in participants for sc in scenarios]
    return Study(seed, noise_sd, scenarios, participants, trials)


def truth_table(study: Study) -> list:
    """Per-trial generative drivers and label arithmetic."""
    rows = []
    for tr in study.trials:
        row = {"participant_id": tr.participant_id, "trial_id": tr.trial_id,
               "videoLength": tr.scenario.video_length, "hazard": int(tr.scenario.hazard),
               "backMirror": tr.script.aoi_counts["backMirror"], "road": tr.script.aoi_counts["road"],
               "numF": tr.script.n_fixations, "numS": tr.script.n_saccades, "blinks": tr.script.n_blinks,
               "fMean": float(np.mean(tr.script.fixation_ms))}
        row.update({f"term_{k}": v for k, v in tr.terms.items()})
        row.update({"noise": tr.noise, "sa_raw": tr.sa_raw, "sa": tr.sa})
        rows.append(row)
    return rows


def trial_dataset(study: Study, layout: Optional[AoiLayout] = None) -> Dataset:
    """Run event detection and feature extraction on the in-memory streams."""
    layout = layout or default_layout()
    records = []
    for tr in study.trials:
        samples = tr.samples
        if samples is None:
            raise ValueError("study was generated without gaze samples")
        events = detect_events(samples, layout)
        pupil = pupil_pipeline(samples, events.blinks)
        records.append(extract_features(events, pupil, tr.meta, tr.participant_id, tr.trial_id, tr.sa))
    return Dataset.from_records(records)


# --- files ---

def gaze_name(pid: int, tid: int) -> str:
    return f"p{pid:02d}_t{tid:02d}.csv"


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _num(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_study(study: Study, out_dir) -> dict:
    """Write gaze CSVs, metadata, labels, the generative ledger, scenes and a manifest."""
    out = Path(out_dir)
    (out / "gaze").mkdir(parents=True, exist_ok=True)
    (out / "scenes").mkdir(exist_ok=True)
    for tr in study.trials:
        tr.samples.to_csv(out / "gaze" / gaze_name(tr.participant_id, tr.trial_id))
    for sc in study.scenarios:
        data = {**sc.scene.to_dict(), "video_length": sc.video_length, "hazard": sc.hazard,
                "decision": sc.decision}
        (out / "scenes" / f"t{sc.trial_id:02d}.json").write_text(json.dumps(data, indent=1) + "\n")
    _write_rows(out / "meta.csv", ["participant_id", "trial_id", *CONTEXT_FEATURES],
                ([tr.participant_id, tr.trial_id] + [_num(tr.meta[k]) for k in CONTEXT_FEATURES]
                 for tr in study.trials))
    _write_rows(out / "labels.csv", ["participant_id", "trial_id", "sa"],
                ([tr.participant_id, tr.trial_id, repr(float(tr.sa))] for tr in study.trials))
    ledger = truth_table(study)
    _write_rows(out / "ledger.csv", list(ledger[0]), ([_num(v) for v in row.values()] for row in ledger))
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "seed": study.seed,
        "n_participants": len(study.participants),
        "n_trials": len(study.scenarios),
        "rows": study.n_trials,
        "noise_sd": study.noise_sd,
        "weights": WEIGHTS,
        "sample_rate_hz": SAMPLE_RATE_HZ,
        "frame": [FRAME_WIDTH, FRAME_HEIGHT],
        "ego_speed_kmh": EGO_SPEED_KMH,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
