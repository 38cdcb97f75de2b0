"""Ground-truth situation awareness from a scene recreation.

Three error measures (vehicle count, placement distance, speed relation to the
ego vehicle) are each mapped to [0, 1] and averaged with equal weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

LANES = ("left", "middle", "right")
SPEEDS_KMH = (80, 100, 120)
EGO_SPEED_KMH = 100
MAX_DISTANCE_M = 80.0


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Vehicle:
    lane: str
    pos_m: float
    speed_kmh: int

    def __post_init__(self):
        if self.lane not in LANES:
            raise SceneError(f"unknown lane {self.lane!r}")
        if self.speed_kmh not in SPEEDS_KMH:
            raise SceneError(f"speed must be one of {SPEEDS_KMH}, got {self.speed_kmh}")

    @property
    def speed_relation(self) -> int:
        """-1 slower than ego, 0 equal, +1 faster."""
        return (self.speed_kmh > EGO_SPEED_KMH) - (self.speed_kmh < EGO_SPEED_KMH)


@dataclass(frozen=True)
class Scene:
    vehicles: tuple

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        try:
            vs = tuple(Vehicle(v["lane"], float(v["pos_m"]), int(v["speed_kmh"])) for v in data["vehicles"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneError(f"malformed scene: {exc}") from None
        return cls(vs)

    @classmethod
    def from_json(cls, path) -> "Scene":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"vehicles": [{"lane": v.lane, "pos_m": v.pos_m, "speed_kmh": v.speed_kmh} for v in self.vehicles]}


def validate_truth(scene: Scene) -> None:
    """Scenario constraints of a true scene (recreations are unconstrained)."""
    vs = scene.vehicles
    if not 5 <= len(vs) <= 6:
        raise SceneError(f"a scene holds 5 or 6 vehicles, got {len(vs)}")
    for v in vs:
        if abs(v.pos_m) > MAX_DISTANCE_M:
            raise SceneError(f"vehicle at {v.pos_m} m lies beyond {MAX_DISTANCE_M} m")


def match_vehicles(truth: Scene, rec: Scene) -> list:
    """Greedy nearest-position matching within lanes.

    Returns ``(placed_index, truth_index)`` pairs. Candidate pairs are taken in
    order of absolute position difference (ties: placed index, truth index).
    """
    cands = sorted(
        (abs(p.pos_m - t.pos_m), i, j)
        for i, p in enumerate(rec.vehicles)
        for j, t in enumerate(truth.vehicles)
        if p.lane == t.lane
    )
    used_p, used_t, out = set(), set(), []
    for _, i, j in cands:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        out.append((i, j))
    return sorted(out)


@dataclass(frozen=True)
class SAScore:
    s1: float
    s2: float
    s3: float
    sa: float
    n_matched: int
    no_match: bool


def score_sa(truth: Scene, rec: Scene, matching: Optional[Sequence[tuple]] = None) -> SAScore:
    if not truth.vehicles:
        raise SceneError("true scene has no vehicles")
    if matching is None:
        matching = match_vehicles(truth, rec)
    n_true, n_placed = len(truth.vehicles), len(rec.vehicles)
    s1 = 1.0 - min(abs(n_true - n_placed), n_true) / n_true
    if not matching:
        return SAScore(s1, 0.0, 0.0, s1 / 3.0, 0, True)
    errs = [
        min(abs(rec.vehicles[i].pos_m - truth.vehicles[j].pos_m) / MAX_DISTANCE_M, 1.0)
        for i, j in matching
    ]
    s2 = 1.0 - sum(errs) / len(errs)
    wrong = sum(rec.vehicles[i].speed_relation != truth.vehicles[j].speed_relation for i, j in matching)
    s3 = 1.0 - wrong / len(matching)
    return SAScore(s1, s2, s3, (s1 + s2 + s3) / 3.0, len(matching), False)
