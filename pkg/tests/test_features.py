import math

import numpy as np
import pytest

from gazesa.features import (
    CONTEXT_FEATURES,
    EYE_FEATURES,
    FEATURES,
    Dataset,
    DatasetError,
    TrialRecord,
    eye_only_view,
    extract_features,
    load_dataset,
    write_dataset,
)
from gazesa.gaze_events import FIXATION, EventSet, GazeEvent, PupilSeries, PUPIL_MEASURED

META = {k: float(i) for i, k in enumerate(CONTEXT_FEATURES)}


def _pupil(d=3.5, n=2000):
    return PupilSeries(np.arange(n) * 0.0005, np.full(n, d), np.full(n, PUPIL_MEASURED, dtype=np.int8))


def _events(fix=(), sac=()):
    fixes = [GazeEvent(FIXATION, i, d, 0.0, 0.0, aoi=a) for i, (d, a) in enumerate(fix)]
    sacs = [GazeEvent("Saccade", 10 + i, 0.02, amplitude=a) for i, a in enumerate(sac)]
    return EventSet(fixes, sacs, [], [], 1.0, 0.0)


def test_fixation_moments():
    rec = extract_features(_events(fix=[(0.1, "road"), (0.3, "backMirror")]), _pupil(), META)
    assert rec["numF"] == 2
    assert rec["fMean"] == pytest.approx(200.0)
    assert rec["fMax"] == pytest.approx(300.0)
    # sample sd of {100, 300}
    assert rec["fStd"] == pytest.approx(math.sqrt(((100 - 200) ** 2 + (300 - 200) ** 2) / 1), rel=1e-12)
    assert rec["fStd"] == pytest.approx(141.42, abs=0.01)
    assert rec["road"] == 1 and rec["backMirror"] == 1 and rec["sky"] == 0


def test_no_events():
    rec = extract_features(_events(), _pupil(), META)
    assert rec["numS"] == rec["numF"] == 0
    for a in ("backMirror", "leftMirror", "rightMirror", "road", "sky"):
        assert rec[a] == 0
    for m in ("sAmpMean", "sAmpStd", "sAmpMax", "fMean", "fStd", "fMax"):
        assert rec[m] is None


def test_single_event_sd_masked():
    rec = extract_features(_events(fix=[(0.2, None)], sac=[120.0]), _pupil(), META)
    assert rec["fStd"] is None and rec["sAmpStd"] is None
    assert rec["fMean"] == rec["fMax"] == pytest.approx(200.0)
    assert rec["sAmpMean"] == rec["sAmpMax"] == 120.0


def test_constant_pupil():
    rec = extract_features(_events(), _pupil(3.5), META)
    assert rec["pupilMean"] == pytest.approx(3.5)
    assert rec["pupilStd"] == 0.0
    assert rec["pupilChange"] == 0.0


def test_pupil_change_windows():
    n = 4000  # 2 s
    d = np.where(np.arange(n) < 400, 3.0, 3.2)
    d[-400:] = 3.6
    p = PupilSeries(np.arange(n) * 0.0005, d, np.zeros(n, dtype=np.int8))
    rec = extract_features(_events(), p, META)
    assert rec["pupilChange"] == pytest.approx(0.6, abs=1e-12)


def test_all_invalid_pupil_masks():
    p = PupilSeries(np.arange(10) * 0.0005, np.full(10, np.nan), np.full(10, 2, dtype=np.int8))
    rec = extract_features(_events(), p, META)
    assert rec["pupilMean"] is None and rec["pupilStd"] is None and rec["pupilChange"] is None


def test_missing_meta_rejected():
    with pytest.raises(DatasetError, match="age"):
        extract_features(_events(), _pupil(), {k: 1.0 for k in CONTEXT_FEATURES if k != "age"})


def _dataset(n=3, masked=True):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(n, len(FEATURES)))
    if masked:
        X[1, FEATURES.index("sAmpStd")] = np.nan
    return Dataset(np.arange(n), np.arange(n) + 10, X, rng.uniform(size=n), FEATURES)


def test_roundtrip(tmp_path):
    ds = _dataset()
    p = tmp_path / "d.csv"
    write_dataset(ds, p)
    back = load_dataset(p)
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.mask, ds.mask)
    np.testing.assert_array_equal(back.sa, ds.sa)
    assert back.feature_names == FEATURES
    row = p.read_text().splitlines()[2].split(",")
    assert row[2 + FEATURES.index("sAmpStd")] == ""


def test_roundtrip_eye_only(tmp_path):
    ds = eye_only_view(_dataset())
    p = tmp_path / "d.csv"
    write_dataset(ds, p)
    assert load_dataset(p).feature_names == EYE_FEATURES


def test_load_missing_column(tmp_path):
    ds = _dataset()
    p = tmp_path / "d.csv"
    write_dataset(ds.select([f for f in FEATURES if f != "fMean"]), p)
    with pytest.raises(DatasetError, match="fMean"):
        load_dataset(p)


def test_load_unknown_and_non_numeric(tmp_path):
    p = tmp_path / "d.csv"
    write_dataset(_dataset(), p)
    text = p.read_text()
    (tmp_path / "u.csv").write_text(text.replace("fMean", "fMedian", 1))
    with pytest.raises(DatasetError, match="fMedian"):
        load_dataset(tmp_path / "u.csv")
    lines = text.splitlines()
    cells = lines[2].split(",")
    cells[2 + FEATURES.index("danger")] = "abc"
    lines[2] = ",".join(cells)
    (tmp_path / "n.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"row 3, column danger"):
        load_dataset(tmp_path / "n.csv")


def test_duplicate_ids_rejected():
    X = np.zeros((2, len(FEATURES)))
    with pytest.raises(DatasetError, match="duplicate"):
        Dataset([1, 1], [2, 2], X, [0.5, 0.5], FEATURES)


def test_eye_only_view():
    ds = _dataset(5)
    eye = eye_only_view(ds)
    assert eye.X.shape == (5, 16) and eye.feature_names == EYE_FEATURES
    assert len(FEATURES) == 28
    again = eye_only_view(eye)
    np.testing.assert_array_equal(again.X, eye.X)
    assert again.feature_names == eye.feature_names


def test_records_roundtrip():
    ds = _dataset()
    back = Dataset.from_records(ds.records())
    np.testing.assert_array_equal(back.X, ds.X)


def test_unknown_record_feature():
    with pytest.raises(DatasetError):
        TrialRecord(0, 0, {"blinkRate": 1.0})
