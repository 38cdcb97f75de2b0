import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gazesa.gaze_events import GazeSamples, default_layout, detect_events
from gazesa.sa_score import validate_truth
from gazesa.synth import (
    WEIGHTS,
    generate_study,
    latent_terms,
    make_participant,
    make_scenarios,
    saccade_samples,
    script_trial,
    render,
    sa_label,
    trial_dataset,
    truth_table,
    write_study,
)


@pytest.fixture(scope="module")
def small():
    return generate_study(3, 8, seed=11)


def test_default_counts_without_rendering():
    study = generate_study(seed=0, render_samples=False)
    assert study.n_trials == 32 * 33 == 1056
    lengths = [s.video_length for s in study.scenarios]
    assert sum(s.hazard for s in study.scenarios) == 16
    assert all(s.video_length in (1, 3, 6, 9) for s in study.scenarios if s.hazard)
    assert sorted(set(lengths)) == [1, 3, 6, 9, 12, 20]


def test_scenes_respect_constraints():
    for sc in make_scenarios(33, seed=4):
        validate_truth(sc.scene)
        lanes = [v.lane for v in sc.scene.vehicles]
        assert all(1 <= lanes.count(l) <= 2 for l in ("left", "middle", "right"))
        assert 2 <= sum(v.pos_m > 0 for v in sc.scene.vehicles) <= 4
        speeds = [v.speed_kmh for v in sc.scene.vehicles]
        assert speeds.count(80) <= 3 and 1 <= speeds.count(100) <= 3 and 1 <= speeds.count(120) <= 3
        assert 50 <= max(abs(v.pos_m) for v in sc.scene.vehicles) <= 80
        if sc.hazard:
            assert any(v.lane == "middle" and 19 <= v.pos_m <= 22 for v in sc.scene.vehicles)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1, 3, 6, 9, 12, 20]))
def test_scripted_counts_equal_detected(seed, length):
    rng = np.random.default_rng(seed)
    p = make_participant(1, seed)
    layout = default_layout()
    script = script_trial(rng, p, length, layout)
    samples = render(script, rng, p)
    assert len(samples) == length * 2000
    ev = detect_events(samples, layout)
    assert len(ev.fixations) == script.n_fixations
    assert len(ev.saccades) == script.n_saccades
    assert len(ev.blinks) == script.n_blinks
    assert not ev.gaps
    assert [round(f.duration * 1000, 6) for f in ev.fixations] == [round(d, 6) for d in script.fixation_ms]
    detected = {a: sum(1 for f in ev.fixations if f.aoi == a) for a in script.aoi_counts}
    assert detected == script.aoi_counts
    assert np.allclose([s.amplitude for s in ev.saccades], script.amplitudes, atol=0.5)
    assert all(0.015 <= s.duration <= 0.150 for s in ev.saccades)
    assert all(b.duration <= 0.200 for b in ev.blinks)


def test_saccade_duration_band():
    assert saccade_samples(80.0) == 34
    assert 30 <= saccade_samples(80.0) and saccade_samples(5000.0) == 240


def test_extracted_features_match_script(small):
    ds = trial_dataset(small)
    for i, tr in enumerate(small.trials):
        row = dict(zip(ds.feature_names, ds.X[i]))
        assert row["numF"] == tr.script.n_fixations
        assert row["numS"] == tr.script.n_saccades
        assert row["backMirror"] == tr.script.aoi_counts["backMirror"]
        assert row["road"] == tr.script.aoi_counts["road"]
        assert row["fMean"] == pytest.approx(np.mean(tr.script.fixation_ms), abs=1e-9)
        assert row["videoLength"] == tr.scenario.video_length
        assert sum(row[a] for a in tr.script.aoi_counts) <= row["numF"]
    assert np.array_equal(ds.sa, [tr.sa for tr in small.trials])


def test_labels_bounded_and_varied(small):
    sa = np.array([tr.sa for tr in small.trials])
    assert np.all((sa >= 0) & (sa <= 1)) and sa.std() > 0


def test_label_arithmetic(small):
    tr = small.trials[5]
    expect = WEIGHTS["intercept"] + sum(WEIGHTS[k] * v for k, v in tr.terms.items()) + tr.noise
    assert tr.sa_raw == pytest.approx(expect, abs=1e-15)
    assert sa_label({k: 0.0 for k in tr.terms}, -1.0)[1] == 0.0


def test_short_clips_score_lower_than_long_ones():
    rows = truth_table(generate_study(32, 33, seed=0, render_samples=False))
    one = np.mean([r["sa"] for r in rows if r["videoLength"] == 1])
    twenty = np.mean([r["sa"] for r in rows if r["videoLength"] == 20])
    assert one < twenty
    assert WEIGHTS["back_mirror"] > 0 > WEIGHTS["road_overfixation"] and WEIGHTS["video_length"] > 0


def test_noise_stream_is_separate():
    a = generate_study(2, 6, seed=3, noise_sd=0.0)
    b = generate_study(2, 6, seed=3, noise_sd=0.05)
    for x, y in zip(a.trials, b.trials):
        assert x.script == y.script and x.meta == y.meta
        assert np.array_equal(x.samples.x, y.samples.x)
    assert any(x.sa != y.sa for x, y in zip(a.trials, b.trials))


def test_noise_bound():
    with pytest.raises(ValueError):
        generate_study(1, 1, noise_sd=0.2)


def test_write_is_deterministic(tmp_path, small):
    write_study(small, tmp_path / "a")
    write_study(generate_study(3, 8, seed=11), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only
    assert not filecmp.dircmp(tmp_path / "a" / "gaze", tmp_path / "b" / "gaze").diff_files
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["rows"] == 24 and manifest["weights"] == WEIGHTS
    back = GazeSamples.from_csv(tmp_path / "a" / "gaze" / "p01_t01.csv")
    assert np.array_equal(back.x, small.trials[0].samples.x)
    assert np.array_equal(back.pupil_area, small.trials[0].samples.pupil_area)


def test_participant_is_seeded():
    assert make_participant(4, 9) == make_participant(4, 9)
    assert make_participant(4, 9) != make_participant(4, 10)
    terms = latent_terms(script_trial(np.random.default_rng(0), make_participant(1, 0), 3, default_layout()), 3, 0.5)
    assert 0 <= terms["back_mirror"] <= 1 and terms["video_length"] == pytest.approx(np.log(3) / np.log(20))
