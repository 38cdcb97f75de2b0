import csv
import hashlib
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from gazesa.cli import main
from gazesa.features import load_dataset
from gazesa.gbdt import TreeEnsemble

CFG = {"num_boost_round": 200, "early_stopping_rounds": 20, "learning_rate": 0.2, "min_data_in_leaf": 5}


def run(*argv):
    return main([str(a) for a in argv])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(CFG))
    assert run("synth", "--seed", 7, "--participants", 4, "--trials", 10, "--out", root / "study") == 0
    assert run("extract", "--data", root / "study", "--out", root / "ds") == 0
    assert run("train", "--data", root / "ds", "--config", root / "cfg.json", "--out", root / "m") == 0
    return root


def test_smoke_path_produces_report(work):
    assert run("evaluate", "--data", work / "ds", "--config", work / "cfg.json", "--out", work / "ev") == 0
    report = json.loads((work / "ev" / "report.json").read_text())
    pooled = report["pooled"]
    assert pooled["n"] == 40 and pooled["rmse"] >= pooled["mae"] > 0
    for name in ("study", "ds", "m", "ev"):
        manifest = json.loads((work / name / "manifest.json").read_text())
        assert "timings_ms" in manifest and "version" in manifest


def test_command_manifest_records_inputs(work):
    manifest = json.loads((work / "m" / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 0
    assert manifest["config"]["num_leaves"] == 100 and manifest["config"]["learning_rate"] == 0.2
    assert manifest["inputs"]["data"].endswith("ds")
    assert sorted(manifest["outputs"]) == ["model.json", "train_state.json"]


def test_evaluate_is_byte_deterministic_across_jobs(work):
    args = ["evaluate", "--data", work / "ds", "--config", work / "cfg.json", "--folds", 5, "--baselines"]
    assert run(*args, "--out", work / "e1") == 0
    assert run(*args, "--out", work / "e2", "--jobs", 2) == 0
    for name in ("report.json", "predictions.csv"):
        assert (work / "e1" / name).read_bytes() == (work / "e2" / name).read_bytes()


def test_inputs_are_not_mutated(work):
    before = digest(work / "ds" / "dataset.csv"), digest(work / "m" / "model.json")
    assert run("explain", "--data", work / "ds", "--model", work / "m" / "model.json", "--out", work / "x0") == 0
    assert (digest(work / "ds" / "dataset.csv"), digest(work / "m" / "model.json")) == before


def test_explain_instance_sums_to_prediction(work, capsys):
    assert run("explain", "--data", work / "ds", "--model", work / "m" / "model.json",
               "--instance", 0, "--out", work / "x1") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    base = float(lines[0].split()[-1])
    pred = float(lines[-2].split()[-1])
    contrib = [float(l.split()[0]) for l in lines[1:-2]]
    assert abs(base + sum(contrib) - pred) < 1e-5  # printed at 6 decimals
    with open(work / "x1" / "instance.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    exact = [float(r[2]) for r in rows]
    assert abs(sum(exact[:-1]) - exact[-1]) <= 1e-9
    for name in ("shap.csv", "importance.csv", "main_effects.csv", "importance.svg"):
        assert (work / "x1" / name).stat().st_size > 0


def test_explain_held_out_is_deterministic(work):
    args = ["explain", "--data", work / "ds", "--config", work / "cfg.json", "--folds", 4]
    assert run(*args, "--out", work / "h1") == 0
    assert run(*args, "--out", work / "h2", "--jobs", 2) == 0
    for name in ("shap.csv", "importance.csv", "main_effects.csv", "importance.svg"):
        assert (work / "h1" / name).read_bytes() == (work / "h2" / name).read_bytes()
    assert json.loads((work / "h1" / "manifest.json").read_text())["local_accuracy_max_error"] <= 1e-9


def test_select_features_outputs(work):
    args = ["select-features", "--data", work / "ds", "--config", work / "cfg.json", "--folds", 4, "--eye-only"]
    assert run(*args, "--out", work / "s1") == 0
    assert run(*args, "--out", work / "s2", "--jobs", 2) == 0
    assert (work / "s1" / "curve.csv").read_bytes() == (work / "s2" / "curve.csv").read_bytes()
    sel = json.loads((work / "s1" / "selection.json").read_text())
    assert len(sel["order"]) == 16 and sel["features"] == sel["order"][:sel["best_k"]]


def _stream(monkeypatch, capsys, text, *argv):
    monkeypatch.setattr(sys, "stdin", io.StringIO(text))
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_predict_matches_batch(work, monkeypatch, capsys):
    text = (work / "ds" / "dataset.csv").read_text()
    code, out = _stream(monkeypatch, capsys, text, "predict", "--model", work / "m" / "model.json",
                        "--out", work / "p")
    assert code == 0 and out.err == ""
    lines = out.out.strip().splitlines()
    assert lines[0] == "sa_hat,latency_us"
    streamed = np.array([float(l.split(",")[0]) for l in lines[1:]])
    ens = TreeEnsemble.load(work / "m" / "model.json")
    batch = ens.predict(load_dataset(work / "ds" / "dataset.csv").select(ens.feature_names).X)
    assert np.array_equal(streamed, batch)
    manifest = json.loads((work / "p" / "manifest.json").read_text())
    assert manifest["rows"] == 40 and manifest["errors"] == 0


def test_predict_skips_malformed_rows(work, monkeypatch, capsys):
    lines = (work / "ds" / "dataset.csv").read_text().splitlines()
    bad = lines[1].split(",")
    bad[5] = "oops"
    text = "\n".join([lines[0], lines[1], ",".join(bad), "1,2", lines[2]]) + "\n"
    code, out = _stream(monkeypatch, capsys, text, "predict", "--model", work / "m" / "model.json",
                        "--out", work / "p2")
    assert code == 0
    assert len(out.out.strip().splitlines()) == 3
    errs = out.err.strip().splitlines()
    assert len(errs) == 2 and errs[0].startswith("error: row 3: column drivingFrequency")


def test_predict_empty_stream(work, monkeypatch, capsys):
    code, out = _stream(monkeypatch, capsys, "", "predict", "--model", work / "m" / "model.json",
                        "--out", work / "p3")
    assert code == 0 and out.out == "" and out.err == ""
    assert json.loads((work / "p3" / "manifest.json").read_text())["rows"] == 0


def test_predict_rejects_unknown_feature(work, monkeypatch, capsys):
    code, out = _stream(monkeypatch, capsys, "age,glanceCount\n1,2\n", "predict",
                        "--model", work / "m" / "model.json", "--out", work / "p4")
    assert code != 0 and out.err.strip() == "error: feature 'glanceCount' is not in the model registry"


def test_score_command(work):
    scene = json.loads((work / "study" / "scenes" / "t01.json").read_text())
    truth = {"vehicles": scene["vehicles"]}
    d = work / "recs"
    d.mkdir()
    for tid, rec in ((1, truth), (2, {"vehicles": []})):
        (d / f"p03_t{tid:02d}_truth.json").write_text(json.dumps(truth))
        (d / f"p03_t{tid:02d}_rec.json").write_text(json.dumps(rec))
    assert run("score", "--data", d, "--out", work / "sc") == 0
    assert (work / "sc" / "scores.csv").read_text().splitlines() == [
        "participant_id,trial_id,s1,s2,s3,sa", "3,1,1.0,1.0,1.0,1.0", "3,2,0.0,0.0,0.0,0.0"]


def test_errors_are_single_line(work, tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"num_leavs": 3}')
    assert run("train", "--data", work / "ds", "--config", tmp_path / "bad.json", "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("error: ") and "num_leavs" in err
    assert run("train", "--data", tmp_path / "missing.csv", "--out", tmp_path) == 1
    assert capsys.readouterr().err.startswith("error: ")


def test_meta_error_names_file_row_column(work, tmp_path, capsys):
    import shutil
    study = tmp_path / "study"
    shutil.copytree(work / "study", study)
    lines = (study / "meta.csv").read_text().splitlines()
    cells = lines[2].split(",")
    cells[2] = "abc"
    lines[2] = ",".join(cells)
    (study / "meta.csv").write_text("\n".join(lines) + "\n")
    assert run("extract", "--data", study, "--out", tmp_path / "o") == 1
    err = capsys.readouterr().err.strip()
    assert err == f"error: {study / 'meta.csv'}: row 3, column age: non-numeric value 'abc'"


def test_extract_and_synth_are_deterministic(work, tmp_path):
    assert run("synth", "--seed", 7, "--participants", 4, "--trials", 10, "--out", tmp_path / "s") == 0
    for name in ("meta.csv", "labels.csv", "ledger.csv", "gaze/p02_t05.csv", "scenes/t03.json"):
        assert (tmp_path / "s" / name).read_bytes() == (work / "study" / name).read_bytes()
    assert run("extract", "--data", tmp_path / "s", "--out", tmp_path / "d") == 0
    assert (tmp_path / "d" / "dataset.csv").read_bytes() == (work / "ds" / "dataset.csv").read_bytes()


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "gazesa.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "select-features" in res.stdout
