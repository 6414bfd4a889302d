import json
import subprocess
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from phonorec.cli import main
from phonorec.evaluation import EvalReport, Metrics, fleiss_kappa
from phonorec.ingest import load_dataset
from phonorec.phonology import PropertyKind
from phonorec.splits import SplitManifest, verify_split

FRAMES = 20


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def fixture_dir(tmp_path):
    assert run("fixture", "--out", tmp_path / "fx") == 0
    return tmp_path / "fx"


def build(fx, out, frames=FRAMES):
    return run("build", "--lexicon", fx / "lexicon.csv", "--index", fx / "index.csv",
               "--keypoints", fx, "--frames", frames, "--out", out)


def write_config(path, **extra):
    doc = {"model": {"variant": "mlp", "frames": FRAMES, "hidden_dim": 8},
           "train": {"learning_rate": 1e-3, "epochs": 3, "batch_size": 4}}
    doc.update(extra)
    path.write_text(json.dumps(doc))
    return path


def test_build_fixture(fixture_dir, tmp_path, capsys):
    assert build(fixture_dir, tmp_path / "ds") == 0
    out = capsys.readouterr().out
    assert "matched glosses: 3" in out and "matched videos: 6" in out
    records = load_dataset(tmp_path / "ds")
    assert len(records) == 6
    assert all(r.sequence.data.shape == (FRAMES, 27, 3) for r in records)
    report = json.loads((tmp_path / "ds" / "join_report.json").read_text())
    assert report


def test_build_missing_keypoint_file(fixture_dir, tmp_path, capsys):
    (fixture_dir / "keypoints" / "drink_01.json").unlink()
    assert build(fixture_dir, tmp_path / "ds") == 1
    err = capsys.readouterr().err
    assert err.startswith("error: MissingKeypointFile:") and "drink_01" in err


def test_gloss_split_passes_verify(fixture_dir, tmp_path, capsys):
    build(fixture_dir, tmp_path / "ds")
    args = ["split", "--dataset", tmp_path / "ds", "--property", "selected_fingers",
            "--mode", "gloss", "--seed", 7]
    assert run(*args, "--out", tmp_path / "s1") == 0
    assert run(*args, "--out", tmp_path / "s2") == 0
    a = (tmp_path / "s1" / "manifest.json").read_bytes()
    assert a == (tmp_path / "s2" / "manifest.json").read_bytes()
    manifest = SplitManifest.load(tmp_path / "s1" / "manifest.json")
    assert verify_split(manifest, load_dataset(tmp_path / "ds")).ok
    assert "imrp" in capsys.readouterr().out


def test_bad_ratios_are_a_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("split", "--dataset", tmp_path, "--property", "flexion", "--ratios", "0.7,0.2,0.2",
            "--out", tmp_path / "s")
    assert exc.value.code == 2
    assert "sum to 1" in capsys.readouterr().err


def test_too_few_samples_surfaces_class(fixture_dir, tmp_path, capsys):
    build(fixture_dir, tmp_path / "ds")
    assert run("split", "--dataset", tmp_path / "ds", "--property", "flexion",
               "--out", tmp_path / "s") == 1
    err = capsys.readouterr().err
    assert err.startswith("error: TooFewSamples:")


def test_unknown_config_key(fixture_dir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"propertee": "flexion"}))
    assert run("split", "--config", cfg, "--dataset", tmp_path, "--out", tmp_path / "s") == 1
    assert "ConfigError" in capsys.readouterr().err


def pipeline(fx, root, seed=3):
    build(fx, root / "ds")
    run("split", "--dataset", root / "ds", "--property", "selected_fingers", "--seed", seed,
        "--out", root / "split")
    cfg = write_config(root / "exp.json")
    assert run("train", "--config", cfg, "--dataset", root / "ds", "--manifest",
               root / "split" / "manifest.json", "--seed", seed, "--out", root / "model") == 0
    assert run("eval", "--dataset", root / "ds", "--manifest", root / "split" / "manifest.json",
               "--model", root / "model" / "model.ckpt", "--out", root / "eval") == 0


def test_end_to_end_report_has_all_metrics(fixture_dir, tmp_path):
    pipeline(fixture_dir, tmp_path)
    for name in ("model.ckpt", "history.jsonl", "experiment.json", "run.log"):
        assert (tmp_path / "model" / name).exists()
    doc = json.loads((tmp_path / "eval" / "report.json").read_text())
    for name in Metrics.NAMES:
        assert isinstance(doc["metrics"][name], float)
    assert doc["n"] == len(SplitManifest.load(tmp_path / "split" / "manifest.json").test)


def outputs(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in ("run.log", ".lock")}


def test_pipeline_is_byte_reproducible(fixture_dir, tmp_path):
    pipeline(fixture_dir, tmp_path / "a")
    pipeline(fixture_dir, tmp_path / "b")
    a, b = outputs(tmp_path / "a"), outputs(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) > 8
    assert [k for k in a if a[k] != b[k]] == []


def test_baseline_eval_matches_majority_frequency(tmp_path):
    fx = tmp_path / "fx"
    run("fixture", "--out", fx, "--videos-per-gloss", 3)
    build(fx, tmp_path / "ds")
    run("split", "--dataset", tmp_path / "ds", "--property", "movement", "--seed", 1,
        "--out", tmp_path / "split")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"variant": "baseline"}}))
    man = tmp_path / "split" / "manifest.json"
    assert run("train", "--config", cfg, "--dataset", tmp_path / "ds", "--manifest", man,
               "--out", tmp_path / "m") == 0
    assert run("eval", "--dataset", tmp_path / "ds", "--manifest", man,
               "--model", tmp_path / "m" / "model.ckpt", "--out", tmp_path / "e") == 0
    manifest = SplitManifest.load(man)
    labels = {r.video_id: r.label.movement for r in load_dataset(tmp_path / "ds")}
    major = Counter(labels[v] for v in manifest.train).most_common(1)[0][0]
    expect = sum(labels[v] == major for v in manifest.test) / len(manifest.test)
    report = EvalReport.load(tmp_path / "e" / "report.json")
    assert report.metrics.accuracy == expect
    assert {p for _, _, p in report.records} == {major}


def test_analyze_three_reports(tmp_path, capsys):
    truth = {f"v{i:02d}": "1" if i % 2 else "2" for i in range(12)}
    wrong = {"v00": ["1", "1", "3"], "v01": ["2", "3", "4"], "v02": ["4", "4", "4"]}
    paths = []
    for m in range(3):
        rows = [(v, t, wrong[v][m] if v in wrong else t) for v, t in truth.items()]
        rep = EvalReport.build(PropertyKind.FLEXION, "phoneme", f"m{m}", rows)
        paths.append(tmp_path / f"r{m}.json")
        rep.save(paths[-1])
    assert run("analyze", *paths, "--out", tmp_path / "an") == 0
    doc = json.loads((tmp_path / "an" / "agreement.json").read_text())
    prop = doc["properties"]["flexion"]
    assert prop["jointly_misclassified"] == ["v00", "v01", "v02"]
    assert prop["models"] == ["m0", "m1", "m2"]
    ratings = np.array(prop["ratings"])
    assert prop["kappa"] == pytest.approx(fleiss_kappa(ratings, 3))
    assert "flexion: 3 jointly misclassified, kappa" in capsys.readouterr().out


def test_report_table(fixture_dir, tmp_path, capsys):
    pipeline(fixture_dir, tmp_path)
    assert run("report", tmp_path / "eval" / "report.json", "--format", "csv",
               "--out", tmp_path / "tab") == 0
    text = (tmp_path / "tab" / "table.csv").read_text()
    assert text.splitlines()[0].startswith("mode,model,selected_fingers A")
    assert " ± " in text.splitlines()[1]


def test_search_writes_trials(fixture_dir, tmp_path):
    build(fixture_dir, tmp_path / "ds")
    run("split", "--dataset", tmp_path / "ds", "--property", "selected_fingers",
        "--out", tmp_path / "split")
    cfg = write_config(tmp_path / "c.json",
                       search={"params": {"learning_rate": [1e-3, 1e-2], "hidden_dim": [4, 8]},
                               "budget": 3})
    assert run("search", "--config", cfg, "--dataset", tmp_path / "ds", "--manifest",
               tmp_path / "split" / "manifest.json", "--out", tmp_path / "search") == 0
    trials = (tmp_path / "search" / "trials.jsonl").read_text().splitlines()
    assert len(trials) == 3
    best = json.loads((tmp_path / "search" / "best_config.json").read_text())
    assert best["best"]["model"]["variant"] == "mlp"


def test_data_root_env(fixture_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("PHONOREC_DATA_ROOT", str(fixture_dir))
    monkeypatch.chdir(tmp_path)
    assert run("build", "--lexicon", "lexicon.csv", "--index", "index.csv", "--keypoints", "keypoints/..",
               "--frames", FRAMES, "--out", tmp_path / "ds") == 0


def test_bundled_fixture_matches_generator(fixture_dir):
    bundled = Path(__file__).parent / "fixtures" / "tiny"
    for rel in ["lexicon.csv", "index.csv"] + [f"keypoints/{p.name}" for p in (bundled / "keypoints").iterdir()]:
        assert (bundled / rel).read_bytes() == (fixture_dir / rel).read_bytes(), rel


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "phonorec", "fixture", "--out", str(tmp_path / "f")],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and (tmp_path / "f" / "lexicon.csv").exists()
