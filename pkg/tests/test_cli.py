import json
import subprocess
import sys

import numpy as np
import pytest

from conceptvol import cli, fixture, projector, tensorio
from conceptvol.config import SEED_ENV, RunConfig

# seed 42, 3 classes, 10 images per class, default config embedded
FIXTURE_SHA256 = "cc597ace15da360d797b60763cc4388a0abf4ac425137a899f6c557c564369f8"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    fx = root / "fx"
    steps = [
        ["fixture", "--seed", 42, "--out", fx],
        ["extract", "--fixture", fx, "--method", "kmeans", "--d", 20, "--format", "json",
         "--report", root / "extract.json"],
        ["classify", "--fixture", fx, "--format", "json", "--out", root / "clean.json"],
        ["classify", "--fixture", fx, "--occluded", "--format", "json", "--out", root / "occluded.json"],
        ["attribute", "--fixture", fx, "--out", root / "attr"],
        ["project", "--fixture", fx, "--attributions", root / "attr", "--out", root / "proj"],
        ["eval-3dc", "--fixture", fx, "--projections", root / "proj", "--format", "json",
         "--out", root / "3dc.json"],
        ["eval-loc", "--fixture", fx, "--attributions", root / "attr", "--format", "json",
         "--out", root / "loc.json"],
        ["eval-cov", "--fixture", fx, "--attributions", root / "attr", "--format", "json",
         "--out", root / "cov.json"],
        ["eval-acc", "--predictions", root / "clean.json", "--format", "json", "--out", root / "acc.json"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0, argv
    return root


def load(path):
    return json.loads(path.read_text())


def test_fixture_checksum_is_pinned(tmp_path, capsys):
    code, out, _ = run(capsys, "fixture", "--seed", 42, "--out", tmp_path / "fx")
    assert code == 0 and out.strip().endswith(FIXTURE_SHA256)
    assert fixture.tree_checksum(tmp_path / "fx") == FIXTURE_SHA256


def test_fixture_same_seed_same_bytes(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "fixture", "--seed", 5, "--images", 2, "--out", tmp_path / name)[0] == 0
    assert fixture.tree_checksum(tmp_path / "a") == fixture.tree_checksum(tmp_path / "b")
    run(capsys, "fixture", "--seed", 6, "--images", 2, "--out", tmp_path / "c")
    assert fixture.tree_checksum(tmp_path / "c") != fixture.tree_checksum(tmp_path / "a")


def test_fixture_rejects_one_class(tmp_path, capsys):
    code, _, err = run(capsys, "fixture", "--classes", 1, "--out", tmp_path / "x")
    assert code == 1
    assert err.startswith("error code=") and err.count("\n") == 1


def test_extract_kmeans_sparsity(pipeline):
    report = load(pipeline / "extract.json")
    assert [r["sparsity"] for r in report["dictionary"]] == [0.95] * 3
    assert all(r["concepts"] == 20 for r in report["dictionary"])
    assert report["config"]["n_concepts"] == 20


def test_classification_accuracy(pipeline):
    assert load(pipeline / "clean.json")["accuracy"] == 100.0
    assert load(pipeline / "occluded.json")["accuracy"] >= 80.0
    acc = load(pipeline / "acc.json")["accuracy"][0]
    assert acc["accuracy"] == 100.0 and acc["n"] == 30


def test_attribution_and_projection(pipeline):
    index = load(pipeline / "attr" / "index.json")
    assert len(index["records"]) == 30
    for rec in index["records"]:
        assert rec["drift"] < 1e-4
        mass = sum(e["relevance"] for e in rec["maps"])
        assert abs(mass - rec["total"]) <= rec["drift"] * abs(rec["total"]) + 1e-9
    proj = load(pipeline / "proj" / "index.json")
    for rec in proj["records"]:
        assert abs(rec["projected_mass"] - rec["input_mass"]) <= 1e-9


def test_metric_reports(pipeline):
    scores = load(pipeline / "3dc.json")
    assert scores["consistency"] or scores["excluded"]
    for rec in scores["consistency"]:
        assert 1.0 / rec["n_present"] - 1e-12 <= rec["score"] <= 1.0
    for rec in load(pipeline / "loc.json")["localisation"]:
        assert 0.0 <= rec["score"] <= 1.0
    cov = load(pipeline / "cov.json")["coverage"]
    assert len(cov) == 30 and all(0.0 <= r["score"] <= 1.0 for r in cov)


def test_outputs_embed_config(pipeline):
    keys = set(RunConfig().as_dict())
    for name in ("extract.json", "clean.json", "3dc.json", "loc.json", "cov.json", "acc.json"):
        assert set(load(pipeline / name)["config"]) == keys
    assert set(load(pipeline / "attr" / "index.json")["config"]) == keys
    assert set(load(pipeline / "fx" / "manifest.json")["config"]) == keys


def test_pipeline_is_byte_deterministic(pipeline, tmp_path):
    fx = pipeline / "fx"
    argv = ["extract", "--fixture", fx, "--concepts", tmp_path / "c", "--format", "json",
            "--report", tmp_path / "extract.json"]
    assert cli.main([str(a) for a in argv]) == 0
    assert (tmp_path / "extract.json").read_text() == (
        (pipeline / "extract.json").read_text().replace(str(fx / "concepts"), str(tmp_path / "c"))
    )
    for y in range(3):
        a = sorted((fx / "concepts").glob(f"class{y}*"))
        b = sorted((tmp_path / "c").glob(f"class{y}*"))
        assert [p.name for p in a] == [p.name for p in b]
        assert all(p.read_bytes() == q.read_bytes() for p, q in zip(a, b))
    argv = ["eval-3dc", "--fixture", fx, "--projections", pipeline / "proj", "--format", "json",
            "--out", tmp_path / "3dc.json"]
    assert cli.main([str(a) for a in argv]) == 0
    assert (tmp_path / "3dc.json").read_bytes() == (pipeline / "3dc.json").read_bytes()


def test_eval_3dc_identical_faces(tmp_path, capsys):
    fa = projector.FaceAttribution(np.array([0.2, 0.5, 0.3]), 0.0)
    for name in ("a", "b"):
        projector.save_face_attribution(fa, tmp_path / name)
    code, out, _ = run(capsys, "eval-3dc", "--faces", tmp_path / "a", tmp_path / "b", "--format", "json")
    assert code == 0
    assert json.loads(out)["consistency"][0]["score"] == pytest.approx(1.0, abs=1e-12)


def test_eval_acc_inline_and_errors(capsys):
    code, out, _ = run(capsys, "eval-acc", "--pred", "0,1,1,1", "--labels", "0,1,1,0")
    assert code == 0 and "accuracy=75.0" in out
    code, _, err = run(capsys, "eval-acc", "--pred", "0", "--labels", "0,1")
    assert code == 1 and "code=shape" in err
    code, _, err = run(capsys, "eval-acc")
    assert code == 1 and "code=usage" in err


def test_manual_localisation_and_coverage(tmp_path, capsys):
    attr = np.zeros((2, 4))
    attr[0] = 0.25
    part = np.zeros((2, 4), dtype=np.uint8)
    part[0, :2] = 255
    tensorio.write_tensor(tmp_path / "a.cavt", attr)
    tensorio.write_pgm(tmp_path / "p.pgm", part)
    code, out, _ = run(capsys, "eval-loc", "--attr", tmp_path / "a.cavt", "--mask", tmp_path / "p.pgm",
                       "--format", "json")
    assert code == 0
    assert json.loads(out)["localisation"][0]["score"] == pytest.approx(2.5 / 3.0, abs=1e-9)
    code, out, _ = run(capsys, "eval-cov", "--attr", tmp_path / "a.cavt", "--mask", tmp_path / "p.pgm",
                       "--format", "json")
    assert json.loads(out)["coverage"][0]["score"] == pytest.approx(0.5, abs=1e-9)


def test_render_writes_heatmap(pipeline, tmp_path, capsys):
    index = load(pipeline / "attr" / "index.json")
    path = pipeline / "attr" / index["records"][0]["maps"][0]["path"]
    code, out, _ = run(capsys, "render", "--attr", path, "--colormap", "hot", "--out", tmp_path / "h.ppm")
    assert code == 0 and "size=40x32" in out
    assert (tmp_path / "h.ppm").read_bytes().startswith(b"P6")
    assert "config.seed" in (tmp_path / "h.ppm.txt").read_text()
    code, _, err = run(capsys, "render", "--out", tmp_path / "x.ppm")
    assert code == 1 and "code=usage" in err


def test_check_conservation(capsys):
    code, out, _ = run(capsys, "check-conservation", "--inputs", 5, "--format", "json")
    payload = json.loads(out)
    assert code == 0 and payload["status"] == "pass" and payload["max_drift"] < 1e-4
    code, out, err = run(capsys, "check-conservation", "--inputs", 2, "--vanilla")
    assert code == 1 and "status=fail" in out and "code=conservation" in err


def test_seed_sources(tmp_path, capsys, monkeypatch):
    conf = tmp_path / "run.conf"
    RunConfig(seed=3, tau=40.0).save(conf)
    code, out, _ = run(capsys, "eval-acc", "--pred", "1", "--labels", "1", "--config", conf)
    assert "config seed=3" in out and "config tau=40.0" in out
    code, out, _ = run(capsys, "eval-acc", "--pred", "1", "--labels", "1", "--config", conf, "--tau", 60)
    assert "config seed=3" in out and "config tau=60.0" in out
    monkeypatch.setenv(SEED_ENV, "11")
    code, out, _ = run(capsys, "eval-acc", "--pred", "1", "--labels", "1")
    assert "config seed=11" in out
    code, out, _ = run(capsys, "eval-acc", "--pred", "1", "--labels", "1", "--seed", 12)
    assert "config seed=12" in out
    # an explicit seed in the config file beats the environment
    code, out, _ = run(capsys, "eval-acc", "--pred", "1", "--labels", "1", "--config", conf)
    assert "config seed=3" in out
    monkeypatch.setenv(SEED_ENV, "eleven")
    code, _, err = run(capsys, "eval-acc", "--pred", "1", "--labels", "1")
    assert code == 1 and "code=config" in err


def test_bad_config_values(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("tau=150\n")
    code, _, err = run(capsys, "eval-acc", "--pred", "1", "--labels", "1", "--config", conf)
    assert code == 1 and "code=config" in err
    conf.write_text("colour=red\n")
    assert run(capsys, "eval-acc", "--pred", "1", "--labels", "1", "--config", conf)[0] == 1
    code, _, err = run(capsys, "classify", "--fixture", tmp_path / "nowhere")
    assert code == 1 and err.startswith("error code=")


@pytest.mark.parametrize("argv", [["frobnicate"], ["eval-acc", "--no-such-flag"], []])
def test_usage_errors_exit_two(argv):
    proc = subprocess.run([sys.executable, "-m", "conceptvol", *argv], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage:" in proc.stderr
