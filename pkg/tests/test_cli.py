import hashlib
import json

import pytest

from gprmap.cli import run

SMALL = {"survey": {"line_spacing": 0.5}, "forward": {"n_samples": 300}, "dataset": {"n_scenes": 4},
         "train": {"epochs": 1}, "gprnet": {"n_points": 64, "resolutions": [16, 32, 128]},
         "loc_survey": {"cols": 6, "rows": 4, "n_objects": 8}}


def digests(d):
    """SHA-256 of every output except the manifests, which carry timings."""
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(d.iterdir()) if not p.name.startswith("manifest-")}


def ok(*argv):
    assert run([str(a) for a in argv]) == 0, argv


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, cfg_path):
    root = tmp_path_factory.mktemp("run")
    common = ["--config", cfg_path, "--seed", 3]
    ok("simulate", *common, "--out-dir", root / "sim")
    ok("detect", *common, "--survey", root / "sim", "--out-dir", root / "det")
    ok("map", *common, "--survey", root / "sim", "--detections", root / "det" / "detections.json",
       "--out-dir", root / "map")
    ok("map", *common, "--survey", root / "sim", "--oracle", "--out-dir", root / "omap")
    ok("train-gprnet", *common, "--out-dir", root / "tr")
    ok("complete", *common, "--model", root / "tr" / "gprnet.gprw", "--cloud", root / "map" / "sparse.ply",
       "--out-dir", root / "comp")
    ok("metrics", *common, "--pred", root / "comp" / "dense.ply", "--gt", root / "sim" / "gt.ply",
       "--out-dir", root / "met")
    return root


def test_simulate_outputs(pipeline):
    names = set(digests(pipeline / "sim"))
    assert {"scene.json", "gt.ply", "survey.json", "config.json", "line_000.gprb", "line_000_poses.csv"} <= names
    man = json.loads((pipeline / "sim" / "manifest-simulate.json").read_text())
    assert man["seed"] == 3 and len(man["config_hash"]) == 64
    assert {o["path"].split("/")[-1] for o in man["outputs"]} >= {"scene.json", "gt.ply"}


def test_pipeline_products(pipeline):
    assert "lines" in json.loads((pipeline / "det" / "detections.json").read_text())
    assert (pipeline / "map" / "sparse.ply").exists() and (pipeline / "omap" / "sparse.ply").exists()
    assert (pipeline / "comp" / "dense.ply").stat().st_size > 0
    header, row = (pipeline / "met" / "metrics.csv").read_text().splitlines()
    assert header == "CD,PredGT,GTPred,FScore,SegAcc" and len(row.split(",")) == 5
    hist = json.loads((pipeline / "tr" / "history.json").read_text())
    assert hist[0]["epoch"] == -1


def test_render(pipeline, tmp_path):
    ok("render", "--bscan", pipeline / "sim" / "line_000.gprb", "--migrate", "--cloud",
       pipeline / "omap" / "sparse.ply", "--out-dir", tmp_path)
    pgms = [p for p in tmp_path.iterdir() if p.suffix == ".pgm"]
    assert len(pgms) == 2 and all(p.read_bytes().startswith(b"P5") for p in pgms)


def test_localization_commands(cfg_path, tmp_path):
    ok("build-db", "--config", cfg_path, "--soil", "sand", "--out-dir", tmp_path / "db")
    ok("localize", "--config", cfg_path, "--db", tmp_path / "db" / "db.gprd", "--out-dir", tmp_path / "loc")
    lines = (tmp_path / "loc" / "recall.csv").read_text().splitlines()
    assert lines[0] == "soil,noise_snr_db,recall" and lines[1].startswith("sand,")
    assert len((tmp_path / "loc" / "matches.csv").read_text().splitlines()) == 1 + 6 * 4


def test_runs_are_bit_reproducible(cfg_path, tmp_path):
    for k in ("a", "b"):
        ok("simulate", "--config", cfg_path, "--seed", 11, "--out-dir", tmp_path / k / "sim")
        ok("detect", "--config", cfg_path, "--seed", 11, "--survey", tmp_path / k / "sim",
           "--out-dir", tmp_path / k / "det")
        ok("map", "--config", cfg_path, "--seed", 11, "--survey", tmp_path / k / "sim", "--oracle",
           "--out-dir", tmp_path / k / "map")
    for stage in ("sim", "det", "map"):
        a, b = digests(tmp_path / "a" / stage), digests(tmp_path / "b" / stage)
        assert a and a == b, stage


def test_errors_exit_with_code_2(tmp_path, capsys):
    bad = tmp_path / "bad.ply"
    bad.write_text("ply\nformat ascii 1.0\nelement vertex 3\nend_header\n1 2\n")
    assert run(["metrics", "--pred", str(bad), "--gt", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err
    cfg = tmp_path / "c.json"
    cfg.write_text('{"train": {"epochs": "many"}}')
    assert run(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "s")]) == 2
    assert "epochs" in capsys.readouterr().err


def test_usage_errors():
    assert run(["map", "--survey", "/nonexistent"]) == 2
    assert run(["--version"]) == 0
    assert run(["nope"]) == 2
