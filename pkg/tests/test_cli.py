import configparser
import hashlib
import json
import re

import numpy as np
import pytest
import tifffile
from PIL import Image

from bubbleflow.cli import example_config, main
from bubbleflow.pipeline import load_config, read_detections_csv
from bubbleflow.synth import chain_scenario, read_truth_csv

ARTIFACTS = {
    "detections.csv", "rejected.csv", "trajectories.csv", "velocity_profile.csv", "envelope.csv", "stats.json",
}


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _set(ini, section, key, value):
    text = ini.read_text()
    head, _, tail = text.partition(f"[{section}]")
    tail = re.sub(rf"(?m)^#?[ \t]*{key} = .*$", f"{key} = {value}", tail, count=1)
    ini.write_text(head + f"[{section}]" + tail)


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    """A short synthetic chain on a small frame, rendered through the CLI."""
    root = tmp_path_factory.mktemp("scene")
    spec = chain_scenario("off", n_frames=24, width=128, height=256, snr=4.0, seed=3)
    spec.save(root / "spec.json")
    assert main(["synth", "--spec", str(root / "spec.json"), "--seed", "5", "--out", str(root / "data")]) == 0
    ini = root / "data" / "pipeline.ini"
    _set(ini, "stats", "snip_m", "4")
    return root


def _run(scene, out, *extra):
    return main(["run", "--config", str(scene / "data" / "pipeline.ini"), "--out", str(out), *extra])


@pytest.fixture(scope="module")
def first_run(scene):
    assert _run(scene, scene / "run1") == 0
    return scene / "run1"


def test_synth_writes_inputs_and_truth(scene):
    data = scene / "data"
    for name in ("raw.tif", "dark.tif", "flat.tif", "truth.csv", "scenario.json", "pipeline.ini"):
        assert (data / name).is_file()
    assert read_truth_csv(data / "truth.csv").states


def test_synth_is_reproducible(scene, tmp_path):
    assert main(["synth", "--spec", str(scene / "spec.json"), "--seed", "5", "--out", str(tmp_path)]) == 0
    for name in ("raw.tif", "dark.tif", "flat.tif", "truth.csv"):
        assert _digest(tmp_path / name) == _digest(scene / "data" / name)


def test_run_writes_manifest_with_hashes(first_run):
    manifest = json.loads((first_run / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    listed = {a["path"]: a["sha256"] for a in manifest["artifacts"]}
    assert set(listed) == ARTIFACTS
    for name, digest in listed.items():
        assert _digest(first_run / name) == digest
    assert read_detections_csv(first_run / "detections.csv")


def test_rerun_is_byte_identical(scene, first_run, tmp_path):
    assert _run(scene, tmp_path) == 0
    for name in ARTIFACTS - {"stats.json"}:
        assert _digest(tmp_path / name) == _digest(first_run / name), name


def test_two_workers_give_identical_results(scene, first_run, tmp_path):
    assert _run(scene, tmp_path, "--workers", "2") == 0
    for name in ARTIFACTS - {"stats.json"}:
        assert _digest(tmp_path / name) == _digest(first_run / name), name


def test_dump_intermediate(scene, tmp_path):
    assert _run(scene, tmp_path, "--dump-intermediate", "--roi", "0,32,128,224") == 0
    mask = tifffile.imread(tmp_path / "intermediate" / "mask.tif")
    assert mask.shape == (24, 224, 128)


def test_negative_k_is_rejected(scene, tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text((scene / "data" / "pipeline.ini").read_text())
    _set(ini, "denoise", "k", "-1")
    _set(ini, "paths", "raw", str(scene / "data" / "raw.tif"))
    _set(ini, "paths", "dark", str(scene / "data" / "dark.tif"))
    _set(ini, "paths", "flat", str(scene / "data" / "flat.tif"))
    assert main(["run", "--config", str(ini), "--out", str(tmp_path / "out")]) != 0
    err = capsys.readouterr().err
    assert "CffParams.k must be > 0" in err and "stage=config" in err
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["status"] == "failed" and manifest["failed_stage"] == "config"


def test_empty_sequence(scene, tmp_path, capsys):
    (tmp_path / "frames").mkdir()
    ini = tmp_path / "empty.ini"
    ini.write_text((scene / "data" / "pipeline.ini").read_text())
    _set(ini, "paths", "raw", str(tmp_path / "frames"))
    _set(ini, "paths", "dark", str(scene / "data" / "dark.tif"))
    _set(ini, "paths", "flat", str(scene / "data" / "flat.tif"))
    assert main(["run", "--config", str(ini), "--out", str(tmp_path / "out")]) != 0
    assert "no frames found" in capsys.readouterr().err


def test_score_of_truth_is_perfect(scene, tmp_path, capsys):
    truth = read_truth_csv(scene / "data" / "truth.csv")
    lines = ["frame_index,time_s,x_mm,y_mm,a_mm,b_mm,theta_rad,area_mm2,quality"]
    for s in truth.states:
        lines.append(f"{s.frame_index},{s.time},{s.x},{s.y},{s.a},{s.b},{s.theta},{s.area},ok")
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    args = ["score", "--detections", str(tmp_path / "d.csv"), "--truth", str(scene / "data" / "truth.csv")]
    assert main(args + ["--spec", str(scene / "spec.json")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["recall"] == 1.0 and metrics["false_positive_rate"] == 0.0


def test_score_of_pipeline_output(scene, first_run, capsys):
    args = ["score", "--detections", str(first_run / "detections.csv"), "--truth", str(scene / "data" / "truth.csv")]
    assert main(args + ["--spec", str(scene / "spec.json")]) == 0
    assert json.loads(capsys.readouterr().out)["recall"] > 0.8


def test_calibrate_then_run(scene, first_run, tmp_path):
    data = scene / "data"
    cal = tmp_path / "cal.npz"
    assert main(["calibrate", "--dark", str(data / "dark.tif"), "--flat", str(data / "flat.tif"), "--out", str(cal)]) == 0
    ini = tmp_path / "cal.ini"
    ini.write_text((data / "pipeline.ini").read_text())
    _set(ini, "paths", "raw", str(data / "raw.tif"))
    _set(ini, "paths", "calibration", str(cal))
    assert main(["run", "--config", str(ini), "--out", str(tmp_path / "out")]) == 0
    # the same references through the npz give the same detections
    assert _digest(tmp_path / "out" / "detections.csv") == _digest(first_run / "detections.csv")


def test_inspect_writes_overlays(scene, tmp_path):
    ini = str(scene / "data" / "pipeline.ini")
    assert main(["inspect", "--config", ini, "--frames", "2:4", "--out", str(tmp_path)]) == 0
    pngs = sorted(p.name for p in tmp_path.glob("*.png"))
    assert pngs == ["frame_00002.png", "frame_00003.png"]
    img = np.asarray(Image.open(tmp_path / pngs[0]))
    assert img.shape == (256, 128, 3)
    assert ((img == [0, 255, 0]).all(axis=2)).any()


def test_inspect_out_of_range(scene, tmp_path, capsys):
    ini = str(scene / "data" / "pipeline.ini")
    assert main(["inspect", "--config", ini, "--frames", "24", "--out", str(tmp_path)]) != 0
    assert "outside" in capsys.readouterr().err


def test_example_config_parses(tmp_path, capsys):
    assert main(["example-config"]) == 0
    text = capsys.readouterr().out
    assert text == example_config()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_string(text)
    assert {"paths", "sequence", "denoise", "segment", "filter", "track", "stats", "run"} <= set(parser)
    for name in ("raw.tif", "dark.tif", "flat.tif"):
        (tmp_path / name).write_bytes(b"")
    (tmp_path / "p.ini").write_text(text)
    cfg = load_config(tmp_path / "p.ini")
    assert cfg.denoise.k is None and cfg.segment.grow_fraction == 0.12
