import json

import numpy as np
import pytest

from doda import __version__, oracle
from doda.config import RunManifest
from doda.errors import DivergenceError
from doda.layout import BoundingBox, LayoutSpec, load_coco, save_coco, save_png
from doda.main import main


def test_version(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["nonsense"], ["verify"], ["verify", "everything"]])
def test_usage_errors_exit_2(argv):
    assert main(argv) == 2


def test_bad_override_exits_2(tmp_path):
    assert main(["verify", "layout", "--out", str(tmp_path), "--set", "training.nope=1"]) == 2
    assert not (tmp_path / "manifest.jsonl").exists()


@pytest.mark.parametrize("kind", ["layout", "gradcheck"])
def test_verify_passes_and_records(tmp_path, kind, capsys):
    assert main(["verify", kind, "--out", str(tmp_path), "--seed", "3"]) == 0
    entries = RunManifest(tmp_path).entries()
    assert entries[-1]["command"] == f"verify {kind}"
    assert entries[-1]["seed"] == 3
    assert entries[-1]["metrics"]["failed"] == []
    assert json.loads(capsys.readouterr().out)["failed"] == []


def test_failing_prop1_exits_1(tmp_path, monkeypatch):
    def fake(cfg, seed=0, withhold_y2=False, progress=False):
        return oracle.Prop1Report(cosine_mean=0.2, rmse=1.0, relative_rmse=0.9,
                                  thresholds={"cosine": 0.95, "relative_rmse": 0.1}, passed=False)

    monkeypatch.setattr(oracle, "verify_prop1", fake)
    assert main(["verify", "prop1", "--out", str(tmp_path)]) == 1
    saved = json.loads((tmp_path / "prop1.json").read_text())
    assert saved["pass"] is False
    assert RunManifest(tmp_path).entries()[-1]["metrics"]["failed"] == ["prop1"]


def test_runtime_failure_exits_3(tmp_path, monkeypatch):
    def diverge(cfg, seed=0, withhold_y2=False, progress=False):
        raise DivergenceError("loss became nan at step 12")

    monkeypatch.setattr(oracle, "verify_prop1", diverge)
    assert main(["verify", "prop1", "--out", str(tmp_path)]) == 3
    assert not (tmp_path / "manifest.jsonl").exists()


def test_bad_schedule_is_a_config_error(tmp_path):
    assert main(["verify", "layout", "--out", str(tmp_path), "--set", "schedule.T=0"]) == 2


@pytest.fixture
def tiny_coco(tmp_path):
    spec = LayoutSpec(12, 12, [BoundingBox(0, 1, 1, 5, 5), BoundingBox(0, 6, 6, 11, 10)])
    image = np.random.default_rng(0).random((12, 12, 3))
    save_png(tmp_path / "scene.png", image)
    save_coco(tmp_path / "ann.json", [("scene.png", spec)])
    return tmp_path


@pytest.mark.parametrize("coding", ["coded", "uncoded", "multi-class"])
def test_layout_render(tiny_coco, coding):
    dest = tiny_coco / f"rendered_{coding}"
    argv = ["layout-render", str(tiny_coco / "ann.json"), "--coding", coding, "--dest", str(dest),
            "--out", str(tiny_coco / "run")]
    assert main(argv) == 0
    assert (dest / "scene.png").exists()


def test_tile(tiny_coco):
    dest = tiny_coco / "tiles"
    argv = ["tile", str(tiny_coco / "scene.png"), str(tiny_coco / "ann.json"), "--size", "8", "--stride", "4",
            "--dest", str(dest), "--out", str(tiny_coco / "run")]
    assert main(argv) == 0
    records = load_coco(dest / "annotations.json")
    assert len(records) == 4
    assert all((dest / name).exists() for name, _ in records)
    metrics = RunManifest(tiny_coco / "run").entries()[-1]["metrics"]
    assert metrics["offsets"] == [[0, 0], [4, 0], [0, 4], [4, 4]]


def test_tile_missing_entry_exits_2(tiny_coco):
    argv = ["tile", str(tiny_coco / "scene.png"), str(tiny_coco / "ann.json"), "--file-name", "other.png",
            "--dest", str(tiny_coco / "tiles"), "--out", str(tiny_coco / "run")]
    assert main(argv) == 2
