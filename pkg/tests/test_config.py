import json

import numpy as np
import pytest

from doda.config import (
    OUT_ROOT_ENV,
    RunConfig,
    RunManifest,
    apply_override,
    config_hash,
    content_hash,
    load_config,
    substream,
)
from doda.errors import ConfigError


def test_substreams_are_reproducible_and_independent():
    a = substream(0, "unet").random(4)
    np.testing.assert_array_equal(a, substream(0, "unet").random(4))
    assert not np.allclose(a, substream(0, "layout").random(4))
    assert not np.allclose(a, substream(1, "unet").random(4))


def test_overrides_are_parsed_as_json():
    config = RunConfig()
    apply_override(config, "training.lr=1e-3")
    apply_override(config, "corpus.train_domains=[0, 2]")
    apply_override(config, "unet.fusion=both")
    assert config.training.lr == pytest.approx(1e-3)
    assert config.corpus.train_domains == [0, 2]
    assert config.unet.fusion == "both"


@pytest.mark.parametrize("bad", ["training.nope=1", "nosection.lr=1", "training.lr"])
def test_bad_overrides_raise(bad):
    with pytest.raises(ConfigError):
        apply_override(RunConfig(), bad)


def test_load_config_from_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 7, "schedule": {"T": 100}}))
    config = load_config(path, ["schedule.lambda_kind=unit"], out=tmp_path / "out")
    assert config.seed == 7 and config.schedule.T == 100 and config.schedule.lambda_kind == "unit"
    assert config.out_dir == tmp_path / "out"


def test_unknown_file_key_raises(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"schedule": {"steps": 100}}))
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_out_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(OUT_ROOT_ENV, str(tmp_path))
    assert RunConfig().out_dir == tmp_path
    assert RunConfig().corpus_path == tmp_path / "corpus"


def test_config_hash_ignores_output_location():
    a, b = RunConfig(out="x"), RunConfig(out="y")
    assert config_hash(a) == config_hash(b)
    b.seed = 1
    assert config_hash(a) != config_hash(b)


def test_content_hash_is_git_blob_hash(tmp_path):
    (tmp_path / "f").write_bytes(b"hello\n")
    assert content_hash(tmp_path / "f") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_manifest_appends(tmp_path):
    manifest = RunManifest(tmp_path)
    (tmp_path / "input.txt").write_text("x")
    manifest.append("first", RunConfig(), inputs=[tmp_path / "input.txt"], metrics={"a": 1})
    manifest.append("second", RunConfig(), timings={"total": 0.5})
    entries = manifest.entries()
    assert [e["command"] for e in entries] == ["first", "second"]
    assert entries[0]["metrics"] == {"a": 1}
    assert str(tmp_path / "input.txt") in entries[0]["inputs"]
