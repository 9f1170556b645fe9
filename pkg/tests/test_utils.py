import json

import pytest

from ctrpose.errors import ValidationError
from ctrpose.kinematics import REFERENCE_ROBOT
from utils.config import (
    MANIFEST_NAME,
    RunManifest,
    config_hash,
    fresh_output_dir,
    resolve_config,
    resolve_intrinsics,
)
from utils.env import env_flag, env_threads, output_root
from utils.scene_filter import filter_scenes, load_selected_scenes

DEFAULTS = {"n": 20, "seed": 0, "robot": "robots/arm3.json"}


def test_flags_override_file_over_defaults(tmp_path):
    cfg_file = tmp_path / "run.toml"
    cfg_file.write_text('n = 5\nrobot = "other.json"\n', encoding="utf-8")
    cfg = resolve_config(DEFAULTS, str(cfg_file), {"n": 7, "seed": None})
    assert cfg == {"n": 7, "seed": 0, "robot": "other.json"}


def test_json_config_and_unknown_keys(tmp_path):
    good = tmp_path / "run.json"
    good.write_text(json.dumps({"seed": 3}), encoding="utf-8")
    assert resolve_config(DEFAULTS, str(good))["seed"] == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sede": 3}), encoding="utf-8")
    with pytest.raises(ValidationError, match="sede"):
        resolve_config(DEFAULTS, str(bad))


def test_config_file_errors(tmp_path):
    with pytest.raises(ValidationError):
        resolve_config(DEFAULTS, str(tmp_path / "missing.toml"))
    yaml = tmp_path / "run.yaml"
    yaml.write_text("n: 1", encoding="utf-8")
    with pytest.raises(ValidationError):
        resolve_config(DEFAULTS, str(yaml))


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": (1, 2), "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_fresh_output_dir(tmp_path):
    named = fresh_output_dir(str(tmp_path / "run"), "gen")
    assert named.is_dir()
    (named / "x.txt").write_text("x", encoding="utf-8")
    with pytest.raises(ValidationError):
        fresh_output_dir(str(named), "gen")
    stamped = [fresh_output_dir(None, "eval") for _ in range(2)]
    assert stamped[0] != stamped[1]
    assert all(p.parent == output_root() and p.name.startswith("eval_") for p in stamped)


def test_run_manifest_paths_are_relative(tmp_path):
    artifact = tmp_path / "metrics.json"
    artifact.write_text("{}", encoding="utf-8")
    path = RunManifest("eval", {"seed": 1}, 1, [artifact]).write(tmp_path)
    assert path.name == MANIFEST_NAME
    data = json.loads(path.read_text(encoding="utf-8"))
    assert data["artifact_paths"] == ["metrics.json"]
    assert data["config_hash"] == config_hash({"seed": 1})


def test_intrinsics_from_robot_file():
    K = resolve_intrinsics(REFERENCE_ROBOT)
    assert (K.width, K.height, K.fx, K.cx) == (64, 64, 64.0, 31.5)


def test_scene_selection(tmp_path, monkeypatch, scenes):
    listing = tmp_path / "scenes.txt"
    listing.write_text("# held out\n2\n\n0  # first\n", encoding="utf-8")
    assert load_selected_scenes(str(listing)) == {0, 2}
    assert [s.index for s in filter_scenes(scenes, {0, 2})] == [0, 2]
    assert len(filter_scenes(scenes, None)) == len(scenes)
    with pytest.raises(ValidationError):
        filter_scenes(scenes, {99})

    assert load_selected_scenes() is None
    monkeypatch.setenv("CTRPOSE_SCENES_FILE", str(listing))
    assert load_selected_scenes() == {0, 2}


def test_scene_selection_errors(tmp_path):
    with pytest.raises(ValidationError):
        load_selected_scenes(str(tmp_path / "missing.txt"))
    bad = tmp_path / "bad.txt"
    bad.write_text("one\n", encoding="utf-8")
    with pytest.raises(ValidationError, match="bad.txt:1"):
        load_selected_scenes(str(bad))


def test_env_helpers(monkeypatch):
    monkeypatch.setenv("CTRPOSE_THREADS", "4")
    assert env_threads() == 4
    monkeypatch.setenv("CTRPOSE_THREADS", "many")
    assert env_threads() == 1
    monkeypatch.setenv("CTRPOSE_THREADS", "-3")
    assert env_threads() == 1
    assert env_flag("VERBOSE") is False
    assert env_flag("CTRPOSE_UNSET_FLAG", default=True) is True
