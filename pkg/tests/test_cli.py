import json

import pytest

from cli import run_command
from ctrpose.kinematics import REFERENCE_ROBOT
from ctrpose.perception import init_params, save_checkpoint
from ctrpose.synthgen import SceneDataset
from utils.env import output_root


def gen(out, n=3, seed=7):
    return run_command(
        ["gen", "--robot", str(REFERENCE_ROBOT), "--n", str(n), "--seed", str(seed)]
        + ["--out", str(out)]
    )


def test_unknown_flag_fails_without_artifacts(tmp_path):
    assert run_command(["gen", "--bogus", "1", "--out", str(tmp_path / "run")]) == 1
    assert not (tmp_path / "run").exists()
    assert not output_root().exists()


def test_gen_is_byte_identical(tmp_path):
    assert gen(tmp_path / "a") == 0
    assert gen(tmp_path / "b") == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*"))
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*"))
    assert files_a == files_b
    assert "run_manifest.json" in {p.name for p in files_a}
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_non_empty_output_is_refused(tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / "keep.txt").write_text("mine", encoding="utf-8")
    assert gen(out) == 1
    assert sorted(p.name for p in out.iterdir()) == ["keep.txt"]


def test_unknown_config_key_is_a_usage_error(tmp_path):
    cfg = tmp_path / "gen.toml"
    cfg.write_text("scenes = 4\n", encoding="utf-8")
    assert run_command(["gen", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 1


def test_gradcheck_subset(tmp_path):
    out = tmp_path / "grad"
    status = run_command(
        ["gradcheck", "--stage", "projection", "--stage", "spatial_softmax", "--out", str(out)]
    )
    assert status == 0
    report = json.loads((out / "gradcheck.json").read_text(encoding="utf-8"))
    assert [s["stage"] for s in report["stages"]] == ["projection", "spatial_softmax"]
    assert report["pass"] is True


def test_gradcheck_unknown_stage(tmp_path):
    assert run_command(["gradcheck", "--stage", "nope", "--out", str(tmp_path / "g")]) == 1


@pytest.mark.slow
def test_gradcheck_all_stages(tmp_path):
    assert run_command(["gradcheck", "--all", "--out", str(tmp_path / "g")]) == 0


def test_pretrain_train_eval_pipeline(tmp_path):
    assert gen(tmp_path / "data") == 0
    data = str(tmp_path / "data")
    assert run_command(
        ["pretrain", "--dataset", data, "--out", str(tmp_path / "pre")]
    ) == 0
    assert (tmp_path / "pre" / "checkpoint.json").exists()
    status = run_command(
        [
            "train",
            "--dataset", data,
            "--checkpoint", str(tmp_path / "pre"),
            "--epochs", "1",
            "--mask-mode", "oracle",
            "--out", str(tmp_path / "train"),
        ]
    )
    assert status == 0
    log = (tmp_path / "train" / "train_log.jsonl").read_text(encoding="utf-8").splitlines()
    assert json.loads(log[0])["epoch"] == 0
    assert run_command(
        ["eval", "--dataset", data, "--checkpoint", str(tmp_path / "train")]
        + ["--out", str(tmp_path / "eval")]
    ) == 0
    metrics = json.loads((tmp_path / "eval" / "metrics.json").read_text(encoding="utf-8"))
    assert len(metrics["per_frame_add"]) == 3
    assert 0.0 <= metrics["auc_add"] <= 100.0


def test_eval_scene_selection(tmp_path):
    assert gen(tmp_path / "data") == 0
    data = SceneDataset.load(tmp_path / "data")
    save_checkpoint(init_params(data.keypoints2d(), image_width=64), tmp_path / "ckpt")
    listing = tmp_path / "scenes.txt"
    listing.write_text("1\n", encoding="utf-8")
    status = run_command(
        ["eval", "--dataset", str(tmp_path / "data"), "--checkpoint", str(tmp_path / "ckpt")]
        + ["--scenes", str(listing), "--out", str(tmp_path / "e")]
    )
    assert status == 0
    metrics = json.loads((tmp_path / "e" / "metrics.json").read_text(encoding="utf-8"))
    assert len(metrics["per_frame_add"]) == 1


def test_train_requires_dataset(tmp_path):
    assert run_command(["train", "--out", str(tmp_path / "t")]) == 1


def test_servo_writes_trace_and_plot(tmp_path):
    out = tmp_path / "servo"
    status = run_command(
        ["servo", "--robot", str(REFERENCE_ROBOT), "--estimator", "gt", "--duration", "0.5"]
        + ["--out", str(out)]
    )
    assert status == 0
    assert {"servo_trace.csv", "distance_to_goal.png", "servo_summary.json"} <= {
        p.name for p in out.iterdir()
    }


def test_servo_rejects_bad_estimator(tmp_path):
    status = run_command(["servo", "--estimator", "oracle", "--out", str(tmp_path / "s")])
    assert status == 1


@pytest.mark.parametrize("kind", ["ctrnet", "keypoint"])
def test_servo_accepts_checkpoint_estimator(tmp_path, kind):
    assert gen(tmp_path / "data") == 0
    data = SceneDataset.load(tmp_path / "data")
    params = init_params(data.keypoints2d(), image_width=64)
    save_checkpoint(params, tmp_path / "ckpt", {"dataset": str(tmp_path / "data")})
    out = tmp_path / "servo"
    status = run_command(
        ["servo", "--robot", str(REFERENCE_ROBOT), "--estimator", f"{kind}:{tmp_path / 'ckpt'}"]
        + ["--duration", "0.25", "--out", str(out)]
    )
    assert status == 0
    assert (out / "servo_summary.json").exists()


def test_servo_checkpoint_estimator_needs_a_path(tmp_path):
    status = run_command(["servo", "--estimator", "ctrnet:", "--out", str(tmp_path / "s")])
    assert status == 1
