import json

import numpy as np
import pytest

from equisplat.cli import EXIT_OK, EXIT_USAGE, main
from equisplat.dataio import (
    load_checkpoint,
    load_image,
    load_manifest,
    load_ply,
    read_metrics_log,
    read_structured,
    save_checkpoint,
    write_structured,
)
from equisplat.scene import GaussianCloud
from equisplat.synthetic import make_toy_scene, write_toy_dataset

FAST = ["--sh-degree", "0", "--lr-position", "2e-3", "--lr-scale", "0.02", "--log-interval", "10",
        "--densify-until", "0", "--threads", "1"]


def run(*argv):
    # --threads is a top-level flag; move it in front of the subcommand
    argv = list(map(str, argv))
    if "--threads" in argv:
        i = argv.index("--threads")
        argv = argv[i:i + 2] + argv[:i] + argv[i + 2:]
    return main(argv)


@pytest.fixture(scope="module")
def trained(toy_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run("train", toy_dir, "-o", out, "--iterations", "60", "--checkpoint-interval", "30", *FAST)
    return code, out


def test_train_writes_outputs(trained, capsys):
    code, out = trained
    assert code == EXIT_OK
    assert (out / "final.ply").exists()
    assert (out / "final.optim.npz").exists()
    assert (out / "checkpoints" / "iteration_000030.ply").exists()
    assert read_structured(out / "config.yaml")["iterations"] == 60


def test_train_loss_decreases(trained):
    records = read_metrics_log(trained[1] / "metrics.jsonl")
    train = [r for r in records if r["event"] == "train"]
    assert [r["iteration"] for r in train] == [1, 10, 20, 30, 40, 50, 60]
    assert np.mean([r["loss"] for r in train[-2:]]) < train[0]["loss"]
    evals = [r for r in records if r["event"] == "eval"]
    assert len(evals) == 1 and len(evals[0]["views"]) == 2


def test_missing_manifest_is_a_usage_error(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert run("train", missing, "-o", tmp_path / "out") == EXIT_USAGE
    assert str(missing) in capsys.readouterr().err


def test_invalid_config_is_a_usage_error(toy_dir, tmp_path, capsys):
    assert run("train", toy_dir, "-o", tmp_path, "--lambda-ssim", "2") == EXIT_USAGE
    assert "lambda_ssim" in capsys.readouterr().err


def test_config_file_is_overridden_by_flags(toy_dir, tmp_path):
    write_structured({"iterations": 5, "sh_degree": 0, "log_interval": 1}, tmp_path / "cfg.yaml")
    assert run("train", toy_dir, "-o", tmp_path / "o", "-c", tmp_path / "cfg.yaml", "--iterations", "2",
               "--no-eval") == EXIT_OK
    cfg = read_structured(tmp_path / "o" / "config.yaml")
    assert cfg["iterations"] == 2 and cfg["sh_degree"] == 0
    assert len(read_metrics_log(tmp_path / "o" / "metrics.jsonl")) == 2


def test_zero_iterations_saves_the_initialization(toy_dir, tmp_path):
    assert run("train", toy_dir, "-o", tmp_path, "--iterations", "0", "--sh-degree", "0") == EXIT_OK
    cloud = load_checkpoint(tmp_path / "final.ply")
    points = load_ply(load_manifest(toy_dir).points)
    assert len(cloud) == len(points)
    np.testing.assert_allclose(cloud.positions, points.positions, rtol=1e-6)


def test_training_is_deterministic(toy_dir, tmp_path):
    for name in ("a", "b"):
        assert run("train", toy_dir, "-o", tmp_path / name, "--iterations", "15", "--no-eval", *FAST) == EXIT_OK
    a = load_checkpoint(tmp_path / "a" / "final.ply")
    b = load_checkpoint(tmp_path / "b" / "final.ply")
    for name in GaussianCloud.PARAMS:
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_resume_matches_uninterrupted_run(toy_dir, tmp_path):
    # resume from an intermediate checkpoint of the same schedule (the lr decay depends on --iterations)
    flags = ["--no-eval", "--seed", "3", "--iterations", "20", *FAST]
    assert run("train", toy_dir, "-o", tmp_path / "full", "--checkpoint-interval", "10", *flags) == EXIT_OK
    half = tmp_path / "full" / "checkpoints" / "iteration_000010.ply"
    assert run("train", toy_dir, "-o", tmp_path / "rest", "--resume", half, *flags) == EXIT_OK
    a = load_checkpoint(tmp_path / "full" / "final.ply")
    b = load_checkpoint(tmp_path / "rest" / "final.ply")
    for name in GaussianCloud.PARAMS:
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    logged = [r["iteration"] for r in read_metrics_log(tmp_path / "rest" / "metrics.jsonl")]
    assert logged == [20]


def test_render_matches_manifest_size(trained, toy_dir, tmp_path):
    ckpt = trained[1] / "final.ply"
    m = load_manifest(toy_dir)
    assert run("render", ckpt, "-o", tmp_path, "--manifest", toy_dir, "--split", "test",
               "--cube-map", "16", "--perspective", 40, 40, 24, 16, 48, 32, 90, 0) == EXIT_OK
    names = [m.frames[i].name for i in m.test]
    for name in names:
        assert load_image(tmp_path / f"{name}.png").shape == (m.height, m.width, 3)
        assert load_image(tmp_path / f"{name}_front.png").shape == (16, 16, 3)
        assert load_image(tmp_path / f"{name}_persp0.png").shape == (32, 48, 3)
    assert len(list(tmp_path.glob("*.png"))) == len(names) * 8


def test_render_from_pose(trained, tmp_path):
    pose = np.eye(4).ravel()
    assert run("render", trained[1] / "final.ply", "-o", tmp_path, "--pose", *pose,
               "--width", 40, "--height", 20) == EXIT_OK
    assert load_image(tmp_path / "pose.png").shape == (20, 40, 3)
    assert run("render", trained[1] / "final.ply", "-o", tmp_path, "--pose", *pose) == EXIT_USAGE


def test_eval_of_ground_truth_is_perfect(tmp_path, capsys):
    manifest = write_toy_dataset(tmp_path, width=64, height=32, n_gaussians=6, n_train=1, n_test=2, bits=16)
    gt, _, _ = make_toy_scene(width=64, height=32, n_gaussians=6, n_train=1, n_test=2)
    save_checkpoint(gt, tmp_path / "gt.ply")
    assert run("eval", tmp_path / "gt.ply", manifest, "-o", tmp_path / "r.json") == EXIT_OK
    report = json.loads((tmp_path / "r.json").read_text())
    assert [v["psnr"] for v in report["views"]] == [99.0, 99.0]
    assert [v["ssim"] for v in report["views"]] == pytest.approx([1.0, 1.0], abs=1e-9)
    assert "mean\tPSNR 99.000" in capsys.readouterr().out
    assert run("eval", tmp_path / "gt.ply", manifest, "--perspective-crop", "--crop-size", "8") == EXIT_OK
    assert capsys.readouterr().out.count("/front") == 2


def test_eval_empty_split(toy_dir, trained, tmp_path, capsys):
    doc = read_structured(toy_dir)
    doc.pop("test", None)
    doc["train"] = [f["name"] for f in doc["frames"]]
    write_structured(doc, toy_dir.parent / "all_train.yaml")
    assert run("eval", trained[1] / "final.ply", toy_dir.parent / "all_train.yaml") == EXIT_USAGE
    assert "no views" in capsys.readouterr().err


def test_convert_colmap(tmp_path):
    from test_dataio import write_colmap

    write_colmap(tmp_path / "sparse", [([1, 0, 0, 0], [0, 0, 0], "a.png")])
    assert run("convert-colmap", tmp_path / "sparse", tmp_path / "images", tmp_path / "scene.yaml") == EXIT_OK
    m = load_manifest(tmp_path / "scene.yaml", check_files=False)
    assert [f.name for f in m.frames] == ["a"]
    assert run("convert-colmap", tmp_path / "nothing", tmp_path / "images", tmp_path / "s2.yaml") == EXIT_USAGE


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "equisplat" in capsys.readouterr().out
