"""End-to-end CLI exercises on small datasets."""

import os

import numpy as np
import pytest

from orion3d import formats
from orion3d.cli import dispatch
from orion3d.synth import build_detector_dataset, detector_scheme, make_scene
from orion3d.train import TrainConfig, train


OFF_TEXT = """OFF
8 4 0
0 0 0
2 0 0
2 1 0
0 1 0
0 0 1
2 0 1
2 1 1
0.5 1 1
3 0 1 2
3 0 2 3
3 4 5 6
3 4 6 7
"""


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = dispatch(["synth", "--classes", "2", "--per-class", "6",
                   "--test-per-class", "4", "--noise", "0.02",
                   "--points", "400", "--out", str(out), "--seed", "0"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained_checkpoint(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    ckpt = out / "model.orn"
    rc = dispatch(["train", "--data", str(dataset_dir), "--out", str(ckpt),
                   "--epochs", "2", "--batch-size", "6", "--lr", "0.02",
                   "--seed", "0", "--history", str(out / "hist.csv")])
    assert rc == 0
    return ckpt


def test_synth_writes_dataset(dataset_dir):
    assert (dataset_dir / "labels.csv").exists()
    assert (dataset_dir / "scheme.csv").exists()
    lines = (dataset_dir / "labels.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 2 * (6 + 4)


def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        rc = dispatch(["synth", "--classes", "2", "--per-class", "2",
                       "--test-per-class", "1", "--points", "200",
                       "--out", str(out), "--seed", "5"])
        assert rc == 0
    fa = sorted(os.listdir(a / "clouds"))
    assert fa == sorted(os.listdir(b / "clouds"))
    for f in fa:
        assert (a / "clouds" / f).read_bytes() == (b / "clouds" / f).read_bytes()


def test_voxelize_off_roundtrip(tmp_path):
    mesh = tmp_path / "object.off"
    mesh.write_text(OFF_TEXT)
    out = tmp_path / "object.ocg"
    rc = dispatch(["voxelize", "--in", str(mesh), "--out", str(out),
                   "--points", "5000", "--seed", "1"])
    assert rc == 0
    grid = formats.read_ocg(out)
    assert grid.occupied_count() > 0
    # idempotent: identical bytes on a second run
    out2 = tmp_path / "object2.ocg"
    dispatch(["voxelize", "--in", str(mesh), "--out", str(out2),
              "--points", "5000", "--seed", "1"])
    assert out.read_bytes() == out2.read_bytes()


def test_voxelize_xyz_input(tmp_path, rng):
    cloud = tmp_path / "c.xyz"
    formats.write_xyz(cloud, rng.standard_normal((100, 3)))
    rc = dispatch(["voxelize", "--in", str(cloud), "--out",
                   str(tmp_path / "c.ocg")])
    assert rc == 0


def test_train_and_eval(trained_checkpoint, dataset_dir, tmp_path):
    net = formats.load_checkpoint(trained_checkpoint)
    assert net.arch == "baseline"
    rc = dispatch(["eval", "--checkpoint", str(trained_checkpoint),
                   "--data", str(dataset_dir), "--split", "test",
                   "--out", str(tmp_path / "metrics.csv")])
    assert rc == 0
    text = (tmp_path / "metrics.csv").read_text()
    assert "accuracy" in text and "f1_class0" in text


def test_train_config_file_and_cli_precedence(dataset_dir, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs = 1\nlr = 0.5\nbatch_size = 6\n")
    ckpt = tmp_path / "m.orn"
    hist = tmp_path / "h.csv"
    # --lr on the command line beats the config file
    rc = dispatch(["train", "--data", str(dataset_dir), "--out", str(ckpt),
                   "--config", str(cfg), "--lr", "0.001",
                   "--history", str(hist)])
    assert rc == 0
    assert len(hist.read_text().strip().splitlines()) == 2  # header + 1 epoch


def test_train_rejects_unknown_config_key(dataset_dir, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    rc = dispatch(["train", "--data", str(dataset_dir),
                   "--out", str(tmp_path / "m.orn"), "--config", str(cfg)])
    assert rc == 1


def test_vote_command(trained_checkpoint, dataset_dir, capsys):
    cloud = next((dataset_dir / "clouds").glob("test_*.xyz"))
    rc = dispatch(["vote", "--checkpoint", str(trained_checkpoint),
                   "--in", str(cloud), "--rotations", "4"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "class" in out and "score," in out


def test_history_csv_columns(trained_checkpoint, dataset_dir, tmp_path_factory):
    hist = trained_checkpoint.parent / "hist.csv"
    lines = hist.read_text().strip().splitlines()
    assert lines[0] == "epoch,loss,loss_class,loss_orient,val_acc,val_wf1,val_orient_acc"
    assert len(lines) == 3


@pytest.fixture(scope="module")
def detector_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("det") / "detector.orn"
    samples = build_detector_dataset(24, 24, seed=0)
    config = TrainConfig(epochs=3, batch_size=16, lr=0.02, gamma=0.7, seed=0,
                         shift_range=1)
    net, _ = train(config, samples, [], detector_scheme())
    formats.save_checkpoint(out, net)
    return out


def test_detect_guided_vs_exhaustive_counts(detector_checkpoint, tmp_path, capsys):
    scene_cloud, gt = make_scene(seed=2, n_objects=1, extent=7.0)
    scene = tmp_path / "scene.xyz"
    formats.write_xyz(scene, scene_cloud)
    gt_csv = tmp_path / "gt.csv"
    formats.write_boxes_csv(gt_csv, gt, with_score=False)

    counts = {}
    for mode, rot in (("guided", 6), ("exhaustive", 6)):
        rc = dispatch(["detect", "--checkpoint", str(detector_checkpoint),
                       "--scene", str(scene), "--gt", str(gt_csv),
                       "--mode", mode, "--rotations", str(rot),
                       "--stride", "1.0", "--min-points", "30",
                       "--out", str(tmp_path / f"{mode}.csv"),
                       "--report", str(tmp_path / f"{mode}_report.csv")])
        assert rc == 0
        summary = [l for l in (tmp_path / f"{mode}_report.csv").read_text().splitlines()
                   if l.startswith("# summary")][0]
        counts[mode] = int(summary.split("boxes=")[1].split(",")[0])
    assert counts["exhaustive"] == 6 * counts["guided"]


def test_analyze_snapshot(trained_checkpoint, dataset_dir, tmp_path):
    cloud = next((dataset_dir / "clouds").glob("train_*.xyz"))
    rc = dispatch(["analyze", "--checkpoint", str(trained_checkpoint),
                   "--in", str(cloud), "--layer", "conv1", "--filter", "2",
                   "--rotations", "3", "--out-dir", str(tmp_path / "maps")])
    assert rc == 0
    files = sorted(os.listdir(tmp_path / "maps"))
    assert len(files) == 3
    values, _, _ = formats.read_ocf(tmp_path / "maps" / files[0])
    assert values.shape == (14, 14, 14)


def test_analyze_histograms(trained_checkpoint, dataset_dir, tmp_path):
    rc = dispatch(["analyze", "--checkpoint", str(trained_checkpoint),
                   "--data", str(dataset_dir), "--split", "test",
                   "--limit", "2", "--out-dir", str(tmp_path / "hists")])
    assert rc == 0
    files = os.listdir(tmp_path / "hists")
    assert any(f.startswith("paths_") for f in files)
    assert any(f.startswith("entropy_") for f in files)


def test_align_command(tmp_path, rng):
    base = tmp_path / "objects"
    from orion3d.voxel import rotate_points
    proto = rng.standard_normal((300, 3)) * [2.0, 0.7, 0.5]
    cls_dir = base / "widget"
    cls_dir.mkdir(parents=True)
    for i in range(6):
        angle = rng.integers(0, 32) * (2 * np.pi / 32)
        formats.write_xyz(cls_dir / f"obj{i}.xyz",
                          rotate_points(proto, angle, center=(0, 0, 0)))
    manifest = tmp_path / "manifest.csv"
    rc = dispatch(["align", "--in", str(base), "--out", str(manifest),
                   "--threshold", "0.3", "--seed", "0"])
    assert rc == 0
    lines = manifest.read_text().strip().splitlines()
    assert lines[0] == "object_id,class,rotation_deg,residual,k"
    assert len(lines) == 7
    assert all(line.split(",")[4] == "12" for line in lines[1:])


class TestExitCodes:
    def test_usage_error_is_2(self):
        with pytest.raises(SystemExit) as e:
            dispatch(["voxelize", "--bogus-flag", "x"])
        assert e.value.code == 2

    def test_unknown_command_is_2(self):
        with pytest.raises(SystemExit) as e:
            dispatch(["transmogrify"])
        assert e.value.code == 2

    def test_missing_file_is_1(self, tmp_path, capsys):
        rc = dispatch(["voxelize", "--in", str(tmp_path / "nope.xyz"),
                       "--out", str(tmp_path / "o.ocg")])
        assert rc == 1
        assert "error" in capsys.readouterr().err

    def test_missing_data_dir_is_1(self, tmp_path):
        rc = dispatch(["eval", "--checkpoint", str(tmp_path / "x.orn"),
                       "--data", str(tmp_path)])
        assert rc == 1
