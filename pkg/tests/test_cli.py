import json

import numpy as np
import pytest
import yaml
from matplotlib import image as mpimg

from trajdit.cli import main
from trajdit.config import SNAPSHOT_NAME
from trajdit.flowvis import flow_to_rgb
from trajdit.trajectory import Trajectory, rasterize_trajectories, save_trajectory_file

TINY_MODEL = ["train.model.hidden_size=16", "train.model.heads=2", "train.model.num_blocks=2",
              "train.model.motion_dim=8", "train.model.patch_size=1"]


def run(*argv):
    return main([str(a) for a in argv])


def _summary(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """gen-corpus -> train-vae (x2) -> train on a tiny configuration."""
    root = tmp_path_factory.mktemp("chain")
    assert run("gen-corpus", "--out", root / "corpus", "--num-clips", 4, "--seed", 1) == 0
    for kind in ("motion", "video"):
        assert run("train-vae", "--out", root / kind, "--corpus", root / "corpus", "--kind", kind,
                   "--steps", 2, "--set", "vae.channels=[8,8,8]", "--set", "train.max_frames=4") == 0
    args = ["train", "--out", root / "train", "--corpus", root / "corpus",
            "--motion-vae", root / "motion" / "motion_vae.npz",
            "--video-vae", root / "video" / "video_vae.npz", "--max-steps", 3,
            "--set", "train.curriculum.pretrain_epochs=1",
            "--set", 'train.buckets=[{"resolution": [32, 32], "num_frames": 16, "batch_size": 2}]']
    for s in TINY_MODEL:
        args += ["--set", s]
    assert run(*args) == 0
    return root


def _gen_args(root):
    return ["--checkpoint", root / "train" / "model.npz",
            "--motion-vae", root / "motion" / "motion_vae.npz",
            "--video-vae", root / "video" / "video_vae.npz"]


def test_chain_artifacts(chain):
    assert (chain / "corpus" / "index.jsonl").exists()
    assert (chain / "train" / "model.npz").exists()
    assert (chain / "train" / "loss.png").exists()
    log = (chain / "train" / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 3
    snap = yaml.safe_load((chain / "train" / SNAPSHOT_NAME).read_text())
    assert snap["command"] == "train" and snap["config"]["train"]["max_steps"] == 3


def test_unconditional_and_conditioned_sample(chain, tmp_path, capsys):
    assert run("sample", "--out", tmp_path / "u", "--steps", 2, *_gen_args(chain)) == 0
    assert _summary(capsys)["conditioned"] is False
    traj = tmp_path / "t.json"
    save_trajectory_file(traj, [Trajectory(np.stack([np.linspace(4, 27, 16), np.full(16, 16.0)], 1), "a")])
    assert run("sample", "--out", tmp_path / "c", "--steps", 2, "--trajectory", traj, *_gen_args(chain)) == 0
    assert _summary(capsys)["conditioned"] is True
    assert len(list((tmp_path / "c" / "frames").glob("*.png"))) == 16


def test_sample_rejects_wrong_length_before_loading(tmp_path, capsys):
    traj = tmp_path / "t.json"
    save_trajectory_file(traj, [Trajectory(np.zeros((5, 2)) + 3, "a")])
    # checkpoint paths do not exist: the length check must fire first
    code = run("sample", "--out", tmp_path / "o", "--trajectory", traj, "--checkpoint", tmp_path / "none")
    assert code == 2
    assert "5 points" in capsys.readouterr().err


def test_eval_and_report(chain, tmp_path, capsys):
    assert run("gen-corpus", "--out", tmp_path / "held", "--num-clips", 2, "--seed", 9) == 0
    for name, kind in (("a", "adaptive_norm"), ("b", "extra_channel")):
        assert run("eval", "--out", tmp_path / name, "--corpus", tmp_path / "held", "--num-cases", 2,
                   "--steps", 2, "--set", f"ablation.fuser={kind}", *_gen_args(chain)) == 0
        record = json.loads((tmp_path / name / "run.json").read_text())
        assert np.isfinite(record["metrics"]["traj_error"])
    runs = [tmp_path / "a" / "run.json", tmp_path / "b" / "run.json"]
    capsys.readouterr()
    assert run("report", "--out", tmp_path / "r1", *runs) == 0
    assert "== fuser ==" in capsys.readouterr().out
    assert run("report", "--out", tmp_path / "r2", *runs) == 0
    for name in ("report.txt", "ablation_fuser.csv", "ablation_fuser.png"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_snapshot_reproduces_command(tmp_path):
    assert run("gen-corpus", "--out", tmp_path / "a", "--num-clips", 2, "--seed", 5) == 0
    assert run("gen-corpus", "--out", tmp_path / "b", "--config", tmp_path / "a" / SNAPSHOT_NAME) == 0
    for p in sorted((tmp_path / "a" / "clips").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / "clips" / p.name).read_bytes()
    assert run("curate", "--out", tmp_path / "c", "--config", tmp_path / "a" / SNAPSHOT_NAME) == 2


def test_visualize_matches_color_wheel(tmp_path):
    traj = tmp_path / "t.json"
    pts = np.stack([np.arange(8, dtype=float) + 4, np.full(8, 8.0)], 1)
    save_trajectory_file(traj, [Trajectory(pts, "a")])
    assert run("visualize", "--input", traj, "--out", tmp_path / "v", "--frames", 8,
               "--height", 16, "--width", 16) == 0
    expected = flow_to_rgb(rasterize_trajectories([Trajectory(pts)], (8, 16, 16), 3.0))
    for i in range(8):
        got = mpimg.imread(tmp_path / "v" / f"flow_{i:03d}.png")[..., :3]
        np.testing.assert_array_equal(np.rint(got * 255), np.rint(expected[i] * 255))
    assert (tmp_path / "v" / "trajectories.png").exists()


def test_visualize_zero_flow_is_white(tmp_path):
    np.save(tmp_path / "f.npy", np.zeros((2, 8, 8, 2)))
    assert run("visualize", "--input", tmp_path / "f.npy", "--out", tmp_path / "v") == 0
    assert (mpimg.imread(tmp_path / "v" / "flow_000.png")[..., :3] == 1.0).all()


@pytest.mark.parametrize("argv,code", [
    (["train", "--corpus", "/nonexistent"], 3),
    (["curate"], 3),
    (["report"], 3),
    (["gen-corpus", "--set", "corpus.colors=[mauve]"], 2),
    (["gen-corpus", "--set", "corpus.bogus=1"], 2),
    (["visualize", "--input", "/nonexistent.json"], 2),
])
def test_exit_codes(argv, code, tmp_path, capsys):
    assert run(*argv, "--out", tmp_path / "o") == code
    assert capsys.readouterr().err.strip()


def test_default_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("TRAJDIT_OUTPUT_ROOT", str(tmp_path / "root"))
    assert run("gen-corpus", "--num-clips", 1) == 0
    assert (tmp_path / "root" / "gen-corpus" / "index.jsonl").exists()
