import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdit.errors import ValidationError
from trajdit.motion_vae import MotionVAE
from trajdit.synthetic import CorpusConfig, generate_corpus
from trajdit.training import (
    Bucket,
    CurriculumConfig,
    TrainConfig,
    Trainer,
    apply_unmask_strategy,
    assign_bucket,
    check_buckets,
    copy_backbone,
    encode_clips,
    load_checkpoint,
    make_buckets,
    mask_centroids,
    sample_sparse_trajectories,
)

BUCKETS = make_buckets([
    {"resolution": [64, 64], "num_frames": 8, "batch_size": 2},
    {"resolution": [32, 32], "num_frames": 16, "batch_size": 4},
    {"resolution": [32, 32], "num_frames": 8, "batch_size": 4},
])


def test_bucket_assignment():
    assert assign_bucket((32, 32, 16), BUCKETS).name == "32x32x16"
    assert assign_bucket((32, 32, 12), BUCKETS).name == "32x32x8"
    assert assign_bucket((48, 48, 40), BUCKETS).name == "32x32x16"
    assert assign_bucket((64, 64, 40), BUCKETS).name == "64x64x8"
    assert assign_bucket((16, 16, 16), BUCKETS) is None
    assert assign_bucket((32, 32, 4), BUCKETS) is None


def test_bucket_ordering_rule():
    with pytest.raises(ValidationError, match="fewer frames"):
        check_buckets([Bucket((64, 64), 16, 1), Bucket((32, 32), 8, 1)])
    with pytest.raises(ValidationError):
        make_buckets([])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 128), st.integers(1, 128), st.integers(1, 64))
def test_assigned_bucket_never_stretches_a_clip(h, w, l):
    b = assign_bucket((h, w, l), BUCKETS)
    if b is not None:
        assert b.num_frames <= l and b.pixels <= h * w


def test_mask_centroids_fill_gaps_with_flow():
    masks = np.zeros((4, 16, 16), bool)
    masks[0, 2:4, 2:4] = True
    masks[3, 8:10, 8:10] = True
    flow = np.zeros((4, 16, 16, 2))
    flow[..., 0] = 2.0
    pts = mask_centroids(masks, flow)
    np.testing.assert_array_equal(pts[:, 0], [2.5, 4.5, 6.5, 8.5])
    np.testing.assert_array_equal(pts[1:3, 1], [2.5, 2.5])
    with pytest.raises(ValidationError):
        mask_centroids(np.zeros((2, 4, 4), bool))


def test_sparse_sampling_bounds():
    clip = generate_corpus(CorpusConfig(num_clips=1, objects_min=3, objects_max=3, seed=0))[0]
    ks = {len(sample_sparse_trajectories(clip.flow, clip.masks, 16, seed=s)) for s in range(40)}
    assert ks == {1, 2, 3}
    assert {len(sample_sparse_trajectories(clip.flow, clip.masks, 1, seed=s)) for s in range(10)} == {1}
    with pytest.raises(ValidationError):
        sample_sparse_trajectories(clip.flow, clip.masks, 2, k=3)


def test_unmask_strategy():
    assert apply_unmask_strategy(4, 0.0, seed=0).unmasked == frozenset()
    for s in range(50):
        m = apply_unmask_strategy(3, 1.0, seed=s)
        assert len(m.unmasked) == 2
    rng = np.random.default_rng(0)
    first = np.mean([0 in apply_unmask_strategy(4, 0.1, rng).unmasked for _ in range(4000)])
    assert abs(first - 0.5) < 0.03


def test_config_validation():
    with pytest.raises(ValidationError):
        CurriculumConfig(max_trajectories=0)
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValidationError):
        TrainConfig(schedule={"sampler_steps": 5000})


def _tiny_setup(tmp_path, **curriculum):
    cfg = TrainConfig(
        model={"hidden_size": 16, "heads": 2, "num_blocks": 2, "patch_size": 1, "motion_dim": 8},
        curriculum={"pretrain_epochs": 1, "stage1_epochs": 1, "stage2_epochs": 1, **curriculum},
        buckets=[{"resolution": [16, 16], "num_frames": 4, "batch_size": 2}],
        learning_rate=1e-3, seed=3,
    )
    vae = MotionVAE(channels=(8, 8, 8), seed=0)
    clips = generate_corpus(CorpusConfig(num_clips=4, num_frames=4, height=16, width=16,
                                         size_range=(3, 4), seed=1))
    data, rejected = encode_clips(clips, vae, cfg.buckets and make_buckets(cfg.buckets))
    assert rejected == []
    return cfg, vae, data


def test_phase_order_and_frozen_parameters(tmp_path):
    cfg, vae, data = _tiny_setup(tmp_path)
    trainer = Trainer(cfg, vae, log_path=tmp_path / "log.jsonl")
    spatial = [p for b in trainer.model.blocks if not b.temporal for n, p in b.named_parameters()
               if "fuser" not in n]
    history = []
    before = None
    while trainer.phase != "done":
        if trainer.phase == "stage1":
            before = [p.detach().clone() for p in spatial]
        for _, batch in trainer.epoch_batches(data):
            history.append((trainer.phase, trainer.train_step(batch)))
        trainer.advance()
    assert [h[0] for h in history] == ["pretrain"] * 2 + ["stage1"] * 2 + ["stage2"] * 2
    assert all(torch.equal(a, p) for a, p in zip(before, spatial))
    assert all(np.isfinite(h[1]) for h in history)
    with pytest.raises(ValidationError):
        trainer.advance()


def test_run_logs_and_checkpoints_roundtrip(tmp_path):
    cfg, vae, data = _tiny_setup(tmp_path)
    trainer = Trainer(cfg, vae, log_path=tmp_path / "log.jsonl")
    trainer.run(data)
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == list(range(1, 7))
    assert {"step", "stage", "loss", "lr", "bucket"} <= set(lines[0])
    trainer.save(tmp_path / "ckpt.npz")
    model, ext, cfg2, meta = load_checkpoint(tmp_path / "ckpt.npz")
    assert meta["step"] == 6 and cfg2.to_dict() == cfg.to_dict()
    for (n, a), (_, b) in zip(trainer.model.state_dict().items(), model.state_dict().items()):
        assert torch.equal(a, b), n


def test_training_is_seed_deterministic(tmp_path):
    losses = []
    for _ in range(2):
        cfg, vae, data = _tiny_setup(tmp_path)
        losses.append([r["loss"] for r in Trainer(cfg, vae).run(data)])
    assert losses[0] == losses[1]


def test_stage_one_needs_flow(tmp_path):
    cfg, vae, data = _tiny_setup(tmp_path, pretrain_epochs=0)
    data[0][1].flow = None
    trainer = Trainer(cfg, vae)
    with pytest.raises(ValidationError, match="dense flow"):
        trainer.stage1_step([data[0][1]])


def test_max_steps_stops_early(tmp_path):
    cfg, vae, data = _tiny_setup(tmp_path)
    cfg.max_steps = 3
    assert len(Trainer(cfg, vae).run(data)) == 3


def test_copy_backbone_keeps_target_fusers():
    from trajdit.backbone import STDiT

    cfg = TrainConfig(model={"hidden_size": 16, "heads": 2, "num_blocks": 2, "patch_size": 1}).model
    src = STDiT(cfg, seed=0)
    with torch.no_grad():
        for p in src.parameters():
            p.add_(1.0)
    other = TrainConfig(model={"hidden_size": 16, "heads": 2, "num_blocks": 2, "patch_size": 1,
                               "fuser_kind": "extra_channel"}).model
    dst = copy_backbone(src, STDiT(other, seed=1))
    for name, p in dst.named_parameters():
        if ".fuser." in name:
            assert not p.any() or "fc1" in name
        else:
            assert torch.equal(p, dict(src.named_parameters())[name])
