import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdit.curation import (
    ClipRecord,
    CurationConfig,
    EchoRefiner,
    aesthetic_score,
    angle_is_valid,
    build_manifest,
    camera_motion_filter,
    circular_median_deg,
    curate_records,
    flow_score,
    refine_caption,
    resolution_filter,
    retention_decision,
    validity_filter,
)
from trajdit.errors import MissingDependencyError, ValidationError
from trajdit.synthetic import CorpusConfig, generate_corpus, write_corpus


def rec(aesthetic=6.0, flow=10.0, dims=(16, 720, 1280), clip_id="c"):
    return ClipRecord(clip_id, dims, flow, aesthetic)


@pytest.mark.parametrize("aesthetic,flow,ok", [
    (5.5, 10.0, False),
    (6.0, 3.0, False),
    (6.0, 3.01, True),
    (5.5000001, 3.0000001, True),
])
def test_validity_thresholds_are_strict(aesthetic, flow, ok):
    assert bool(validity_filter(rec(aesthetic, flow))) is ok


@pytest.mark.parametrize("dims,edge,ok", [
    ((16, 720, 1280), 720, True),
    ((16, 576, 1024), 720, False),
    ((16, 64, 64), 64, True),
    ((16, 719, 4000), 720, False),
])
def test_resolution_floor(dims, edge, ok):
    assert bool(resolution_filter(rec(dims=dims), edge)) is ok


def pan(angle_deg, H=32, W=32, L=4, speed=2.0):
    a = np.radians(angle_deg)
    flow = np.zeros((L, H, W, 2))
    flow[:-1, ..., 0] = speed * np.cos(a)
    flow[:-1, ..., 1] = speed * np.sin(a)
    return flow


@pytest.mark.parametrize("angle,ok", [
    (10, True), (30, False), (0, True), (20, True), (21, False), (90, False),
    (160, True), (180, True), (200, True), (201, False), (270, False), (340, True), (350, True),
])
def test_pan_angle_intervals(angle, ok):
    result = camera_motion_filter(pan(angle))
    assert result.passed is ok, result.reason
    if ok:
        assert abs((result.diagnostics["dominant_angle_deg"] - angle + 180) % 360 - 180) < 1e-6


def test_static_background_passes_even_with_moving_object():
    flow = np.zeros((4, 32, 32, 2))
    masks = np.zeros((1, 4, 32, 32), bool)
    masks[0, :, 10:16, 10:16] = True
    flow[:-1, 10:16, 10:16] = (0.0, 5.0)
    result = camera_motion_filter(flow, masks)
    assert result.passed and result.reason == "static camera"


def test_zoom_is_rejected():
    H = W = 32
    yy, xx = np.mgrid[:H, :W]
    radial = np.stack([xx - 15.5, yy - 15.5], -1) * 0.2
    flow = np.zeros((3, H, W, 2))
    flow[:-1] = radial
    zoom_in = camera_motion_filter(flow)
    assert not zoom_in.passed and "zoom" in zoom_in.reason
    assert zoom_in.diagnostics["zoom_fraction"] == 1.0
    flow[:-1] = -radial
    assert camera_motion_filter(flow).diagnostics["zoom_fraction"] == 0.0
    assert not camera_motion_filter(flow).passed


def test_pure_pan_has_balanced_outward_fraction():
    d = camera_motion_filter(pan(0)).diagnostics
    assert d["zoom_fraction"] == 0.5


def test_circular_median_wraps():
    assert circular_median_deg([350, 355, 5, 10, 0]) in (0.0, 355.0, 5.0)
    assert circular_median_deg([350, 355, 5, 10, 0]) == 0.0
    assert angle_is_valid(360.0) and angle_is_valid(-5.0) and not angle_is_valid(25.0)


def test_retention_extremes():
    rng = np.random.default_rng(0)
    assert not any(retention_decision(100.0, rng) for _ in range(1000))
    assert not any(retention_decision(250.0, rng) for _ in range(100))
    assert all(retention_decision(0.0, rng) for _ in range(1000))
    with pytest.raises(ValidationError):
        retention_decision(-1.0, rng)


def test_retention_monte_carlo():
    rng = np.random.default_rng(7)
    keep = np.mean([retention_decision(40.0, rng) for _ in range(100_000)])
    assert abs(keep - 0.60) <= 0.01


def test_retention_is_seeded():
    a = [retention_decision(50.0, np.random.default_rng(3)) for _ in range(5)]
    assert len(set(a)) == 1


def test_record_invariants():
    with pytest.raises(ValidationError):
        ClipRecord("x", (1, 2, 3), float("nan"), 1.0)
    with pytest.raises(ValidationError):
        ClipRecord("x", (1, 2, 3), 1.0, 1.0, dominant_angle_deg=360.0)


def _items(scores):
    items = []
    for i, (a, f) in enumerate(scores):
        items.append((ClipRecord(f"c{i:03d}", (4, 64, 64), f, a), np.zeros((4, 64, 64, 2)), None))
    return items


def test_all_fail_validity_rejects_everything():
    cfg = CurationConfig(min_short_edge=64)
    kept, rejections = curate_records(_items([(5.0, 10.0)] * 6), cfg)
    assert kept == [] and len(rejections) == 6
    assert {r["filter"] for r in rejections} == {"validity"}


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(4, 8), st.floats(0, 60)), max_size=12), st.integers(0, 99))
def test_adding_filters_never_grows_kept_set(scores, seed):
    items = _items(scores)
    order = ("validity", "resolution", "camera", "retention")
    prev = None
    for n in range(len(order), -1, -1):
        kept, _ = curate_records(items, CurationConfig(min_short_edge=64, filters=order[:n]), seed)
        ids = {r.clip_id for r in kept}
        if prev is not None:
            assert prev <= ids
        prev = ids


def test_retention_position_only_changes_rng_use_for_certain_keeps():
    items = _items([(6.0, 0.0), (5.0, 0.0), (7.0, 0.0), (6.5, 0.0)])
    a, _ = curate_records(items, CurationConfig(min_short_edge=64), seed=1)
    b, _ = curate_records(items, CurationConfig(min_short_edge=64, filters=(
        "retention", "validity", "resolution", "camera")), seed=1)
    assert [r.clip_id for r in a] == [r.clip_id for r in b]


def test_scorers():
    frames = np.zeros((2, 8, 8, 3), np.uint8)
    assert aesthetic_score(frames) == 0.0
    frames[:, :4, :4] = (255, 0, 0)
    # luminance range 1/3 -> 2 points, peak saturation 1 -> 4 points
    assert aesthetic_score(frames) == pytest.approx(6.0)
    frames[:, 4:, 4:] = 255
    assert aesthetic_score(frames) == 10.0
    flow = np.zeros((3, 8, 8, 2))
    masks = np.zeros((1, 3, 8, 8), bool)
    masks[0, :, :2, :2] = True
    flow[:, :2, :2] = (3.0, 4.0)
    assert flow_score(flow, masks) == 5.0
    assert flow_score(np.zeros((2, 4, 4, 2))) == 0.0


def test_refinement_client_errors_are_reported():
    class Broken:
        def refine(self, prompt):
            raise TimeoutError("30 s elapsed")

    assert refine_caption(EchoRefiner(), "a cat") == {"refined_prompt": "a cat", "error": None}
    out = refine_caption(Broken(), "a cat")
    assert out["refined_prompt"] == "a cat" and "TimeoutError" in out["error"]


def test_build_manifest_end_to_end(tmp_path):
    cfg = CorpusConfig(num_clips=8, speed_range=(3.5, 5.0), colors=("red", "white"), seed=2)
    write_corpus(generate_corpus(cfg), tmp_path / "corpus", cfg)
    curation = CurationConfig(min_short_edge=32)
    r1 = build_manifest(tmp_path / "corpus", curation, seed=4, out_dir=tmp_path / "a")
    build_manifest(tmp_path / "corpus", curation, seed=4, out_dir=tmp_path / "b")
    for name in ("manifest.jsonl", "rejections.jsonl", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    s = r1["summary"]
    assert s["total"] == 8 and s["kept"] + s["rejected"] == 8
    for line in (tmp_path / "a" / "manifest.jsonl").read_text().splitlines():
        entry = json.loads(line)
        assert set(entry) >= {"clip_id", "path", "dims", "scores", "bucket_hint"}


def test_empty_and_missing_corpus(tmp_path):
    write_corpus([], tmp_path / "empty")
    r = build_manifest(tmp_path / "empty")
    assert r["manifest"] == [] and r["summary"]["total"] == 0
    with pytest.raises(MissingDependencyError):
        build_manifest(tmp_path / "nope")
