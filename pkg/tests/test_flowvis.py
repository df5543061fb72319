import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdit.flowvis import COLORWHEEL, flow_to_rgb, wheel_position


def reference_wheel():
    """Wheel built entry by entry the way the Middlebury C tool does, in 0..255."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    rows = []
    for i in range(RY):
        rows.append((255, math.floor(255 * i / RY), 0))
    for i in range(YG):
        rows.append((255 - math.floor(255 * i / YG), 255, 0))
    for i in range(GC):
        rows.append((0, 255, math.floor(255 * i / GC)))
    for i in range(CB):
        rows.append((0, 255 - math.floor(255 * i / CB), 255))
    for i in range(BM):
        rows.append((math.floor(255 * i / BM), 0, 255))
    for i in range(MR):
        rows.append((255, 0, 255 - math.floor(255 * i / MR)))
    return np.array(rows, dtype=float)


def test_wheel_matches_reference_table():
    ref = reference_wheel()
    assert COLORWHEEL.shape == (55, 3)
    # the reference floors to integers; ours stays continuous
    assert np.abs(COLORWHEEL * 255 - ref).max() < 1.0


def test_zero_flow_is_white():
    rgb = flow_to_rgb(np.zeros((3, 4, 5, 2)))
    assert rgb.shape == (3, 4, 5, 3)
    assert (rgb == 1.0).all()


def test_unit_rightward_is_angle_zero_anchor():
    rgb = flow_to_rgb(np.array([[[1.0, 0.0]]]))
    np.testing.assert_allclose(rgb[0, 0], reference_wheel()[0] / 255, atol=1e-12)


def test_downward_hits_quarter_turn():
    # a quarter of 55 entries: between entries 13 and 14 (red-yellow segment)
    pos = wheel_position(0.0, 1.0)
    assert abs(pos - 55 / 4) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_antipodal_flows_half_a_wheel_apart(u, v):
    if math.hypot(u, v) < 1e-3:
        return
    a, b = float(wheel_position(u, v)), float(wheel_position(-u, -v))
    d = abs(a - b) % 55
    assert abs(d - 27.5) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_output_range_and_saturation(seed):
    flow = np.random.default_rng(seed).normal(size=(2, 4, 4, 2)) * 3
    rgb = flow_to_rgb(flow)
    assert rgb.min() >= 0 and rgb.max() <= 1
    # the largest vector is fully saturated: some channel reaches 0 or the wheel color
    mag = np.hypot(flow[..., 0], flow[..., 1])
    idx = np.unravel_index(np.argmax(mag), mag.shape)
    assert rgb[idx].min() < 1e-9 or rgb[idx].max() < 1.0


def test_fixed_max_magnitude_saturates_and_scales():
    flow = np.array([[[2.0, 0.0], [0.5, 0.0]]])
    rgb = flow_to_rgb(flow, max_magnitude=1.0)
    np.testing.assert_allclose(rgb[0, 0], COLORWHEEL[0])
    np.testing.assert_allclose(rgb[0, 1], 1 - 0.5 * (1 - COLORWHEEL[0]))
