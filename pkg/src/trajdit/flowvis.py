"""Color-wheel visualization of 2-channel flow fields.

Uses the 55-entry Middlebury wheel (Baker et al.). Hue follows the flow
direction ``atan2(v, u)`` measured clockwise in image coordinates (y down), so
rightward flow is red, downward flow orange-yellow, leftward flow cyan. Color
saturation scales with magnitude and zero flow is white.
"""

from __future__ import annotations

import numpy as np

# red-yellow, yellow-green, green-cyan, cyan-blue, blue-magenta, magenta-red
WHEEL_SEGMENTS = (15, 6, 4, 11, 13, 6)


def make_colorwheel() -> np.ndarray:
    """Return the ``(55, 3)`` wheel in [0, 1]."""
    ry, yg, gc, cb, bm, mr = WHEEL_SEGMENTS
    wheel = np.zeros((sum(WHEEL_SEGMENTS), 3))
    col = 0
    wheel[col:col + ry, 0] = 1.0
    wheel[col:col + ry, 1] = np.arange(ry) / ry
    col += ry
    wheel[col:col + yg, 0] = 1.0 - np.arange(yg) / yg
    wheel[col:col + yg, 1] = 1.0
    col += yg
    wheel[col:col + gc, 1] = 1.0
    wheel[col:col + gc, 2] = np.arange(gc) / gc
    col += gc
    wheel[col:col + cb, 1] = 1.0 - np.arange(cb) / cb
    wheel[col:col + cb, 2] = 1.0
    col += cb
    wheel[col:col + bm, 2] = 1.0
    wheel[col:col + bm, 0] = np.arange(bm) / bm
    col += bm
    wheel[col:col + mr, 2] = 1.0 - np.arange(mr) / mr
    wheel[col:col + mr, 0] = 1.0
    return wheel


COLORWHEEL = make_colorwheel()


def wheel_position(u, v):
    """Fractional wheel index in ``[0, 55)`` for direction ``(u, v)``."""
    angle = np.mod(np.arctan2(v, u), 2 * np.pi)
    pos = angle / (2 * np.pi) * len(COLORWHEEL)
    return np.where(pos >= len(COLORWHEEL), 0.0, pos)


def flow_to_rgb(flow, max_magnitude=None, eps=1e-6):
    """Map ``(..., 2)`` flow to ``(..., 3)`` RGB in [0, 1].

    ``max_magnitude`` defaults to the field's own maximum magnitude (floored at
    ``eps``); magnitudes above it saturate.
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    rad = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(rad.max()) if rad.size else 0.0
    max_magnitude = max(float(max_magnitude), eps)
    rad = np.clip(rad / max_magnitude, 0.0, 1.0)

    pos = wheel_position(u, v)
    k0 = np.floor(pos).astype(np.int64)
    k1 = (k0 + 1) % len(COLORWHEEL)
    frac = (pos - k0)[..., None]
    col = (1 - frac) * COLORWHEEL[k0] + frac * COLORWHEEL[k1]
    rgb = 1.0 - rad[..., None] * (1.0 - col)
    return np.clip(rgb, 0.0, 1.0)
