"""Visualising guided kernels and depth maps.

Each 3x3 kernel is reduced to a 2-D vector by its inner products with the
Prewitt x/y operators.  Vectors are drawn with a flow-style HSV wheel: hue is
the vector angle (0 deg = +x = red, counter-clockwise with +y pointing down
the image), saturation the magnitude relative to a per-image percentile,
value fixed at 1, so a zero vector is white.
"""
from __future__ import annotations

import numpy as np
from matplotlib import colormaps
from matplotlib.colors import hsv_to_rgb

PREWITT_X = np.array([[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]])
PREWITT_Y = PREWITT_X.T.copy()
DEPTH_COLORMAP = "jet"


def kernels_to_field(kernels, channel=0, batch=0):
    """(H, W, 2) field of (vx, vy) for one channel of channel-wise kernels.

    ``kernels`` is a ChannelwiseKernels, a tensor/array of shape
    (N, M, 9, H, W), or a single kernel stack (..., 3, 3).
    """
    w = getattr(kernels, "weights", kernels)
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    if w.ndim == 5:
        if w.shape[2] != 9:
            raise ValueError(f"Prewitt reduction needs 3x3 kernels, got {w.shape[2]} taps")
        taps = w[batch, channel].reshape(3, 3, *w.shape[3:])
        vx = np.tensordot(PREWITT_X, taps, axes=([0, 1], [0, 1]))
        vy = np.tensordot(PREWITT_Y, taps, axes=([0, 1], [0, 1]))
        return np.stack([vx, vy], axis=-1)
    if w.shape[-2:] != (3, 3):
        raise ValueError(f"Prewitt reduction needs 3x3 kernels, got shape {w.shape}")
    vx = (w * PREWITT_X).sum(axis=(-2, -1))
    vy = (w * PREWITT_Y).sum(axis=(-2, -1))
    return np.stack([vx, vy], axis=-1)


def field_to_color(field, percentile=99.0):
    """8-bit RGB (H, W, 3) rendering of a vector field."""
    field = np.asarray(field, dtype=np.float64)
    vx, vy = field[..., 0], field[..., 1]
    mag = np.hypot(vx, vy)
    scale = np.percentile(mag, percentile) if mag.size else 0.0
    if scale <= 0:
        scale = mag.max() if mag.size and mag.max() > 0 else 1.0
    hue = (np.arctan2(vy, vx) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / scale, 0.0, 1.0)
    hsv = np.stack([hue, sat, np.ones_like(hue)], axis=-1)
    return np.rint(hsv_to_rgb(hsv) * 255).astype(np.uint8)


def field_hue(rgb):
    """Hue angle in degrees of an 8-bit RGB image (inverse of the wheel)."""
    from matplotlib.colors import rgb_to_hsv

    return rgb_to_hsv(np.asarray(rgb, dtype=np.float64) / 255.0)[..., 0] * 360.0


def depth_to_color(depth, value_range=None, invalid_color=(0, 0, 0)):
    """Colourise depth with the fixed ``jet`` map over ``value_range`` (default min..max of valid)."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    if value_range is None:
        value_range = (depth[valid].min(), depth[valid].max()) if valid.any() else (0.0, 1.0)
    lo, hi = value_range
    t = np.clip((depth - lo) / (hi - lo if hi > lo else 1.0), 0.0, 1.0)
    rgb = colormaps[DEPTH_COLORMAP](t)[..., :3]
    rgb = np.rint(rgb * 255).astype(np.uint8)
    rgb[~valid] = invalid_color
    return rgb
