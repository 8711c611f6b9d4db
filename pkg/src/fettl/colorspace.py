"""RGB <-> HSV conversion (hexcone formulas) for channel-first float images.

Both directions operate on arrays shaped (3, ...) with values in [0, 1];
hue is stored in [0, 1) turns.
"""

from __future__ import annotations

import numpy as np


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[0], rgb[1], rgb[2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)

    h = np.zeros_like(maxc)
    nz = delta > 0
    dsafe = np.where(nz, delta, 1.0)
    r_is_max = nz & (maxc == r)
    g_is_max = nz & (maxc == g) & ~r_is_max
    b_is_max = nz & ~r_is_max & ~g_is_max
    h = np.where(r_is_max, ((g - b) / dsafe) % 6.0, h)
    h = np.where(g_is_max, (b - r) / dsafe + 2.0, h)
    h = np.where(b_is_max, (r - g) / dsafe + 4.0, h)
    return np.stack([h / 6.0, s, v])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[0] % 1.0, hsv[1], hsv[2]
    h6 = h * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))

    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def hsv_channel_means(rgb: np.ndarray) -> np.ndarray:
    """Per-image style descriptor: the mean of each HSV channel."""
    hsv = rgb_to_hsv(np.asarray(rgb, dtype=np.float64))
    return hsv.reshape(3, -1).mean(axis=1)
