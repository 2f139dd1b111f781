"""Procedural head-slice phantoms used as a stand-in target domain.

Each phantom is a smoothed stack of soft-edged ellipses: scalp ring, cortex,
white matter, two ventricles and a few random lesion-like blobs.  Geometry
and tissue intensities jitter per image so the corpus has real variability,
but every slice shares the same overall layout, like registered MR slices.
"""

import numpy as np
from scipy import ndimage

from .numeric import minmax_normalize


def _soft_ellipse(yy, xx, cy, cx, ry, rx, angle, softness=0.6):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    r = np.sqrt(u * u + v * v)
    # signed distance in pixels, roughly
    dist = (r - 1.0) * min(rx, ry)
    return 1.0 / (1.0 + np.exp(dist / softness))


def make_phantom(rng, size=32, smoothing=0.7):
    """Return one min-max normalized ``size x size`` phantom."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    k = size / 32.0
    cy = size / 2 - 0.5 + rng.normal(0, 0.6 * k)
    cx = size / 2 - 0.5 + rng.normal(0, 0.6 * k)
    ry = (13.0 + rng.normal(0, 0.6)) * k
    rx = (11.0 + rng.normal(0, 0.6)) * k
    angle = rng.normal(0, 0.12)

    head = _soft_ellipse(yy, xx, cy, cx, ry, rx, angle)
    brain = _soft_ellipse(yy, xx, cy, cx, ry - 1.8 * k, rx - 1.8 * k, angle)
    white = _soft_ellipse(yy, xx, cy, cx, 0.62 * ry, 0.6 * rx, angle)

    scalp_level = rng.uniform(0.55, 0.7)
    gray_level = rng.uniform(0.42, 0.52)
    white_level = rng.uniform(0.75, 0.85)
    img = scalp_level * head
    img += (gray_level - scalp_level) * brain
    img += (white_level - gray_level) * white

    csf_level = rng.uniform(0.1, 0.2)
    vent_ry = (3.2 + rng.normal(0, 0.4)) * k
    vent_rx = (1.4 + rng.normal(0, 0.2)) * k
    for side in (-1.0, 1.0):
        vcx = cx + side * (2.0 + rng.normal(0, 0.3)) * k
        vent = _soft_ellipse(yy, xx, cy + rng.normal(0, 0.4), vcx, vent_ry, vent_rx, angle + side * 0.15)
        img += (csf_level - white_level) * vent * white

    for _ in range(rng.integers(1, 4)):
        r = rng.uniform(0.2, 0.55)
        t = rng.uniform(0, 2 * np.pi)
        by = cy + r * ry * np.sin(t)
        bx = cx + r * rx * np.cos(t)
        rad = rng.uniform(1.0, 2.2) * k
        blob = _soft_ellipse(yy, xx, by, bx, rad, rad * rng.uniform(0.7, 1.3), 0.0)
        img += rng.uniform(-0.25, 0.15) * blob * brain

    img = ndimage.gaussian_filter(img, smoothing, mode="constant")
    return minmax_normalize(img)


def make_corpus(n, seed=0, size=32):
    """``n`` phantoms from a seeded generator, as an ``(n, size, size)`` array."""
    rng = np.random.default_rng(seed)
    return np.stack([make_phantom(rng, size) for _ in range(n)])
