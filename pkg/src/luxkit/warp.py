"""Bilinear sampling shared by camera-motion augmentation and warp metrics."""

from __future__ import annotations

import numpy as np


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img[..., H, W, C]``-style arrays at fractional index coordinates.

    ``ys``/``xs`` are in pixel-index units (``0`` is the first pixel center) and
    must lie inside ``[0, H-1] x [0, W-1]``; integer coordinates return the
    stored values exactly.
    """
    h, w = img.shape[:2]
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    img = img.astype(np.float64)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    # exact passthrough where the coordinate is integral
    exact = (fy[..., 0] == 0) & (fx[..., 0] == 0)
    out[exact] = img[y0[exact], x0[exact]]
    return out


def warp_backward(frame: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``out(x) = frame(x + flow(x))``; returns ``(out, valid)`` where ``valid``
    marks pixels whose source lies inside the frame."""
    h, w = frame.shape[:2]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = xs + flow[..., 0]
    sy = ys + flow[..., 1]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    out = bilinear_sample(frame, np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1))
    return out, valid
