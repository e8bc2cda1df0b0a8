"""Frame metrics: PSNR, SSIM, warp error and a flicker index."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .warp import warp_backward

PSNR_CAP = 99.0
LUMA = np.array([0.2126, 0.7152, 0.0722])


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    # correctly rounded sum: a constant offset d gives mse == d*d exactly
    mse = math.fsum(((a - b) ** 2).ravel()) / a.size
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 20.0 * np.log10(max_val / np.sqrt(mse))))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering of an (H, W) image."""
    k = len(g)
    rows = sliding_window_view(img, k, axis=0) @ g        # (H-k+1, W)
    return sliding_window_view(rows, k, axis=1) @ g      # (H-k+1, W-k+1)


def ssim(a: np.ndarray, b: np.ndarray, win: int = 11, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over valid window positions, per channel, then averaged.

    Images smaller than the window use the largest odd window that fits.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    size = min(win, a.shape[0], a.shape[1])
    size -= 1 - size % 2
    g = gaussian_window(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


def _masked_mean(x: np.ndarray, m: np.ndarray | None) -> float:
    if m is None:
        return float(x.mean())
    m = np.broadcast_to(m[..., None] if m.ndim == x.ndim - 1 else m, x.shape)
    return float(x[m].mean()) if m.any() else 0.0


def temporal_warp_error(frames: np.ndarray, flow: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean over consecutive pairs of mean |f_{k+1} - warp(f_k, flow_k)| on valid pixels.

    ``flow[k]`` is the backward flow from frame ``k+1`` into frame ``k``;
    ``mask`` (optional, (T, H, W)) restricts pixels of frame ``k+1``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if len(frames) < 2:
        return 0.0
    if len(flow) != len(frames) - 1:
        raise ValueError(f"{len(frames)} frames need {len(frames) - 1} flows, got {len(flow)}")
    errs = []
    for k in range(len(frames) - 1):
        warped, valid = warp_backward(frames[k], flow[k])
        m = valid if mask is None else valid & np.asarray(mask[k + 1], bool)
        errs.append(_masked_mean(np.abs(frames[k + 1] - warped), m))
    return float(np.mean(errs))


def mean_luminance(frame: np.ndarray, mask: np.ndarray | None = None) -> float:
    y = np.asarray(frame, dtype=np.float64) @ LUMA
    return float(y[mask].mean()) if mask is not None and mask.any() else float(y.mean())


def flicker_index(frames: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean absolute change of mean luminance between consecutive frames."""
    if len(frames) < 2:
        return 0.0
    lum = [mean_luminance(f, None if mask is None else np.asarray(mask[k], bool))
           for k, f in enumerate(frames)]
    return float(np.mean(np.abs(np.diff(lum))))


@dataclass
class MetricReport:
    per_clip: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def add(self, clip_id: str, pred: np.ndarray, target: np.ndarray, flow=None, mask=None,
            metrics=("psnr", "ssim", "warp_error", "flicker")) -> dict:
        row = {}
        if "psnr" in metrics:
            row["psnr"] = float(np.mean([psnr(p, t) for p, t in zip(pred, target)]))
        if "ssim" in metrics:
            row["ssim"] = float(np.mean([ssim(p, t) for p, t in zip(pred, target)]))
        if "warp_error" in metrics and flow is not None:
            row["warp_error"] = temporal_warp_error(pred, flow, mask)
        if "flicker" in metrics:
            row["flicker"] = flicker_index(pred, mask)
        self.per_clip[clip_id] = row
        return row

    def aggregate(self) -> dict:
        keys = sorted({k for r in self.per_clip.values() for k in r})
        return {k: float(np.mean([r[k] for r in self.per_clip.values() if k in r])) for k in keys}

    def to_dict(self) -> dict:
        return {"per_clip": self.per_clip, "aggregate": self.aggregate(), "provenance": self.provenance}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)
