"""Sliding-window autoregressive generation for clips longer than one window."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .diffusion_core import ddim_sample

OVERLAP_PROBS = (0.5, 0.125, 0.125, 0.125, 0.125)


@dataclass(frozen=True)
class WindowPlan:
    total: int
    L: int
    T: int
    starts: tuple
    masks: tuple  # one length-L 0/1 tuple per window

    @property
    def n_windows(self) -> int:
        return len(self.starts)

    def is_first(self, k: int) -> bool:
        return k == 0

    def overlap(self, k: int) -> int:
        """Frames of window ``k`` already produced by earlier windows."""
        if k == 0:
            return 0
        return self.starts[k - 1] + self.L - self.starts[k]

    def to_json(self) -> str:
        return json.dumps({"total": self.total, "L": self.L, "T": self.T,
                           "windows": [{"start": s, "is_first": k == 0, "mask": list(m)}
                                       for k, (s, m) in enumerate(zip(self.starts, self.masks))]})

    @classmethod
    def from_json(cls, text: str) -> "WindowPlan":
        d = json.loads(text)
        return cls(d["total"], d["L"], d["T"], tuple(w["start"] for w in d["windows"]),
                   tuple(tuple(w["mask"]) for w in d["windows"]))


def plan_windows(total: int, L: int = 30, T: int = 4) -> WindowPlan:
    if not 0 <= T < L:
        raise ValueError(f"need 0 <= T < L, got T={T}, L={L}")
    if total < L:
        raise ValueError(f"clip of {total} frames is shorter than the window L={L}")
    starts = [0]
    while starts[-1] + L < total:
        starts.append(min(starts[-1] + L - T, total - L))
    first = (0,) * L
    cont = (1,) * T + (0,) * (L - T)
    masks = (first,) + (cont,) * (len(starts) - 1)
    return WindowPlan(total, L, T, tuple(starts), masks)


def sample_overlap_T(rng: np.random.Generator) -> int:
    return int(rng.choice(5, p=OVERLAP_PROBS))


def window_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([seed, k])


def autoregressive_generate(model, inputs: np.ndarray, context: np.ndarray, plan: WindowPlan,
                            seed: int = 0, steps: int = 30, guidance: float = 1.0, null_context=None,
                            trace: list | None = None) -> np.ndarray:
    """Sample window by window, re-feeding earlier predictions as the first ``T`` inputs.

    Continuation windows take frames ``[0, T)`` of their input from the
    previous window's predictions and keep only frames not produced before.
    ``trace`` (if given) receives ``(window_inputs, window_outputs)`` pairs.
    """
    inputs = np.asarray(inputs)
    if len(inputs) != plan.total:
        raise ValueError(f"plan covers {plan.total} frames, inputs have {len(inputs)}")
    out = np.zeros(inputs.shape, dtype=np.float32)
    prev = None
    done = 0
    for k, (s, m) in enumerate(zip(plan.starts, plan.masks)):
        win = inputs[s:s + plan.L].astype(np.float32, copy=True)
        if k > 0:
            ps = plan.starts[k - 1]
            win[:plan.T] = prev[s - ps:s - ps + plan.T]
        pred = ddim_sample(model, win, np.asarray(m, dtype=np.float32), context, steps,
                           window_rng(seed, k), guidance, null_context)
        if trace is not None:
            trace.append((win, pred))
        new_from = done - s
        out[done:s + plan.L] = pred[new_from:]
        done = s + plan.L
        prev = pred
    return out


class CopyThroughModel:
    """Oracle whose x0 estimate is always the input latents."""

    def __call__(self, x_t, t, inputs, mask, context):
        a = np.cos(0.5 * np.pi * t)
        s = np.sin(0.5 * np.pi * t)
        return (a * np.asarray(x_t, np.float64) - np.asarray(inputs, np.float64)) / s
