"""Delight -> relight orchestration, appearance copy and evaluation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .conditioning import tokens_from_env
from .diffusion_core import DenoiserModel, load_checkpoint, patchify, unpatchify
from .hdr_io import decode_pfm, encode_pfm
from .light_stage import LightRig, load_rig, rig_preset
from .metrics import MetricReport
from .sequencer import autoregressive_generate, plan_windows


@dataclass
class PipelineConfig:
    rig: str = "desk"                  # preset name or path to a rig JSON
    env_dims: tuple = (32, 64)
    delight_checkpoint: str | None = None
    relight_checkpoint: str | None = None
    steps: int = 30
    window: int = 8
    overlap: int = 2
    guidance: float = 1.0
    seed: int = 0
    metrics: tuple = ("psnr", "ssim", "warp_error", "flicker")

    def __post_init__(self):
        self.env_dims = tuple(self.env_dims)
        self.metrics = tuple(self.metrics)
        if not 0 <= self.overlap < self.window:
            raise ValueError(f"need 0 <= overlap < window, got {self.overlap}, {self.window}")
        if self.steps < 1:
            raise ValueError("sampler steps must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["env_dims"] = list(self.env_dims)
        d["metrics"] = list(self.metrics)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> dict:
    text = Path(path).read_text()
    d = yaml.safe_load(text) or {}
    if not isinstance(d, dict):
        raise ValueError(f"config {path} must be a mapping")
    return d


def resolve_rig(spec: str, dims=(32, 64)) -> LightRig:
    if spec in ("desk", "stage"):
        return rig_preset(spec, tuple(dims))
    return load_rig(spec)


def load_model(path) -> DenoiserModel:
    params, _, cfg, meta = load_checkpoint(path)
    log_tokens = meta.get("train", {}).get("log_tokens", True)
    return DenoiserModel(params, cfg, log_tokens)


# --------------------------------------------------------------------------
# video operations
# --------------------------------------------------------------------------

def _generate(frames: np.ndarray, model, context: np.ndarray, cfg: PipelineConfig, patch: int,
              null_context=None) -> np.ndarray:
    lat = patchify(frames, patch).astype(np.float32)
    n = len(lat)
    L = min(cfg.window, n)
    T = cfg.overlap if L == cfg.window else 0
    plan = plan_windows(n, L, T)
    out = autoregressive_generate(model, lat, context, plan, cfg.seed, cfg.steps, cfg.guidance, null_context)
    return unpatchify(out, patch).astype(np.float32)


def _check_model(model, frames):
    size = getattr(model, "cfg", None)
    if size is not None and frames.shape[1] != model.cfg.image_size:
        raise ValueError(f"frames are {frames.shape[1]} px, model expects {model.cfg.image_size}")


def _patch(model) -> int:
    return model.cfg.patch if hasattr(model, "cfg") else 4


def delight_video(frames: np.ndarray, model, cfg: PipelineConfig) -> np.ndarray:
    frames = np.asarray(frames, np.float32)
    _check_model(model, frames)
    ctx = model.context("none")
    return _generate(frames, model, ctx, cfg, _patch(model))


def relight_video(albedo: np.ndarray, env: np.ndarray, model, cfg: PipelineConfig, rig: LightRig) -> np.ndarray:
    albedo = np.asarray(albedo, np.float32)
    _check_model(model, albedo)
    if tuple(np.asarray(env).shape[:2]) != tuple(rig.dims):
        raise ValueError(f"environment {np.asarray(env).shape[:2]} does not match rig dims {rig.dims}")
    ctx = model.context("hdr", tokens=tokens_from_env(rig, env))
    null = model.context("none") if cfg.guidance != 1.0 else None
    return _generate(albedo, model, ctx, cfg, _patch(model), null)


def appearance_copy(albedo: np.ndarray, ref_frame: np.ndarray, model, cfg: PipelineConfig) -> np.ndarray:
    albedo = np.asarray(albedo, np.float32)
    _check_model(model, albedo)
    ctx = model.context("ref", ref=np.asarray(ref_frame, np.float32))
    null = model.context("none") if cfg.guidance != 1.0 else None
    return _generate(albedo, model, ctx, cfg, _patch(model), null)


def save_frames(frames: np.ndarray, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, f in enumerate(frames):
        p = out_dir / f"frame_{k:04d}.pfm"
        p.write_bytes(encode_pfm(f))
        paths.append(p)
    return paths


def load_frames(in_dir) -> np.ndarray:
    paths = sorted(Path(in_dir).glob("frame_*.pfm"))
    if not paths:
        raise FileNotFoundError(f"no frame_*.pfm files in {in_dir}")
    return np.stack([decode_pfm(p.read_bytes()) for p in paths])


def full_relight(frames: np.ndarray, env: np.ndarray, delighter, relighter, cfg: PipelineConfig,
                 rig: LightRig, persist_dir=None) -> tuple[np.ndarray, np.ndarray]:
    """Delight then relight; returns ``(albedo, relit)``.

    With ``persist_dir`` the albedo video goes through PFM files on disk
    between the stages.
    """
    albedo = delight_video(frames, delighter, cfg)
    if persist_dir is not None:
        save_frames(albedo, Path(persist_dir) / "albedo")
        albedo = load_frames(Path(persist_dir) / "albedo")
    return albedo, relight_video(albedo, env, relighter, cfg, rig)


def evaluate(pred: np.ndarray, target: np.ndarray, clip_id: str = "clip", flow=None, mask=None,
             cfg: PipelineConfig | None = None, report: MetricReport | None = None) -> MetricReport:
    cfg = cfg or PipelineConfig()
    report = report or MetricReport(provenance={"config": cfg.digest(), "seed": cfg.seed})
    report.add(clip_id, pred, target, flow, mask, cfg.metrics)
    return report
