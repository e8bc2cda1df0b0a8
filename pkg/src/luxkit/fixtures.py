"""Small deterministic scenes, environments and clip sets used by demos, CLI smoke runs and tests."""

from __future__ import annotations

import numpy as np

from .dataset_builder import LIGHTING_RICH, ClipRecord, MotionTrack, camera_motion_augment, compose_relight
from .hdr_io import direction_grid
from .light_stage import LightRig, project_env_to_weights, rig_preset
from .olat_studio import random_scene, render_olat


def blob_env(dims, toward, color, kappa: float = 12.0, amp: float = 3.0, base: float = 0.05) -> np.ndarray:
    """Uniform base plus one vMF-shaped colored light centered on ``toward``."""
    mu = np.asarray(toward, dtype=np.float64)
    mu = mu / np.linalg.norm(mu)
    d = direction_grid(dims)
    lobe = amp * np.exp(kappa * (d @ mu - 1.0))
    env = base + lobe[..., None] * np.asarray(color, dtype=np.float64)
    return env.astype(np.float32)


def contrast_envs(dims=(32, 64)) -> list[np.ndarray]:
    """Two strongly different maps: warm key from camera-left, cool key from camera-right."""
    return [blob_env(dims, (-1.0, 0.8, -0.6), (1.0, 0.55, 0.25)),
            blob_env(dims, (1.0, 0.8, -0.6), (0.25, 0.55, 1.0))]


def overfit_fixture(seed: int = 0, n_scenes: int = 2, size: int = 64, n_frames: int = 2,
                    rig: LightRig | None = None, envs=None) -> tuple[list[ClipRecord], LightRig, list]:
    """``n_scenes`` scenes x each environment, short panning clips.

    Scenes are rendered ``size + 8`` wide and cropped with a fixed pan, so
    clips have exact flow. Clip ids are ``fx-<scene>-<env>``.
    """
    rig = rig if rig is not None else rig_preset("desk")
    envs = envs if envs is not None else contrast_envs(rig.dims)
    rng = np.random.default_rng(seed)
    track = MotionTrack(pan=(1.0, 0.5))
    records = []
    for s in range(n_scenes):
        scene = random_scene(rng, size + 8, 3, True, f"fx-scene-{s}")
        stack = render_olat(scene, 0, rig, "cell")
        V_a, flow = camera_motion_augment(stack.albedo, track, n_frames, (size, size))
        for e, env in enumerate(envs):
            lit = compose_relight(stack, project_env_to_weights(rig, env))
            V_l, _ = camera_motion_augment(lit, track, n_frames, (size, size))
            records.append(ClipRecord(f"fx-{s}-{e}", LIGHTING_RICH, V_l, V_a, np.asarray(env), flow=flow,
                                      meta={"scene": scene.scene_id, "env": e, "split": "train"}))
    return records, rig, list(envs)
