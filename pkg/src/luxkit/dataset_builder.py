"""Hybrid training corpus: lighting-rich (OLAT composites) and motion-rich clips."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_tensors, write_tensors
from .hdr_io import direction_grid, rotate_env
from .light_stage import LightRig, project_env_to_weights
from .olat_studio import MotionClip, OlatStack
from .warp import bilinear_sample

LIGHTING_RICH = "lighting-rich"
MOTION_RICH = "motion-rich"
TRAIN_FRACTION = 600 / 769


@dataclass
class ClipRecord:
    clip_id: str
    source: str                  # LIGHTING_RICH | MOTION_RICH
    V_l: np.ndarray              # (T, H, W, 3) lit frames
    V_a: np.ndarray              # (T, H, W, 3) albedo frames (exact or pseudo)
    E_l: np.ndarray | None = None
    ref_pool: list = field(default_factory=list)
    flow: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.V_l.shape != self.V_a.shape:
            raise ValueError(f"V_l {self.V_l.shape} and V_a {self.V_a.shape} differ")
        if (self.E_l is not None) != (self.source == LIGHTING_RICH):
            raise ValueError("E_l must be present exactly for lighting-rich records")
        if not self.ref_pool:
            self.ref_pool = list(range(len(self.V_l)))


# --------------------------------------------------------------------------
# relighting by OLAT composition
# --------------------------------------------------------------------------

def compose_relight(stack: OlatStack, weights: np.ndarray) -> np.ndarray:
    """``sum_i (w_i / cell_solid_angle_i) * olat_i`` in ascending light order, float64."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (stack.n_lights, 3):
        raise ValueError(f"expected ({stack.n_lights}, 3) weights, got {weights.shape}")
    out = np.zeros(stack.images.shape[1:])
    for i in range(stack.n_lights):
        omega = stack.cell_solid_angle[i]
        if omega <= 0 or not np.any(weights[i]):
            continue
        out += (weights[i] / omega) * stack.images[i].astype(np.float64)
    return out


# --------------------------------------------------------------------------
# camera motion
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionTrack:
    """Crop-window motion: ``pan`` source pixels/frame, ``zoom`` factor/frame (>1 zooms in)."""

    pan: tuple = (0.0, 0.0)
    zoom: float = 1.0
    center: tuple | None = None   # initial window center (x, y) in source pixels
    scale: float = 1.0            # initial window size / output size


def _window_coords(track: MotionTrack, k: int, src_hw, out_hw):
    hs, ws = src_hw
    ho, wo = out_hw
    cx, cy = track.center if track.center is not None else (0.5 * ws, 0.5 * hs)
    cx += k * track.pan[0]
    cy += k * track.pan[1]
    r = track.scale / track.zoom ** k
    return cx, cy, r


def camera_motion_augment(source: np.ndarray, track: MotionTrack, n_frames: int,
                          out_dims: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Crop a moving, zooming window from an image (or per-frame from a video).

    Returns ``(frames (T, H, W, 3), flow (T-1, H, W, 2))`` with backward flow
    ``frame_{k+1}(x) = frame_k(x + flow_k(x))``.
    """
    source = np.asarray(source)
    video = source.ndim == 4
    if video and len(source) != n_frames:
        raise ValueError(f"video has {len(source)} frames, expected {n_frames}")
    src_hw = source.shape[1:3] if video else source.shape[:2]
    hs, ws = src_hw
    ho, wo = out_dims
    ys, xs = np.meshgrid(np.arange(ho) + 0.5, np.arange(wo) + 0.5, indexing="ij")
    frames = []
    coords = []
    for k in range(n_frames):
        cx, cy, r = _window_coords(track, k, src_hw, out_dims)
        sx = cx + (xs - 0.5 * wo) * r - 0.5
        sy = cy + (ys - 0.5 * ho) * r - 0.5
        if sx.min() < -1e-9 or sy.min() < -1e-9 or sx.max() > ws - 1 + 1e-9 or sy.max() > hs - 1 + 1e-9:
            raise ValueError(f"crop window leaves the source at frame {k}")
        img = source[k] if video else source
        frames.append(bilinear_sample(img, np.clip(sy, 0, hs - 1), np.clip(sx, 0, ws - 1)))
        coords.append((cx, cy, r))
    flows = []
    px, py = np.meshgrid(np.arange(wo) + 0.0, np.arange(ho) + 0.0, indexing="xy")
    for (cxa, cya, ra), (cxb, cyb, rb) in zip(coords, coords[1:]):
        # source position of output pixel x in frame b, mapped back into frame a
        ax = cxb + (px + 0.5 - 0.5 * wo) * rb
        ay = cyb + (py + 0.5 - 0.5 * ho) * rb
        xa = (ax - cxa) / ra + 0.5 * wo - 0.5
        ya = (ay - cya) / ra + 0.5 * ho - 0.5
        flows.append(np.stack([xa - px, ya - py], axis=-1))
    flow = np.stack(flows) if flows else np.zeros((0, ho, wo, 2))
    return np.stack(frames).astype(np.float32), flow


def sample_track(rng: np.random.Generator, n_frames: int, src_hw, out_dims,
                 max_pan: float = 2.0, zoom_range=(0.9, 1.1), tries: int = 64) -> MotionTrack:
    """Random pan/zoom whose window stays inside the source for all frames."""
    hs, ws = src_hw
    ho, wo = out_dims
    for _ in range(tries):
        pan = tuple(rng.uniform(-max_pan, max_pan, 2))
        total_zoom = rng.uniform(*zoom_range)
        zoom = total_zoom ** (1.0 / max(n_frames - 1, 1))
        track = MotionTrack(pan, zoom)
        ok = True
        for k in (0, n_frames - 1):
            cx, cy, r = _window_coords(track, k, src_hw, out_dims)
            half_w, half_h = 0.5 * wo * r, 0.5 * ho * r
            if cx - half_w < 0.5 or cy - half_h < 0.5 or cx + half_w > ws - 0.5 or cy + half_h > hs - 0.5:
                ok = False
        if ok:
            return track
    return MotionTrack()


# --------------------------------------------------------------------------
# procedural environments
# --------------------------------------------------------------------------

def procedural_env(rng: np.random.Generator, dims: tuple[int, int] = (32, 64), n_blobs: int = 3,
                   base: float | None = None) -> np.ndarray:
    """Uniform base plus von Mises-Fisher-like colored blobs; float32 ``(H, W, 3)``."""
    d = direction_grid(dims)
    base = rng.uniform(0.02, 0.2) if base is None else base
    env = np.full(dims + (3,), base) * rng.uniform(0.7, 1.0, 3)
    for _ in range(n_blobs):
        mu = rng.normal(size=3)
        mu /= np.linalg.norm(mu)
        kappa = rng.uniform(4.0, 40.0)
        amp = rng.uniform(0.5, 8.0)
        color = rng.uniform(0.3, 1.0, 3)
        env += amp * np.exp(kappa * (d @ mu - 1.0))[..., None] * color
    return env.astype(np.float32)


def split_indices(n: int, seed: int, train_fraction: float = TRAIN_FRACTION) -> tuple[list, list]:
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(train_fraction * n))
    return sorted(perm[:k].tolist()), sorted(perm[k:].tolist())


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

def build_lighting_rich(stacks: list[OlatStack], envs: list[np.ndarray], rig: LightRig,
                        pairs_per_stack: int, seed: int, n_frames: int = 8,
                        out_dims: tuple[int, int] | None = None,
                        test_envs: set | None = None) -> list[ClipRecord]:
    """Pair each stack with random yaw-rotated environments and simulated camera motion.

    One motion track is drawn per stack and shared by its pairings, so the
    albedo video of a stack is identical across environments.
    """
    if not stacks:
        raise ValueError("no OLAT stacks given")
    if not envs:
        raise ValueError("no environment maps given")
    rng = np.random.default_rng(seed)
    test_envs = set() if test_envs is None else set(test_envs)
    records = []
    for s, stack in enumerate(stacks):
        src_hw = stack.albedo.shape[:2]
        dims = out_dims or src_hw
        track = sample_track(rng, n_frames, src_hw, dims)
        V_a, flow = camera_motion_augment(stack.albedo, track, n_frames, dims)
        for p in range(pairs_per_stack):
            e = int(rng.integers(len(envs)))
            w = envs[e].shape[1]
            shift = int(rng.integers(w))
            env = rotate_env(envs[e], 2.0 * np.pi * shift / w)
            weights = project_env_to_weights(rig, env)
            lit = compose_relight(stack, weights)
            V_l, _ = camera_motion_augment(lit, track, n_frames, dims)
            records.append(ClipRecord(
                f"dl-{s:04d}-{p:03d}", LIGHTING_RICH, V_l, V_a, env, flow=flow,
                meta={"stack": stack.scene_id, "env": e, "yaw_px": shift,
                      "split": "test" if e in test_envs else "train",
                      "track": {"pan": list(track.pan), "zoom": track.zoom}},
            ))
    return records


class FlickerDelighter:
    """Stand-in frame delighter: exact albedo times ``u ~ U(1 - delta, 1 + delta)`` per frame."""

    def __init__(self, delta: float = 0.1):
        self.delta = delta

    def __call__(self, frame: np.ndarray, albedo: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        u = rng.uniform(1.0 - self.delta, 1.0 + self.delta) if self.delta > 0 else 1.0
        return (albedo * u).astype(np.float32)


def build_motion_rich(clips: list[MotionClip], delighter, seed: int) -> list[ClipRecord]:
    """Pseudo-albedo applied frame by frame; records carry no environment.

    ``delighter(frame, exact_albedo, rng) -> albedo``; learned delighters
    ignore the exact albedo argument.
    """
    rng = np.random.default_rng(seed)
    train, _ = split_indices(len(clips), seed)
    records = []
    for c, clip in enumerate(clips):
        pseudo = []
        for f in range(len(clip.frames)):
            a = np.asarray(delighter(clip.frames[f], clip.albedo[f], rng), dtype=np.float32)
            if a.shape != clip.frames[f].shape:
                raise ValueError(f"delighter returned {a.shape}, expected {clip.frames[f].shape}")
            pseudo.append(a)
        records.append(ClipRecord(
            f"dm-{c:04d}", MOTION_RICH, clip.frames.astype(np.float32), np.stack(pseudo),
            None, flow=clip.flow, meta={"scene": clip.scene_id, "split": "train" if c in train else "test"},
        ))
    return records


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def write_container(records: list[ClipRecord], path: str | Path, rig_id: str = "", seed: int | None = None,
                    dtype: str = "float32") -> tuple[Path, Path]:
    tensors = {}
    metas = []
    for r in records:
        tensors[f"{r.clip_id}/V_l"] = r.V_l
        tensors[f"{r.clip_id}/V_a"] = r.V_a
        if r.E_l is not None:
            tensors[f"{r.clip_id}/E_l"] = r.E_l
        if r.flow is not None:
            tensors[f"{r.clip_id}/flow"] = r.flow
        metas.append({"clip_id": r.clip_id, "source": r.source, "ref_pool": list(r.ref_pool),
                      "meta": r.meta})
    split = {"seed": seed,
             "train": [r.clip_id for r in records if r.meta.get("split", "train") == "train"],
             "test": [r.clip_id for r in records if r.meta.get("split") == "test"]}
    meta = {"kind": "clips", "rig_id": rig_id, "records": metas, "split": split}
    return write_tensors(path, tensors, meta, dtype)


def read_container(path: str | Path) -> list[ClipRecord]:
    tensors, meta = read_tensors(path)
    records = []
    for m in meta.get("records", []):
        cid = m["clip_id"]
        records.append(ClipRecord(
            cid, m["source"], tensors[f"{cid}/V_l"], tensors[f"{cid}/V_a"],
            tensors.get(f"{cid}/E_l"), m["ref_pool"], tensors.get(f"{cid}/flow"), m["meta"],
        ))
    return records
