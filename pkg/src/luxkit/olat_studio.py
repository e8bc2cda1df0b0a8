"""Deterministic analytic studio: spheres + ground plane, Blinn-Phong, hard shadows.

Light directions point *toward* the light, matching the environment map
convention, so an environment pixel direction can be used as a light
direction unchanged.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hdr_io import direction_grid, solid_angle_grid
from .light_stage import LightRig

EPS = 1e-6
SHADOW_BIAS = 1e-4
_CHUNK = 256


# --------------------------------------------------------------------------
# scene description
# --------------------------------------------------------------------------

@dataclass
class Track:
    """Piecewise-linear keyframes ``[(frame, value), ...]``."""

    keys: list

    def __post_init__(self):
        frames = [k[0] for k in self.keys]
        if not frames:
            raise ValueError("track needs at least one keyframe")
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("track frame indices must be strictly increasing")

    @property
    def span(self) -> tuple[float, float]:
        return self.keys[0][0], self.keys[-1][0]

    def __call__(self, frame: float) -> np.ndarray:
        frames = np.array([k[0] for k in self.keys], dtype=np.float64)
        values = np.array([np.atleast_1d(k[1]) for k in self.keys], dtype=np.float64)
        lo, hi = self.span
        if len(frames) > 1 and not lo <= frame <= hi:
            raise ValueError(f"frame {frame} outside track range [{lo}, {hi}]")
        if len(frames) == 1:
            return values[0]
        return np.array([np.interp(frame, frames, values[:, j]) for j in range(values.shape[1])])


@dataclass
class Sphere:
    center: tuple
    radius: float
    albedo: tuple = (0.8, 0.8, 0.8)
    specular: float = 0.0
    shininess: float = 16.0
    translate: Track | None = None    # world offset per frame
    orbit: Track | None = None        # angle (radians) per frame
    orbit_center: tuple = (0.0, 0.0, 0.0)
    orbit_axis: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be > 0")
        if self.shininess < 1 or self.specular < 0:
            raise ValueError("need shininess >= 1 and specular >= 0")

    def center_at(self, frame: float) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        if self.orbit is not None:
            angle = float(self.orbit(frame)[0])
            k = np.asarray(self.orbit_axis, dtype=np.float64)
            k = k / np.linalg.norm(k)
            o = np.asarray(self.orbit_center, dtype=np.float64)
            v = c - o
            # Rodrigues rotation
            v = v * np.cos(angle) + np.cross(k, v) * np.sin(angle) + k * (k @ v) * (1 - np.cos(angle))
            c = o + v
        if self.translate is not None:
            c = c + self.translate(frame)
        return c


@dataclass
class Plane:
    height: float = 0.0
    albedo: tuple = (0.5, 0.5, 0.5)


@dataclass
class Camera:
    position: tuple = (0.0, 0.5, -4.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    fov: float = np.pi / 4          # vertical
    width: int = 64
    height: int = 64
    pan: Track | None = None        # (dx, dy) sensor shift in pixels
    zoom: Track | None = None       # focal-length multiplier

    def __post_init__(self):
        if not 0 < self.fov < np.pi:
            raise ValueError("fov must lie in (0, pi)")

    def intrinsics(self, frame: float) -> tuple[np.ndarray, float]:
        pan = np.zeros(2) if self.pan is None else self.pan(frame)
        zoom = 1.0 if self.zoom is None else float(self.zoom(frame)[0])
        focal = 0.5 * self.height / np.tan(0.5 * self.fov) * zoom
        return pan, focal


@dataclass
class SceneSpec:
    objects: list
    camera: Camera = field(default_factory=Camera)
    ground: Plane | None = None
    scene_id: str = "scene"

    def __post_init__(self):
        if not self.objects:
            raise ValueError("scene needs at least one object")

    def tracks(self) -> list[Track]:
        out = [t for t in (self.camera.pan, self.camera.zoom) if t is not None]
        for s in self.objects:
            out += [t for t in (s.translate, s.orbit) if t is not None]
        return out

    def frame_span(self) -> tuple[float, float] | None:
        spans = [t.span for t in self.tracks() if len(t.keys) > 1]
        if not spans:
            return None
        return max(s[0] for s in spans), min(s[1] for s in spans)


def _track_to_json(t):
    return None if t is None else [[k[0], np.atleast_1d(k[1]).tolist()] for k in t.keys]


def _track_from_json(v):
    return None if v is None else Track([(k[0], k[1]) for k in v])


def scene_to_dict(scene: SceneSpec) -> dict:
    objs = []
    for s in scene.objects:
        d = asdict(s)
        d["translate"] = _track_to_json(s.translate)
        d["orbit"] = _track_to_json(s.orbit)
        objs.append(d)
    cam = asdict(scene.camera)
    cam["pan"] = _track_to_json(scene.camera.pan)
    cam["zoom"] = _track_to_json(scene.camera.zoom)
    return {
        "scene_id": scene.scene_id,
        "objects": objs,
        "camera": cam,
        "ground": None if scene.ground is None else asdict(scene.ground),
    }


def scene_from_dict(d: dict) -> SceneSpec:
    objs = []
    for o in d["objects"]:
        o = dict(o)
        o["translate"] = _track_from_json(o.get("translate"))
        o["orbit"] = _track_from_json(o.get("orbit"))
        objs.append(Sphere(**o))
    cam = dict(d.get("camera", {}))
    cam["pan"] = _track_from_json(cam.get("pan"))
    cam["zoom"] = _track_from_json(cam.get("zoom"))
    ground = d.get("ground")
    return SceneSpec(objs, Camera(**cam), None if ground is None else Plane(**ground),
                     d.get("scene_id", "scene"))


def save_scene(scene: SceneSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2))


def load_scene(path: str | Path) -> SceneSpec:
    return scene_from_dict(json.loads(Path(path).read_text()))


def random_scene(rng: np.random.Generator, size: int = 64, n_spheres: int = 3,
                 ground: bool = True, scene_id: str = "random") -> SceneSpec:
    """A few non-overlapping spheres resting above a ground plane."""
    spheres = []
    while len(spheres) < n_spheres:
        r = rng.uniform(0.25, 0.6)
        c = np.array([rng.uniform(-1.0, 1.0), r + rng.uniform(0.0, 0.4), rng.uniform(-0.8, 0.8)])
        if all(np.linalg.norm(c - np.asarray(s.center)) > r + s.radius + 0.05 for s in spheres):
            spheres.append(Sphere(tuple(c), float(r), tuple(rng.uniform(0.1, 0.95, 3)),
                                  float(rng.uniform(0.0, 0.5)), float(rng.uniform(4, 64))))
    cam = Camera(position=(0.0, 1.2, -4.0), look_at=(0.0, 0.3, 0.0), width=size, height=size)
    plane = Plane(0.0, tuple(rng.uniform(0.2, 0.8, 3))) if ground else None
    return SceneSpec(spheres, cam, plane, scene_id)


# --------------------------------------------------------------------------
# ray casting
# --------------------------------------------------------------------------

@dataclass
class Hits:
    """First-hit geometry for one frame, flattened over pixels."""

    dims: tuple[int, int]
    mask: np.ndarray       # (P,) bool
    point: np.ndarray      # (P, 3)
    normal: np.ndarray     # (P, 3)
    view: np.ndarray       # (P, 3) unit vector toward the camera
    albedo: np.ndarray     # (P, 3)
    specular: np.ndarray   # (P,)
    shininess: np.ndarray  # (P,)


def _camera_rays(cam: Camera, frame: float) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(cam.position, dtype=np.float64)
    fwd = np.asarray(cam.look_at, dtype=np.float64) - pos
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    if np.linalg.norm(right) < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    pan, focal = cam.intrinsics(frame)
    h, w = cam.height, cam.width
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    sx = (xs - 0.5 * w + pan[0]).reshape(-1, 1)
    sy = (ys - 0.5 * h + pan[1]).reshape(-1, 1)
    d = sx * right - sy * up + focal * fwd
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(pos, d.shape), d


def _sphere_t(o: np.ndarray, d: np.ndarray, c: np.ndarray, r: float) -> np.ndarray:
    oc = o - c
    b = np.einsum("ij,ij->i", oc, d)
    cc = np.einsum("ij,ij->i", oc, oc) - r * r
    disc = b * b - cc
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > EPS, t0, t1)
    return np.where((disc > 0) & (t > EPS), t, np.inf)


def cast_primary(scene: SceneSpec, frame: float = 0) -> Hits:
    cam = scene.camera
    o, d = _camera_rays(cam, frame)
    p = len(d)
    best = np.full(p, np.inf)
    obj = np.full(p, -1)
    centers = [s.center_at(frame) for s in scene.objects]
    for k, (s, c) in enumerate(zip(scene.objects, centers)):
        t = _sphere_t(o, d, c, s.radius)
        closer = t < best
        best[closer], obj[closer] = t[closer], k
    if scene.ground is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (scene.ground.height - o[:, 1]) / d[:, 1]
        t = np.where(np.isfinite(t) & (t > EPS), t, np.inf)
        closer = t < best
        best[closer], obj[closer] = t[closer], len(scene.objects)
    mask = np.isfinite(best)
    point = o + d * np.where(mask, best, 0.0)[:, None]
    normal = np.zeros((p, 3))
    albedo = np.zeros((p, 3))
    spec = np.zeros(p)
    shin = np.ones(p)
    for k, (s, c) in enumerate(zip(scene.objects, centers)):
        sel = obj == k
        normal[sel] = (point[sel] - c) / s.radius
        albedo[sel] = s.albedo
        spec[sel] = s.specular
        shin[sel] = s.shininess
    if scene.ground is not None:
        sel = obj == len(scene.objects)
        normal[sel] = (0.0, 1.0, 0.0)
        albedo[sel] = scene.ground.albedo
    normal[mask] /= np.linalg.norm(normal[mask], axis=1, keepdims=True)
    return Hits((cam.height, cam.width), mask, point, normal, -d, albedo, spec, shin)


def _visibility(scene: SceneSpec, frame: float, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """(P, L) bool: True where nothing blocks ``origin`` along ``dirs``."""
    vis = np.ones((len(origin), len(dirs)), dtype=bool)
    for s in scene.objects:
        oc = origin - s.center_at(frame)                      # (P, 3)
        b = oc @ dirs.T                                       # (P, L)
        cc = np.einsum("ij,ij->i", oc, oc) - s.radius ** 2    # (P,)
        disc = b * b - cc[:, None]
        far = -b + np.sqrt(np.maximum(disc, 0.0))
        vis &= ~((disc > 0) & (far > EPS))
    if scene.ground is not None:
        dy = dirs[:, 1][None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (scene.ground.height - origin[:, 1:2]) / dy
        vis &= ~(np.isfinite(t) & (t > EPS))
    return vis


def transport(scene: SceneSpec, frame: float, dirs: np.ndarray,
              hits: Hits | None = None) -> tuple[Hits, np.ndarray, np.ndarray]:
    """Shading coefficients for unit-intensity directional lights.

    Returns ``(hits, diffuse, specular)`` where the last two are ``(P_hit, L)``
    float64 arrays; the image for intensities ``I`` (``(L, 3)``) is
    ``albedo * (diffuse @ I) + specular @ I`` on hit pixels.
    """
    if hits is None:
        hits = cast_primary(scene, frame)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    m = hits.mask
    n, v = hits.normal[m], hits.view[m]
    origin = hits.point[m] + SHADOW_BIAS * n
    ndl = n @ dirs.T
    lit = (ndl > 0) & _visibility(scene, frame, origin, dirs)
    diffuse = np.where(lit, ndl, 0.0)
    half = v[:, None, :] + dirs[None, :, :]
    half /= np.maximum(np.linalg.norm(half, axis=2, keepdims=True), 1e-12)
    ndh = np.maximum(np.einsum("pj,plj->pl", n, half), 0.0)
    spec = np.where(lit, hits.specular[m, None] * ndh ** hits.shininess[m, None], 0.0)
    return hits, diffuse, spec


def _shade(hits: Hits, diffuse: np.ndarray, spec: np.ndarray, intensity: np.ndarray) -> np.ndarray:
    m = hits.mask
    out = np.zeros((m.size, 3))
    out[m] = hits.albedo[m] * (diffuse @ intensity) + spec @ intensity
    return out.reshape(hits.dims + (3,))


# --------------------------------------------------------------------------
# renders
# --------------------------------------------------------------------------

def render_directional(scene: SceneSpec, frame: float, light_dir, intensity=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Linear render under one directional light; float64 ``(H, W, 3)``."""
    light_dir = np.asarray(light_dir, dtype=np.float64)
    if abs(np.linalg.norm(light_dir) - 1.0) > 1e-6:
        raise ValueError("light_dir must be a unit vector")
    hits, diff, spec = transport(scene, frame, light_dir[None])
    return _shade(hits, diff, spec, np.asarray(intensity, dtype=np.float64).reshape(1, 3))


def render_lights(scene: SceneSpec, frame: float, dirs: np.ndarray, intensities: np.ndarray,
                  hits: Hits | None = None) -> np.ndarray:
    """Sum of directional renders, accumulated in chunks of ascending light index."""
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    intensities = np.asarray(intensities, dtype=np.float64).reshape(-1, 3)
    if hits is None:
        hits = cast_primary(scene, frame)
    out = np.zeros(hits.dims + (3,))
    for s in range(0, len(dirs), _CHUNK):
        sl = slice(s, s + _CHUNK)
        _, diff, spec = transport(scene, frame, dirs[sl], hits)
        out += _shade(hits, diff, spec, intensities[sl])
    return out


def render_env_direct(scene: SceneSpec, frame: float, env: np.ndarray,
                      covered: np.ndarray | None = None) -> np.ndarray:
    """Brute-force environment lighting: every map pixel is a directional light.

    ``covered`` optionally restricts the sum to a pixel mask (e.g. a frontal
    rig's covered region). Meant for small maps.
    """
    env = np.asarray(env)
    dims = env.shape[:2]
    dirs = direction_grid(dims).reshape(-1, 3)
    inten = env.reshape(-1, 3).astype(np.float64) * solid_angle_grid(dims).reshape(-1, 1)
    keep = np.ones(len(dirs), dtype=bool) if covered is None else np.asarray(covered).ravel()
    return render_lights(scene, frame, dirs[keep], inten[keep])


@dataclass
class OlatStack:
    scene_id: str
    rig_id: str
    images: np.ndarray       # (N, H, W, 3) float32; light i at intensity cell_solid_angle_i
    albedo: np.ndarray       # (H, W, 3) float32
    mask: np.ndarray         # (H, W) bool, camera-ray hit
    cell_solid_angle: np.ndarray
    frame: float = 0
    mode: str = "directional"

    @property
    def n_lights(self) -> int:
        return len(self.images)


def render_olat(scene: SceneSpec, frame: float, rig: LightRig, mode: str = "directional") -> OlatStack:
    """One image per rig light, plus the exact flat-lit albedo.

    ``mode="directional"``: light ``i`` is a single directional source along
    the rig direction with intensity ``cell_solid_angle_i``.
    ``mode="cell"``: light ``i`` is unit radiance spread over its whole cell,
    i.e. the sum of that cell's pixel directions weighted by their solid
    angles. Both have total intensity ``cell_solid_angle_i``; the cell basis
    reproduces :func:`render_env_direct` exactly for cellwise-constant maps.
    """
    hits = cast_primary(scene, frame)
    h, w = hits.dims
    images = np.zeros((rig.n_lights, h, w, 3), dtype=np.float32)
    if mode == "directional":
        ones = rig.cell_solid_angle[:, None] * np.ones((1, 3))
        _, diff, spec = transport(scene, frame, rig.directions, hits)
        m = hits.mask
        for i in range(rig.n_lights):
            img = np.zeros((m.size, 3))
            img[m] = hits.albedo[m] * diff[:, i:i + 1] * ones[i] + spec[:, i:i + 1] * ones[i]
            images[i] = img.reshape(h, w, 3)
    elif mode == "cell":
        dirs = direction_grid(rig.dims).reshape(-1, 3)
        omega = solid_angle_grid(rig.dims).ravel()
        cells = rig.cell_of_pixel.ravel()
        for i in range(rig.n_lights):
            sel = cells == i
            inten = np.repeat(omega[sel][:, None], 3, axis=1)
            images[i] = render_lights(scene, frame, dirs[sel], inten, hits)
    else:
        raise ValueError(f"unknown OLAT mode {mode!r}")
    albedo = np.zeros((h * w, 3))
    albedo[hits.mask] = hits.albedo[hits.mask]
    return OlatStack(scene.scene_id, rig.rig_id, images, albedo.reshape(h, w, 3).astype(np.float32),
                     hits.mask.reshape(h, w), rig.cell_solid_angle.copy(), frame, mode)


def render_albedo(scene: SceneSpec, frame: float = 0) -> tuple[np.ndarray, np.ndarray]:
    hits = cast_primary(scene, frame)
    albedo = np.zeros((hits.mask.size, 3))
    albedo[hits.mask] = hits.albedo[hits.mask]
    h, w = hits.dims
    return albedo.reshape(h, w, 3).astype(np.float32), hits.mask.reshape(h, w)


# --------------------------------------------------------------------------
# motion clips
# --------------------------------------------------------------------------

def camera_flow(cam: Camera, frame_a: float, frame_b: float) -> np.ndarray:
    """Backward flow ``(H, W, 2)`` with ``frame_b(x) = frame_a(x + flow(x))``.

    Exact for sensor-shift pan and focal zoom; independent of scene depth.
    """
    pan_a, f_a = cam.intrinsics(frame_a)
    pan_b, f_b = cam.intrinsics(frame_b)
    h, w = cam.height, cam.width
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    center = np.array([0.5 * w, 0.5 * h])
    pts = np.stack([xs, ys], axis=-1)
    src = center - pan_a + (f_a / f_b) * (pts - center + pan_b)
    return src - pts


@dataclass
class MotionClip:
    scene_id: str
    frames: np.ndarray   # (T, H, W, 3) float32 lit video
    albedo: np.ndarray   # (T, H, W, 3) float32
    masks: np.ndarray    # (T, H, W) bool
    flow: np.ndarray     # (T-1, H, W, 2) camera-induced backward flow


def synth_motion_clip(scene: SceneSpec, frames, env: np.ndarray, rig: LightRig | None = None,
                      olat_mode: str = "cell") -> MotionClip:
    """Render an animated clip under ``env``.

    Without ``rig`` every frame is lit by :func:`render_env_direct`; with a
    rig, frames are composed from per-frame OLAT stacks (fast path).
    """
    from .dataset_builder import compose_relight
    from .light_stage import project_env_to_weights

    frames = list(frames)
    span = scene.frame_span()
    if span is not None and (min(frames) < span[0] or max(frames) > span[1]):
        raise ValueError(f"frames {min(frames)}..{max(frames)} outside track span {span}")
    lit, alb, masks = [], [], []
    weights = None if rig is None else project_env_to_weights(rig, env)
    for f in frames:
        if rig is None:
            lit.append(render_env_direct(scene, f, env).astype(np.float32))
            a, m = render_albedo(scene, f)
        else:
            stack = render_olat(scene, f, rig, olat_mode)
            lit.append(compose_relight(stack, weights).astype(np.float32))
            a, m = stack.albedo, stack.mask
        alb.append(a)
        masks.append(m)
    flow = [camera_flow(scene.camera, a, b) for a, b in zip(frames, frames[1:])]
    h, w = scene.camera.height, scene.camera.width
    flow = np.stack(flow) if flow else np.zeros((0, h, w, 2))
    return MotionClip(scene.scene_id, np.stack(lit), np.stack(alb), np.stack(masks), flow)
