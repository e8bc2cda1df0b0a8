"""Virtual light stage: light layouts, per-light sphere cells, env projection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hdr_io import direction_grid, solid_angle_grid

UNASSIGNED = -1


@dataclass(frozen=True)
class LightRig:
    directions: np.ndarray        # (N, 3) unit vectors pointing toward each light
    layout: dict
    coverage: str                 # "full" | "frontal"
    dims: tuple[int, int]         # map (H, W) the cells were computed for
    cell_of_pixel: np.ndarray     # (H, W) int, light index or UNASSIGNED
    cell_solid_angle: np.ndarray  # (N,) steradians
    cell_mean_dir: np.ndarray     # (N, 3)
    rig_id: str = field(default="")

    @property
    def n_lights(self) -> int:
        return len(self.directions)

    def covered_mask(self) -> np.ndarray:
        return self.cell_of_pixel != UNASSIGNED

    def manifest(self) -> dict:
        return {
            "rig_id": self.rig_id,
            "n_lights": self.n_lights,
            "layout": self.layout,
            "coverage": self.coverage,
            "dims": list(self.dims),
            "directions": self.directions.tolist(),
        }


# --------------------------------------------------------------------------
# layouts
# --------------------------------------------------------------------------

def fibonacci_directions(n: int, frontal: bool = False) -> np.ndarray:
    """Golden-angle spiral. ``frontal`` restricts it to the z < 0 hemisphere."""
    i = np.arange(n) + 0.5
    golden = np.pi * (3.0 - np.sqrt(5.0))
    if frontal:
        z = -i / n
    else:
        z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    az = golden * np.arange(n)
    return np.stack([r * np.cos(az), r * np.sin(az), z], axis=1)


def cylindrical_directions(rows: int, lights_per_row: int, frontal: bool = False,
                           max_elevation: float = np.pi / 3) -> np.ndarray:
    """Rings of equally spaced lights at evenly spread elevations.

    Ring azimuths sit at ``2*pi*(j + 0.5)/K - pi`` so a map whose width is an
    odd multiple of ``K`` puts each light on a pixel center and never on a
    cell boundary; a yaw of ``2*pi/K`` then permutes cells exactly.
    """
    k = lights_per_row
    if frontal:
        phis = np.pi * ((np.arange(k) + 0.5) / k - 0.5)
    else:
        phis = 2.0 * np.pi * (np.arange(k) + 0.5) / k - np.pi
    if rows == 1:
        elev = np.zeros(1)
    else:
        elev = np.linspace(-max_elevation, max_elevation, rows)
    dirs = []
    for e in elev[::-1]:
        theta = np.pi / 2 - e
        for phi in phis:
            dirs.append((np.sin(theta) * np.sin(phi), np.cos(theta), -np.sin(theta) * np.cos(phi)))
    return np.asarray(dirs)


def build_rig(n_lights: int, layout: str | dict = "fibonacci", coverage: str = "full",
              dims: tuple[int, int] = (32, 64), directions: np.ndarray | None = None) -> LightRig:
    """Build a rig and its nearest-light partition of a ``dims`` map.

    ``layout`` is ``"fibonacci"`` or ``{"kind": "cylindrical", "rows": r,
    "lights_per_row": k}`` (then ``n_lights`` must equal ``r * k``).
    Explicit ``directions`` override the layout generator.
    """
    if coverage not in ("full", "frontal"):
        raise ValueError(f"unknown coverage {coverage!r}")
    if n_lights < 1:
        raise ValueError("n_lights must be >= 1")
    frontal = coverage == "frontal"
    if isinstance(layout, str):
        layout = {"kind": layout}
    layout = dict(layout)
    if directions is not None:
        dirs = np.asarray(directions, dtype=np.float64)
        layout.setdefault("kind", "explicit")
    elif layout["kind"] == "fibonacci":
        dirs = fibonacci_directions(n_lights, frontal)
    elif layout["kind"] == "cylindrical":
        if layout["rows"] * layout["lights_per_row"] != n_lights:
            raise ValueError("cylindrical layout: rows * lights_per_row != n_lights")
        dirs = cylindrical_directions(layout["rows"], layout["lights_per_row"], frontal)
    else:
        raise ValueError(f"unknown layout {layout['kind']!r}")
    if dirs.shape != (n_lights, 3):
        raise ValueError(f"expected {n_lights} directions, got {dirs.shape}")
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    gram = dirs @ dirs.T
    np.fill_diagonal(gram, -np.inf)
    if n_lights > 1 and gram.max() > 1.0 - 1e-12:
        raise ValueError("light directions must be pairwise distinct")

    h, w = dims
    grid = direction_grid(dims)
    covered = grid[..., 2] < 0 if frontal else np.ones((h, w), dtype=bool)
    if n_lights > int(covered.sum()):
        raise ValueError(f"{n_lights} lights exceed the {int(covered.sum())} covered pixels")
    # argmax returns the first maximum, i.e. ties go to the lowest index
    cells = np.argmax(grid @ dirs.T, axis=-1)
    cells = np.where(covered, cells, UNASSIGNED)

    omega = solid_angle_grid(dims)
    flat = cells.ravel()
    live = flat >= 0
    cell_omega = np.bincount(flat[live], weights=omega.ravel()[live], minlength=n_lights)
    mean = np.zeros((n_lights, 3))
    for c in range(3):
        mean[:, c] = np.bincount(flat[live], weights=(grid[..., c] * omega).ravel()[live],
                                 minlength=n_lights)
    norm = np.linalg.norm(mean, axis=1, keepdims=True)
    mean = np.where(norm > 0, mean / np.where(norm > 0, norm, 1.0), dirs)

    rig_id = f"{layout['kind']}{n_lights}-{coverage}-{h}x{w}"
    return LightRig(dirs, layout, coverage, (h, w), cells, cell_omega, mean, rig_id)


def rig_preset(name: str, dims: tuple[int, int] = (32, 64)) -> LightRig:
    """``"desk"``: 16 fibonacci lights; ``"stage"``: 110 lights, the capture count."""
    if name == "desk":
        return build_rig(16, "fibonacci", "full", dims)
    if name == "stage":
        return build_rig(110, "fibonacci", "full", dims)
    raise ValueError(f"unknown rig preset {name!r}")


def save_rig(rig: LightRig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(rig.manifest(), indent=2))


def load_rig(path: str | Path) -> LightRig:
    m = json.loads(Path(path).read_text())
    dirs = np.asarray(m["directions"], dtype=np.float64)
    rig = build_rig(m["n_lights"], m["layout"], m["coverage"], tuple(m["dims"]), directions=dirs)
    return rig


# --------------------------------------------------------------------------
# projection and fixtures
# --------------------------------------------------------------------------

def _check_dims(rig: LightRig, env: np.ndarray) -> None:
    if tuple(env.shape[:2]) != tuple(rig.dims):
        raise ValueError(f"map is {env.shape[:2]}, rig was built for {rig.dims}")


def project_env_to_weights(rig: LightRig, env: np.ndarray) -> np.ndarray:
    """Per-light RGB weights ``w_i = sum_{p in cell i} L(p) dOmega(p)``, float64 ``(N, 3)``."""
    env = np.asarray(env)
    _check_dims(rig, env)
    flat = rig.cell_of_pixel.ravel()
    live = flat >= 0
    le = env.reshape(-1, 3).astype(np.float64) * solid_angle_grid(rig.dims).reshape(-1, 1)
    out = np.zeros((rig.n_lights, 3))
    for c in range(3):
        out[:, c] = np.bincount(flat[live], weights=le[live, c], minlength=rig.n_lights)
    return out


def covered_integral(rig: LightRig, env: np.ndarray) -> np.ndarray:
    """Direct ``sum L dOmega`` over covered pixels, accumulated row by row."""
    _check_dims(rig, env)
    omega = solid_angle_grid(rig.dims)
    mask = rig.covered_mask()
    total = np.zeros(3)
    for r in range(rig.dims[0]):
        total += (env[r].astype(np.float64) * (omega[r] * mask[r])[:, None]).sum(axis=0)
    return total


def delta_env(rig: LightRig, index: int, intensity=1.0) -> np.ndarray:
    """Map whose projection is ``intensity`` on light ``index`` and zero elsewhere."""
    if not 0 <= index < rig.n_lights:
        raise IndexError(f"light index {index} out of range")
    if rig.cell_solid_angle[index] <= 0:
        raise ValueError(f"cell {index} is empty at this resolution")
    rgb = np.broadcast_to(np.asarray(intensity, dtype=np.float64), (3,))
    env = np.zeros(rig.dims + (3,))
    env[rig.cell_of_pixel == index] = rgb / rig.cell_solid_angle[index]
    return env.astype(np.float32)


def cellwise_constant_env(rig: LightRig, radiance: np.ndarray) -> np.ndarray:
    """Every covered pixel takes its cell's RGB radiance; unassigned pixels are zero."""
    radiance = np.asarray(radiance, dtype=np.float32)
    if radiance.shape != (rig.n_lights, 3):
        raise ValueError(f"expected ({rig.n_lights}, 3) radiance, got {radiance.shape}")
    env = np.zeros(rig.dims + (3,), dtype=np.float32)
    mask = rig.covered_mask()
    env[mask] = radiance[rig.cell_of_pixel[mask]]
    return env
