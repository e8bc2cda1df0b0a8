"""Light rig, environment projection and light tokens.

Builds the 16-light desk rig, projects a procedural environment onto it and
shows that the per-light tokens add up to the environment's total radiant
power. Writes a tone-mapped preview of the map and of its cellwise
approximation.

    python3 demos/01_light_tokens.py --out /tmp/luxkit-demo
"""

import argparse
from pathlib import Path

import numpy as np

from luxkit import hdr_io, light_stage
from luxkit.conditioning import tokens_from_env
from luxkit.dataset_builder import procedural_env

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="demo-out")
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

rig = light_stage.rig_preset("desk", (32, 64))
print(f"rig {rig.rig_id}: {rig.n_lights} lights, cells cover {rig.cell_solid_angle.sum():.12f} sr "
      f"(4*pi = {4 * np.pi:.12f})")

env = procedural_env(np.random.default_rng(args.seed), rig.dims)
tok = tokens_from_env(rig, env)
total = hdr_io.env_integral(env)
print("sum of tokens :", tok.tokens.sum(0))
print("env integral  :", total)
print("relative error:", np.abs(tok.tokens.sum(0) - total) / total)

# brightest lights first
order = np.argsort(-tok.tokens.sum(1))
for i in order[:4]:
    d = rig.cell_mean_dir[i]
    print(f"  light {i:2d}  dir ({d[0]:+.2f}, {d[1]:+.2f}, {d[2]:+.2f})  token {np.round(tok.tokens[i], 3)}")

# what the rig "sees": each cell filled with its mean radiance
approx = light_stage.cellwise_constant_env(rig, tok.tokens / rig.cell_solid_angle[:, None])
hdr_io.write_png(out / "env.png", hdr_io.tonemap_preview(env))
hdr_io.write_png(out / "env_cells.png", hdr_io.tonemap_preview(approx))
hdr_io.write_image(out / "env.hdr", env)
print(f"previews -> {out}/env.png, {out}/env_cells.png")
