"""Train tiny delight/relight models and run the full pipeline.

Uses the two-scene, two-environment fixture at 32x32 and a narrow network
so it finishes in about a minute on one CPU core. Quality is not the point;
the run exercises every stage: training with staged temporal fine-tuning,
checkpoints, sliding-window sampling and the metric report.

    python3 demos/04_train_and_relight.py --out /tmp/luxkit-demo --steps 300
"""

import argparse
from pathlib import Path

import numpy as np

from luxkit import hdr_io
from luxkit.diffusion_core import ModelConfig, TrainConfig, train
from luxkit.fixtures import overfit_fixture
from luxkit.pipeline import PipelineConfig, evaluate, full_relight, load_model

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="demo-out")
ap.add_argument("--steps", type=int, default=300)
args = ap.parse_args()
out = Path(args.out)

records, rig, envs = overfit_fixture(seed=0, size=32, n_frames=4)
model = ModelConfig(channels=(16, 32), ctx_dim=32, attn_dim=16, temb_dim=32, pe_freqs=2, tok_hidden=16,
                    image_size=32, ref_grid=4, ref_channels=(8,))
stages = [{"name": "warmup", "steps": args.steps, "frames": 2},
          {"name": "temporal", "steps": max(args.steps // 5, 1), "frames": 4}]

for task in ("delight", "relight"):
    tcfg = TrainConfig(task=task, lr=2e-3, lr_schedule="cosine", batch=4, stages=stages, model=model)
    _, state = train(records, tcfg, rig, out / task)
    first = np.mean([r[2] for r in state.loss_log[:20]])
    last = np.mean([r[2] for r in state.loss_log[-20:]])
    print(f"{task:8s}: {state.step} steps, loss {first:.3f} -> {last:.3f}")

D = load_model(out / "delight" / "latest")
R = load_model(out / "relight" / "latest")
cfg = PipelineConfig(window=4, overlap=2, steps=20)
clip = records[0]
albedo, relit = full_relight(clip.V_l, clip.E_l, D, R, cfg, rig, out / "run")
rep = evaluate(relit, clip.V_l, clip.clip_id, clip.flow, cfg=cfg)
print("report:", rep.aggregate())
for k in range(len(relit)):
    row = np.concatenate([clip.V_l[k], albedo[k], relit[k]], axis=1)
    hdr_io.write_png(out / f"frame_{k}.png", hdr_io.tonemap_preview(row))
print(f"input | albedo | relit strips -> {out}/frame_*.png")
