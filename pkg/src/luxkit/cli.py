"""``luxkit`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every subcommand takes ``--config <yaml>`` (sections ``rig``, ``dataset``,
``train``, ``pipeline``) and ``--seed``; flags override the file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _section(args, name: str) -> dict:
    from .pipeline import load_config

    if not args.config:
        return {}
    sec = load_config(args.config).get(name, {}) or {}
    if not isinstance(sec, dict):
        raise ValueError(f"config section {name!r} must be a mapping")
    return dict(sec)


def _seed(args, sec: dict, default: int = 0) -> int:
    return args.seed if args.seed is not None else int(sec.get("seed", default))


def _read_env(path) -> np.ndarray:
    from .hdr_io import check_radiance_map, read_image

    return check_radiance_map(read_image(path))


# --------------------------------------------------------------------------
# rig / render / env
# --------------------------------------------------------------------------

def cmd_rig_build(args):
    from .light_stage import build_rig, rig_preset, save_rig

    sec = _section(args, "rig")
    dims = tuple(sec.get("dims", args.dims or (32, 64)))
    preset = args.preset or sec.get("preset")
    if preset:
        rig = rig_preset(preset, dims)
    else:
        rig = build_rig(args.n_lights or sec.get("n_lights", 16), sec.get("layout", args.layout),
                        sec.get("coverage", args.coverage), dims)
    save_rig(rig, args.out)
    print(f"{rig.rig_id}: {rig.n_lights} lights -> {args.out}")


def cmd_render_olat(args):
    from .container import write_tensors
    from .olat_studio import load_scene, random_scene, render_olat
    from .pipeline import resolve_rig

    sec = _section(args, "rig")
    rig = resolve_rig(args.rig or sec.get("preset", "desk"), sec.get("dims", (32, 64)))
    if args.scene:
        scene = load_scene(args.scene)
    else:
        scene = random_scene(np.random.default_rng(_seed(args, sec)), args.size)
    stack = render_olat(scene, args.frame, rig, args.mode)
    write_tensors(args.out, {"images": stack.images, "albedo": stack.albedo,
                             "mask": stack.mask.astype(np.float32),
                             "cell_solid_angle": stack.cell_solid_angle},
                  {"kind": "olat", "scene_id": stack.scene_id, "rig_id": stack.rig_id,
                   "frame": stack.frame, "mode": stack.mode})
    print(f"{stack.n_lights} OLAT images -> {args.out}")


def cmd_env_preview(args):
    from .hdr_io import tonemap_preview, write_png

    write_png(args.out, tonemap_preview(_read_env(args.input), args.exposure))


def cmd_env_rotate(args):
    from .hdr_io import rotate_env, write_image

    write_image(args.out, rotate_env(_read_env(args.input), np.deg2rad(args.yaw_deg)).astype(np.float32))


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

def cmd_dataset_dl(args):
    from .dataset_builder import build_lighting_rich, procedural_env, write_container
    from .fixtures import overfit_fixture
    from .olat_studio import random_scene, render_olat
    from .pipeline import resolve_rig

    sec = _section(args, "dataset")
    seed = _seed(args, sec)
    rig = resolve_rig(sec.get("rig", "desk"), sec.get("env_dims", (32, 64)))
    if sec.get("fixture", args.fixture):
        records, rig, _ = overfit_fixture(seed, size=int(sec.get("size", 64)), rig=rig)
    else:
        rng = np.random.default_rng(seed)
        size = int(sec.get("size", 64))
        margin = int(sec.get("margin", 8))
        n_scenes = int(sec.get("scenes", args.scenes))
        stacks = [render_olat(random_scene(rng, size + margin, scene_id=f"dl-scene-{i}"), 0, rig, "cell")
                  for i in range(n_scenes)]
        envs = [procedural_env(rng, rig.dims) for _ in range(int(sec.get("envs", args.envs)))]
        records = build_lighting_rich(stacks, envs, rig, int(sec.get("pairs", args.pairs)), seed,
                                      int(sec.get("frames", args.frames)), (size, size))
    write_container(records, args.out, rig.rig_id, seed)
    print(f"{len(records)} lighting-rich clips -> {args.out}")


def cmd_dataset_dm(args):
    from .dataset_builder import FlickerDelighter, build_motion_rich, procedural_env, write_container
    from .olat_studio import Camera, Track, random_scene, synth_motion_clip
    from .pipeline import resolve_rig

    sec = _section(args, "dataset")
    seed = _seed(args, sec)
    rng = np.random.default_rng(seed)
    rig = resolve_rig(sec.get("rig", "desk"), sec.get("env_dims", (32, 64)))
    size = int(sec.get("size", 64))
    n_frames = int(sec.get("frames", args.frames))
    clips = []
    for i in range(int(sec.get("scenes", args.scenes))):
        scene = random_scene(rng, size, scene_id=f"dm-scene-{i}")
        pan = rng.uniform(-1.0, 1.0, 2).round()
        c = scene.camera
        scene.camera = Camera(c.position, c.look_at, c.fov, c.width, c.height,
                              pan=Track(((0.0, (0.0, 0.0)), (float(n_frames - 1), tuple(pan * (n_frames - 1))))))
        clips.append(synth_motion_clip(scene, range(n_frames), procedural_env(rng, rig.dims), rig))
    records = build_motion_rich(clips, FlickerDelighter(float(sec.get("flicker", 0.1))), seed)
    write_container(records, args.out, rig.rig_id, seed)
    print(f"{len(records)} motion-rich clips -> {args.out}")


# --------------------------------------------------------------------------
# train / infer / eval
# --------------------------------------------------------------------------

def cmd_train(args):
    from .dataset_builder import read_container
    from .diffusion_core import TrainConfig, train
    from .pipeline import resolve_rig

    sec = _section(args, "train")
    sec.setdefault("task", args.task)
    if args.task != sec["task"]:
        sec["task"] = args.task
    rig_spec = sec.pop("rig", "desk")
    env_dims = sec.pop("env_dims", (32, 64))
    if args.seed is not None:
        sec["seed"] = args.seed
    if args.steps is not None:
        for s in sec.setdefault("stages", [{"name": "warmup", "steps": 0, "frames": 2}]):
            s["steps"] = args.steps
    tcfg = TrainConfig.from_dict(sec)
    records = [r for path in args.data for r in read_container(path)]
    rig = resolve_rig(rig_spec, env_dims)
    params, state = train(records, tcfg, rig, args.out, resume=args.resume)
    print(f"trained {state.step} steps, final loss {state.loss_log[-1][2]:.5f} -> {args.out}")


def _pipeline_cfg(args):
    from .pipeline import PipelineConfig

    sec = _section(args, "pipeline")
    if args.seed is not None:
        sec["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        sec["steps"] = args.steps
    return PipelineConfig.from_dict(sec)


def _input_clip(args):
    from .dataset_builder import read_container
    from .pipeline import load_frames

    if args.data:
        recs = {r.clip_id: r for r in read_container(args.data)}
        if args.clip not in recs:
            raise KeyError(f"clip {args.clip!r} not in {args.data}")
        return recs[args.clip]
    if args.frames:
        return load_frames(args.frames)
    raise UsageError("give --data/--clip or --frames")


def cmd_infer(args):
    from .pipeline import (appearance_copy, delight_video, evaluate, full_relight, load_model,
                           relight_video, resolve_rig, save_frames)

    cfg = _pipeline_cfg(args)
    clip = _input_clip(args)
    rec = None if isinstance(clip, np.ndarray) else clip
    rig = resolve_rig(cfg.rig, cfg.env_dims)
    out = Path(args.out)

    def env():
        if args.env:
            return _read_env(args.env)
        if rec is not None and rec.E_l is not None:
            return rec.E_l
        raise UsageError("--env is required")

    def ckpt(kind):
        p = getattr(args, f"{kind}_ckpt") or getattr(cfg, f"{kind}_checkpoint")
        if not p:
            raise UsageError(f"no {kind} checkpoint given")
        return load_model(p)

    target, flow = None, None
    if args.mode == "delight":
        frames = rec.V_l if rec is not None else clip
        pred = delight_video(frames, ckpt("delight"), cfg)
        target = rec.V_a if rec is not None else None
    elif args.mode == "relight":
        frames = rec.V_a if rec is not None else clip
        pred = relight_video(frames, env(), ckpt("relight"), cfg, rig)
        target = rec.V_l if rec is not None else None
    elif args.mode == "copy":
        frames = rec.V_a if rec is not None else clip
        if args.ref:
            from .hdr_io import read_image
            ref = read_image(args.ref)
        elif rec is not None:
            ref = rec.V_l[rec.ref_pool[0]]
        else:
            raise UsageError("--ref is required")
        pred = appearance_copy(frames, ref, ckpt("relight"), cfg)
        target = rec.V_l if rec is not None else None
    else:
        frames = rec.V_l if rec is not None else clip
        _, pred = full_relight(frames, env(), ckpt("delight"), ckpt("relight"), cfg, rig, out)
        target = rec.V_l if rec is not None and not args.env else None
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError("non-finite values in model output")
    save_frames(pred, out / "frames")
    if target is not None:
        flow = rec.flow
        rep = evaluate(pred, target, rec.clip_id, flow, cfg=cfg)
        rep.provenance.update({"mode": args.mode})
        (out / "report.json").write_text(rep.to_json())
    print(f"{len(pred)} frames -> {out / 'frames'}")


def cmd_eval(args):
    from .dataset_builder import read_container
    from .pipeline import evaluate, load_frames

    cfg = _pipeline_cfg(args)
    recs = {r.clip_id: r for r in read_container(args.data)}
    if args.clip not in recs:
        raise KeyError(f"clip {args.clip!r} not in {args.data}")
    rec = recs[args.clip]
    pred = load_frames(args.pred)
    target = rec.V_a if args.target == "albedo" else rec.V_l
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    rep = evaluate(pred, target, rec.clip_id, rec.flow, cfg=cfg)
    Path(args.report).write_text(rep.to_json())
    print(json.dumps(rep.aggregate(), sort_keys=True))


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="luxkit", description="OLAT relighting toolkit")
    sub = ap.add_subparsers(dest="group", parser_class=_Parser)

    rig = sub.add_parser("rig").add_subparsers(dest="action", parser_class=_Parser)
    p = rig.add_parser("build", help="build a light rig and write its JSON")
    _common(p)
    p.add_argument("--preset", choices=["desk", "stage"])
    p.add_argument("--n-lights", type=int)
    p.add_argument("--layout", default="fibonacci")
    p.add_argument("--coverage", default="full", choices=["full", "frontal"])
    p.add_argument("--dims", type=int, nargs=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rig_build)

    render = sub.add_parser("render").add_subparsers(dest="action", parser_class=_Parser)
    p = render.add_parser("olat", help="render an OLAT stack")
    _common(p)
    p.add_argument("--rig", help="preset name or rig JSON")
    p.add_argument("--scene", help="scene JSON (default: random scene from --seed)")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frame", type=float, default=0.0)
    p.add_argument("--mode", default="cell", choices=["cell", "directional"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_olat)

    ds = sub.add_parser("dataset").add_subparsers(dest="action", parser_class=_Parser)
    p = ds.add_parser("build-dl", help="lighting-rich clips from OLAT composites")
    _common(p)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--envs", type=int, default=4)
    p.add_argument("--pairs", type=int, default=2)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--fixture", action="store_true", help="the 2-scene x 2-env overfit fixture")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_dl)
    p = ds.add_parser("build-dm", help="motion-rich clips with per-frame pseudo albedo")
    _common(p)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_dm)

    tr = sub.add_parser("train").add_subparsers(dest="task", parser_class=_Parser)
    for task in ("delight", "relight"):
        p = tr.add_parser(task)
        _common(p)
        p.add_argument("--data", action="append", required=True, help="clip container (repeatable)")
        p.add_argument("--out", required=True, help="checkpoint directory")
        p.add_argument("--steps", type=int, help="override steps of every stage")
        p.add_argument("--resume", help="checkpoint to continue from")
        p.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer").add_subparsers(dest="mode", parser_class=_Parser)
    for mode in ("delight", "relight", "copy", "full"):
        p = inf.add_parser(mode)
        _common(p)
        p.add_argument("--data", help="clip container")
        p.add_argument("--clip", help="clip id inside --data")
        p.add_argument("--frames", help="directory of frame_*.pfm")
        p.add_argument("--env", help="environment map (.hdr/.pfm)")
        p.add_argument("--ref", help="reference frame (.pfm)")
        p.add_argument("--delight-ckpt")
        p.add_argument("--relight-ckpt")
        p.add_argument("--steps", type=int)
        p.add_argument("--out", required=True)
        p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metric report for predicted frames")
    _common(p)
    p.add_argument("--pred", required=True, help="directory of frame_*.pfm")
    p.add_argument("--data", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--target", default="lit", choices=["lit", "albedo"])
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    env = sub.add_parser("env").add_subparsers(dest="action", parser_class=_Parser)
    p = env.add_parser("preview", help="tone-mapped PNG of an environment map")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--exposure", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_env_preview)
    p = env.add_parser("rotate", help="rotate an environment map about the vertical axis")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--yaw-deg", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_env_rotate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        if not hasattr(args, "func"):
            raise UsageError("missing subcommand; see --help")
        args.func(args)
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
