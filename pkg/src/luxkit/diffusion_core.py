"""Toy conditional latent video diffusion.

Latents are patchified pixel frames, shape ``(T, h, w, C)`` per clip and
``(B, T, h, w, C)`` in batches. The denoiser is a two-level conv net with
FiLM time conditioning, gated temporal self-attention across frames and
cross-attention to the condition context. Training uses v-prediction under
the cosine schedule and AdamW; sampling is deterministic DDIM.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .conditioning import (LightTokenSeq, build_context_t, init_embedder_params, ref_grid_rows,
                           sample_condition_mode)
from .container import read_tensors, write_tensors

PATCH_MEAN = 0.5
PATCH_SCALE = 0.5


# --------------------------------------------------------------------------
# latent codec
# --------------------------------------------------------------------------

def patchify(frames: np.ndarray, p: int = 4) -> np.ndarray:
    """``(..., H, W, 3)`` pixels -> ``(..., H/p, W/p, 3p^2)`` normalized latents (float64)."""
    frames = np.asarray(frames, dtype=np.float64)
    *lead, H, W, c = frames.shape
    if H % p or W % p:
        raise ValueError(f"frame {H}x{W} not divisible by patch size {p}")
    x = frames.reshape(*lead, H // p, p, W // p, p, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    x = x.reshape(*lead, H // p, W // p, p * p * c)
    return (x - PATCH_MEAN) / PATCH_SCALE


def unpatchify(latents: np.ndarray, p: int = 4) -> np.ndarray:
    z = np.asarray(latents, dtype=np.float64) * PATCH_SCALE + PATCH_MEAN
    *lead, h, w, C = z.shape
    c = C // (p * p)
    if c * p * p != C:
        raise ValueError(f"{C} latent channels is not a multiple of {p * p}")
    n = len(lead)
    x = z.reshape(*lead, h, w, p, p, c)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, h * p, w * p, c)


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------

def alpha(t):
    return np.cos(0.5 * np.pi * np.asarray(t, dtype=np.float64))


def sigma(t):
    return np.sin(0.5 * np.pi * np.asarray(t, dtype=np.float64))


def _bcast(a, ndim):
    a = np.asarray(a)
    return a.reshape(a.shape + (1,) * (ndim - a.ndim))


def add_noise(x0, t, eps):
    x0 = np.asarray(x0)
    return _bcast(alpha(t), x0.ndim) * x0 + _bcast(sigma(t), x0.ndim) * eps


def v_target(x0, eps, t):
    x0 = np.asarray(x0)
    return _bcast(alpha(t), x0.ndim) * eps - _bcast(sigma(t), x0.ndim) * x0


# --------------------------------------------------------------------------
# configuration and parameters
# --------------------------------------------------------------------------

@dataclass
class ModelConfig:
    latent_channels: int = 48
    patch: int = 4
    channels: tuple = (32, 64)
    ctx_dim: int = 64
    attn_dim: int = 32
    temb_dim: int = 64
    time_freqs: int = 16
    kernel: int = 3
    n_lights: int = 16
    pe_freqs: int = 4
    tok_hidden: int = 32
    image_size: int = 64
    ref_grid: int = 8
    ref_channels: tuple = (16, 32)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("channels", "ref_channels"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["ref_channels"] = list(self.ref_channels)
        return d

    @property
    def n_ref(self) -> int:
        return self.ref_grid ** 2

    @property
    def n_context(self) -> int:
        return self.n_lights + self.n_ref


def desk_config(**kw) -> ModelConfig:
    return ModelConfig(**kw)


def mini_config(**kw) -> ModelConfig:
    """A few hundred parameters; for finite-difference checks."""
    base = dict(latent_channels=1, patch=1, channels=(2, 2), ctx_dim=7, attn_dim=2, temb_dim=4,
                time_freqs=2, n_lights=2, pe_freqs=1, tok_hidden=2, image_size=4, ref_grid=2,
                ref_channels=())
    base.update(kw)
    return ModelConfig(**base)


def _conv_init(rng, k, cin, cout):
    return rng.normal(0, 1 / np.sqrt(k * k * cin), (k, k, cin, cout))


def _lin_init(rng, n_in, n_out):
    return rng.normal(0, 1 / np.sqrt(n_in), (n_in, n_out))


def _block_names(cfg: ModelConfig) -> dict:
    """Which sub-blocks each stage of the network has."""
    return {"enc": ("res", "temporal", "cross"), "mid": ("res", "temporal", "cross"),
            "dec": ("res", "temporal")}


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    rng = np.random.default_rng(seed)
    c0, c1 = cfg.channels
    k, C, E, A = cfg.kernel, cfg.latent_channels, cfg.temb_dim, cfg.attn_dim
    p = {
        "temb.w1": _lin_init(rng, 2 * cfg.time_freqs, E), "temb.b1": np.zeros(E),
        "temb.w2": _lin_init(rng, E, E), "temb.b2": np.zeros(E),
        "conv_in.w": _conv_init(rng, k, 2 * C + 1, c0), "conv_in.b": np.zeros(c0),
        "down.w": _conv_init(rng, k, c0, c1), "down.b": np.zeros(c1),
        "up.w": _conv_init(rng, k, c1, c0), "up.b": np.zeros(c0),
        # zero output conv: v-hat = 0 at init
        "conv_out.w": np.zeros((k, k, c0, C)), "conv_out.b": np.zeros(C),
        # time-dependent per-channel gain on x_t added to the output, zero at init
        "skip.w": np.zeros((E, C)), "skip.b": np.zeros(C),
    }
    widths = {"enc": c0, "mid": c1, "dec": c0}
    for blk, parts in _block_names(cfg).items():
        c = widths[blk]
        if "res" in parts:
            p[f"{blk}.res.w1"] = _conv_init(rng, k, c, c)
            p[f"{blk}.res.b1"] = np.zeros(c)
            p[f"{blk}.res.w2"] = _conv_init(rng, k, c, c)
            p[f"{blk}.res.b2"] = np.zeros(c)
            p[f"{blk}.res.scale_w"] = _lin_init(rng, E, c) * 0.1
            p[f"{blk}.res.scale_b"] = np.zeros(c)
            p[f"{blk}.res.shift_w"] = _lin_init(rng, E, c) * 0.1
            p[f"{blk}.res.shift_b"] = np.zeros(c)
        if "temporal" in parts:
            for m in ("wq", "wk", "wv", "wo"):
                p[f"{blk}.temporal.{m}"] = _lin_init(rng, c, c)
            p[f"{blk}.temporal.gate"] = np.zeros(c)
        if "cross" in parts:
            p[f"{blk}.cross.wq"] = _lin_init(rng, c, A)
            p[f"{blk}.cross.wk"] = _lin_init(rng, cfg.ctx_dim, A)
            p[f"{blk}.cross.wv"] = _lin_init(rng, cfg.ctx_dim, A)
            p[f"{blk}.cross.wo"] = _lin_init(rng, A, c)
            p[f"{blk}.cross.bo"] = np.zeros(c)
    p.update(init_embedder_params(rng, cfg.n_lights, cfg.ctx_dim, cfg.pe_freqs, cfg.tok_hidden,
                                  cfg.ref_grid, cfg.image_size, cfg.ref_channels, np.float64))
    return {name: v.astype(dtype) for name, v in p.items()}


def is_temporal(name: str) -> bool:
    return ".temporal." in name


def count_params(params: dict) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


# --------------------------------------------------------------------------
# denoiser
# --------------------------------------------------------------------------

def time_features(t: np.ndarray, n_freqs: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    freqs = np.exp(-np.log(1e4) * np.arange(n_freqs) / max(n_freqs, 1))
    ang = 1000.0 * t[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _check(x: ag.Tensor, layer: int, name: str) -> ag.Tensor:
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError(f"non-finite activation at layer {layer} ({name})")
    return x


def _res(P, blk, x, temb):
    h = ag.conv2d(ag.silu(x), P[f"{blk}.res.w1"], P[f"{blk}.res.b1"])
    scale = ag.linear(temb, P[f"{blk}.res.scale_w"], P[f"{blk}.res.scale_b"])
    shift = ag.linear(temb, P[f"{blk}.res.shift_w"], P[f"{blk}.res.shift_b"])
    h = ag.add(ag.mul(h, ag.add(scale, 1.0)), shift)
    h = ag.conv2d(ag.silu(h), P[f"{blk}.res.w2"], P[f"{blk}.res.b2"])
    return ag.add(x, h)


def _temporal(P, blk, x, B, T):
    """Self-attention across frames at every spatial position, gated residual."""
    _, h, w, c = x.shape
    seq = ag.transpose(ag.reshape(x, (B, T, h * w, c)), (0, 2, 1, 3))  # (B, hw, T, c)
    q = ag.matmul(seq, P[f"{blk}.temporal.wq"])
    k = ag.matmul(seq, P[f"{blk}.temporal.wk"])
    v = ag.matmul(seq, P[f"{blk}.temporal.wv"])
    o = ag.matmul(ag.attention(q, k, v), P[f"{blk}.temporal.wo"])
    o = ag.reshape(ag.transpose(o, (0, 2, 1, 3)), (B * T, h, w, c))
    return ag.add(x, ag.mul(o, P[f"{blk}.temporal.gate"]))


def _cross(P, blk, x, ctx, B, T):
    _, h, w, c = x.shape
    seq = ag.reshape(x, (B, T * h * w, c))
    q = ag.matmul(seq, P[f"{blk}.cross.wq"])
    k = ag.matmul(ctx, P[f"{blk}.cross.wk"])
    v = ag.matmul(ctx, P[f"{blk}.cross.wv"])
    o = ag.linear(ag.attention(q, k, v), P[f"{blk}.cross.wo"], P[f"{blk}.cross.bo"])
    return ag.add(x, ag.reshape(o, (B * T, h, w, c)))


def denoiser_forward(P: dict, cfg: ModelConfig, x_t, t, inputs, mask, context) -> ag.Tensor:
    """v-hat for a batch.

    ``x_t``, ``inputs``: (B, T, h, w, C); ``mask``: (B, T); ``t``: (B,);
    ``context``: (B, R, d) array or Tensor. ``P`` maps names to Tensors.
    """
    dt = P["conv_in.w"].data.dtype
    x_t = np.asarray(x_t)
    inputs = np.asarray(inputs)
    if x_t.ndim != 5 or x_t.shape != inputs.shape:
        raise ValueError(f"x_t {x_t.shape} and inputs {inputs.shape} must match as (B, T, h, w, C)")
    B, T, h, w, C = x_t.shape
    if C != cfg.latent_channels:
        raise ValueError(f"expected {cfg.latent_channels} latent channels, got {C}")
    if h % 2 or w % 2:
        raise ValueError(f"latent size {h}x{w} must be even")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (B, T):
        raise ValueError(f"mask shape {mask.shape}, expected {(B, T)}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    ctx = ag.as_tensor(context) if isinstance(context, ag.Tensor) else ag.Tensor(np.asarray(context, dt))
    if ctx.shape[0] != B or ctx.shape[2] != cfg.ctx_dim:
        raise ValueError(f"context shape {ctx.shape} incompatible with batch {B}, width {cfg.ctx_dim}")

    mch = np.broadcast_to(mask[:, :, None, None, None], (B, T, h, w, 1))
    x = np.concatenate([x_t, inputs, mch], axis=-1).astype(dt).reshape(B * T, h, w, 2 * C + 1)
    temb = ag.Tensor(time_features(t, cfg.time_freqs).astype(dt))
    temb = ag.linear(ag.silu(ag.linear(temb, P["temb.w1"], P["temb.b1"])), P["temb.w2"], P["temb.b2"])
    temb = ag.silu(temb)
    temb = ag.reshape(ag.broadcast_to(ag.reshape(temb, (B, 1, cfg.temb_dim)), (B, T, cfg.temb_dim)),
                      (B * T, 1, 1, cfg.temb_dim))

    layer = 0
    x = _check(ag.conv2d(ag.Tensor(x), P["conv_in.w"], P["conv_in.b"]), layer, "conv_in")
    for name, fn in (("enc.res", lambda z: _res(P, "enc", z, temb)),
                     ("enc.temporal", lambda z: _temporal(P, "enc", z, B, T)),
                     ("enc.cross", lambda z: _cross(P, "enc", z, ctx, B, T))):
        layer += 1
        x = _check(fn(x), layer, name)
    skip = x
    layer += 1
    x = _check(ag.conv2d(ag.avgpool2(x), P["down.w"], P["down.b"]), layer, "down")
    for name, fn in (("mid.res", lambda z: _res(P, "mid", z, temb)),
                     ("mid.temporal", lambda z: _temporal(P, "mid", z, B, T)),
                     ("mid.cross", lambda z: _cross(P, "mid", z, ctx, B, T))):
        layer += 1
        x = _check(fn(x), layer, name)
    layer += 1
    x = _check(ag.add(ag.conv2d(ag.upsample2(x), P["up.w"], P["up.b"]), skip), layer, "up")
    for name, fn in (("dec.res", lambda z: _res(P, "dec", z, temb)),
                     ("dec.temporal", lambda z: _temporal(P, "dec", z, B, T))):
        layer += 1
        x = _check(fn(x), layer, name)
    layer += 1
    out = ag.conv2d(ag.silu(x), P["conv_out.w"], P["conv_out.b"])
    gain = ag.linear(temb, P["skip.w"], P["skip.b"])
    out = _check(ag.add(out, ag.mul(ag.Tensor(x_t.astype(dt).reshape(B * T, h, w, C)), gain)),
                 layer, "conv_out")
    return ag.reshape(out, (B, T, h, w, C))


def _as_tensors(params: dict, trainable=None) -> dict:
    """Wrap arrays; ``trainable`` (a set of names, or None for all) get gradients."""
    out = {}
    for k, v in params.items():
        if trainable is None or k in trainable:
            out[k] = ag.parameter(v, name=k)
        else:
            out[k] = ag.Tensor(v, name=k)
    return out


@dataclass
class Condition:
    """Per-sample condition: mode plus whatever that mode needs."""
    mode: str
    tokens: LightTokenSeq | None = None
    ref: np.ndarray | None = None


def _context_t(P: dict, cfg: ModelConfig, conds: list, log_tokens: bool = True) -> ag.Tensor:
    rows = []
    for c in conds:
        ctx = build_context_t(P, c.mode, cfg.n_lights, cfg.image_size, c.tokens, c.ref, log_tokens)
        rows.append(ag.reshape(ctx, (1,) + ctx.shape))
    return ag.concat(rows, axis=0)


class DenoiserModel:
    """Inference wrapper: ``model(x_t, t, inputs, mask, context) -> v_hat`` for one clip."""

    def __init__(self, params: dict, cfg: ModelConfig, log_tokens: bool = True):
        self.params = params
        self.cfg = cfg
        self.log_tokens = log_tokens
        self._P = _as_tensors(params, trainable=set())

    def __call__(self, x_t, t, inputs, mask, context):
        out = denoiser_forward(self._P, self.cfg, np.asarray(x_t)[None], np.atleast_1d(t),
                               np.asarray(inputs)[None], np.asarray(mask)[None], np.asarray(context)[None])
        return out.data[0].astype(np.float64)

    def context(self, mode: str, tokens: LightTokenSeq | None = None, ref=None) -> np.ndarray:
        return _context_t(self._P, self.cfg, [Condition(mode, tokens, ref)], self.log_tokens).data[0]


# --------------------------------------------------------------------------
# loss, gradients, finite differences
# --------------------------------------------------------------------------

@dataclass
class Batch:
    x0: np.ndarray      # (B, T, h, w, C) targets
    inputs: np.ndarray  # (B, T, h, w, C) input latents
    mask: np.ndarray    # (B, T)
    t: np.ndarray       # (B,)
    eps: np.ndarray     # (B, T, h, w, C)
    conds: list         # B Conditions


def _loss_graph(P, cfg, batch: Batch, log_tokens=True):
    dt = P["conv_in.w"].data.dtype
    x0 = np.asarray(batch.x0, np.float64)
    x_t = add_noise(x0, batch.t, batch.eps).astype(dt)
    v = v_target(x0, batch.eps, batch.t).astype(dt)
    ctx = _context_t(P, cfg, batch.conds, log_tokens)
    vhat = denoiser_forward(P, cfg, x_t, batch.t, np.asarray(batch.inputs).astype(dt), batch.mask, ctx)
    return ag.mean(ag.square(ag.add(vhat, ag.Tensor(-v))))


def loss_value(params: dict, cfg: ModelConfig, batch: Batch, log_tokens: bool = True) -> float:
    loss = float(_loss_graph(_as_tensors(params, set()), cfg, batch, log_tokens).data)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss


def loss_and_gradients(batch: Batch, params: dict, cfg: ModelConfig, trainable=None,
                       log_tokens: bool = True) -> tuple[float, dict]:
    """Mean squared v error and its gradient for every trainable tensor."""
    P = _as_tensors(params, trainable)
    loss = _loss_graph(P, cfg, batch, log_tokens)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss")
    loss.backward()
    names = params.keys() if trainable is None else [k for k in params if k in trainable]
    grads = {k: (P[k].grad if P[k].grad is not None else np.zeros_like(params[k])) for k in names}
    return float(loss.data), grads


def finite_difference_grads(batch: Batch, params: dict, cfg: ModelConfig, rel_step: float = 1e-4,
                            log_tokens: bool = True) -> dict:
    """Central differences of the loss for every scalar parameter (float64 params expected)."""
    out = {}
    for k, v in params.items():
        g = np.zeros(v.shape)
        flat = v.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = rel_step * max(1.0, abs(orig))
            flat[i] = orig + h
            lp = loss_value(params, cfg, batch, log_tokens)
            flat[i] = orig - h
            lm = loss_value(params, cfg, batch, log_tokens)
            flat[i] = orig
            g.reshape(-1)[i] = (lp - lm) / (2 * h)
        out[k] = g
    return out


def gradcheck(batch: Batch, params: dict, cfg: ModelConfig, rel_step: float = 1e-4) -> dict:
    """Per-tensor relative error ``|g_a - g_fd| / max(|g_a|, |g_fd|)`` (2-norms)."""
    _, ga = loss_and_gradients(batch, params, cfg)
    gf = finite_difference_grads(batch, params, cfg, rel_step)
    errs = {}
    for k in params:
        num = np.linalg.norm(ga[k] - gf[k])
        den = max(np.linalg.norm(ga[k]), np.linalg.norm(gf[k]), 1e-300)
        errs[k] = float(num / den) if num > 0 else 0.0
    return errs


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    seed: int = 0
    stage: str = "warmup"
    loss_log: list = field(default_factory=list)


def optimizer_step(state: TrainState, params: dict, grads: dict, lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, wd: float = 0.0, eps: float = 1e-8) -> None:
    """AdamW with decoupled weight decay and bias correction, in place.

    Only tensors present in ``grads`` move; the step counter advances once.
    """
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for k in sorted(grads):
        p, g = params[k], grads[k].astype(params[k].dtype)
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[k], state.v[k] = m.astype(p.dtype), v.astype(p.dtype)
        upd = (m / bc1) / (np.sqrt(v / bc2) + eps)
        params[k] = (p * (1 - lr * wd) - lr * upd).astype(p.dtype)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, params: dict, state: TrainState, cfg: ModelConfig, extra: dict | None = None):
    tensors = {f"param/{k}": v for k, v in params.items()}
    for k in state.m:
        tensors[f"adam.m/{k}"] = state.m[k]
        tensors[f"adam.v/{k}"] = state.v[k]
    meta = {"kind": "checkpoint", "model": cfg.to_dict(), "step": state.step, "seed": state.seed,
            "stage": state.stage, "loss_log": state.loss_log}
    meta.update(extra or {})
    return write_tensors(path, tensors, meta)


def load_checkpoint(path) -> tuple[dict, TrainState, ModelConfig, dict]:
    tensors, meta = read_tensors(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path} is not a model checkpoint")
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    state = TrainState(step=meta["step"], seed=meta["seed"], stage=meta["stage"],
                       loss_log=[list(r) for r in meta["loss_log"]],
                       m={k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")},
                       v={k[7:]: v for k, v in tensors.items() if k.startswith("adam.v/")})
    return params, state, ModelConfig.from_dict(meta["model"]), meta


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    task: str = "relight"              # relight | delight
    lr: float = 1e-3
    lr_schedule: str = "constant"      # constant | cosine (per stage, decays to 0)
    weight_decay: float = 0.0
    batch: int = 4
    stages: list = field(default_factory=lambda: [
        {"name": "warmup", "steps": 400, "frames": 2},
        {"name": "temporal", "steps": 100, "frames": 8},
    ])
    condition_modes: list | None = None  # restrict lighting-rich modes; None = sampled
    overlap: bool = True
    seed: int = 0
    init_seed: int = 0
    checkpoint_every: int = 0
    log_tokens: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys {sorted(unknown)}")
        cfg = cls(model=model, **d)
        if cfg.task not in ("relight", "delight"):
            raise ValueError(f"unknown task {cfg.task!r}")
        if cfg.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {cfg.lr_schedule!r}")
        for s in cfg.stages:
            if s["name"] not in ("warmup", "temporal"):
                raise ValueError(f"unknown stage {s['name']!r}")
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class _Prepared:
    source: str
    lit: np.ndarray      # latents (T, h, w, C) float32
    albedo: np.ndarray
    frames_lit: np.ndarray  # pixel frames for references
    ref_pool: list
    tokens: LightTokenSeq | None


def prepare_records(records: list, cfg: ModelConfig, rig=None) -> list:
    from .conditioning import tokens_from_env
    from .dataset_builder import LIGHTING_RICH

    out = []
    for r in records:
        tok = None
        if r.source == LIGHTING_RICH:
            if rig is None:
                raise ValueError("lighting-rich records need a rig for light tokens")
            tok = tokens_from_env(rig, r.E_l)
            if len(tok.tokens) != cfg.n_lights:
                raise ValueError(f"rig has {len(tok.tokens)} lights, model expects {cfg.n_lights}")
        out.append(_Prepared(r.source, patchify(r.V_l, cfg.patch).astype(np.float32),
                             patchify(r.V_a, cfg.patch).astype(np.float32),
                             np.asarray(r.V_l, np.float32), list(r.ref_pool), tok))
    return out


def _task_for(clip: _Prepared, tcfg: TrainConfig, rng) -> tuple:
    """(target latents, input latents, mode) for one clip under the configured task."""
    from .dataset_builder import LIGHTING_RICH

    if clip.source == LIGHTING_RICH:
        if tcfg.task == "delight":
            return clip.albedo, clip.lit, "none"
        if tcfg.condition_modes:
            mode = tcfg.condition_modes[int(rng.integers(len(tcfg.condition_modes)))]
        else:
            mode = sample_condition_mode(clip.source, rng)
        return clip.lit, clip.albedo, mode
    # motion-rich: appearance copy for both models
    return clip.lit, clip.albedo, sample_condition_mode(clip.source, rng)


def make_batch(clips: list, tcfg: TrainConfig, frames: int, rng: np.random.Generator) -> Batch:
    from .sequencer import sample_overlap_T

    pool = [c for c in clips if len(c.lit) >= frames]
    if not pool:
        raise ValueError(f"no training clip has {frames} frames")
    x0s, ins, masks, conds = [], [], [], []
    for _ in range(tcfg.batch):
        clip = pool[int(rng.integers(len(pool)))]
        s = int(rng.integers(len(clip.lit) - frames + 1))
        target, inp, mode = _task_for(clip, tcfg, rng)
        x0 = target[s:s + frames]
        inp = inp[s:s + frames].copy()
        mask = np.zeros(frames)
        if tcfg.overlap:
            T = min(sample_overlap_T(rng), frames - 1)
            inp[:T] = x0[:T]
            mask[:T] = 1.0
        ref = None
        if mode in ("ref", "both"):
            ref = clip.frames_lit[clip.ref_pool[int(rng.integers(len(clip.ref_pool)))]]
        x0s.append(x0)
        ins.append(inp)
        masks.append(mask)
        conds.append(Condition(mode, clip.tokens if mode in ("hdr", "both") else None, ref))
    x0 = np.stack(x0s)
    t = rng.uniform(0.0, 1.0, tcfg.batch)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    return Batch(x0, np.stack(ins), np.stack(masks), t, eps, conds)


def _stage_at(tcfg: TrainConfig, step: int):
    """Stage dict for a 0-based global step, or None past the end."""
    start = 0
    for s in tcfg.stages:
        if step < start + s["steps"]:
            return s
        start += s["steps"]
    return None


def lr_at(tcfg: TrainConfig, step: int) -> float:
    if tcfg.lr_schedule == "constant":
        return tcfg.lr
    start = 0
    for s in tcfg.stages:
        if step < start + s["steps"]:
            return tcfg.lr * 0.5 * (1.0 + np.cos(np.pi * (step - start) / s["steps"]))
        start += s["steps"]
    return 0.0


def total_steps(tcfg: TrainConfig) -> int:
    return sum(s["steps"] for s in tcfg.stages)


def train(records: list, tcfg: TrainConfig, rig=None, out_dir=None, resume=None, params=None,
          max_steps: int | None = None, callback=None) -> tuple[dict, TrainState]:
    """Run (or continue) the staged schedule.

    Each step draws its batch from ``default_rng([seed, step])`` so a resumed
    run reproduces an uninterrupted one bit for bit. Training records are the
    ``train`` split of ``records``. ``max_steps`` stops early (for resume tests).
    """
    train_recs = [r for r in records if r.meta.get("split", "train") == "train"]
    if not train_recs:
        raise ValueError("empty dataset: no training records")
    cfg = tcfg.model
    clips = prepare_records(train_recs, cfg, rig)
    if resume is not None:
        params, state, _, _ = load_checkpoint(resume)
    else:
        params = dict(params) if params is not None else init_params(cfg, tcfg.init_seed)
        state = TrainState(seed=tcfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    end = total_steps(tcfg) if max_steps is None else min(max_steps, total_steps(tcfg))
    while state.step < end:
        stage = _stage_at(tcfg, state.step)
        state.stage = stage["name"]
        rng = np.random.default_rng([tcfg.seed, state.step])
        batch = make_batch(clips, tcfg, stage["frames"], rng)
        trainable = None if stage["name"] == "warmup" else {k for k in params if is_temporal(k)}
        loss, grads = loss_and_gradients(batch, params, cfg, trainable, tcfg.log_tokens)
        optimizer_step(state, params, grads, lr_at(tcfg, state.step), wd=tcfg.weight_decay)
        state.loss_log.append([state.step, state.stage, loss])
        if callback is not None:
            callback(state, loss)
        boundary = _stage_at(tcfg, state.step) is not stage
        if out_dir is not None and (boundary or (tcfg.checkpoint_every and
                                                 state.step % tcfg.checkpoint_every == 0)):
            save_checkpoint(out_dir / f"ckpt-{state.step:06d}", params, state, cfg,
                            {"train": tcfg.to_dict()})
    if out_dir is not None:
        save_checkpoint(out_dir / "latest", params, state, cfg, {"train": tcfg.to_dict()})
        (out_dir / "loss_log.json").write_text(json.dumps(state.loss_log))
    return params, state


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def ddim_sample(model, inputs, mask, context, steps: int = 30, seed=0, guidance: float = 1.0,
                null_context=None) -> np.ndarray:
    """Deterministic DDIM from pure noise at t=1; returns the final x0 estimate (float32).

    ``seed`` may be an int or a Generator. With ``guidance != 1`` the
    prediction is ``v_null + g * (v_cond - v_null)`` using ``null_context``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    inputs = np.asarray(inputs)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = rng.standard_normal(inputs.shape)
    ts = 1.0 - np.arange(steps) / steps
    x0_hat = None
    for i, t in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < steps else 0.0
        v = np.asarray(model(x, t, inputs, mask, context), dtype=np.float64)
        if guidance != 1.0:
            if null_context is None:
                raise ValueError("guidance needs a null context")
            vn = np.asarray(model(x, t, inputs, mask, null_context), dtype=np.float64)
            v = vn + guidance * (v - vn)
        a, s = alpha(t), sigma(t)
        x0_hat = a * x - s * v
        eps_hat = s * x + a * v
        x = alpha(t_next) * x0_hat + sigma(t_next) * eps_hat
    return x0_hat.astype(np.float32)
