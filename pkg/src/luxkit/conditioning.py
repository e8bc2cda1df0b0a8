"""Lighting injection: light tokens, token/reference embedders, null substitution.

Embedder weights live in the model's flat parameter dict under the ``tok.``,
``ref.`` and ``null.`` prefixes. The ``*_t`` functions build autograd graphs
(used in training); the plain functions return arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .light_stage import LightRig, project_env_to_weights

MODES = ("hdr", "ref", "both", "none")


@dataclass
class LightTokenSeq:
    tokens: np.ndarray     # (N, 3) radiance * steradian
    mean_dirs: np.ndarray  # (N, 3)


@dataclass
class CondBundle:
    mode: str
    light_embedding: np.ndarray | None  # (N, d)
    ref_embedding: np.ndarray | None    # (g*g, d)
    context: np.ndarray                 # (N + g*g, d)


def tokens_from_env(rig: LightRig, env: np.ndarray) -> LightTokenSeq:
    return LightTokenSeq(project_env_to_weights(rig, env), rig.cell_mean_dir.copy())


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def init_embedder_params(rng: np.random.Generator, n_lights: int, ctx_dim: int, pe_freqs: int = 4,
                         hidden: int = 32, ref_grid: int = 8, image_size: int = 64,
                         ref_channels: tuple = (16, 32), dtype=np.float32) -> dict:
    pe_dim = 6 * pe_freqs
    if ctx_dim <= pe_dim:
        raise ValueError(f"context width {ctx_dim} must exceed positional-encoding width {pe_dim}")
    n_down = int(round(np.log2(image_size / ref_grid)))
    if n_down < 1 or ref_grid * 2 ** n_down != image_size:
        raise ValueError(f"image size {image_size} is not ref_grid * 2^k with k >= 1")
    p = {
        "tok.w1": rng.normal(0, 1 / np.sqrt(3), (3, hidden)),
        "tok.b1": np.zeros(hidden),
        "tok.w2": rng.normal(0, 1 / np.sqrt(hidden), (hidden, ctx_dim - pe_dim)),
        "tok.b2": np.zeros(ctx_dim - pe_dim),
        "null.hdr": np.zeros(ctx_dim),
        "null.ref": np.zeros(ctx_dim),
    }
    chans = [3] + list(ref_channels)[: max(n_down - 1, 0)]
    chans += [ctx_dim] * (n_down + 1 - len(chans))
    for i in range(n_down):
        cin, cout = chans[i], chans[i + 1]
        p[f"ref.c{i}.w"] = rng.normal(0, 1 / np.sqrt(9 * cin), (3, 3, cin, cout))
        p[f"ref.c{i}.b"] = np.zeros(cout)
    return {k: v.astype(dtype) for k, v in p.items()}


def _n_ref_convs(params: dict) -> int:
    return sum(1 for k in params if k.startswith("ref.c") and k.endswith(".w"))


def pe_freqs_of(params: dict) -> int:
    ctx = params["null.hdr"].shape[0]
    return (ctx - params["tok.w2"].shape[1]) // 6


def positional_encoding(dirs: np.ndarray, n_freqs: int) -> np.ndarray:
    """``[sin(2^j c), cos(2^j c)]`` for every coordinate ``c`` and ``j < n_freqs``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    freqs = 2.0 ** np.arange(n_freqs)
    ang = dirs[..., :, None] * freqs                 # (..., 3, F)
    pe = np.stack([np.sin(ang), np.cos(ang)], -1)   # (..., 3, F, 2)
    return pe.reshape(dirs.shape[:-1] + (6 * n_freqs,))


def _P(params: dict, key: str) -> ag.Tensor:
    v = params[key]
    return v if isinstance(v, ag.Tensor) else ag.Tensor(v)


def _dtype(params: dict):
    v = params["null.hdr"]
    return (v.data if isinstance(v, ag.Tensor) else v).dtype


# --------------------------------------------------------------------------
# embedders
# --------------------------------------------------------------------------

def embed_tokens_t(tokens: LightTokenSeq, params: dict, log_tokens: bool = True) -> ag.Tensor:
    tok = np.asarray(tokens.tokens, dtype=np.float64)
    if not np.all(np.isfinite(tok)):
        raise ValueError("light tokens must be finite")
    x = np.log1p(np.maximum(tok, 0.0)) if log_tokens else tok
    dt = _dtype(params)
    h = ag.silu(ag.linear(ag.Tensor(x.astype(dt)), _P(params, "tok.w1"), _P(params, "tok.b1")))
    mlp = ag.linear(h, _P(params, "tok.w2"), _P(params, "tok.b2"))
    pe = positional_encoding(tokens.mean_dirs, pe_freqs_of(params)).astype(dt)
    return ag.concat([mlp, ag.Tensor(pe)], axis=-1)


def embed_tokens(tokens: LightTokenSeq, params: dict, log_tokens: bool = True) -> np.ndarray:
    """``(N, d)`` light embedding: ``MLP(log1p(token)) ++ PE(mean_dir)`` per light."""
    return embed_tokens_t(tokens, params, log_tokens).data


def encode_reference_t(frame: np.ndarray, params: dict) -> ag.Tensor:
    frame = np.asarray(frame)
    n = _n_ref_convs(params)
    stride = 2 ** n
    h, w = frame.shape[:2]
    if h % stride or w % stride:
        raise ValueError(f"frame {h}x{w} not divisible by encoder stride {stride}")
    dt = _dtype(params)
    x = ag.Tensor(((frame - 0.5) / 0.5).astype(dt)[None])
    for i in range(n):
        x = ag.conv2d(x, _P(params, f"ref.c{i}.w"), _P(params, f"ref.c{i}.b"), stride=2)
        if i < n - 1:
            x = ag.silu(x)
    g1, g2, d = x.shape[1:]
    return ag.reshape(x, (g1 * g2, d))


def encode_reference(frame: np.ndarray, params: dict) -> np.ndarray:
    """``(g*g, d)`` reference embedding from a strided conv encoder, row-major."""
    return encode_reference_t(frame, params).data


def ref_grid_rows(params: dict, image_size: int) -> int:
    g = image_size // 2 ** _n_ref_convs(params)
    return g * g


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------

def assemble_condition_t(light_emb, ref_emb, mode: str, params: dict,
                         n_lights: int, n_ref: int) -> ag.Tensor:
    if mode not in MODES:
        raise ValueError(f"unknown condition mode {mode!r}")
    use_hdr = mode in ("hdr", "both")
    use_ref = mode in ("ref", "both")
    if use_hdr and light_emb is None:
        raise ValueError(f"mode {mode!r} needs a light embedding")
    if use_ref and ref_emb is None:
        raise ValueError(f"mode {mode!r} needs a reference embedding")
    d = params["null.hdr"].shape[-1]
    hdr = ag.as_tensor(light_emb) if use_hdr else ag.broadcast_to(_P(params, "null.hdr"), (n_lights, d))
    ref = ag.as_tensor(ref_emb) if use_ref else ag.broadcast_to(_P(params, "null.ref"), (n_ref, d))
    return ag.concat([hdr, ref], axis=0)


def assemble_condition(light_emb, ref_emb, mode: str, params: dict,
                       n_lights: int | None = None, n_ref: int | None = None) -> CondBundle:
    """Context rows = light rows (or hdr-null copies) ++ reference rows (or ref-null copies).

    Row counts default to the supplied embeddings' sizes; pass them
    explicitly when an embedding is absent.
    """
    n_lights = n_lights if n_lights is not None else (None if light_emb is None else len(light_emb))
    n_ref = n_ref if n_ref is not None else (None if ref_emb is None else len(ref_emb))
    if n_lights is None or n_ref is None:
        raise ValueError("row counts for absent embeddings must be given")
    ctx = assemble_condition_t(light_emb, ref_emb, mode, params, n_lights, n_ref).data
    use_hdr = mode in ("hdr", "both")
    use_ref = mode in ("ref", "both")
    return CondBundle(mode, np.asarray(light_emb) if use_hdr else None,
                      np.asarray(ref_emb) if use_ref else None, np.ascontiguousarray(ctx))


def build_context_t(params: dict, mode: str, n_lights: int, image_size: int,
                    tokens: LightTokenSeq | None = None, ref_frame: np.ndarray | None = None,
                    log_tokens: bool = True) -> ag.Tensor:
    """Embed whatever ``mode`` needs and assemble the full context graph."""
    le = embed_tokens_t(tokens, params, log_tokens) if mode in ("hdr", "both") else None
    lr = encode_reference_t(ref_frame, params) if mode in ("ref", "both") else None
    return assemble_condition_t(le, lr, mode, params, n_lights, ref_grid_rows(params, image_size))


def sample_condition_mode(source: str, rng: np.random.Generator) -> str:
    """Motion-rich clips always use the reference; lighting-rich pick hdr/ref/both uniformly."""
    from .dataset_builder import LIGHTING_RICH, MOTION_RICH

    if source == MOTION_RICH:
        return "ref"
    if source == LIGHTING_RICH:
        return ("hdr", "ref", "both")[int(rng.integers(3))]
    raise ValueError(f"unknown clip source {source!r}")
