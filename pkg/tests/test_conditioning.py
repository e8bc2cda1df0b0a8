import numpy as np
import pytest

from luxkit import conditioning as cd
from luxkit import light_stage
from luxkit.dataset_builder import LIGHTING_RICH, MOTION_RICH
from luxkit.diffusion_core import DenoiserModel, desk_config, init_params


@pytest.fixture(scope="module")
def emb():
    rng = np.random.default_rng(0)
    p = cd.init_embedder_params(rng, 16, 64, pe_freqs=4, hidden=32, ref_grid=8, image_size=64)
    # non-zero nulls so substitution is visible
    p["null.hdr"] = rng.normal(size=64).astype(np.float32)
    p["null.ref"] = rng.normal(size=64).astype(np.float32)
    return p


@pytest.fixture(scope="module")
def rig():
    return light_stage.rig_preset("desk")


def test_positional_encoding_layout():
    d = np.array([[0.1, -0.2, 0.3]])
    pe = cd.positional_encoding(d, 2)
    expect = [np.sin(0.1), np.cos(0.1), np.sin(0.2), np.cos(0.2),
              np.sin(-0.2), np.cos(-0.2), np.sin(-0.4), np.cos(-0.4),
              np.sin(0.3), np.cos(0.3), np.sin(0.6), np.cos(0.6)]
    np.testing.assert_allclose(pe[0], expect, rtol=1e-15)


def test_token_embedding_formula(emb, rig):
    rng = np.random.default_rng(1)
    tok = cd.LightTokenSeq(rng.uniform(0, 5, (16, 3)), rig.cell_mean_dir)
    out = cd.embed_tokens(tok, emb)
    x = np.log1p(tok.tokens)
    h = x @ emb["tok.w1"] + emb["tok.b1"]
    h = h / (1 + np.exp(-h))
    mlp = h @ emb["tok.w2"] + emb["tok.b2"]
    assert out.shape == (16, 64)
    np.testing.assert_allclose(out[:, :40], mlp, rtol=1e-4, atol=1e-5)
    np.testing.assert_allclose(out[:, 40:], cd.positional_encoding(rig.cell_mean_dir, 4), atol=1e-6)
    raw = cd.embed_tokens(tok, emb, log_tokens=False)
    assert not np.allclose(raw, out)
    with pytest.raises(ValueError):
        cd.embed_tokens(cd.LightTokenSeq(np.full((16, 3), np.nan), rig.cell_mean_dir), emb)


def test_tokens_from_env_sum_to_integral(rig):
    env = np.random.default_rng(2).uniform(0, 3, rig.dims + (3,))
    tok = cd.tokens_from_env(rig, env)
    np.testing.assert_allclose(tok.tokens.sum(0), light_stage.covered_integral(rig, env), rtol=1e-12)


def test_reference_encoder_grid(emb):
    frame = np.random.default_rng(3).uniform(size=(64, 64, 3))
    out = cd.encode_reference(frame, emb)
    assert out.shape == (64, 64) and cd.ref_grid_rows(emb, 64) == 64
    with pytest.raises(ValueError):
        cd.encode_reference(np.zeros((60, 64, 3)), emb)
    with pytest.raises(ValueError):
        cd.init_embedder_params(np.random.default_rng(0), 16, 64, image_size=48, ref_grid=8)
    with pytest.raises(ValueError):
        cd.init_embedder_params(np.random.default_rng(0), 16, 20, pe_freqs=4)


def test_null_substitution_is_bit_independent(emb, rig):
    rng = np.random.default_rng(4)
    envs = [rng.uniform(0, k + 1, rig.dims + (3,)) for k in range(3)]
    refs = [rng.uniform(size=(64, 64, 3)) for _ in range(3)]
    for mode in ("none", "hdr", "ref"):
        ctxs = []
        for e, r in zip(envs, refs):
            tok = cd.tokens_from_env(rig, e)
            ctx = cd.build_context_t(emb, mode, 16, 64, tok, r).data
            ctxs.append(ctx)
        first = ctxs[0]
        if mode == "none":
            assert all(c.tobytes() == first.tobytes() for c in ctxs)
            assert np.array_equal(first[:16], np.tile(emb["null.hdr"], (16, 1)))
        elif mode == "hdr":
            # reference rows never depend on the reference frame
            assert all(c[16:].tobytes() == first[16:].tobytes() for c in ctxs)
            assert not np.array_equal(ctxs[0][:16], ctxs[1][:16])
        else:
            assert all(c[:16].tobytes() == first[:16].tobytes() for c in ctxs)
            assert not np.array_equal(ctxs[0][16:], ctxs[1][16:])


def test_model_context_ignores_dropped_condition(rig):
    cfg = desk_config()
    params = init_params(cfg, seed=0)
    params["null.hdr"] = np.linspace(-1, 1, 64).astype(np.float32)
    model = DenoiserModel(params, cfg)
    rng = np.random.default_rng(5)
    a = cd.tokens_from_env(rig, rng.uniform(0, 1, rig.dims + (3,)))
    b = cd.tokens_from_env(rig, rng.uniform(0, 9, rig.dims + (3,)))
    ref1, ref2 = rng.uniform(size=(2, 64, 64, 3))
    assert model.context("ref", a, ref1).tobytes() == model.context("ref", b, ref1).tobytes()
    assert model.context("hdr", a, ref1).tobytes() == model.context("hdr", a, ref2).tobytes()
    assert model.context("none", a, ref1).tobytes() == model.context("none").tobytes()


def test_assemble_condition_errors_and_bundle(emb):
    le = np.ones((16, 64), np.float32)
    b = cd.assemble_condition(le, None, "hdr", emb, n_ref=64)
    assert b.context.shape == (80, 64) and b.ref_embedding is None
    with pytest.raises(ValueError):
        cd.assemble_condition(None, None, "hdr", emb, 16, 64)
    with pytest.raises(ValueError):
        cd.assemble_condition(le, None, "both", emb, 16, 64)
    with pytest.raises(ValueError):
        cd.assemble_condition(le, None, "all", emb, 16, 64)
    with pytest.raises(ValueError):
        cd.assemble_condition(le, None, "hdr", emb)


def test_condition_mode_sampling():
    rng = np.random.default_rng(6)
    n = 30000
    draws = [cd.sample_condition_mode(LIGHTING_RICH, rng) for _ in range(n)]
    for m in ("hdr", "ref", "both"):
        assert abs(draws.count(m) / n - 1 / 3) < 0.01
    assert {cd.sample_condition_mode(MOTION_RICH, rng) for _ in range(50)} == {"ref"}
    with pytest.raises(ValueError):
        cd.sample_condition_mode("other", rng)
