import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from luxkit import diffusion_core as dc
from luxkit import light_stage
from luxkit.conditioning import LightTokenSeq
from luxkit.dataset_builder import LIGHTING_RICH, MOTION_RICH, ClipRecord
from luxkit.sequencer import CopyThroughModel


# ---------------------------------------------------------------- schedule / codec

@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_v_parameterization_inverts(t, seed):
    rng = np.random.default_rng(seed)
    x0, eps = rng.normal(size=(2, 3, 4))
    a, s = dc.alpha(t), dc.sigma(t)
    assert a * a + s * s == pytest.approx(1.0, abs=1e-15)
    xt = dc.add_noise(x0, t, eps)
    v = dc.v_target(x0, eps, t)
    np.testing.assert_allclose(a * xt - s * v, x0, atol=1e-12)
    np.testing.assert_allclose(s * xt + a * v, eps, atol=1e-12)


def test_schedule_endpoints_and_batched_t():
    assert dc.alpha(0) == 1 and dc.sigma(0) == 0
    assert dc.alpha(1) == pytest.approx(0, abs=1e-15) and dc.sigma(1) == 1
    x0 = np.ones((2, 3))
    np.testing.assert_allclose(dc.add_noise(x0, np.array([0.0, 1.0]), np.zeros((2, 3)))[:, 0], [1, 0], atol=1e-15)


def test_patchify_layout_and_roundtrip():
    rng = np.random.default_rng(0)
    frames = rng.uniform(size=(2, 8, 12, 3))
    z = dc.patchify(frames, 4)
    assert z.shape == (2, 2, 3, 48)
    # channel index = (dy * p + dx) * 3 + c
    np.testing.assert_allclose(z[1, 1, 2, (2 * 4 + 3) * 3 + 1], (frames[1, 4 + 2, 8 + 3, 1] - 0.5) / 0.5)
    np.testing.assert_allclose(dc.unpatchify(z, 4), frames, atol=1e-15)
    with pytest.raises(ValueError):
        dc.patchify(np.zeros((6, 8, 3)), 4)
    with pytest.raises(ValueError):
        dc.unpatchify(np.zeros((2, 2, 47)), 4)


# ---------------------------------------------------------------- denoiser

def _randomize(params, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    return {k: (v + scale * rng.normal(size=v.shape)).astype(np.float64) for k, v in params.items()}


def _mini_batch(cfg, seed=0, B=2, T=2):
    rng = np.random.default_rng(seed)
    s = cfg.image_size // cfg.patch
    shape = (B, T, s, s, cfg.latent_channels)
    mdirs = rng.normal(size=(cfg.n_lights, 3))
    mdirs /= np.linalg.norm(mdirs, axis=1, keepdims=True)
    conds = [dc.Condition("both", LightTokenSeq(rng.uniform(0, 2, (cfg.n_lights, 3)), mdirs),
                          rng.uniform(size=(cfg.image_size, cfg.image_size, 3))),
             dc.Condition("none")][:B]
    return dc.Batch(rng.normal(size=shape), rng.normal(size=shape), np.array([[1, 0], [0, 0]][:B], float),
                    rng.uniform(0.1, 0.9, B), rng.normal(size=shape), conds)


def test_mini_config_is_small():
    assert dc.count_params(dc.init_params(dc.mini_config())) <= 1000


def test_gradcheck_every_tensor():
    cfg = dc.mini_config()
    params = _randomize(dc.init_params(cfg, 0, np.float64), 1)
    errs = dc.gradcheck(_mini_batch(cfg), params, cfg)
    assert set(errs) == set(params)
    bad = {k: e for k, e in errs.items() if e > 1e-4}
    assert not bad, bad


def test_zero_init_predicts_zero():
    cfg = dc.mini_config()
    P = dc._as_tensors(dc.init_params(cfg, 0), set())
    b = _mini_batch(cfg)
    ctx = dc._context_t(P, cfg, b.conds)
    out = dc.denoiser_forward(P, cfg, b.x0, b.t, b.inputs, b.mask, ctx)
    assert not out.data.any()


def test_temporal_gate_zero_decouples_frames():
    cfg = dc.mini_config()
    params = _randomize(dc.init_params(cfg, 0, np.float64), 2)
    for k in params:
        if k.endswith("temporal.gate"):
            params[k][:] = 0
    P = dc._as_tensors(params, set())
    b = _mini_batch(cfg, B=1)
    ctx = dc._context_t(P, cfg, b.conds)
    full = dc.denoiser_forward(P, cfg, b.x0, b.t, b.inputs, b.mask, ctx).data
    one = dc.denoiser_forward(P, cfg, b.x0[:, :1], b.t, b.inputs[:, :1], b.mask[:, :1], ctx).data
    np.testing.assert_allclose(full[:, :1], one, rtol=1e-12)


def test_forward_errors():
    cfg = dc.mini_config()
    P = dc._as_tensors(dc.init_params(cfg, 0), set())
    x = np.zeros((1, 1, 4, 4, 1))
    ctx = np.zeros((1, cfg.n_context, cfg.ctx_dim))
    with pytest.raises(ValueError):
        dc.denoiser_forward(P, cfg, x, 0.5, np.zeros((1, 1, 4, 4, 2)), np.zeros((1, 1)), ctx)
    with pytest.raises(ValueError):
        dc.denoiser_forward(P, cfg, x, 0.5, x, np.zeros((1, 2)), ctx)
    with pytest.raises(ValueError):
        dc.denoiser_forward(P, cfg, x, 0.5, x, np.zeros((1, 1)), np.zeros((1, 3, 5)))
    with pytest.raises(FloatingPointError, match="layer 0"), np.errstate(invalid="ignore"):
        dc.denoiser_forward(P, cfg, np.full_like(x, np.inf), 0.5, x, np.zeros((1, 1)), ctx)


# ---------------------------------------------------------------- optimizer

def reference_adamw(p, grads, lr, b1, b2, wd, eps):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (np.sqrt(vh) + eps)
    return p


def test_adamw_matches_reference():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]
    params = {"w": p0.copy()}
    state = dc.TrainState()
    for g in grads:
        dc.optimizer_step(state, params, {"w": g}, 0.01, wd=0.1)
    np.testing.assert_allclose(params["w"], reference_adamw(p0, grads, 0.01, 0.9, 0.999, 0.1, 1e-8), rtol=1e-12)
    assert state.step == 5


def test_adamw_first_step_is_signed_lr():
    params = {"a": np.array([1.0, -2.0, 3.0]), "frozen": np.array([5.0])}
    dc.optimizer_step(dc.TrainState(), params, {"a": np.array([0.5, -4.0, 0.0])}, 0.1)
    np.testing.assert_allclose(params["a"], [0.9, -1.9, 3.0], rtol=1e-6)
    assert params["frozen"][0] == 5.0


# ---------------------------------------------------------------- sampler

class TargetModel:
    """Returns the v that makes x0-hat equal a fixed target."""

    def __init__(self, target):
        self.target = target

    def __call__(self, x_t, t, inputs, mask, context):
        a, s = dc.alpha(t), dc.sigma(t)
        return (a * x_t - self.target) / s


@pytest.mark.parametrize("steps", [1, 2, 30])
def test_ddim_recovers_oracle_target(steps):
    target = np.random.default_rng(0).normal(size=(3, 2, 2, 4))
    out = dc.ddim_sample(TargetModel(target), np.zeros_like(target), np.zeros(3), None, steps, seed=1)
    np.testing.assert_allclose(out, target.astype(np.float32), rtol=1e-6, atol=1e-6)


def test_ddim_copy_through_exact_and_guidance():
    x = np.random.default_rng(1).normal(size=(2, 2, 2, 3)).astype(np.float32)
    out = dc.ddim_sample(CopyThroughModel(), x, np.zeros(2), None, 30, seed=0)
    assert out.tobytes() == x.tobytes()
    same = dc.ddim_sample(CopyThroughModel(), x, np.zeros(2), 1, 30, seed=0, guidance=3.0, null_context=0)
    assert same.tobytes() == x.tobytes()
    with pytest.raises(ValueError):
        dc.ddim_sample(CopyThroughModel(), x, np.zeros(2), None, 3, guidance=2.0)
    with pytest.raises(ValueError):
        dc.ddim_sample(CopyThroughModel(), x, np.zeros(2), None, 0)


def test_ddim_two_steps_closed_form_for_linear_model():
    # v = c * x_t gives x0-hat = (alpha - sigma c) x and eps-hat = (sigma + alpha c) x at each step
    c = 0.7

    class Linear:
        def __call__(self, x_t, t, inputs, mask, context):
            return c * x_t

    out = dc.ddim_sample(Linear(), np.zeros(5), np.zeros(1), None, 2, seed=4)
    x1 = np.random.default_rng(4).standard_normal(5)
    a1, s1 = np.cos(np.pi / 2), 1.0
    ah, sh = np.cos(np.pi / 4), np.sin(np.pi / 4)
    x_half = ah * (a1 - s1 * c) * x1 + sh * (s1 + a1 * c) * x1
    np.testing.assert_allclose(out, (ah - sh * c) * x_half, rtol=1e-6)


# ---------------------------------------------------------------- training

def _train_fixture():
    rig = light_stage.build_rig(2, "fibonacci", "full", (4, 8))
    rng = np.random.default_rng(0)
    recs = []
    for k in range(2):
        V_a = rng.uniform(size=(4, 8, 8, 3)).astype(np.float32)
        recs.append(ClipRecord(f"l{k}", LIGHTING_RICH, V_a * 0.7, V_a, rng.uniform(0, 1, (4, 8, 3))))
    recs.append(ClipRecord("m0", MOTION_RICH, V_a * 0.5, V_a, None))
    cfg = dc.ModelConfig(latent_channels=12, patch=2, channels=(4, 4), ctx_dim=10, attn_dim=4, temb_dim=8,
                         time_freqs=2, n_lights=2, pe_freqs=1, tok_hidden=4, image_size=8, ref_grid=2,
                         ref_channels=(4,))
    tcfg = dc.TrainConfig(lr=1e-2, batch=2, model=cfg, stages=[{"name": "warmup", "steps": 4, "frames": 2},
                                                              {"name": "temporal", "steps": 3, "frames": 4}])
    return recs, rig, tcfg


def test_resume_is_bit_exact(tmp_path):
    recs, rig, tcfg = _train_fixture()
    full, fstate = dc.train(recs, tcfg, rig)
    dc.train(recs, tcfg, rig, out_dir=tmp_path, max_steps=5)
    resumed, rstate = dc.train(recs, tcfg, rig, resume=tmp_path / "latest")
    assert rstate.step == fstate.step == 7
    for k in full:
        assert full[k].tobytes() == resumed[k].tobytes(), k
    assert [r[2] for r in rstate.loss_log] == [r[2] for r in fstate.loss_log]


def test_temporal_stage_freezes_spatial_weights(tmp_path):
    recs, rig, tcfg = _train_fixture()
    dc.train(recs, tcfg, rig, out_dir=tmp_path)
    after_warmup, _, _, meta = dc.load_checkpoint(tmp_path / "ckpt-000004")
    final, state, cfg, _ = dc.load_checkpoint(tmp_path / "latest")
    assert meta["stage"] == "warmup" and state.stage == "temporal" and cfg == tcfg.model
    moved = {k for k in final if not np.array_equal(final[k], after_warmup[k])}
    assert moved and all(dc.is_temporal(k) for k in moved)
    assert any(k.endswith("temporal.gate") for k in moved)
    assert (tmp_path / "loss_log.json").exists()


def test_make_batch_overlap_and_tasks():
    recs, rig, tcfg = _train_fixture()
    clips = dc.prepare_records(recs, tcfg.model, rig)
    rng = np.random.default_rng(0)
    for _ in range(20):
        b = dc.make_batch(clips, tcfg, 4, rng)
        for i in range(tcfg.batch):
            T = int(b.mask[i].sum())
            assert T <= 3 and np.all(b.mask[i, :T] == 1)
            np.testing.assert_array_equal(b.inputs[i, :T], b.x0[i, :T])
            c = b.conds[i]
            assert (c.tokens is not None) == (c.mode in ("hdr", "both"))
            assert (c.ref is not None) == (c.mode in ("ref", "both"))
    tcfg.task = "delight"
    b = dc.make_batch(clips[:2], tcfg, 2, rng)
    assert all(c.mode == "none" for c in b.conds)
    with pytest.raises(ValueError):
        dc.make_batch(clips, tcfg, 9, rng)
    with pytest.raises(ValueError):
        dc.prepare_records(recs, tcfg.model, None)


def test_train_config_validation_and_lr():
    with pytest.raises(ValueError):
        dc.TrainConfig.from_dict({"task": "paint"})
    with pytest.raises(ValueError):
        dc.TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        dc.TrainConfig.from_dict({"stages": [{"name": "x", "steps": 1, "frames": 1}]})
    t = dc.TrainConfig.from_dict({"lr": 1.0, "lr_schedule": "cosine", "model": {"channels": [8, 8]}})
    assert t.model.channels == (8, 8)
    assert dc.lr_at(t, 0) == 1.0 and dc.lr_at(t, 200) == pytest.approx(0.5)
    assert dc.lr_at(t, 400) == 1.0 and dc.lr_at(t, 500) == 0.0
    assert dc.TrainConfig.from_dict(t.to_dict()) == t


def test_checkpoint_roundtrip(tmp_path):
    cfg = dc.mini_config()
    params = dc.init_params(cfg, 3)
    state = dc.TrainState(step=7, seed=2, stage="temporal", loss_log=[[0, "warmup", 1.5]])
    dc.optimizer_step(state, params, {"conv_in.w": np.ones_like(params["conv_in.w"])}, 0.1)
    dc.save_checkpoint(tmp_path / "c", params, state, cfg)
    p2, s2, c2, _ = dc.load_checkpoint(tmp_path / "c")
    assert c2 == cfg and s2.step == 8 and list(s2.m) == ["conv_in.w"]
    for k in params:
        assert p2[k].tobytes() == params[k].tobytes()
    (tmp_path / "d.json").write_text('{"tensors": [], "meta": {"kind": "clips"}}')
    (tmp_path / "d.lxpf").write_bytes(b"LXPF" + bytes([1, 0, 0, 0, 0, 0, 0, 0]))
    with pytest.raises(ValueError):
        dc.load_checkpoint(tmp_path / "d")
