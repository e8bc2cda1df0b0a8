import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from luxkit import sequencer as sq
from luxkit.diffusion_core import alpha, sigma


def test_reference_plan():
    plan = sq.plan_windows(108, 30, 4)
    assert plan.starts == (0, 26, 52, 78)
    assert plan.masks[0] == (0,) * 30
    assert all(m == (1,) * 4 + (0,) * 26 for m in plan.masks[1:])
    assert sq.plan_windows(30, 30, 4).starts == (0,)
    assert sq.plan_windows(31, 30, 4).starts == (0, 1)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.data())
def test_plan_properties(L, data):
    T = data.draw(st.integers(0, L - 1))
    total = data.draw(st.integers(L, 6 * L + 5))
    plan = sq.plan_windows(total, L, T)
    s = plan.starts
    assert s[0] == 0 and s[-1] + L == total
    assert all(b > a for a, b in zip(s, s[1:]))
    # consecutive windows overlap by at least T frames; only the last can overlap more
    for k in range(1, len(s)):
        assert plan.overlap(k) >= T
        if k < len(s) - 1:
            assert plan.overlap(k) == T
    assert sq.WindowPlan.from_json(plan.to_json()) == plan


def test_plan_errors():
    with pytest.raises(ValueError):
        sq.plan_windows(10, 30, 4)
    with pytest.raises(ValueError):
        sq.plan_windows(40, 4, 4)


def test_overlap_distribution():
    rng = np.random.default_rng(0)
    n = 100_000
    counts = np.bincount([sq.sample_overlap_T(rng) for _ in range(n)], minlength=5) / n
    assert np.all(np.abs(counts - np.array(sq.OVERLAP_PROBS)) <= 0.01)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.data())
def test_copy_through_roundtrips_any_plan(L, data):
    T = data.draw(st.integers(0, L - 1))
    total = data.draw(st.integers(L, 3 * L))
    x = np.random.default_rng(total).normal(size=(total, 2, 2, 3)).astype(np.float32)
    out = sq.autoregressive_generate(sq.CopyThroughModel(), x, None, sq.plan_windows(total, L, T), steps=3)
    assert out.tobytes() == x.tobytes()


class DriftModel:
    """x0-hat = inputs + 0.1 + noise-dependent term, so every window changes its inputs."""

    def __call__(self, x_t, t, inputs, mask, context):
        target = np.asarray(inputs, np.float64) + 0.1 + 0.01 * np.tanh(x_t)
        return (alpha(t) * x_t - target) / sigma(t)


def test_overlap_frames_reuse_previous_predictions_bitwise():
    x = np.zeros((20, 2, 2, 1), np.float32)
    plan = sq.plan_windows(20, 8, 3)
    trace = []
    out = sq.autoregressive_generate(DriftModel(), x, None, plan, seed=5, steps=4, trace=trace)
    assert plan.starts == (0, 5, 10, 12) and len(trace) == 4
    for k in range(1, plan.n_windows):
        win, _ = trace[k]
        _, prev = trace[k - 1]
        off = plan.starts[k] - plan.starts[k - 1]
        assert win[:plan.T].tobytes() == prev[off:off + plan.T].tobytes()
    # stitched output keeps every frame from the window that first produced it
    done = 0
    for s, (_, pred) in zip(plan.starts, trace):
        np.testing.assert_array_equal(out[done:s + 8], pred[done - s:])
        done = s + 8
    assert done == 20
    again = sq.autoregressive_generate(DriftModel(), x, None, plan, seed=5, steps=4)
    assert again.tobytes() == out.tobytes()


def test_generate_checks_length():
    with pytest.raises(ValueError):
        sq.autoregressive_generate(sq.CopyThroughModel(), np.zeros((5, 1)), None, sq.plan_windows(6, 3, 1))
