import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from luxkit import autograd as ag


def numeric_grad(fn, arrays, i, h=1e-6):
    x = arrays[i]
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = fn(*arrays)
        x[idx] = old - h
        fm = fn(*arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def check_op(op, shapes, seed=0, positive=False):
    """Compare reverse-mode grads of ``sum(op(...) * R)`` with central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    out_shape = op(*[ag.Tensor(a) for a in arrays]).shape
    R = rng.normal(size=out_shape)

    def value(*arrs):
        return float((op(*[ag.Tensor(a) for a in arrs]).data * R).sum())

    params = [ag.parameter(a) for a in arrays]
    out = op(*params)
    ag.mean(ag.mul(out, R)).backward()
    n = R.size
    for i, p in enumerate(params):
        np.testing.assert_allclose(p.grad * n, numeric_grad(value, arrays, i), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("name,op,shapes", [
    ("add_broadcast", lambda a, b: a + b, [(3, 4), (4,)]),
    ("sub_rsub", lambda a, b: (a - b) + (1.5 - a), [(2, 3), (2, 1)]),
    ("mul_broadcast", lambda a, b: a * b, [(2, 3, 4), (1, 4)]),
    ("neg", lambda a: -a, [(5,)]),
    ("silu", ag.silu, [(4, 5)]),
    ("square", ag.square, [(3, 3)]),
    ("mean", lambda a: ag.mean(a), [(2, 5)]),
    ("reshape", lambda a: ag.reshape(a, (6, 2)) * a.reshape(12, 1).reshape(6, 2), [(3, 4)]),
    ("transpose", lambda a: ag.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    ("broadcast_to", lambda a: ag.broadcast_to(a, (3, 2, 4)), [(2, 1)]),
    ("concat", lambda a, b: ag.concat([a, b, a], axis=0), [(2, 3), (1, 3)]),
    ("matmul_batched", lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    ("linear", lambda x, w, b: ag.linear(x, w, b), [(3, 4), (4, 2), (2,)]),
    ("softmax", lambda a: ag.softmax(a, -1), [(3, 5)]),
    ("softmax_axis0", lambda a: ag.softmax(a, 0), [(4, 2)]),
    ("attention", ag.attention, [(2, 3, 4), (2, 5, 4), (2, 5, 3)]),
    ("conv3", lambda x, w, b: ag.conv2d(x, w, b), [(2, 5, 6, 3), (3, 3, 3, 4), (4,)]),
    ("conv3_stride2", lambda x, w, b: ag.conv2d(x, w, b, stride=2), [(1, 6, 6, 2), (3, 3, 2, 3), (3,)]),
    ("conv1", lambda x, w: ag.conv2d(x, w), [(1, 3, 3, 2), (1, 1, 2, 2)]),
    ("avgpool2", ag.avgpool2, [(2, 4, 6, 3)]),
    ("upsample2", ag.upsample2, [(1, 2, 3, 2)]),
])
def test_op_gradients(name, op, shapes):
    check_op(op, shapes)


def brute_conv(x, w, b, stride):
    k = w.shape[0]
    pad = k // 2
    n, h, wd, _ = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((n, ho, wo, w.shape[3]))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k, :]
            out[:, i, j] = np.einsum("nabc,abcd->nd", patch, w) + b
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_forward_matches_loops(stride):
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 7, 6, 3)), rng.normal(size=(3, 3, 3, 5)), rng.normal(size=5)
    got = ag.conv2d(ag.Tensor(x), ag.Tensor(w), ag.Tensor(b), stride).data
    np.testing.assert_allclose(got, brute_conv(x, w, b, stride), rtol=1e-12)


def test_attention_forward_matches_formula():
    rng = np.random.default_rng(2)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(6, 4)), rng.normal(size=(6, 2))
    logits = q @ k.T / 2.0
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    np.testing.assert_allclose(ag.attention(ag.Tensor(q), ag.Tensor(k), ag.Tensor(v)).data, p @ v, rtol=1e-12)


def test_shared_subgraph_accumulates():
    x = ag.parameter(np.array([3.0]))
    y = x * x + x * 2.0
    ag.mean(y).backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_dtype_is_preserved():
    x = ag.parameter(np.ones((1, 4, 4, 2), np.float32))
    w = ag.parameter(np.ones((3, 3, 2, 2), np.float32))
    y = ag.mean(ag.silu(ag.avgpool2(ag.conv2d(x, w))) + 1.0)
    assert y.data.dtype == np.float32
    y.backward()
    assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32


def test_constants_get_no_grad():
    a = ag.Tensor(np.ones(3))
    b = ag.parameter(np.ones(3))
    ag.mean(a * b).backward()
    assert a.grad is None and not a.requires_grad
    np.testing.assert_allclose(b.grad, 1 / 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(n, m, seed):
    a = np.random.default_rng(seed).normal(0, 30, (n, m))
    s = ag.softmax(ag.Tensor(a)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, rtol=1e-12)
    assert np.all(s >= 0)
