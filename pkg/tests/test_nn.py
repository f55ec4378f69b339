import io
import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from artspot.errors import DomainError, MissingGradientError, ShapeError
from artspot.nn import ops
from artspot.nn.gradcheck import NonFiniteError, grad_check
from artspot.nn.losses import BCEWithLogits, CrossEntropy, FocalLoss, SmoothL1, bce, cross_entropy, focal_loss, smooth_l1
from artspot.nn.optim import clip_grad_norm, global_grad_norm, sgd_momentum_step
from artspot.nn.tensor import (
    ParamStore,
    Tensor,
    load_checkpoint,
    read_tensor,
    save_checkpoint,
    tensor_from_bytes,
    tensor_to_bytes,
)


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for r in range(ho):
                for q in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for a in range(kh):
                            for e in range(kw):
                                acc += w[oc, ic, a, e] * xp[i, ic, r * sh + a, q * sw + e]
                    out[i, oc, r, q] = acc
    return out


def naive_attention(x, wq, wk, wv):
    w, n, c = x.shape
    out = np.zeros_like(x)
    for b in range(n):
        X = x[:, b, :]
        for i in range(w):
            q = X[i] @ wq
            s = np.array([q @ (X[j] @ wk) / math.sqrt(c) for j in range(w)])
            s = np.exp(s - s.max())
            s /= s.sum()
            out[i, b] = sum(s[j] * (X[j] @ wv) for j in range(w)) + X[i]
    return out


def test_conv_box_sum():
    y = ops.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)
    assert y[0, 0, 1, 1] == 9.0
    assert y[0, 0, 0, 0] == 4.0 and y[0, 0, 2, 2] == 4.0


def test_conv_stride21_shape():
    y = ops.conv2d(np.zeros((1, 2, 8, 32)), np.zeros((3, 2, 3, 3)), np.zeros(3), (2, 1), 1)
    assert y.shape == (1, 3, 4, 32)


@pytest.mark.parametrize("stride,pad", [((1, 1), (1, 1)), ((2, 1), (1, 1)), ((2, 2), (0, 0)), ((1, 2), (2, 0))])
def test_conv_matches_loop_oracle(rng, stride, pad):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(ops.conv2d(x, w, b, stride, pad), naive_conv(x, w, b, stride, pad), atol=1e-10)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        ops.conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        ops.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


def test_conv_without_input_grad(rng):
    x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    full, part = ops.Conv2d(1, 1), ops.Conv2d(1, 1, input_grad=False)
    g = rng.standard_normal((1, 3, 5, 5))
    full.forward(x, w, b)
    part.forward(x, w, b)
    gx, gw, gb = full.backward(g)
    gx2, gw2, gb2 = part.backward(g)
    assert gx2 is None
    np.testing.assert_allclose(gw, gw2)
    np.testing.assert_allclose(gb, gb2)


def test_simple_ops():
    assert ops.relu(np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]
    np.testing.assert_allclose(ops.softmax(np.zeros(4)), 0.25)
    x = np.arange(12.0).reshape(1, 1, 2, 6)
    np.testing.assert_allclose(ops.avg_over_height(x)[0, 0], (x[0, 0, 0] + x[0, 0, 1]) / 2)
    assert ops.avg_over_height(x).shape == (1, 1, 6)
    np.testing.assert_allclose(ops.linear(np.ones((2, 3)), np.ones((3, 4)), np.arange(4.0)), [[3, 4, 5, 6]] * 2)
    assert ops.sigmoid(np.array([-800.0, 0.0, 800.0])).tolist() == [0.0, 0.5, 1.0]


def test_softmax_sums_to_one(rng):
    x = rng.standard_normal((5, 7, 9)) * 30
    for axis in (0, 1, 2):
        assert np.max(np.abs(ops.softmax(x, axis).sum(axis) - 1.0)) <= 1e-12


def test_attention_length_one(rng):
    x = rng.standard_normal((1, 2, 4))
    wq, wk, wv = (rng.standard_normal((4, 4)) for _ in range(3))
    y = ops.self_attention(x, wq, wk, wv)
    np.testing.assert_allclose(y, x @ wv + x, atol=1e-12)


def test_attention_permutation_equivariance(rng):
    x = rng.standard_normal((6, 2, 4))
    ws = [rng.standard_normal((4, 4)) for _ in range(3)]
    perm = rng.permutation(6)
    np.testing.assert_allclose(ops.self_attention(x[perm], *ws), ops.self_attention(x, *ws)[perm], atol=1e-12)


def test_attention_loop_oracle(rng):
    x = rng.standard_normal((4, 1, 8))
    ws = [rng.standard_normal((8, 8)) * 0.5 for _ in range(3)]
    assert np.max(np.abs(ops.self_attention(x, *ws) - naive_attention(x, *ws))) <= 1e-10


def test_attention_shape_error():
    with pytest.raises(ShapeError):
        ops.self_attention(np.zeros((3, 1, 4)), np.zeros((4, 4)), np.zeros((3, 3)), np.zeros((4, 4)))


def test_instance_norm_statistics(rng):
    x = rng.standard_normal((3, 2, 4, 5)) * 7 + 3
    y = ops.InstanceNorm(eps=0.0).forward(x)
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=(2, 3)), 1.0, atol=1e-12)


def test_smooth_l1_values():
    assert smooth_l1(np.array([0.5]), np.array([0.0])) == pytest.approx(0.125)
    assert smooth_l1(np.array([2.0]), np.array([0.0])) == pytest.approx(1.5)
    assert smooth_l1(np.array([1.0]), np.array([0.0])) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        SmoothL1(0.0)
    with pytest.raises(ShapeError):
        smooth_l1(np.zeros(2), np.zeros(3))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.lists(st.floats(-50, 50), min_size=8, max_size=8))
def test_smooth_l1_nonnegative(p, t):
    p = np.array(p)
    t = np.array(t[: len(p)])
    v = smooth_l1(p, t)
    assert v >= 0
    if np.all(p == t):
        assert v == 0
    elif np.max(np.abs(p - t)) > 1e-100:  # smaller gaps underflow when squared
        assert v > 0


def test_focal_bce_ce_values():
    assert focal_loss(np.zeros(1), np.ones(1)) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-12)
    assert focal_loss(np.zeros(1), np.ones(1)) == pytest.approx(0.043322, abs=1e-6)
    assert bce(np.zeros(1), np.full(1, 0.5)) == pytest.approx(math.log(2))
    logits = np.array([[1e4, 0.0, 0.0]])
    assert cross_entropy(logits, np.array([0])) == 0.0


def test_focal_without_positives_normalizes_by_one():
    z = np.array([0.3, -1.0])
    y = np.zeros(2)
    p = 1 / (1 + np.exp(-z))
    expect = np.sum(-(0.75) * p**2 * np.log(1 - p))
    assert focal_loss(z, y) == pytest.approx(expect, rel=1e-12)


def test_cross_entropy_pad():
    logits = np.array([[[2.0, 0.0, -1.0], [0.0, 5.0, 0.0]]])
    lab = np.array([[0, 2]])
    lsm = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    assert cross_entropy(logits, lab, pad_index=2) == pytest.approx(-lsm[0, 0, 0])
    assert cross_entropy(logits, lab) == pytest.approx(-(lsm[0, 0, 0] + lsm[0, 1, 2]) / 2)
    with pytest.raises(ShapeError):
        cross_entropy(logits, np.array([0, 1, 2]))


def test_grad_check_examples(rng):
    x = rng.standard_normal((3, 4))
    assert grad_check(ops.Linear(), [x, rng.standard_normal((4, 5)), rng.standard_normal(5)]) <= 1e-9
    r = rng.standard_normal((5, 5))
    r = np.where(np.abs(r) < 0.01, 0.5, r)
    assert grad_check(ops.ReLU(), [r]) <= 1e-7
    conv_in = [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]
    assert grad_check(ops.Conv2d(1, 1), conv_in, eps=1e-3) <= 1e-6


def test_grad_check_catches_wrong_backward(rng):
    class Bad(ops.Sigmoid):
        def backward(self, gy):
            (g,) = super().backward(gy)
            return (-g,)

    assert grad_check(Bad(), [rng.standard_normal(6)]) > 0.5


def test_grad_check_errors(rng):
    with pytest.raises(DomainError):
        grad_check(ops.ReLU(), [np.ones(3)], eps=0.1)

    class Inf:
        def forward(self, x):
            return x / 0.0

        def backward(self, g):
            return (g,)

    with np.errstate(divide="ignore"), pytest.raises(NonFiniteError):
        grad_check(Inf(), [np.ones(2)])


OPS = [
    ("softmax", lambda r: (ops.Softmax(0), [r.standard_normal((4, 3))])),
    ("sigmoid", lambda r: (ops.Sigmoid(), [r.standard_normal((4, 3))])),
    ("upsample", lambda r: (ops.UpsampleNearest(2), [r.standard_normal((1, 2, 2, 3))])),
    ("avg", lambda r: (ops.AvgOverHeight(), [r.standard_normal((2, 2, 3, 4))])),
    ("norm", lambda r: (ops.InstanceNorm(), [r.standard_normal((2, 2, 3, 4))])),
    ("attn", lambda r: (ops.SelfAttention(), [r.standard_normal((3, 2, 4))] + [r.standard_normal((4, 4)) for _ in range(3)])),
    ("conv_s2", lambda r: (ops.Conv2d(2, 1), [r.standard_normal((1, 2, 6, 5)), r.standard_normal((2, 2, 3, 3)), r.standard_normal(2)])),
]


@pytest.mark.parametrize("name,make", OPS, ids=[n for n, _ in OPS])
def test_ops_grad_check(name, make, rng):
    op, inputs = make(rng)
    assert grad_check(op, inputs) <= 1e-4


def test_loss_grad_checks(rng):
    y = (rng.random((4, 5)) < 0.3).astype(float)
    m = np.ones((4, 5))

    class Fixed:
        def __init__(self, loss, *extra):
            self.loss, self.extra = loss, extra

        def forward(self, z):
            return self.loss.forward(z, *self.extra)

        def backward(self, g):
            return (self.loss.backward(g)[0],)

    z = rng.standard_normal((4, 5))
    assert grad_check(Fixed(FocalLoss(), y, m), [z]) <= 1e-4
    assert grad_check(Fixed(BCEWithLogits(), rng.random((4, 5)), m), [z]) <= 1e-4
    assert grad_check(Fixed(CrossEntropy(), rng.integers(0, 5, 4)), [z]) <= 1e-4
    t = z + np.where(rng.random((4, 5)) < 0.5, 0.3, 2.5)
    assert grad_check(Fixed(SmoothL1(1.0), t), [z]) <= 1e-4


def _store(value=1.0):
    s = ParamStore({"a": np.full(3, value), "b": np.full((2, 2), value)})
    return s


def test_sgd_examples():
    s = _store()
    s.zero_grad()
    sgd_momentum_step(s, 0.1, 0.9)
    assert np.all(s["a"] == 1.0)

    s = _store()
    s.zero_grad()
    s.grad("a", np.full(3, 2.0))
    s.grad("b", np.zeros((2, 2)))
    sgd_momentum_step(s, 0.1, 0.0)
    np.testing.assert_allclose(s["a"], 1.0 - 0.2)

    s = _store(0.0)
    deltas = []
    for _ in range(2):
        s.zero_grad()
        s.grad("a", np.ones(3))
        s.grad("b", np.ones((2, 2)))
        before = s["a"].copy()
        sgd_momentum_step(s, 0.5, 0.9)
        deltas.append(before - s["a"])
    np.testing.assert_allclose(deltas[1], 0.5 * 1.9, rtol=1e-12)


def test_sgd_missing_gradient():
    s = _store()
    s.params["a"].zero_grad()
    with pytest.raises(MissingGradientError, match="b"):
        sgd_momentum_step(s, 0.1)


def test_clip_grad_norm():
    s = _store()
    s.zero_grad()
    s.grad("a", np.full(3, 3.0))
    s.grad("b", np.full((2, 2), 4.0))
    norm = global_grad_norm(s)
    assert norm == pytest.approx(math.sqrt(27 + 64))
    clip_grad_norm(s, 1.0)
    assert global_grad_norm(s) == pytest.approx(1.0, rel=1e-9)


def test_tensor_and_store():
    t = Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        t.accumulate(np.zeros(3))
    t.accumulate(np.ones((2, 3)))
    t.accumulate(np.ones((2, 3)))
    assert t.grad.sum() == 12
    s = _store()
    with pytest.raises(KeyError):
        s.add("a", np.zeros(1))
    assert s.num_parameters() == 7
    assert all(s.momentum[k].shape == s[k].shape for k in s)


def test_ten1_byte_layout():
    arr = np.arange(6, dtype=np.float64).reshape(2, 3)
    raw = tensor_to_bytes(arr)
    expect = b"TEN1" + struct.pack("<III", 2, 2, 3) + struct.pack("<6f", *range(6))
    assert raw == expect
    back = tensor_from_bytes(raw)
    assert back.dtype == np.float32 and back.shape == (2, 3)
    np.testing.assert_array_equal(back, arr)
    with pytest.raises(ValueError):
        tensor_from_bytes(b"TEN2" + raw[4:])
    with pytest.raises(ValueError):
        read_tensor(io.BytesIO(raw[:-2]))


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"z.w": rng.standard_normal((3, 2)).astype(np.float32), "a.b": np.zeros(4, np.float32)}
    p = tmp_path / "m.ten"
    save_checkpoint(p, tensors)
    back = load_checkpoint(p)
    assert list(back) == ["a.b", "z.w"]
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    p2 = tmp_path / "m2.ten"
    save_checkpoint(p2, dict(reversed(list(tensors.items()))))
    assert p.read_bytes() == p2.read_bytes()
    (tmp_path / "bad.ten").write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ten")
