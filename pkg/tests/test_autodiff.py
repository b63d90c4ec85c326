from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairattack import autodiff as ad

from conftest import analytic_grad, assert_grad_close, finite_diff_grad


def rng(seed):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# finite-difference checks, one per primitive


def test_grad_add_sub_mul():
    r = rng(0)
    a0 = r.normal(size=(4, 5))
    b0 = r.normal(size=(4, 5))
    coords = list(range(20))

    def np_loss(a):
        return float(((a + b0) * (a - b0) * a).sum())

    def t_loss(a):
        b = ad.Tensor(b0)
        return ad.sum_all(ad.mul(ad.mul(ad.add(a, b), ad.sub(a, b)), a))

    assert_grad_close(np_loss, t_loss, a0, coords)


def test_grad_mul_scalar():
    a0 = rng(1).normal(size=(7,))
    assert_grad_close(
        lambda a: float((a * -2.5).sum()),
        lambda a: ad.sum_all(ad.mul_scalar(a, -2.5)),
        a0,
        list(range(7)),
    )


def test_grad_matmul():
    r = rng(2)
    a0 = r.normal(size=(3, 4))
    w = r.normal(size=(4, 2))
    assert_grad_close(
        lambda a: float(((a @ w) ** 2).sum()),
        lambda a: ad.sq_l2_norm(ad.matmul(a, ad.Tensor(w))),
        a0,
        list(range(12)),
    )


def test_grad_matmul_weight_side():
    r = rng(3)
    x = r.normal(size=(5, 3))
    w0 = r.normal(size=(3, 2))
    assert_grad_close(
        lambda w: float(((x @ w) ** 2).sum()),
        lambda w: ad.sq_l2_norm(ad.matmul(ad.Tensor(x), w)),
        w0,
        list(range(6)),
    )


def test_grad_conv2d_input_and_weight():
    r = rng(4)
    x0 = r.normal(size=(2, 3, 8, 8))
    w0 = r.normal(size=(4, 3, 3, 3)) * 0.3

    def np_conv(x, w, stride):
        b, c, h, wd = x.shape
        f, _, kh, kw = w.shape
        oh = (h - kh) // stride + 1
        ow = (wd - kw) // stride + 1
        out = np.zeros((b, f, oh, ow))
        for bi in range(b):
            for fi in range(f):
                for i in range(oh):
                    for j in range(ow):
                        patch = x[bi, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                        out[bi, fi, i, j] = (patch * w[fi]).sum()
        return out

    for stride in (1, 2):
        # forward agrees with the naive loop
        got = ad.conv2d(ad.Tensor(x0), ad.Tensor(w0), stride=stride).data
        want = np_conv(x0, w0, stride)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)

        coords = list(r.choice(x0.size, size=12, replace=False))
        assert_grad_close(
            lambda x, s=stride: float(np_conv(x, w0, s).sum()),
            lambda x, s=stride: ad.sum_all(ad.conv2d(x, ad.Tensor(w0), stride=s)),
            x0,
            coords,
        )
        wc = list(r.choice(w0.size, size=12, replace=False))
        assert_grad_close(
            lambda w, s=stride: float(np_conv(x0, w.reshape(w0.shape), s).sum()),
            lambda w, s=stride: ad.sum_all(
                ad.conv2d(ad.Tensor(x0), ad.reshape(w, w0.shape), stride=s)
            ),
            w0.reshape(-1),
            wc,
        )


def test_grad_avgpool2d():
    x0 = rng(5).normal(size=(2, 3, 6, 6))
    coords = list(rng(6).choice(x0.size, size=16, replace=False))
    assert_grad_close(
        lambda x: float(x.reshape(2, 3, 3, 2, 3, 2).mean(axis=(3, 5)).sum() ** 2),
        lambda x: ad.sq_l2_norm(ad.sum_all(ad.avgpool2d(x, 2))),
        x0,
        coords,
    )


def test_grad_relu_away_from_kink():
    x0 = rng(7).normal(size=(50,))
    x0[np.abs(x0) < 1e-2] = 0.5  # keep FD probes off the kink
    assert_grad_close(
        lambda x: float(np.maximum(x, 0.0).sum()),
        lambda x: ad.sum_all(ad.relu(x)),
        x0,
        list(range(50)),
    )


def test_grad_reductions_and_reshape():
    x0 = rng(8).normal(size=(3, 4, 5))
    coords = list(range(0, 60, 7))
    assert_grad_close(
        lambda x: float(x.mean() * x.sum()),
        lambda x: ad.mul(ad.mean(x), ad.sum_all(ad.flatten(x))),
        x0,
        coords,
    )


def test_grad_l2_normalize_whole_and_axis():
    x0 = rng(9).normal(size=(4, 6)) + 0.1
    t = rng(10).normal(size=(4, 6))

    def np_whole(x):
        u = x / np.linalg.norm(x)
        return float(((u - t) ** 2).sum())

    assert_grad_close(
        np_whole,
        lambda x: ad.sq_l2_norm(ad.sub(ad.l2_normalize(x), ad.Tensor(t))),
        x0,
        list(range(24)),
    )

    def np_rows(x):
        u = x / np.linalg.norm(x, axis=1, keepdims=True)
        return float(((u - t) ** 2).sum())

    assert_grad_close(
        np_rows,
        lambda x: ad.sq_l2_norm(ad.sub(ad.l2_normalize(x, axis=1), ad.Tensor(t))),
        x0,
        list(range(24)),
    )


def test_grad_sqrt_softplus():
    x0 = np.abs(rng(11).normal(size=(9,))) + 0.5
    assert_grad_close(
        lambda x: float(np.sqrt(x).sum()),
        lambda x: ad.sum_all(ad.sqrt(x)),
        x0,
        list(range(9)),
    )
    y0 = rng(12).normal(size=(9,)) * 3
    assert_grad_close(
        lambda y: float((np.maximum(y, 0) + np.log1p(np.exp(-np.abs(y)))).sum()),
        lambda y: ad.sum_all(ad.softplus(y)),
        y0,
        list(range(9)),
    )


def test_grad_softmax_xent():
    r = rng(13)
    z0 = r.normal(size=(6, 4))
    labels = r.integers(0, 4, size=6)

    def np_loss(z):
        z = z.reshape(6, 4)
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        return float((lse - z[np.arange(6), labels]).mean())

    assert_grad_close(
        np_loss,
        lambda z: ad.softmax_xent(z, labels),
        z0,
        list(range(24)),
    )


def test_grad_composite_conv_net():
    # conv -> relu -> pool -> flatten -> matmul -> normalize -> distance,
    # the same shape of computation the attack losses use
    r = rng(14)
    x0 = r.normal(size=(1, 2, 8, 8)) * 0.5
    w1 = r.normal(size=(3, 2, 3, 3)) * 0.4
    w2 = r.normal(size=(27, 5)) * 0.3
    tgt = r.normal(size=(1, 5))
    tgt /= np.linalg.norm(tgt)

    def np_loss(x):
        x = x.reshape(1, 2, 8, 8)
        out = np.zeros((1, 3, 6, 6))
        for fi in range(3):
            for i in range(6):
                for j in range(6):
                    out[0, fi, i, j] = (x[0, :, i : i + 3, j : j + 3] * w1[fi]).sum()
        h = np.maximum(out, 0.0)
        p = h.reshape(1, 3, 3, 2, 3, 2).mean(axis=(3, 5))
        f = p.reshape(1, 27) @ w2
        u = f / np.linalg.norm(f)
        return float(((u - tgt) ** 2).sum())

    def t_loss(x):
        h = ad.relu(ad.conv2d(x, ad.Tensor(w1)))
        p = ad.avgpool2d(h, 2)
        f = ad.matmul(ad.reshape(p, (1, 27)), ad.Tensor(w2))
        u = ad.l2_normalize(f)
        return ad.sq_l2_norm(ad.sub(u, ad.Tensor(tgt)))

    coords = list(r.choice(x0.size, size=20, replace=False))
    assert_grad_close(np_loss, t_loss, x0, coords)


# ---------------------------------------------------------------------------
# tape mechanics


def test_tape_records_and_replay():
    tape = ad.Tape()
    x = ad.Tensor(rng(20).normal(size=(3, 3)), requires_grad=True, tape=tape)
    y = ad.sum_all(ad.relu(ad.mul_scalar(x, 2.0)))
    assert len(tape) == 3
    ad.backward(y)
    assert tape.replay() == 3


def test_tape_replay_detects_tampering():
    tape = ad.Tape()
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True, tape=tape)
    y = ad.sum_all(x)
    y.data = y.data + 1.0
    with pytest.raises(AssertionError, match="replay"):
        tape.replay()


def test_backward_zero_grad_for_unused_leaf():
    tape = ad.Tape()
    x = ad.Tensor(np.ones(3), requires_grad=True, tape=tape)
    z = ad.Tensor(np.ones(3), requires_grad=True, tape=tape)
    loss = ad.sum_all(x)
    grads = ad.backward(loss)
    assert np.array_equal(grads[z], np.zeros(3))
    assert np.array_equal(grads[x], np.ones(3))


def test_backward_accumulates_reused_input():
    tape = ad.Tape()
    x = ad.Tensor(np.array([2.0]), requires_grad=True, tape=tape)
    loss = ad.sum_all(ad.add(ad.mul(x, x), x))  # x^2 + x, d/dx = 2x + 1
    grads = ad.backward(loss)
    assert np.allclose(grads[x], [5.0])


def test_backward_requires_scalar_and_tape():
    tape = ad.Tape()
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True, tape=tape)
    y = ad.relu(x)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(y)
    with pytest.raises(ValueError, match="tape"):
        ad.backward(ad.Tensor(np.asarray(1.0)))


def test_mixing_tapes_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    a = ad.Tensor(np.ones(2), requires_grad=True, tape=t1)
    b = ad.Tensor(np.ones(2), requires_grad=True, tape=t2)
    with pytest.raises(ValueError, match="tape"):
        ad.add(a, b)


def test_requires_grad_needs_tape():
    with pytest.raises(ValueError, match="tape"):
        ad.Tensor(np.ones(2), requires_grad=True)


# ---------------------------------------------------------------------------
# numerics guards and shape errors


def test_nonfinite_input_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.Tensor(np.array([1.0, np.nan]))
    with pytest.raises(ad.NonFiniteError):
        ad.Tensor(np.array([np.inf]))


def test_l2_normalize_zero_norm_is_error():
    with pytest.raises(ad.SingularInputError):
        ad.l2_normalize(np.zeros(4))
    with pytest.raises(ad.SingularInputError):
        ad.l2_normalize(np.full(4, 1e-13))
    # one zero row among fine rows still trips the per-axis guard
    x = np.ones((2, 3))
    x[1] = 0.0
    with pytest.raises(ad.SingularInputError):
        ad.l2_normalize(x, axis=1)


def test_shape_errors():
    with pytest.raises(ValueError):
        ad.matmul(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(ValueError):
        ad.add(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(ValueError):
        ad.conv2d(np.ones((1, 2, 4, 4)), np.ones((3, 5, 3, 3)))
    with pytest.raises(ValueError):
        ad.conv2d(np.ones((1, 2, 2, 2)), np.ones((3, 2, 3, 3)))
    with pytest.raises(ValueError):
        ad.avgpool2d(np.ones((1, 2, 5, 4)), 2)
    with pytest.raises(ValueError):
        ad.reshape(np.ones(6), (4, 2))


def test_sign_semantics():
    x = np.array([-3.0, -0.0, 0.0, 2.5])
    assert np.array_equal(ad.sign(x), [-1.0, 0.0, 0.0, 1.0])
    t = ad.Tensor(x)
    assert np.array_equal(ad.sign(t).data, [-1.0, 0.0, 0.0, 1.0])


def test_forward_op_dispatch():
    x = np.arange(6, dtype=np.float64).reshape(2, 3) + 1
    assert np.array_equal(ad.forward_op("relu", x).data, x)
    assert ad.forward_op("sum", x).item() == 21.0
    assert ad.forward_op("mean", x).item() == 3.5
    assert ad.forward_op("flatten", x).data.shape == (6,)
    assert np.allclose(ad.forward_op("mul_scalar", x, c=2.0).data, 2 * x)
    y = ad.forward_op("l2_normalize", x)
    assert np.isclose(np.linalg.norm(y.data), 1.0)
    with pytest.raises(ValueError, match="unknown op"):
        ad.forward_op("tanh", x)


# ---------------------------------------------------------------------------
# properties


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_prop_flatten_preserves_order_and_values(seed):
    x = np.random.default_rng(seed).normal(size=(2, 3, 4))
    f = ad.flatten(ad.Tensor(x))
    assert np.array_equal(f.data, x.reshape(-1))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_prop_l2_normalize_unit_norm(seed):
    x = np.random.default_rng(seed).normal(size=(8,))
    if np.linalg.norm(x) <= 1e-12:
        return
    u = ad.l2_normalize(ad.Tensor(x)).data
    assert abs(np.linalg.norm(u) - 1.0) < 1e-12


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_prop_sq_l2_norm_nonneg_and_exact(seed):
    x = np.random.default_rng(seed).normal(size=(11,))
    v = ad.sq_l2_norm(ad.Tensor(x)).item()
    assert v >= 0.0
    assert np.isclose(v, float((x * x).sum()), rtol=0, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_prop_replay_bit_exact(seed):
    r = np.random.default_rng(seed)
    tape = ad.Tape()
    x = ad.Tensor(r.normal(size=(1, 2, 6, 6)), requires_grad=True, tape=tape)
    w = ad.Tensor(r.normal(size=(3, 2, 3, 3)), requires_grad=True, tape=tape)
    loss = ad.mean(ad.relu(ad.conv2d(x, w)))
    ad.backward(loss)
    assert tape.replay() == len(tape)
