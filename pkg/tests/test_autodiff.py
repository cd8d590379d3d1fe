"""Engine tests: forward contracts of every primitive, backward
accumulation semantics, purity, and finite-difference agreement over
repeated random draws."""

import numpy as np
import pytest

from protoseg.autodiff import (Tensor, add, backward, channel_linear,
                               clamp_min, concat_channels, conv2d,
                               finite_diff_gradcheck, log, matmul2,
                               maxpool2x2, mul, no_grad, reduce, relu,
                               softmax_channels, sum_all,
                               upsample_nearest2x2)
from protoseg.checks import _away_from, _separated_windows

N_RANDOM_CASES = 20
TOL = 1e-5


def _rng(seed):
    return np.random.default_rng(seed)


def _proj(shape, seed):
    return Tensor(_rng(seed).normal(size=shape))


# ---------------------------------------------------------------------------
# forward contracts

def test_conv_identity_kernel():
    x = Tensor(np.array([[[[5.0]]]]))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = conv2d(x, Tensor(k), Tensor(np.zeros(1)))
    assert out.data[0, 0, 0, 0] == pytest.approx(5.0)


def test_conv_border_counts_with_ones():
    x = Tensor(np.ones((1, 1, 4, 4)))
    out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1))).data[0, 0]
    assert out[1, 1] == pytest.approx(9.0)
    assert out[0, 0] == pytest.approx(4.0)
    assert out[0, 1] == pytest.approx(6.0)


def test_conv_channel_mismatch_rejected():
    x = Tensor(np.ones((1, 2, 4, 4)))
    with pytest.raises(ValueError, match="channels"):
        conv2d(x, Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))


def test_relu_values_and_dead_grad():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    out = relu(x)
    assert out.data.tolist() == [0.0, 0.0, 2.0]
    neg = Tensor(-np.abs(_rng(0).normal(size=(3, 3))) - 0.1, requires_grad=True)
    loss = sum_all(relu(neg))
    backward(loss)
    assert (relu(neg).data == 0).all()
    assert (neg.grad == 0).all()


def test_maxpool_single_window_and_tie_gradient():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    out = maxpool2x2(x)
    assert out.data[0, 0, 0, 0] == 4.0
    const = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
    backward(sum_all(maxpool2x2(const)))
    assert const.grad[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_odd_size_rejected():
    with pytest.raises(ValueError, match="even"):
        maxpool2x2(Tensor(np.zeros((1, 1, 3, 4))))


def test_upsample_block_and_gradient_sum():
    x = Tensor(np.array([[[[7.0]]]]), requires_grad=True)
    out = upsample_nearest2x2(x)
    assert out.data[0, 0].tolist() == [[7.0, 7.0], [7.0, 7.0]]
    backward(sum_all(out))
    assert x.grad[0, 0, 0, 0] == 4.0


def test_pool_of_upsample_is_identity():
    x = _rng(1).normal(size=(2, 3, 4, 4))
    out = maxpool2x2(upsample_nearest2x2(Tensor(x)))
    assert (out.data == x).all()


def test_concat_shapes_and_slice_recovers_first():
    a = Tensor(_rng(2).normal(size=(2, 2, 3, 3)))
    b = Tensor(_rng(3).normal(size=(2, 3, 3, 3)))
    out = concat_channels(a, b)
    assert out.shape == (2, 5, 3, 3)
    assert (out.data[:, :2] == a.data).all()
    with pytest.raises(ValueError, match="mismatch"):
        concat_channels(a, Tensor(np.zeros((2, 3, 4, 4))))


def test_channel_linear_identity_and_zero():
    f = Tensor(_rng(4).normal(size=(2, 3, 4, 4)))
    assert np.allclose(channel_linear(f, Tensor(np.eye(3))).data, f.data)
    assert (channel_linear(f, Tensor(np.zeros((3, 5)))).data == 0).all()


def test_channel_linear_matches_per_pixel_loop():
    f = _rng(5).normal(size=(2, 3, 4, 4))
    w = _rng(6).normal(size=(3, 5))
    got = channel_linear(Tensor(f), Tensor(w)).data
    for b in range(2):
        for i in range(4):
            for j in range(4):
                want = w.T @ f[b, :, i, j]
                assert np.allclose(got[b, :, i, j], want, atol=1e-10)


def test_softmax_uniform_and_saturated():
    z = Tensor(np.zeros((1, 4, 2, 2)))
    assert np.allclose(softmax_channels(z).data, 0.25)
    z2 = Tensor(np.array([100.0, 0.0]).reshape(1, 2, 1, 1))
    p = softmax_channels(z2).data
    assert abs(p[0, 0, 0, 0] - 1.0) < 1e-6


def test_softmax_huge_logits_and_nonfinite_rejected():
    z = _rng(7).uniform(-1e4, 1e4, size=(2, 5, 3, 3))
    p = softmax_channels(Tensor(z)).data
    assert (p >= 0).all() and (p <= 1).all()
    assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-6
    bad = np.zeros((1, 2, 1, 1))
    bad[0, 0] = np.inf
    with pytest.raises(ValueError, match="non-finite"):
        softmax_channels(Tensor(bad))


def test_reduce_examples():
    assert reduce(Tensor(np.array([2.0, 4.0])), "mean").data == pytest.approx(3.0)
    assert reduce(Tensor(np.ones((2, 3))), "sum").data == pytest.approx(6.0)
    x = _rng(8).normal(size=(3, 4, 5))
    s = reduce(Tensor(x), "sum").item()
    m = reduce(Tensor(x), "mean").item()
    assert abs(m - s / x.size) < 1e-12
    with pytest.raises(ValueError, match="axes"):
        reduce(Tensor(x), "sum", axes=(3,))


# ---------------------------------------------------------------------------
# backward semantics

def test_backward_on_leaf():
    x = Tensor(np.array(2.5), requires_grad=True)
    backward(x)
    assert x.grad == 1.0


def test_backward_accumulates_over_reuse():
    x = Tensor(_rng(9).normal(size=(3,)), requires_grad=True)
    backward(sum_all(add(x, x)))
    assert np.allclose(x.grad, 2.0)
    y = Tensor(_rng(10).normal(size=(3,)), requires_grad=True)
    k = 5
    acc = y
    for _ in range(k - 1):
        acc = add(acc, y)
    backward(sum_all(acc))
    assert np.allclose(y.grad, float(k))


def test_backward_rejects_nonscalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(add(x, x))


def test_forward_is_pure_and_bit_identical():
    x = _rng(11).normal(size=(2, 2, 4, 4)).astype(np.float32)
    k = _rng(12).normal(size=(3, 2, 3, 3)).astype(np.float32)
    b = _rng(13).normal(size=(3,)).astype(np.float32)
    x0 = x.copy()
    a = conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    bb = conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    assert (a == bb).all()
    assert (x == x0).all()
    p1 = softmax_channels(Tensor(x)).data
    p2 = softmax_channels(Tensor(x)).data
    assert (p1 == p2).all()


def test_no_grad_blocks_graph():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        y = mul(x, x)
    assert y.parents == () and not y.requires_grad


# ---------------------------------------------------------------------------
# finite-difference agreement, >= 20 random draws per primitive

def _gc(name, fn, point, seed_offset=0):
    report = finite_diff_gradcheck(fn, Tensor(point.astype(np.float64)),
                                   tolerance=TOL, op_name=name)
    assert report.passed, f"{name}: {report}"


def test_gradcheck_trivial_examples():
    r = finite_diff_gradcheck(sum_all, Tensor(_rng(14).normal(size=(3, 3))),
                              op_name="sum")
    assert r.passed and r.max_relative_error < 1e-9
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    sq = sum_all(mul(x, x))
    backward(sq)
    assert np.allclose(x.grad, [2.0, 4.0])
    r2 = finite_diff_gradcheck(lambda t: sum_all(mul(t, t)),
                               Tensor(np.array([1.0, 2.0])), op_name="sumsq")
    assert r2.passed


@pytest.mark.parametrize("case", range(N_RANDOM_CASES))
def test_gradcheck_conv2d(case):
    rng = _rng(100 + case)
    x = rng.normal(size=(2, 2, 4, 4))
    k = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=(2,))
    proj = Tensor(rng.normal(size=(2, 2, 4, 4)))
    kt, bt, xt = Tensor(k), Tensor(b), Tensor(x)
    _gc("conv/x", lambda t: sum_all(mul(conv2d(t, kt, bt), proj)), x)
    _gc("conv/k", lambda t: sum_all(mul(conv2d(xt, t, bt), proj)), k)
    _gc("conv/b", lambda t: sum_all(mul(conv2d(xt, kt, t), proj)), b)


@pytest.mark.parametrize("case", range(N_RANDOM_CASES))
def test_gradcheck_relu_maxpool(case):
    rng = _rng(200 + case)
    xr = _away_from(rng.normal(size=(2, 2, 4, 4)), 0.0)
    proj = Tensor(rng.normal(size=xr.shape))
    _gc("relu", lambda t: sum_all(mul(relu(t), proj)), xr)
    xm = _separated_windows(rng.normal(size=(2, 2, 4, 4)))
    pm = Tensor(rng.normal(size=(2, 2, 2, 2)))
    _gc("maxpool", lambda t: sum_all(mul(maxpool2x2(t), pm)), xm)


@pytest.mark.parametrize("case", range(N_RANDOM_CASES))
def test_gradcheck_shape_ops(case):
    rng = _rng(300 + case)
    xu = rng.normal(size=(1, 2, 3, 3))
    pu = Tensor(rng.normal(size=(1, 2, 6, 6)))
    _gc("upsample", lambda t: sum_all(mul(upsample_nearest2x2(t), pu)), xu)
    a = rng.normal(size=(1, 2, 3, 3))
    b = rng.normal(size=(1, 3, 3, 3))
    pc = Tensor(rng.normal(size=(1, 5, 3, 3)))
    at, bt = Tensor(a), Tensor(b)
    _gc("concat/a", lambda t: sum_all(mul(concat_channels(t, bt), pc)), a)
    _gc("concat/b", lambda t: sum_all(mul(concat_channels(at, t), pc)), b)


@pytest.mark.parametrize("case", range(N_RANDOM_CASES))
def test_gradcheck_linear_softmax_reduce(case):
    rng = _rng(400 + case)
    f = rng.normal(size=(2, 3, 3, 3))
    w = rng.normal(size=(3, 4))
    pl = Tensor(rng.normal(size=(2, 4, 3, 3)))
    ft, wt = Tensor(f), Tensor(w)
    _gc("chlin/f", lambda t: sum_all(mul(channel_linear(t, wt), pl)), f)
    _gc("chlin/w", lambda t: sum_all(mul(channel_linear(ft, t), pl)), w)
    z = rng.normal(size=(2, 3, 2, 2)) * 2
    pz = Tensor(rng.normal(size=z.shape))
    _gc("softmax", lambda t: sum_all(mul(softmax_channels(t), pz)), z)
    xr = rng.normal(size=(2, 3, 4))
    pr = Tensor(rng.normal(size=(3,)))
    _gc("reduce", lambda t: sum_all(mul(reduce(t, "mean", axes=(0, 2)), pr)), xr)


@pytest.mark.parametrize("case", range(N_RANDOM_CASES))
def test_gradcheck_elementwise_and_matmul(case):
    rng = _rng(500 + case)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    bt = Tensor(b)
    _gc("add", lambda t: sum_all(mul(add(t, bt), bt)), a)
    _gc("mul", lambda t: sum_all(mul(mul(t, bt), bt)), a)
    pos = np.abs(a) + 0.5
    _gc("log", lambda t: sum_all(log(t)), pos)
    xc = _away_from(a, 0.2)
    pc = Tensor(rng.normal(size=a.shape))
    _gc("clamp", lambda t: sum_all(mul(clamp_min(t, 0.2), pc)), xc)
    m2 = rng.normal(size=(4, 2))
    pm = Tensor(rng.normal(size=(3, 2)))
    m2t = Tensor(m2)
    _gc("matmul2", lambda t: sum_all(mul(matmul2(t, m2t), pm)), a)


def test_gradcheck_requires_float64():
    with pytest.raises(ValueError, match="float64"):
        finite_diff_gradcheck(sum_all, Tensor(np.ones(3, dtype=np.float32)))
