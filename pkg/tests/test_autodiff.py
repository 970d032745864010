import math

import numpy as np
import pytest

from mdgt import autodiff as ad
from mdgt.autodiff import (
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    check_gradients,
    conv2d,
    conv2d_transpose,
    instance_norm,
    l1_norm,
    matmul,
    no_grad,
    pairwise_sqdist,
    softmax_cross_entropy,
)


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------------------
# forward examples

def test_matmul_identity_rowsums():
    # 2x3 identity-padded matrix times a column of ones gives row sums
    a = Tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    ones = Tensor([[1.0], [1.0], [1.0]])
    out = matmul(a, ones)
    np.testing.assert_array_equal(out.data, [[2.0], [2.0]])


def test_conv2d_local_sums():
    # all-ones 3x3 kernel, stride 1, no pad: each output is a sliding-window sum
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    expected = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            expected[i, j] = x[0, 0, i:i + 3, j:j + 3].sum()
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), stride=1, padding=0)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(out.data[0, 0], expected, rtol=0, atol=0)


def test_cross_entropy_uniform_logits():
    for k in (2, 7, 13):
        logits = Tensor(np.zeros((3, k)))
        loss = softmax_cross_entropy(logits, np.array([0, k - 1, k // 2]))
        assert loss.item() == pytest.approx(math.log(k), abs=1e-12)


def test_conv2d_stride_padding_shapes():
    x = Tensor(rng(1).normal(size=(2, 3, 8, 8)))
    w = Tensor(rng(2).normal(size=(5, 3, 3, 3)))
    assert conv2d(x, w, stride=2, padding=1).shape == (2, 5, 4, 4)
    assert conv2d(x, w, stride=1, padding=1).shape == (2, 5, 8, 8)


def test_conv2d_transpose_shape_and_upsample():
    x = Tensor(rng(3).normal(size=(1, 4, 5, 5)))
    w = Tensor(rng(4).normal(size=(4, 2, 3, 3)))
    out = conv2d_transpose(x, w, stride=2, padding=1, output_padding=1)
    assert out.shape == (1, 2, 10, 10)


def test_conv2d_transpose_matches_scatter_oracle():
    # independent loop oracle: y[f, i*s+ki-p, j*s+kj-p] += x[c,i,j] * w[c,f,ki,kj]
    r = rng(5)
    x = r.normal(size=(1, 2, 3, 3))
    w = r.normal(size=(2, 3, 3, 3))
    s, p, op = 2, 1, 1
    oh = (3 - 1) * s - 2 * p + 3 + op
    expected = np.zeros((1, 3, oh, oh))
    for c in range(2):
        for f in range(3):
            for i in range(3):
                for j in range(3):
                    for ki in range(3):
                        for kj in range(3):
                            oi, oj = i * s + ki - p, j * s + kj - p
                            if 0 <= oi < oh and 0 <= oj < oh:
                                expected[0, f, oi, oj] += x[0, c, i, j] * w[c, f, ki, kj]
    out = conv2d_transpose(Tensor(x), Tensor(w), stride=s, padding=p, output_padding=op)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_instance_norm_normalizes_per_sample_channel():
    x = Tensor(rng(6).normal(loc=3.0, scale=2.0, size=(2, 3, 5, 5)))
    out = instance_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
    mu = out.data.mean(axis=(2, 3))
    sd = out.data.std(axis=(2, 3))
    np.testing.assert_allclose(mu, 0.0, atol=1e-12)
    np.testing.assert_allclose(sd, 1.0, atol=1e-3)


def test_activation_values():
    x = Tensor([-2.0, 0.0, 3.0])
    np.testing.assert_allclose(ad.relu(x).data, [0.0, 0.0, 3.0])
    np.testing.assert_allclose(ad.leaky_relu(x, 0.1).data, [-0.2, 0.0, 3.0])
    np.testing.assert_allclose(ad.tanh(x).data, np.tanh(x.data))
    np.testing.assert_allclose(ad.sigmoid(x).data, 1 / (1 + np.exp(-x.data)))
    np.testing.assert_allclose(ad.softplus(x).data, np.log1p(np.exp(x.data)))


def test_sigmoid_softplus_extreme_inputs_stay_finite():
    x = Tensor([-800.0, 800.0])
    assert np.all(np.isfinite(ad.sigmoid(x).data))
    assert np.all(np.isfinite(ad.softplus(x).data))


# ---------------------------------------------------------------------------
# error reporting

def test_shape_errors_are_loud():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    # interior broadcasting requires explicit reshape
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))


def test_leading_batch_broadcast_allowed():
    x = Tensor(np.ones((4, 3)))
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    out = ad.add(x, b)
    assert out.shape == (4, 3)
    backward(out.sum())
    np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([-1.0]))


def test_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_backward_rejects_non_scalar_and_detached():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * x)
    with pytest.raises(ValueError):
        backward(Tensor(np.ones(())))


# ---------------------------------------------------------------------------
# backward examples

def test_grad_of_sum_is_ones():
    x = Tensor(rng(7).normal(size=(3, 4)), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_grad_of_mean_square():
    # loss = mean(x^2)  =>  grad = 2x / n
    x = Tensor(rng(8).normal(size=6), requires_grad=True)
    backward(ad.square(x).mean())
    np.testing.assert_allclose(x.grad, 2.0 * x.data / 6.0, atol=1e-15)


def test_requires_grad_false_never_receives_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.full(3, 2.0), requires_grad=False)
    backward(ad.mul(x, y).sum())
    assert y.grad is None
    np.testing.assert_array_equal(x.grad, y.data)


def test_fanout_accumulates_additively():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.mul(x, Tensor([3.0])))  # x^2 + 3x
    backward(y.sum())
    assert x.grad[0] == pytest.approx(2 * 1.5 + 3.0, abs=1e-14)


def test_grad_accumulates_across_backward_calls():
    x = Tensor(np.ones(2), requires_grad=True)
    backward(x.sum())
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_linearity():
    r = rng(9)
    base = r.normal(size=(4, 3))

    def grads_of(f):
        x = Tensor(base.copy(), requires_grad=True)
        backward(f(x))
        return x.grad

    l1 = lambda x: ad.square(x).sum()
    l2 = lambda x: ad.tanh(x).mean()
    a, b = 2.5, -1.25
    combined = grads_of(lambda x: a * l1(x) + b * l2(x))
    expected = a * grads_of(l1) + b * grads_of(l2)
    np.testing.assert_allclose(combined, expected, atol=1e-10)


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ad.square(x)
    assert not y.requires_grad and y.is_leaf


# ---------------------------------------------------------------------------
# gradient checks: every differentiable forward op on randomized small shapes

def _gc(f, x, tol=1e-4):
    err = check_gradients(f, x, eps=1e-5)
    assert err < tol, f"max relative gradient error {err}"


def test_check_gradients_of_sum_is_roundoff():
    x = Tensor(rng(10).normal(size=5))
    assert check_gradients(lambda t: t.sum(), x) < 1e-9


@pytest.mark.parametrize("op", [
    lambda t: ad.add(t, Tensor(np.linspace(-1, 1, t.size).reshape(t.shape))).sum(),
    lambda t: ad.sub(Tensor(np.ones(t.shape)), t).sum(),
    lambda t: ad.mul(t, t).sum(),
    lambda t: ad.neg(t).sum(),
    lambda t: ad.exp(0.3 * t).sum(),
    lambda t: ad.square(t).mean(),
    lambda t: ad.softplus(t).sum(),
    lambda t: ad.tanh(t).sum(),
    lambda t: ad.sigmoid(t).mean(),
    lambda t: ad.leaky_relu(t, 0.2).sum(),
    lambda t: l1_norm(t),
    lambda t: t.mean(),
    lambda t: t.reshape(t.size).sum(),
])
def test_gradcheck_elementwise_ops(op):
    for seed in (0, 1):
        # offset away from relu/l1 kinks
        x = Tensor(rng(seed).normal(size=(4, 6)) + 0.05)
        _gc(op, x)


def test_gradcheck_relu_away_from_kink():
    x = Tensor(rng(11).normal(size=(3, 5)) + 2.0)
    _gc(lambda t: ad.relu(t).sum(), x)


def test_gradcheck_log():
    x = Tensor(rng(12).uniform(0.5, 2.0, size=8))
    _gc(lambda t: ad.log(t).sum(), x)


def test_gradcheck_matmul_and_transpose():
    r = rng(13)
    b = Tensor(r.normal(size=(4, 3)))
    x = Tensor(r.normal(size=(5, 4)))
    _gc(lambda t: matmul(t, b).sum(), x)
    _gc(lambda t: matmul(b.T, ad.transpose(t)).mean(), x)


def test_gradcheck_sum_mean_axis():
    x = Tensor(rng(14).normal(size=(3, 4)))
    _gc(lambda t: ad.square(t.sum(axis=0)).sum(), x)
    _gc(lambda t: ad.square(t.mean(axis=1)).sum(), x)


def test_gradcheck_softmax_cross_entropy():
    r = rng(15)
    labels = np.array([0, 2, 1, 2])
    x = Tensor(r.normal(size=(4, 3)))
    _gc(lambda t: softmax_cross_entropy(t, labels), x)


def test_gradcheck_conv2d_all_slots():
    r = rng(16)
    x0 = r.normal(size=(2, 2, 4, 4))
    w0 = r.normal(size=(3, 2, 3, 3))
    b0 = r.normal(size=3)
    wt, bt = Tensor(w0), Tensor(b0)
    _gc(lambda t: conv2d(t, wt, bt, stride=1, padding=1).sum(), Tensor(x0))
    xt = Tensor(x0)
    _gc(lambda t: ad.square(conv2d(xt, t, bt, stride=2, padding=1)).sum(), Tensor(w0))
    _gc(lambda t: conv2d(xt, wt, t, stride=1, padding=0).mean(), Tensor(b0))


def test_gradcheck_conv2d_transpose_all_slots():
    r = rng(17)
    x0 = r.normal(size=(1, 3, 3, 3))
    w0 = r.normal(size=(3, 2, 3, 3))
    b0 = r.normal(size=2)
    wt, bt = Tensor(w0), Tensor(b0)
    _gc(lambda t: ad.square(conv2d_transpose(t, wt, bt, stride=2, padding=1,
                                             output_padding=1)).sum(), Tensor(x0))
    xt = Tensor(x0)
    _gc(lambda t: conv2d_transpose(xt, t, bt, stride=2, padding=0).sum(), Tensor(w0))
    _gc(lambda t: conv2d_transpose(xt, wt, t, stride=1, padding=1).mean(), Tensor(b0))


def test_gradcheck_instance_norm_all_slots():
    r = rng(18)
    x0 = r.normal(size=(2, 3, 3, 3))
    g0 = r.uniform(0.5, 1.5, size=3)
    b0 = r.normal(size=3)
    gt, bt = Tensor(g0), Tensor(b0)
    _gc(lambda t: ad.square(instance_norm(t, gt, bt)).sum(), Tensor(x0), tol=5e-4)
    xt = Tensor(x0)
    _gc(lambda t: ad.square(instance_norm(xt, t, bt)).sum(), Tensor(g0))
    _gc(lambda t: instance_norm(xt, gt, t).sum(), Tensor(b0))


def test_gradcheck_pairwise_sqdist_both_slots():
    r = rng(19)
    x0 = r.normal(size=(4, 3))
    y0 = r.normal(size=(5, 3))
    yt = Tensor(y0)
    _gc(lambda t: ad.square(pairwise_sqdist(t, yt)).mean(), Tensor(x0))
    xt = Tensor(x0)
    _gc(lambda t: pairwise_sqdist(xt, t).mean(), Tensor(y0))


def test_gradcheck_composed_network():
    # small conv -> norm -> relu -> affine -> cross-entropy chain
    r = rng(20)
    w1 = Tensor(r.normal(scale=0.5, size=(2, 1, 3, 3)))
    g1 = Tensor(np.ones(2))
    b1 = Tensor(np.zeros(2))
    w2 = Tensor(r.normal(scale=0.5, size=(8, 3)))
    labels = np.array([1, 0])

    def net(t):
        h = conv2d(t, w1, stride=2, padding=1)
        h = ad.relu(instance_norm(h, g1, b1))
        h = h.reshape(2, 8)
        return softmax_cross_entropy(matmul(h, w2), labels)

    _gc(net, Tensor(r.normal(size=(2, 1, 4, 4))), tol=1e-4)


# ---------------------------------------------------------------------------
# determinism

def test_forward_backward_bit_identical():
    def run():
        r = rng(21)
        x = Tensor(r.normal(size=(2, 3, 6, 6)), requires_grad=True)
        w = Tensor(r.normal(size=(4, 3, 3, 3)), requires_grad=True)
        out = ad.tanh(conv2d(x, w, stride=2, padding=1))
        loss = ad.square(out).mean()
        backward(loss)
        return loss.item(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_check_gradients_validates_eps():
    with pytest.raises(ValueError):
        check_gradients(lambda t: t.sum(), Tensor(np.ones(2)), eps=1e-2)
