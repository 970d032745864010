import numpy as np

from mdgt.autodiff import Tensor, backward
from mdgt.optim import SGD, Adam


def quadratic_step(opt_cls, **kwargs):
    x = Tensor(np.array([4.0, -2.0]), requires_grad=True)
    opt = opt_cls([x], **kwargs)
    trace = []
    for _ in range(120):
        opt.zero_grad()
        loss = (x * x).sum()
        backward(loss)
        opt.step()
        trace.append(loss.item())
    return x, trace


def test_sgd_converges_on_quadratic():
    x, trace = quadratic_step(SGD, lr=0.1, momentum=0.9)
    assert trace[-1] < 1e-3 * trace[0]


def test_adam_converges_on_quadratic():
    x, trace = quadratic_step(Adam, lr=0.3)
    assert trace[-1] < 1e-2 * trace[0]


def test_sgd_momentum_and_weight_decay_update_rule():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([x], lr=0.5, momentum=0.9, weight_decay=0.1)
    x.grad = np.array([2.0])
    opt.step()
    # v = g + wd*w = 2.1; x = 1 - 0.5*2.1
    assert np.isclose(x.data[0], 1.0 - 0.5 * 2.1)
    x.grad = np.array([0.0])
    opt.step()
    # v = 0.9*2.1 + wd*x
    v = 0.9 * 2.1 + 0.1 * (1.0 - 0.5 * 2.1)
    assert np.isclose(x.data[0], (1.0 - 0.5 * 2.1) - 0.5 * v)


def test_params_without_grad_are_skipped():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = Tensor(np.array([5.0]), requires_grad=True)
    opt = SGD([x, y], lr=0.1)
    x.grad = np.array([1.0])
    opt.step()
    assert y.data[0] == 5.0


def test_adam_deterministic():
    def run():
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = Adam([x], lr=0.05, betas=(0.5, 0.999))
        for _ in range(10):
            opt.zero_grad()
            backward((x * x).sum())
            opt.step()
        return x.data.tobytes()

    assert run() == run()
