"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs on the computation graph when grad
recording is enabled and any input requires gradients; `backward` then
walks the recorded graph in reverse topological order, accumulating
gradients additively across fan-out. Leaves (parameters) collect their
gradient in `.grad`; intermediate gradients live only for the duration
of the backward pass.

Design constraints honored throughout:
  * float64 only — gradient checking is the backbone of validation.
  * every forward op verifies its output is finite and raises
    `NonFiniteError` otherwise.
  * broadcasting is restricted to (a) scalars and (b) an operand that
    matches the other's shape minus the leading batch axis; anything
    else is a loud `ShapeError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-d float64 array, optionally tracked on the gradient graph.

    `data` is row-major; `grad` is populated on leaves by `backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data, off the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division not supported; multiply by a reciprocal")
        return mul(self, Tensor(1.0 / float(other)))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tmean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} produced non-finite values")


def _make(op_name: str, data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap an op result, wiring the graph when recording is on."""
    _check_finite(op_name, data)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# broadcasting (scalar or leading-batch only)

def _broadcast_compatible(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    if int(np.prod(sa)) == 1 or int(np.prod(sb)) == 1:
        return True
    if len(sa) == len(sb) + 1 and sa[1:] == sb:
        return True
    if len(sb) == len(sa) + 1 and sb[1:] == sa:
        return True
    return False


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _binary_check(name: str, a: Tensor, b: Tensor) -> None:
    if not _broadcast_compatible(a.shape, b.shape):
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not "
                         "compatible (only scalar or leading-batch broadcast)")


# ---------------------------------------------------------------------------
# elementwise and linear algebra

def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("add", a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("sub", a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _make("mul", ad * bd, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(old),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make("exp", out, (a,), bw)


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    ad = a.data

    def bw(g):
        return (g / ad,)

    return _make("log", out, (a,), bw)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed overflow-free."""
    out = np.logaddexp(0.0, a.data)
    sig = _stable_sigmoid(a.data)
    return _make("softplus", out, (a,), lambda g: (g * sig,))


# ---------------------------------------------------------------------------
# activations

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make("relu", np.where(mask, a.data, 0.0), (a,), bw)


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(a.data > 0, 1.0, alpha)
    return _make("leaky_relu", a.data * slope, (a,), lambda g: (g * slope,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# reductions

def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def bw(g):
            return (np.broadcast_to(g, a.shape).copy(),)

        return _make("sum", np.asarray(a.data.sum()), (a,), bw)
    ax = axis
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make("sum", a.data.sum(axis=ax), (a,), bw)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.size

        def bw(g):
            return (np.broadcast_to(g / n, a.shape).copy(),)

        return _make("mean", np.asarray(a.data.mean()), (a,), bw)
    ax = axis
    n = a.shape[ax]
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), shape).copy(),)

    return _make("mean", a.data.mean(axis=ax), (a,), bw)


def l1_norm(a: Tensor) -> Tensor:
    """Sum of absolute values. Subgradient 0 at exact zeros."""
    sign = np.sign(a.data)
    return _make("l1_norm", np.asarray(np.abs(a.data).sum()), (a,),
                 lambda g: (g * sign,))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy of row-wise softmax against integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (n, k) logits, got {logits.shape}")
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    y = y.astype(np.intp).reshape(-1)
    n, k = logits.shape
    if y.shape[0] != n:
        raise ShapeError(f"labels length {y.shape[0]} != batch size {n}")
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = (z - zmax) - np.log(sez)
    loss = -log_probs[np.arange(n), y].mean()
    probs = ez / sez

    def bw(g):
        gz = probs.copy()
        gz[np.arange(n), y] -= 1.0
        return (gz * (g / n), None)

    labels_t = labels if isinstance(labels, Tensor) else Tensor(y.astype(np.float64))
    return _make("softmax_cross_entropy", np.asarray(loss), (logits, labels_t), bw)


# ---------------------------------------------------------------------------
# convolutions (NCHW)

def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(f"convolution output collapses: size={size}, kernel={k}, "
                         f"stride={stride}, pad={pad}")
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, oh, ow),
        (s0, s1, s2, s3, stride * s2, stride * s3), writeable=False)
    return view.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (n,c,h,w) input with (f,c,kh,kw) kernels."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {cw}")
    if b is not None and b.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({f},)")
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(wd, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)          # (n, c*kh*kw, oh*ow)
    w2 = w.data.reshape(f, c * kh * kw)
    out = np.matmul(w2, cols)                           # (n, f, oh*ow)
    if b is not None:
        out = out + b.data.reshape(1, f, 1)
    out = out.reshape(n, f, oh, ow)

    def bw(g):
        g2 = g.reshape(n, f, oh * ow)
        gw = gx = gb = None
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)                 # (n, c*kh*kw, oh*ow)
            d6 = dcols.reshape(n, c, kh, kw, oh, ow)
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, :, ki:ki + stride * oh:stride,
                        kj:kj + stride * ow:stride] += d6[:, :, ki, kj]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        grads = (gx, gw) if b is None else (gx, gw, gb)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, parents, bw)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 2, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Transposed (fractionally strided) convolution.

    Input (n,c,h,w), kernel (c,f,kh,kw); output spatial size is
    (h-1)*stride - 2*padding + kh + output_padding. With stride 2 this
    realizes an upsampling layer of effective stride 1/2.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects 4-D input and kernel, got {x.shape}, {w.shape}")
    if not 0 <= output_padding < stride:
        raise ShapeError(f"output_padding {output_padding} must be in [0, stride)")
    n, c, h, wd = x.shape
    cw, f, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d_transpose: input channels {c} != kernel channels {cw}")
    if b is not None and b.shape != (f,):
        raise ShapeError(f"conv2d_transpose: bias shape {b.shape} != ({f},)")
    oh = (h - 1) * stride - 2 * padding + kh + output_padding
    ow = (wd - 1) * stride - 2 * padding + kw + output_padding
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d_transpose output collapses")

    # full scatter grid before cropping by `padding`
    fh = (h - 1) * stride + kh + output_padding
    fw = (wd - 1) * stride + kw + output_padding
    x2 = x.data.reshape(n, c, h * wd)
    w2 = w.data.reshape(c, f * kh * kw)
    t = np.matmul(w2.T, x2).reshape(n, f, kh, kw, h, wd)
    full = np.zeros((n, f, fh, fw))
    for ki in range(kh):
        for kj in range(kw):
            full[:, :, ki:ki + stride * h:stride,
                 kj:kj + stride * wd:stride] += t[:, :, ki, kj]
    out = full[:, :, padding:padding + oh, padding:padding + ow]
    if b is not None:
        out = out + b.data.reshape(1, f, 1, 1)

    def bw(g):
        # the upstream gradient laid out on the uncropped scatter grid
        gfull = np.zeros((n, f, fh, fw))
        gfull[:, :, padding:padding + oh, padding:padding + ow] = g
        cols = _im2col(gfull, kh, kw, stride, h, wd)     # (n, f*kh*kw, h*w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(w2, cols).reshape(n, c, h, wd)
        if w.requires_grad:
            gw = np.matmul(x2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make("conv2d_transpose", out, parents, bw)


def instance_norm(x: Tensor, gain: Tensor, bias: Tensor,
                  eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over spatial dims with affine params."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects (n,c,h,w), got {x.shape}")
    n, c, h, w = x.shape
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"instance_norm: gain/bias must have shape ({c},)")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data.reshape(1, c, 1, 1) * xhat + bias.data.reshape(1, c, 1, 1)

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * gain.data.reshape(1, c, 1, 1)
            m1 = dxhat.mean(axis=(2, 3), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=(0, 2, 3))
        if bias.requires_grad:
            gbias = g.sum(axis=(0, 2, 3))
        return gx, ggain, gbias

    return _make("instance_norm", out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# pairwise distances (kernel plumbing)

def pairwise_sqdist(x: Tensor, y: Tensor) -> Tensor:
    """(n,m) matrix of squared Euclidean distances between row batches."""
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"pairwise_sqdist expects (n,d) and (m,d), got {x.shape}, {y.shape}")
    xd, yd = x.data, y.data
    x2 = (xd * xd).sum(axis=1)[:, None]
    y2 = (yd * yd).sum(axis=1)[None, :]
    d = np.maximum(x2 + y2 - 2.0 * xd @ yd.T, 0.0)

    def bw(g):
        gx = gy = None
        if x.requires_grad:
            gx = 2.0 * (g.sum(axis=1)[:, None] * xd - g @ yd)
        if y.requires_grad:
            gy = 2.0 * (g.sum(axis=0)[:, None] * yd - g.T @ xd)
        return gx, gy

    return _make("pairwise_sqdist", d, (x, y), bw)


# ---------------------------------------------------------------------------
# reverse pass

def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires-grad leaf reachable from `loss`.

    `loss` must be scalar; d(loss)/d(loss) = 1. Gradients accumulate
    additively into existing `.grad` buffers (call `zero_grad` between
    steps).
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward on a detached graph: loss does not require grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# gradient checking

def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor,
                    eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error is max over elements of |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    base = np.array(x.data, dtype=np.float64, copy=True)

    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ShapeError(f"check_gradients requires scalar f, got shape {out.shape}")
    backward(out)
    analytic = (np.zeros_like(base) if probe.grad is None else probe.grad).reshape(-1)

    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            fp = f(Tensor(base)).item()
            flat[i] = saved - eps
            fm = f(Tensor(base)).item()
            flat[i] = saved
            numeric[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
