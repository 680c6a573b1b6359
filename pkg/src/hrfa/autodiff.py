"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and remembers the op that produced it.
Calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates ``grad`` on every tensor that
requires it.

Broadcasting is deliberately limited to scalar-with-tensor; channel biases
go through :func:`bias_add`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when op inputs do not conform to the op's shape algebra."""


def _shape_error(op, *shapes):
    joined = " and ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {joined}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    # let numpy defer to our reflected operators (ndarray * Tensor)
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self):
        return len(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate ``grad`` on every reachable tensor that requires it."""
        if self.data.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _binary_operands(op, a, b):
    # python scalars take the dtype of the tensor operand
    ref = a if isinstance(a, Tensor) else b
    dtype = ref.dtype if isinstance(ref, Tensor) else None
    a = as_tensor(a, dtype=dtype if not isinstance(a, Tensor) else None)
    b = as_tensor(b, dtype=dtype if not isinstance(b, Tensor) else None)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise _shape_error(op, a.shape, b.shape)
    return a, b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# elementwise arithmetic

def add(a, b):
    a, b = _binary_operands("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _binary_operands("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    """Elementwise product; either operand may be a scalar."""
    a, b = _binary_operands("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a, c):
    return mul(a, float(c))


def pow(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), backward, "pow")


def square(a):
    a = as_tensor(a)

    def backward(g):
        return (2.0 * g * a.data,)

    return _make(a.data * a.data, (a,), backward, "square")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _make(out, (a,), backward, "sqrt")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a):
    a = as_tensor(a)

    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward, "log")


# activations

def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), backward, "relu")


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)

    def backward(g):
        return (g * factor,)

    return _make(a.data * factor, (a,), backward, "leaky_relu")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), backward, "tanh")


def sigmoid(a):
    a = as_tensor(a)
    # split by sign so large |x| never overflows exp
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward, "sigmoid")


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


# reductions and shape ops

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def _expand_back(g, shape, axes):
    if axes is None:
        return np.broadcast_to(g, shape)
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        return (np.array(_expand_back(g, a.shape, axes)),)

    return _make(np.asarray(a.data.sum(axis=axes)), (a,), backward, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        return (np.array(_expand_back(g, a.shape, axes)) / count,)

    return _make(np.asarray(a.data.mean(axis=axes)), (a,), backward, "mean")


def max(a, axis=-1):
    """Maximum along one axis; ties send the gradient to the first maximiser."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make(out, (a,), backward, "max")


def l2_norm(a, axis=None):
    """Euclidean norm over ``axis`` (all elements when None).

    The gradient at an exactly zero input is taken to be zero.
    """
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.sqrt((a.data * a.data).sum(axis=axes))

    def backward(g):
        o = _expand_back(out, a.shape, axes)
        gg = _expand_back(g, a.shape, axes)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(o > 0, a.data / np.where(o > 0, o, 1.0), 0.0)
        return (gg * d,)

    return _make(np.asarray(out), (a,), backward, "l2_norm")


def normalize(a, eps=1e-12):
    """Scale each row (last axis) of ``a`` to unit Euclidean norm."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    n = np.maximum(n, eps)
    out = a.data / n

    def backward(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * proj) / n,)

    return _make(out, (a,), backward, "normalize")


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward, "reshape")


def transpose(a):
    """Swap the two axes of a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise _shape_error("transpose", a.shape)

    def backward(g):
        return (g.T,)

    return _make(np.ascontiguousarray(a.data.T), (a,), backward, "transpose")


def gather(a, index):
    """Pick ``a[i, index[i]]`` for each row of a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise _shape_error("gather", a.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise IndexError(f"gather: index out of range for {a.shape[1]} columns")
    rows = np.arange(a.shape[0])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[rows, index] = g
        return (ga,)

    return _make(a.data[rows, index], (a,), backward, "gather")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(out, tensors, backward, "concat")


# linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def bias_add(x, b):
    """Add a per-feature bias: ``b`` indexes axis 1 of ``x`` (features or channels)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise _shape_error("bias_add", x.shape, b.shape)
    view = (1, -1) + (1,) * (x.ndim - 2)
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gb = g.sum(axis=reduce_axes) if b.requires_grad else None
        return g, gb

    return _make(x.data + b.data.reshape(view), (x, b), backward, "bias_add")


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _windows(xp, kh, kw, stride):
    """Strided (B, C, Ho, Wo, kh, kw) view over a padded batch."""
    sh, sw = stride
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]


def _col2im(cols, out_shape, stride, padding):
    """Scatter-add (B, Hi, Wi, C, kh, kw) patches into a (B, C, H, W) canvas.

    Inverse bookkeeping of :func:`_windows`: patch (i, j) lands at rows
    ``i*sh : i*sh + kh`` before the padding is cropped off.
    """
    B, Hi, Wi, C, kh, kw = cols.shape
    sh, sw = stride
    ph, pw = padding
    H, W = out_shape
    canvas = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=cols.dtype)
    src = cols.transpose(0, 3, 4, 5, 1, 2)  # B, C, kh, kw, Hi, Wi
    for di in range(kh):
        for dj in range(kw):
            canvas[:, :, di:di + sh * Hi:sh, dj:dj + sw * Wi:sw] += src[:, :, di, dj]
    return canvas[:, :, ph:ph + H, pw:pw + W]


def _conv_out(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation; ``x`` is (B, C, H, W) and ``w`` is (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    stride, padding = _pair(stride), _pair(padding)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d", x.shape, w.shape)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = _conv_out(H, kh, stride[0], padding[0])
    Wo = _conv_out(W, kw, stride[1], padding[1])
    if Ho < 1 or Wo < 1:
        raise _shape_error("conv2d", x.shape, w.shape)
    ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    win = _windows(xp, kh, kw, stride)[:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gx = _col2im(dcols, (H, W), stride, padding)
        return gx, gw

    out = _make(np.ascontiguousarray(out), (x, w), backward, "conv2d")
    return bias_add(out, b) if b is not None else out


def conv_transpose2d(x, w, b=None, stride=1, padding=0):
    """Transposed convolution; ``x`` is (B, Cin, H, W) and ``w`` is (Cin, Cout, kh, kw).

    Output extent per axis is ``(H - 1) * stride - 2 * padding + k``.
    """
    x, w = as_tensor(x), as_tensor(w)
    stride, padding = _pair(stride), _pair(padding)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise _shape_error("conv_transpose2d", x.shape, w.shape)
    B, Cin, H, W = x.shape
    _, Cout, kh, kw = w.shape
    Ho = (H - 1) * stride[0] - 2 * padding[0] + kh
    Wo = (W - 1) * stride[1] - 2 * padding[1] + kw
    if Ho < 1 or Wo < 1:
        raise _shape_error("conv_transpose2d", x.shape, w.shape)
    xmat = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, Cin)
    wmat = w.data.reshape(Cin, Cout * kh * kw)
    cols = (xmat @ wmat).reshape(B, H, W, Cout, kh, kw)
    out = _col2im(cols, (Ho, Wo), stride, padding)

    def backward(g):
        ph, pw = padding
        gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else g
        win = _windows(gp, kh, kw, stride)[:, :, :H, :W]
        gcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, Cout * kh * kw)
        gx = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(B, H, W, Cin).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        gw = (xmat.T @ gcols).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    out = _make(np.ascontiguousarray(out), (x, w), backward, "conv_transpose2d")
    return bias_add(out, b) if b is not None else out


def avg_pool2d(x, k):
    """Non-overlapping k x k average pooling; H and W must be multiples of k."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % k or W % k:
        raise _shape_error("avg_pool2d", x.shape, (k, k))
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return _make(out, (x,), backward, "avg_pool2d")


# optimisation

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def select(self, rows):
        """Keep only the given leading-axis rows of every accumulator.

        Used when a batch of independent problems shrinks as members finish.
        """
        self.m = [m[rows] for m in self.m]
        self.v = [v[rows] for v in self.v]


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, iteration):
        super().__init__(f"non-finite gradient at iteration {iteration}")
        self.iteration = iteration


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on ``params`` (list of arrays).

    Raises :class:`NonFiniteGradientError` without touching anything if a
    gradient contains inf or nan.
    """
    if len(params) != len(grads):
        raise ValueError("adam_step: params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise _shape_error("adam_step", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(state.step + 1)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(p.dtype)
    return params, state


class Adam:
    """Adam over a list of leaf tensors; reads their ``grad`` buffers."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)
