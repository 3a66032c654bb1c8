"""Minimal tape-based reverse-mode autodiff over numpy arrays.

Only the handful of ops the occupancy network needs are provided. Values are
stored as float32 by default; :func:`precision` switches the storage dtype
(used by finite-difference checks). Every op rejects non-finite results.
"""

import contextlib

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError

_STATE = {"grad": True, "dtype": np.float32}


@contextlib.contextmanager
def no_grad():
    prev = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = prev


@contextlib.contextmanager
def precision(dtype):
    prev = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _STATE["dtype"] = prev


def grad_enabled():
    return _STATE["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_STATE["dtype"])
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(out, opname):
    # one summing pass; a non-finite sum is rechecked elementwise to rule out overflow
    if not np.isfinite(out.sum()) and not np.isfinite(out).all():
        raise NumericError(f"non-finite value produced by {opname}")
    return out


def _make(out, parents, backward_fn, opname):
    t = Tensor(_check(out, opname))
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    return t


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from exc


def _accum(t, g):
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a, s):
    a = as_tensor(a)
    s = a.data.dtype.type(s)

    def bw(g):
        _accum(a, g * s)

    return _make(a.data * s, (a,), bw, "scale")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), bw, "relu")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """``a @ b``; ``b`` may be a 2D matrix shared across the batch dims of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            _accum(b, gb)

    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, (a, b), bw, "matmul")


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` has shape ``(in, out)``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            _accum(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "linear")


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim, opname):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{opname}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax(a, axis=-1):
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim, "softmax")
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), bw, "softmax")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = _norm_axis(axis, ndim, "concat")
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), bw, "concat")


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim, "reduce_sum")
    if axis is None:
        out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    else:
        out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), bw, "reduce_sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim, "reduce_mean")
    n = a.data.size if axis is None else a.shape[axis]
    if axis is None:
        out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype)
    else:
        out = a.data.mean(axis=axis, keepdims=keepdims)
    inv = a.data.dtype.type(1.0 / n)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g * inv, a.shape))

    return _make(out, (a,), bw, "reduce_mean")


def reduce_max(a, axis, keepdims=False):
    """Max along ``axis``; the gradient flows to the (first) argmax only."""
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim, "reduce_max")
    arg = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, arg, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, arg, g, axis=axis)
        _accum(a, full)

    return _make(out, (a,), bw, "reduce_max")


def gather(a, index):
    """Rows of ``a`` selected by an integer array of any shape: ``a[index]``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -len(a.data) or index.max() >= len(a.data)):
        raise ShapeError("gather: index out of range")

    def bw(g):
        rows = g.reshape(index.size, -1)
        _accum(a, kernels.scatter_rows(index.reshape(-1) % len(a.data), rows, len(a.data)).reshape(a.shape))

    return _make(a.data[index], (a,), bw, "gather")


def bce_with_logits(logit, target):
    """Mean binary cross-entropy of ``sigmoid(logit)`` against ``target`` (scalar)."""
    logit = as_tensor(logit)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logit.shape:
        raise ShapeError(f"bce_with_logits: target {t.shape} vs logit {logit.shape}")
    x = logit.data.astype(np.float64)
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = max(x.size, 1)
    out = np.asarray(loss.sum() / n, dtype=logit.data.dtype)

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        _accum(logit, (float(g) * (sig - t) / n).astype(logit.data.dtype))

    return _make(out, (logit,), bw, "bce_with_logits")


def sigmoid(x):
    """Plain numpy logistic function (no graph)."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    The tape is released afterwards; call again only after a new forward pass.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            if node.grad is not None:
                node._backward(node.grad)
            node._parents = ()
            node._backward = None
            node.grad = None if node is not loss else node.grad


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class AdamW:
    """AdamW with decoupled weight decay (no amsgrad)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-5, weight_decay=1e-2):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        adamw_step(self.params, [p.grad for p in self.params], self)


def adamw_step(params, grads, state):
    """Apply one AdamW update in place. ``state.t`` must already be incremented."""
    lr, b1, b2, eps, wd, t = state.lr, state.beta1, state.beta2, state.eps, state.weight_decay, state.t
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} does not match parameter {p.shape}")
        dt = p.data.dtype.type
        if wd:
            p.data *= dt(1.0 - lr * wd)
        m, v = state.m[i], state.v[i]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        denom = np.sqrt(v) / dt(np.sqrt(bc2)) + dt(eps)
        p.data -= dt(lr / bc1) * m / denom
        if not np.isfinite(p.data).all():
            raise NumericError("non-finite parameter after AdamW step")


def lr_schedule(epoch, base_lr, milestones=(75, 125), gamma=0.1):
    """Step decay: ``base_lr * gamma ** (#milestones <= epoch)``."""
    milestones = list(milestones)
    if milestones != sorted(milestones):
        raise ValueError("milestones must be ascending")
    return base_lr * gamma ** sum(1 for m in milestones if m <= epoch)
