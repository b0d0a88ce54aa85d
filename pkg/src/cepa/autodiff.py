"""Minimal define-by-run tensor engine with reverse-mode differentiation.

Every tensor wraps a numpy array. Operations that touch a tensor with
``requires_grad`` record a backward closure and their parents; ``backward``
walks the resulting graph once in reverse topological order.

Only the primitives needed by the desk-scale classifier and the CEPA
objective are provided. Broadcasting is limited to what ``add``/``sub``/``mul``
need for bias terms and scalars.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


def seeded_rng(seed):
    """Deterministic generator: numpy's PCG64 bit generator seeded with ``seed``.

    PCG64 streams are specified by numpy and identical across platforms.
    ``seed`` may be an int or a sequence of ints (e.g. ``(seed, epoch)``).
    """
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad = None
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
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def graph(self):
        """Topologically ordered list of nodes reachable from this tensor."""
        order, seen = [], set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        order = self.graph()
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _raise_item(t):
    raise ShapeError(f"item: tensor of shape {t.shape} is not a scalar")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    """Elementwise product; a Python scalar on either side is a scalar multiply."""
    if np.isscalar(b):
        a = as_tensor(a)
        s = b
        return _result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,), "scale")
    if np.isscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def square(x):
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def tensor_sum(x, axis=None):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axes)), (x,), backward, "sum")


def mean(x, axis=None):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / n,)

    return _result(np.asarray(x.data.mean(axis=axes)), (x,), backward, "mean")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def l2_norm(x, axis=None):
    """Euclidean norm over ``axis`` (all axes by default). Gradient at 0 is 0."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    norm = np.sqrt((x.data * x.data).sum(axis=axes))

    def backward(g):
        n = np.expand_dims(norm, axes)
        safe = np.where(n > 0, n, 1)
        return (np.expand_dims(g, axes) * np.where(n > 0, x.data / safe, 0),)

    return _result(np.asarray(norm), (x,), backward, "l2_norm")


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    return _result(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x):
    """Collapse every axis after the batch axis."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where lo < x < hi."""
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def log_softmax(logits):
    z = as_tensor(logits)
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (z,), backward, "log_softmax")


def softmax(logits):
    z = as_tensor(logits)
    e = np.exp(z.data - z.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (z,), backward, "softmax")


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of integer ``labels`` under softmax(``logits``).

    ``logits`` is (N, K) or (K,). ``reduction`` is "mean", "sum" or "none".
    Computed through a shifted log-sum-exp, so tiny posteriors never
    underflow to log(0).
    """
    z = as_tensor(logits)
    single = z.data.ndim == 1
    zd = z.data[None] if single else z.data
    if zd.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 1-D or 2-D, got {z.shape}")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (zd.shape[0],):
        labels = np.broadcast_to(labels, (zd.shape[0],)) if labels.size == 1 else labels
    if labels.shape != (zd.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {z.shape} vs labels {labels.shape}")
    rows = np.arange(zd.shape[0])
    shifted = zd - zd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[rows, labels]
    p = np.exp(shifted - lse[:, None])
    p[rows, labels] -= 1.0

    if reduction == "none":
        data = losses

        def backward(g):
            return ((p * g[:, None]).reshape(z.shape),)
    elif reduction in ("mean", "sum"):
        scale = 1.0 / len(losses) if reduction == "mean" else 1.0
        data = np.asarray(losses.sum() * scale, dtype=zd.dtype)

        def backward(g):
            return ((p * (g * scale)).reshape(z.shape),)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return _result(data.astype(zd.dtype), (z,), backward, "softmax_cross_entropy")


def conv2d(x, w, b=None, padding=0):
    """Stride-1 2-D convolution (cross-correlation), NCHW layout.

    x: (N, C, H, W); w: (F, C, kh, kw); b: (F,) or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    # (N, C, Ho, Wo, kh, kw) -> (N*Ho*Wo, C*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        if b.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {f} filters")
        out = out + b.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            # (kh, kw, C) x (F) times (F) x (N, Ho, Wo): contiguous per-offset slices
            wk = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)
            gk = (wk @ g.transpose(1, 0, 2, 3).reshape(f, -1)).reshape(kh, kw, c, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += gk[i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    return _result(out.copy(), parents, backward, "conv2d")


def maxpool2d(x, k=2):
    """Non-overlapping k x k max pooling; odd trailing rows/cols are dropped.

    The gradient goes to the first maximal element of each window (row-major).
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: input {x.shape} smaller than window {k}")
    views = [x.data[:, :, i:ho * k:k, j:wo * k:k] for i in range(k) for j in range(k)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def backward(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for pos, v in enumerate(views):
            i, j = divmod(pos, k)
            hit = (v == out) & ~taken
            taken |= hit
            gx[:, :, i:ho * k:k, j:wo * k:k] = g * hit
        return (gx,)

    return _result(out, (x,), backward, "maxpool2d")


OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "relu": relu,
    "square": square,
    "sum": tensor_sum,
    "mean": mean,
    "l2_norm": l2_norm,
    "reshape": reshape,
    "flatten": flatten,
    "clip": clip,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def forward_op(kind, *inputs, **params):
    """Dispatch a primitive by name, e.g. ``forward_op("relu", x)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*inputs, **params)
