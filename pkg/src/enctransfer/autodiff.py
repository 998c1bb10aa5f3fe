"""Minimal reverse-mode automatic differentiation on dense float32 arrays.

Define-by-run: every operation records its parents and a backward closure
on the output tensor, so the computation graph is rebuilt on each forward
pass and never shared between concurrent evaluations. Reductions
accumulate in float64 and cast back to float32.

Layer coverage is intentionally small: exactly what a small CNN and a
tiny ViT need (conv2d, linear via matmul, relu, max-pool, global average
pool, layer-norm, softmax, attention via batched matmul, cross-entropy).
"""

from __future__ import annotations

import numpy as np

# When True (default), every op output is checked for NaN/Inf.
strict_finite = True

# Working precision. float32 in production; tests switch to float64 when
# comparing against finite differences so the oracle is not drowned by
# rounding noise.
_dtype = np.float32


def set_dtype(dt):
    global _dtype
    _dtype = np.dtype(dt).type


def get_dtype():
    return _dtype


class NumericalError(ValueError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested op."""


def _as_f32(x):
    a = np.asarray(x, dtype=_dtype)
    return a


def _check_finite(data, op):
    # float64 sum of float32 values cannot overflow, so a non-finite sum
    # means NaN/Inf is present; avoids allocating an isfinite mask
    if strict_finite and not np.isfinite(np.sum(data, dtype=np.float64)):
        raise NumericalError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A float32 array plus optional gradient and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = _as_f32(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def backward(self):
        backward(self)

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)


def _make(data, parents, backward_fn, op):
    _check_finite(data, op)
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_dtype))


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.astype(_dtype).reshape(shape)


def _accum(t, g):
    # grads are never mutated in place, so storing a view is safe
    g = g.astype(_dtype, copy=False)
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


# -- elementwise ----------------------------------------------------------

def add(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd, "add")


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data - b.data

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd, "sub")


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd, "mul")


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data / b.data

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bwd, "div")


def relu(a):
    a = _coerce(a)
    data = np.maximum(a.data, 0.0)

    def bwd(out):
        if a.requires_grad:
            _accum(a, out.grad * (a.data > 0))

    return _make(data, (a,), bwd, "relu")


def sin(a):
    a = _coerce(a)
    data = np.sin(a.data)

    def bwd(out):
        if a.requires_grad:
            _accum(a, out.grad * np.cos(a.data))

    return _make(data, (a,), bwd, "sin")


# -- shape ops ------------------------------------------------------------

def concat(tensors, axis):
    tensors = [_coerce(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bwd(out):
        for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
            if t.requires_grad:
                _accum(t, g)

    return _make(data, tuple(tensors), bwd, "concat")

def reshape(a, shape):
    a = _coerce(a)
    data = a.data.reshape(shape)

    def bwd(out):
        if a.requires_grad:
            _accum(a, out.grad.reshape(a.data.shape))

    return _make(data, (a,), bwd, "reshape")


def transpose(a, axes):
    a = _coerce(a)
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bwd(out):
        if a.requires_grad:
            _accum(a, out.grad.transpose(inv))

    return _make(data, (a,), bwd, "transpose")


def take_per_row(a, idx):
    """Select one column per row of a 2-D tensor: out[i] = a[i, idx[i]]."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_per_row expects 2-D input, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def bwd(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, (rows, idx), out.grad)
            _accum(a, g)

    return _make(data, (a,), bwd, "take_per_row")


# -- reductions -----------------------------------------------------------

def tsum(a, axis=None):
    a = _coerce(a)
    data = a.data.sum(axis=axis, dtype=np.float64).astype(_dtype)

    def bwd(out):
        if not a.requires_grad:
            return
        g = out.grad
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _make(data, (a,), bwd, "sum")


def tmean(a, axis=None):
    a = _coerce(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    data = (a.data.sum(axis=axis, dtype=np.float64) / n).astype(_dtype)

    def bwd(out):
        if not a.requires_grad:
            return
        g = out.grad / n
        if axis is None:
            _accum(a, np.broadcast_to(np.asarray(g, dtype=_dtype), a.data.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).astype(_dtype))

    return _make(data, (a,), bwd, "mean")


# -- linear algebra -------------------------------------------------------

def matmul(a, b):
    """Matrix product; supports 2-D and batched (>=3-D) operands."""
    a, b = _coerce(a), _coerce(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), bwd, "matmul")


def linear(x, w, b=None):
    """x @ w + b for 2-D x; higher-rank x is flattened on leading dims."""
    x = _coerce(x)
    lead = x.data.shape[:-1]
    x2 = reshape(x, (-1, x.data.shape[-1])) if x.data.ndim != 2 else x
    out = matmul(x2, w)
    if b is not None:
        out = add(out, b)
    if x.data.ndim != 2:
        out = reshape(out, lead + (w.data.shape[-1],))
    return out


# -- conv / pool ----------------------------------------------------------

def _im2col(x, kh, kw, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # (n, c, oh, ow, kh, kw) -> (n, oh, ow, c*kh*kw)
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def conv2d(x, w, b=None, pad=1):
    """2-D convolution, stride 1. x: (N,C,H,W), w: (F,C,kh,kw), b: (F,)."""
    x, w = _coerce(x), _coerce(w)
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    cols, oh, ow = _im2col(x.data, kh, kw, pad)
    wmat = w.data.reshape(f, -1)
    out = cols.reshape(-1, c * kh * kw) @ wmat.T
    out = out.reshape(n, oh, ow, f)
    if b is not None:
        out = out + b.data
    data = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    parents = (x, w) if b is None else (x, w, b)

    def bwd(outt):
        gout = outt.grad  # (n, f, oh, ow)
        g = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(-1, f)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=0, dtype=np.float64).astype(_dtype))
        if w.requires_grad:
            gw = g.T @ cols.reshape(-1, c * kh * kw)
            _accum(w, gw.reshape(w.data.shape))
        if x.requires_grad:
            # input grad = correlation of gout with the flipped kernel
            wflip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gcols, gh, gw2 = _im2col(gout, kh, kw, kh - 1 - pad)
            gx = gcols.reshape(-1, f * kh * kw) @ wflip.reshape(c, -1).T
            _accum(x, np.ascontiguousarray(gx.reshape(n, gh, gw2, c).transpose(0, 3, 1, 2)))

    return _make(data, parents, bwd, "conv2d")


def maxpool2d(x):
    """2x2 max pooling with stride 2; H and W must be even."""
    x = _coerce(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    r = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    r = np.ascontiguousarray(r).reshape(n, c, h // 2, w // 2, 4)
    idx = r.argmax(axis=-1)
    data = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]

    def bwd(out):
        if not x.requires_grad:
            return
        g = np.zeros_like(r)
        np.put_along_axis(g, idx[..., None], out.grad[..., None], axis=-1)
        g = g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accum(x, g)

    return _make(data, (x,), bwd, "maxpool2d")


def global_avg_pool(x):
    """(N,C,H,W) -> (N,C) spatial mean."""
    x = _coerce(x)
    n, c, h, w = x.data.shape
    data = (x.data.sum(axis=(2, 3), dtype=np.float64) / (h * w)).astype(_dtype)

    def bwd(out):
        if x.requires_grad:
            g = np.broadcast_to(out.grad[:, :, None, None] / (h * w), x.data.shape)
            _accum(x, g)

    return _make(data, (x,), bwd, "global_avg_pool")


# -- normalization / classification --------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x = _coerce(x)
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = x.data.astype(np.float64).var(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(_dtype)
    xhat = ((x.data - mu) * inv).astype(_dtype)
    data = xhat * gamma.data + beta.data
    d = x.data.shape[-1]

    def bwd(out):
        g = out.grad
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0, dtype=np.float64).astype(_dtype))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0, dtype=np.float64).astype(_dtype))
        if x.requires_grad:
            gx_hat = g * gamma.data
            m1 = gx_hat.mean(axis=-1, keepdims=True, dtype=np.float64).astype(_dtype)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(_dtype)
            _accum(x, inv * (gx_hat - m1 - xhat * m2))

    return _make(data, (x, gamma, beta), bwd, "layer_norm")


def softmax(x):
    """Row-wise softmax over the last axis."""
    x = _coerce(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(_dtype)

    def bwd(out):
        if x.requires_grad:
            g = out.grad
            dot = (g * data).sum(axis=-1, keepdims=True, dtype=np.float64).astype(_dtype)
            _accum(x, data * (g - dot))

    return _make(data, (x,), bwd, "softmax")


def cross_entropy(logits, labels):
    """Per-example cross-entropy loss vector from raw logits.

    labels: int array (N,). Returns Tensor of shape (N,), each entry >= 0.
    """
    logits = _coerce(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N,K) logits, got {logits.data.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, dtype=np.float64)).astype(_dtype)
    rows = np.arange(n)
    data = lse - z[rows, labels]

    def bwd(out):
        if logits.requires_grad:
            p = np.exp(z - lse[:, None]).astype(_dtype)
            p[rows, labels] -= 1.0
            _accum(logits, p * out.grad[:, None])

    return _make(data, (logits,), bwd, "cross_entropy")


def scaled_dot_product_attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v on (..., T, d) tensors."""
    d = q.data.shape[-1]
    scores = mul(matmul(q, transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))),
                 1.0 / np.sqrt(d))
    return matmul(softmax(scores), v)


# -- backward pass --------------------------------------------------------

def topo_order(root):
    """Topologically ordered op records reachable from `root`."""
    order, seen = [], set()
    stack = [(root, False)]
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
            stack.append((p, False))
    return order


def backward(loss):
    """Populate .grad for every requires_grad tensor reachable from `loss`.

    `loss` must be scalar. Gradient accumulation over fan-out is additive;
    existing .grad values on leaves are added to (call zero_grad between
    steps).
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; no graph was recorded")
    order = topo_order(loss)
    for node in order:
        if node is not loss:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)


class SGD:
    """SGD with classical momentum and L2 weight decay.

    v <- momentum * v + (g + wd * p);  p <- p - lr * v
    Velocity persists across steps. Decay is applied to weight matrices
    only; biases, gains and other 1-d parameters are exempt, the usual
    convention.
    """

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError(f"grad shape {p.grad.shape} != param shape {p.data.shape} for {name}")
            g = p.grad
            if self.weight_decay and p.data.ndim > 1:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v
