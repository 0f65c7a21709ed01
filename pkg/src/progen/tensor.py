"""Small reverse-mode autodiff over float64 numpy arrays.

Every operation that touches a tensor with ``requires_grad`` records a node
holding its parents and a closure mapping the output gradient to parent
gradients. Node ids come from a global counter, so sorting reachable nodes by
id gives a valid topological order and a graph can be walked backwards any
number of times.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .exceptions import ContractError, NumericError, ShapeError

_ids = itertools.count()
_grad_enabled = True
_debug = False

# Fill value for masked attention logits; exp() of it underflows to exactly 0.
MASK_FILL = -1e30


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def set_debug(flag):
    """Turn the per-op NaN/Inf check on or off. Returns the previous value."""
    global _debug
    prev = _debug
    _debug = bool(flag)
    return prev


@contextmanager
def debug_numerics():
    prev = set_debug(True)
    try:
        yield
    finally:
        set_debug(prev)


class Tensor:
    """n-dimensional float64 array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def node_id(self):
        return self._id if self._backward is not None else None

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, params=None):
        backward(self, params=params)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    if _debug and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss, params=None):
    """Fill ``.grad`` of every leaf reachable from the scalar ``loss``.

    Gradients are written, not accumulated, so walking the same graph twice
    gives identical results. Tensors listed in ``params`` that the loss does
    not depend on receive a zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        for p in t._parents:
            if p.requires_grad and p._id not in nodes:
                stack.append(p)

    grads = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = np.array(g, dtype=np.float64)
            continue
        parent_grads = t._backward(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return _make(ad / bd, (a, b), bw, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a):
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "relu")


def _sigmoid(x):
    # two-branch form: no overflow for large |x|, saturates to exact 0/1
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def masked_fill(a, keep, value=MASK_FILL):
    """Replace entries where ``keep`` is False by ``value`` (broadcasting mask)."""
    keep = np.asarray(keep, dtype=bool)
    out = np.where(keep, a.data, value)
    shape = a.shape
    return _make(out, (a,), lambda g: (_unbroadcast(np.where(keep, g, 0.0), shape),), "masked_fill")


def dropout(a, rate, rng, training=True):
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(np.matmul(ad, bd), (a, b), bw, "matmul")


# ---------------------------------------------------------------- shape ops


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    shape = a.shape
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def broadcast_to(a, shape):
    old = a.shape
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _make(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------- normalisation


def _softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis=-1):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    out = _softmax(a.data, axis)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gain, bias), bw, "layer_norm")


def cross_entropy(logits, targets, pad_id=0):
    """Mean negative log-likelihood of ``targets`` over non-pad positions.

    ``logits`` has shape (..., V) and ``targets`` the leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    V = logits.shape[-1]
    keep = targets != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ContractError("cross_entropy needs at least one non-pad target")
    bad = keep & ((targets < 0) | (targets >= V))
    if bad.any():
        raise IndexError(f"target id {int(targets[bad][0])} out of range for vocabulary of {V}")

    x = logits.data.reshape(-1, V)
    t = np.where(keep, targets, 0).reshape(-1)
    k = keep.reshape(-1)
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(t))
    nll = (lse - z[rows, t]) * k
    loss = nll.sum() / n
    shape = logits.shape

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        p *= (k / n)[:, None]
        return (g * p.reshape(shape),)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- lookup / vision


def embedding(weight, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range for embedding table of {weight.shape[0]}")
    shape = weight.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(weight.data[ids], (weight,), bw, "embedding")


def conv2d(x, w, b):
    """'Same' 2-D convolution, stride 1, channels-last.

    x: (N, H, W, Cin); w: (kh, kw, Cin, Cout) with odd kernel sides; b: (Cout,).
    """
    N, H, W, C = x.shape
    kh, kw, cin, cout = w.shape
    if cin != C:
        raise ShapeError(f"conv2d expects {cin} input channels, got {C}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # (N, H, W, kh, kw, C) view of every receptive field
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(N * H * W, kh * kw * C)
    wm = w.data.reshape(kh * kw * C, cout)
    out = (cols @ wm + b.data).reshape(N, H, W, cout)

    def bw(g):
        g2 = g.reshape(N * H * W, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        if b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ wm.T).reshape(N, H, W, kh, kw, C)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + H, j:j + W, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, ph:ph + H, pw:pw + W, :]
        return gx, gw, gb

    return _make(out, (x, w, b), bw, "conv2d")


def max_pool2d(x, k=2):
    N, H, W, C = x.shape
    if H % k or W % k:
        raise ShapeError(f"max_pool2d: spatial size {(H, W)} not divisible by {k}")
    blocks = x.data.reshape(N, H // k, k, W // k, k, C).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(N, H // k, W // k, C, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(N, H // k, W // k, C, k, k).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(N, H, W, C),)

    return _make(out, (x,), bw, "max_pool2d")


# ---------------------------------------------------------------- optimiser


class Adam:
    """Adam with per-group learning rates.

    ``groups`` is a list of ``{"params": [...], "lr": float, "name": str}``
    dicts (a bare list of tensors is accepted as a single group).
    """

    def __init__(self, groups, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if groups and isinstance(groups[0], Tensor):
            groups = [{"params": list(groups), "lr": lr}]
        self.groups = []
        for grp in groups:
            if grp["lr"] <= 0:
                raise ContractError(f"learning rate must be positive, got {grp['lr']}")
            self.groups.append({"name": grp.get("name", "default"), "lr": float(grp["lr"]),
                                "params": list(grp["params"])})
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [[np.zeros_like(p.data) for p in g["params"]] for g in self.groups]
        self.v = [[np.zeros_like(p.data) for p in g["params"]] for g in self.groups]

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = np.zeros_like(p.data)

    def step(self):
        for g in self.groups:
            for p in g["params"]:
                if p.grad is None:
                    raise ContractError(f"parameter {p.name or p.shape} has no gradient")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for gi, g in enumerate(self.groups):
            lr = g["lr"]
            for pi, p in enumerate(g["params"]):
                grad = p.grad
                m = self.m[gi][pi]
                v = self.v[gi][pi]
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()


# ---------------------------------------------------------------- gradient checking


def numerical_grad(fn, inputs, h=1e-6):
    """Central finite differences of scalar ``fn()`` w.r.t. each input tensor."""
    out = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = fn().item()
            flat[i] = orig - h
            with no_grad():
                fm = fn().item()
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def gradcheck(fn, inputs, h=1e-6, floor=1e-5):
    """Largest elementwise relative error between autodiff and finite differences.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for t in inputs:
        t.requires_grad = True
    loss = fn()
    backward(loss, params=inputs)
    analytic = [t.grad.copy() for t in inputs]
    numeric = numerical_grad(fn, inputs, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
