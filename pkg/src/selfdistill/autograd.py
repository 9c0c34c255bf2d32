"""A small reverse-mode autodiff tape over numpy arrays.

Only the operations the encoder and probes need are defined.  Each op
computes its forward value eagerly and records a closure mapping the output
gradient to parent gradients.  ``Tensor.backward`` walks the graph in
reverse topological order.
"""

import numpy as np
from scipy.special import erf

from .errors import UsageError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that is not part of a gradient graph")
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / scalar)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, rg, parents if rg else (), backward if rg else None)


def unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.data.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.data.dtype)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), back)


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x, idx):
    shape, dtype = x.shape, x.data.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), back)


def tsum(x, axis=None, keepdims=False):
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def stack_mean(tensors):
    """Element-wise mean of equally shaped tensors."""
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return mul(out, 1.0 / len(tensors))


def gelu(x):
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def relu(x):
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * pos,))


def dropout(x, p, rng):
    """Inverted dropout; identity when ``rng`` is None or ``p`` is 0."""
    if rng is None or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


def layer_norm(x, gamma, beta, eps=1e-5):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        gg = unbroadcast(g * xhat, gd.shape)
        gb = unbroadcast(g, gd.shape)
        gx_hat = g * gd
        n = xd.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, gg, gb

    return _make(xhat * gd + beta.data, (x, gamma, beta), back)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def l2_normalize(x, axis=-1, eps=1e-8):
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    clamped = np.maximum(norm, eps)
    y = xd / clamped
    active = norm > eps

    def back(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - y * proj) / clamped, g / clamped),)

    return _make(y, (x,), back)


def weighted_cross_entropy(logits, targets, weights):
    """``sum_i weights[i] * CE(logits[i], targets[i])`` for 2-D ``logits``."""
    ld = logits.data
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(ld.shape[0])
    ce = lse - z[rows, targets]
    w = np.asarray(weights, dtype=ld.dtype)
    p = np.exp(z - lse[:, None])

    def back(g):
        grad = p.copy()
        grad[rows, targets] -= 1.0
        return (grad * (w * g)[:, None],)

    return _make(np.asarray((w * ce).sum(), dtype=ld.dtype), (logits,), back)


def conv1d(x, w, b=None, stride=1, padding=0, groups=1):
    """Time convolution of ``x`` (B, T, Cin) with ``w`` (Cout, Cin/groups, K).

    ``padding`` is an int (both sides) or a ``(left, right)`` pair of zero pads.
    """
    xd, wd = x.data, w.data
    bsz, t_in, c_in = xd.shape
    c_out, cg, k = wd.shape
    if c_in != cg * groups or c_out % groups:
        raise ValueError("conv1d channel/group mismatch")
    pl, pr = (padding, padding) if np.isscalar(padding) else padding
    xp = np.pad(xd, ((0, 0), (pl, pr), (0, 0))) if pl or pr else xd
    t_pad = xp.shape[1]
    t_out = (t_pad - k) // stride + 1
    if t_out < 1:
        raise ValueError("conv1d input shorter than kernel")
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, : (t_out - 1) * stride + 1 : stride]
    og = c_out // groups
    outs = []
    for gi in range(groups):
        wg = wd[gi * og : (gi + 1) * og]
        outs.append(np.tensordot(win[:, :, gi * cg : (gi + 1) * cg, :], wg, axes=([2, 3], [1, 2])))
    y = outs[0] if groups == 1 else np.concatenate(outs, axis=-1)
    parents = (x, w)
    if b is not None:
        y = y + b.data
        parents = (x, w, b)

    def back(g):
        gw = np.empty_like(wd)
        dwin = np.empty(win.shape, dtype=xd.dtype)
        for gi in range(groups):
            gg = g[..., gi * og : (gi + 1) * og]
            wg = wd[gi * og : (gi + 1) * og]
            xw = win[:, :, gi * cg : (gi + 1) * cg, :]
            gw[gi * og : (gi + 1) * og] = np.tensordot(gg, xw, axes=([0, 1], [0, 1]))
            dwin[:, :, gi * cg : (gi + 1) * cg, :] = np.tensordot(gg, wg, axes=([2], [0]))
        gxp = np.zeros_like(xp)
        span = (t_out - 1) * stride + 1
        for j in range(k):
            gxp[:, j : j + span : stride] += dwin[..., j]
        gx = gxp[:, pl : pl + t_in]
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 1)),)
        return grads

    return _make(y.astype(xd.dtype, copy=False), parents, back)


def blend_rows(x, mask, emb):
    """Replace rows of ``x`` (B, T, D) where ``mask`` (B, T) is true by ``emb`` (D,)."""
    m = np.asarray(mask, dtype=bool)[..., None]
    xd = x.data
    y = np.where(m, emb.data, xd)

    def back(g):
        return np.where(m, 0, g), (g * m).sum(axis=tuple(range(g.ndim - 1)))

    return _make(y.astype(xd.dtype, copy=False), (x, emb), back)
