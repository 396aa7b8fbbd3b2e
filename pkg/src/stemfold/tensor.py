"""Reverse-mode autodiff over float64 numpy arrays.

Small tape-based engine: every differentiable op builds a node holding its
parents and a vector-Jacobian closure. `backward()` walks the tape once in
reverse topological order. All values are C-contiguous float64; a tape is
owned by a single forward pass and never shared across threads.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """Value node. `data` is always a float64 ndarray; `grad` is filled by
    backward() for nodes with requires_grad."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        d = np.asarray(data, dtype=np.float64)
        if d.ndim and not d.flags.c_contiguous:
            d = np.ascontiguousarray(d)
        self.data = d
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple[Array | None, ...]] | None = None

    # -- construction ------------------------------------------------------

    @staticmethod
    def _from_op(data: Array, parents: Sequence["Tensor"],
                 vjp: Callable[[Array], tuple[Array | None, ...]]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward ----------------------------------------------------------

    def backward(self, grad: Array | None = None) -> None:
        """Reverse accumulation from this node. Defaults to d(self)/d(self)=1
        and therefore requires a scalar unless `grad` is given."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar output")
            grad = np.ones_like(self.data)
        seed = np.asarray(grad, dtype=np.float64)
        if seed.shape != self.data.shape:
            seed = np.broadcast_to(seed, self.data.shape).copy()
        order = self._toposort()
        grads: dict[int, Array] = {id(self): seed}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._vjp is None:
                # leaf
                if node.grad is None:
                    node.grad = g.copy() if (g.base is not None) else g
                else:
                    node.grad = node.grad + g
                continue
            if node._vjp is None:
                continue
            # vjps return one fresh array per parent (never the same object
            # twice), aside from possibly passing `g` through unchanged
            contribs = node._vjp(g)
            for p, c in zip(node._parents, contribs):
                if c is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                if prev is None:
                    # own the array; copy only when it aliases upstream storage
                    grads[id(p)] = c.copy() if (c is g or c.base is not None) else c
                else:
                    prev += c
                    grads[id(p)] = prev

    def _toposort(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        order.reverse()
        return order

    # -- operators ---------------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return powi(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # convenience aliases
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x) -> Array:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return Tensor._from_op(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return Tensor._from_op(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data
    out = ad * bd

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = astensor(a)

    def vjp(g):
        return (-g,)

    return Tensor._from_op(-a.data, (a,), vjp)


def powi(a, p) -> Tensor:
    """Power with a constant (non-differentiated) exponent."""
    a = astensor(a)
    p = float(p)
    ad = a.data
    out = ad ** p

    def vjp(g):
        return (g * p * ad ** (p - 1.0),)

    return Tensor._from_op(out, (a,), vjp)


def square(a) -> Tensor:
    a = astensor(a)
    ad = a.data

    def vjp(g):
        return (g * (2.0 * ad),)

    return Tensor._from_op(ad * ad, (a,), vjp)


# -- elementwise nonlinearities ----------------------------------------------

def relu(a) -> Tensor:
    a = astensor(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (out > 0.0),)

    return Tensor._from_op(out, (a,), vjp)


def exp(a) -> Tensor:
    a = astensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return Tensor._from_op(out, (a,), vjp)


def log(a) -> Tensor:
    a = astensor(a)
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return Tensor._from_op(np.log(ad), (a,), vjp)


def sqrt(a) -> Tensor:
    a = astensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g / (2.0 * out),)

    return Tensor._from_op(out, (a,), vjp)


def tanh(a) -> Tensor:
    a = astensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor._from_op(out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = astensor(a)
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1.0 + e)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (a,), vjp)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably as max(x,0) + log1p(exp(-|x|))."""
    a = astensor(a)
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))

    def vjp(g):
        s = np.empty_like(ad)
        pos = ad >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
        e = np.exp(ad[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)

    return Tensor._from_op(out, (a,), vjp)


# -- reductions ---------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, ad.shape),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % ad.ndim for ax in axes)
            gshape = tuple(1 if i in axes else n for i, n in enumerate(ad.shape))
            g = g.reshape(gshape)
        return (np.broadcast_to(g, ad.shape),)

    return Tensor._from_op(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    ad = a.data
    if axis is None:
        n = ad.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= ad.shape[ax % ad.ndim]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    ad = a.data
    out = ad.max(axis=axis, keepdims=True)

    def vjp(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % ad.ndim for ax in axes)
            gshape = tuple(1 if i in axes else n for i, n in enumerate(ad.shape))
            g = g.reshape(gshape)
        elif axis is None and not keepdims:
            g = np.asarray(g).reshape((1,) * ad.ndim)
        mask = (ad == out)
        denom = mask.sum(axis=axis if axis is not None else None, keepdims=True)
        return (g * mask / denom,)

    res = out if keepdims else np.asarray(out.squeeze(
        axis=axis if axis is not None else tuple(range(ad.ndim))))
    return Tensor._from_op(res, (a,), vjp)


# -- shape ops ----------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = astensor(a)
    ad = a.data
    out = np.ascontiguousarray(ad.reshape(shape))

    def vjp(g):
        return (g.reshape(ad.shape),)

    return Tensor._from_op(out, (a,), vjp)


def transpose(a, axes=None) -> Tensor:
    a = astensor(a)
    ad = a.data
    out = np.ascontiguousarray(ad.transpose(axes))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return Tensor._from_op(out, (a,), vjp)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis or p is None
               for p in parts)


def getitem(a, idx) -> Tensor:
    a = astensor(a)
    ad = a.data
    out = np.ascontiguousarray(ad[idx])
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros_like(ad)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(out, (a,), vjp)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in tensors]
    datas = [t.data for t in ts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tuple(ts), vjp)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(np.ascontiguousarray(moved[i]) for i in range(len(ts)))

    return Tensor._from_op(out, tuple(ts), vjp)


# -- fused linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        if bd.ndim == 2 and ad.ndim >= 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp)


def affine(x, w, b=None, relu_out: bool = False) -> Tensor:
    """x @ w (+ b) with optional fused ReLU; stores only the output for the
    backward pass. `w` is (in, out); x is (..., in)."""
    x, w = astensor(x), astensor(w)
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        b = astensor(b)
        out += b.data
    if relu_out:
        np.maximum(out, 0.0, out=out)

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        if relu_out:
            g = g * (out > 0.0)
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is None:
            return gx, gw
        gb = _unbroadcast(g, b.data.shape)
        return gx, gw, gb

    return Tensor._from_op(out, parents, vjp)


def masked_softmax(scores, mask: Array | None, axis: int = -1) -> Tensor:
    """Softmax along `axis` restricted to positions where `mask` is truthy.

    Masked positions get exactly 0 weight; rows with no valid position come
    out all-zero (callers treat them as 'no neighbors'). The shift by the row
    max makes the result invariant to adding a constant to all logits.
    """
    scores = astensor(scores)
    sd = scores.data
    if sd.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        neg = np.where(m, sd, -np.inf)
        mx = np.max(neg, axis=axis, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.exp(np.where(m, sd - mx, -np.inf))
        e = np.where(m, e, 0.0)
        denom = e.sum(axis=axis, keepdims=True)
        out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    else:
        mx = sd.max(axis=axis, keepdims=True)
        e = np.exp(sd - mx)
        out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor._from_op(out, (scores,), vjp)


def softmax(scores, axis: int = -1) -> Tensor:
    """Row-stable softmax: outputs in (0,1), summing to 1 along `axis`."""
    return masked_softmax(scores, None, axis=axis)


def rk4_combine(z, k1, k2, k3, k4, h: float) -> Tensor:
    """Fused classic Runge-Kutta update z + h/6 (k1 + 2 k2 + 2 k3 + k4)."""
    z, k1, k2, k3, k4 = map(astensor, (z, k1, k2, k3, k4))
    c = h / 6.0
    out = z.data + c * (k1.data + 2.0 * (k2.data + k3.data) + k4.data)

    def vjp(g):
        # contributions must be distinct arrays per parent (see backward())
        return g, g * c, g * (2.0 * c), g * (2.0 * c), g * c

    return Tensor._from_op(out, (z, k1, k2, k3, k4), vjp)


def pairwise_relu_sum(zi_proj, zj_proj, bias, weights: Array) -> Tensor:
    """Weighted neighbor aggregation of a pairwise hidden layer:

        out[b, i, :] = sum_j weights[b, i, j] * relu(zi_proj[b, i, :]
                                                     + zj_proj[b, j, :] + bias)

    `weights` is a constant (b, n, n) array (adjacency gate). Keeps only a
    boolean pre-activation mask for backward, so unrolled ODE solvers do not
    retain the (b, n, n, h) activations.
    """
    zi_proj, zj_proj, bias = astensor(zi_proj), astensor(zj_proj), astensor(bias)
    zi, zj, bd = zi_proj.data, zj_proj.data, bias.data
    w = np.asarray(weights, dtype=np.float64)
    b_, n, h = zi.shape
    out = np.zeros((b_, n, h))
    mask = np.empty((b_, n, n, h), dtype=bool)
    for j in range(n):
        pre = zi + zj[:, j, None, :] + bd
        np.maximum(pre, 0.0, out=pre)
        mask[:, :, j, :] = pre > 0.0
        out += w[:, :, j, None] * pre

    def vjp(g):
        # d pre[b,i,j,:] = w[b,i,j] * mask[b,i,j,:] * g[b,i,:]
        gi = np.zeros((b_, n, h))
        gj = np.empty((b_, n, h))
        for j in range(n):
            t = (w[:, :, j, None] * mask[:, :, j, :]) * g
            gi += t
            gj[:, j] = t.sum(axis=1)
        gb = _unbroadcast(gi.sum(axis=(0, 1)), bd.shape)
        return gi, gj, gb

    return Tensor._from_op(out, (zi_proj, zj_proj, bias), vjp)
