"""Dense tensor with tape-based reverse-mode differentiation.

Every op produces a new contiguous array; nothing aliases. Gradients are
accumulated into ``Tensor.grad`` for leaves that require them.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import counters

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    pass


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.kind in "iub":
        arr = arr.astype(np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    nlead = grad.ndim - len(shape)
    if nlead > 0:
        grad = grad.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = _as_array(data, dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        dtype = np.dtype(dtype)
        return _make(self.data.astype(dtype), (self,), lambda g: (g.astype(self.dtype),))

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- differentiation --------------------------------------------------
    def backward(self, grad=None):
        """Propagate ``grad`` (defaults to ones for a scalar) to every leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor with no recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"seed gradient required for non-scalar output of shape {self.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = _as_array(grad, self.dtype)
            if seed.shape != self.shape:
                raise ShapeError(f"seed gradient shape {seed.shape} does not match output shape {self.shape}")
        order = _topo_order(self)
        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _topo_order(root: Tensor) -> list:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    if rg:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise binary ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)
    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None)
    return _make(out, (a, b), bw)


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("maximum", a, b)
    mask = a.data >= b.data
    return _make(np.maximum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _pair(a, b)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),
                            _unbroadcast(np.where(cond, 0, g), b.shape)))


# -- elementwise unary ----------------------------------------------------
def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0, x)
    sig = np.exp(x - out)
    return _make(out.astype(x.dtype), (a,), lambda g: (g * sig,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -80, 80)))
    s = s.astype(x.dtype)
    return _make(x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),))


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    c = np.sqrt(2.0 / np.pi).astype(x.dtype)
    u = c * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1 + t)

    def bw(g):
        du = c * (1 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du),)
    return _make(out, (a,), bw)


def clip(a, lo=None, hi=None) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x >= lo
    if hi is not None:
        mask &= x <= hi
    return _make(out, (a,), lambda g: (g * mask,))


# -- reductions -----------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / n)


def cumsum(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis)
    return _make(out, (a,), lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


# -- shape ops -------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def moveaxis(a, src: int, dst: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    ax = axes.pop(src % a.ndim)
    axes.insert(dst % a.ndim if dst >= 0 else a.ndim + dst, ax)
    return transpose(a, axes)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, (a,), lambda g: (_unbroadcast(g, old),))


def _has_advanced(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        raise TypeError("index with numpy arrays, not Tensors")
    out = np.array(a.data[idx], copy=True)
    shape, dtype = a.shape, a.dtype
    advanced = _has_advanced(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)
    return _make(out, (a,), bw)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather ``indices`` along ``axis``; the adjoint scatters with accumulation."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        fm = np.moveaxis(full, axis, 0)
        flat = indices.reshape(-1)
        if np.unique(flat).size == flat.size:
            fm[indices] = gm
        elif flat.size * shape[axis] <= 1 << 20:
            # duplicate indices: accumulate with a one-hot product, much faster than add.at
            onehot = np.zeros((shape[axis], flat.size), dtype=dtype)
            onehot[flat, np.arange(flat.size)] = 1
            fm[...] = (onehot @ gm.reshape(flat.size, -1)).reshape(fm.shape)
        else:
            np.add.at(fm, indices, gm)
        return (full,)
    return _make(out, (a,), bw)


def scatter(a, indices, axis: int = 0, size: int | None = None) -> Tensor:
    """Place slices of ``a`` at ``indices`` along ``axis`` of a zero tensor.

    For a permutation ``p`` (1-D indices), ``scatter(take(x, p), p)`` is ``x``.
    Duplicate indices accumulate.
    """
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ShapeError(f"scatter: indices must be 1-D, got shape {indices.shape}")
    axis = axis % a.ndim
    if a.shape[axis] != indices.shape[0]:
        raise ShapeError(f"scatter: axis {axis} of {a.shape} does not match {indices.shape[0]} indices")
    size = int(indices.max()) + 1 if size is None else size
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=a.dtype)
    np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(a.data, axis, 0))
    return _make(out, (a,), lambda g: (np.take(g, indices, axis=axis),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != axis):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: shapes {ts[0].shape} and {t.shape} differ")
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return _make(out, tuple(ts), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def pad(a, pad_width, value: float = 0.0) -> Tensor:
    a = as_tensor(a)
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    out = np.pad(a.data, pad_width, constant_values=value)
    sl = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, a.shape))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g[sl]),))


def repeat(a, repeats: int, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    out = np.repeat(a.data, repeats, axis=axis)
    shape = a.shape

    def bw(g):
        new = shape[:axis] + (shape[axis], repeats) + shape[axis + 1:]
        return (g.reshape(new).sum(axis=axis + 1),)
    return _make(out, (a,), bw)


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


# -- contractions ------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul: scalars are not allowed")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} have mismatched inner dims ({ka} vs {kb})")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: both operands must be at least 2-D, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    counters.add_macs(int(np.prod(out.shape)) * ka)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and ad.ndim > 2:
                # shared weight: one big 2-D product instead of a stack of them
                gb = ad.reshape(-1, ka).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb
    return _make(out, (a, b), bw)


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum (``'ij,jk->ik'``); no ellipsis, no repeated index per operand."""
    ops = [as_tensor(o) for o in operands]
    if "->" not in subscripts or "." in subscripts:
        raise ValueError("einsum: explicit '->' output without ellipsis is required")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ValueError(f"einsum: {len(in_subs)} subscripts for {len(ops)} operands")
    sizes: dict[str, int] = {}
    for s, o in zip(in_subs, ops):
        if len(s) != o.ndim:
            raise ShapeError(f"einsum: subscript '{s}' does not match operand shape {o.shape}")
        if len(set(s)) != len(s):
            raise ValueError(f"einsum: repeated index in operand '{s}'")
        for c, n in zip(s, o.shape):
            if sizes.setdefault(c, n) != n:
                raise ShapeError(f"einsum: index '{c}' has sizes {sizes[c]} and {n}")
    out = np.einsum(subscripts, *[o.data for o in ops], optimize=True)
    counters.add_macs(int(np.prod([sizes[c] for c in sizes])) if len(ops) > 1 else 0)

    def bw(g):
        grads = []
        for k, (s, o) in enumerate(zip(in_subs, ops)):
            if not o.requires_grad:
                grads.append(None)
                continue
            others = [(in_subs[j], ops[j].data) for j in range(len(ops)) if j != k]
            avail = set(out_sub).union(*[set(t) for t, _ in others]) if others else set(out_sub)
            target = "".join(c for c in s if c in avail)
            expr = ",".join([out_sub] + [t for t, _ in others]) + "->" + target
            gk = np.einsum(expr, g, *[d for _, d in others], optimize=True)
            if target != s:
                shape = tuple(sizes[c] if c in target else 1 for c in s)
                gk = np.broadcast_to(gk.reshape(shape), o.shape).copy()
            grads.append(gk)
        return tuple(grads)
    return _make(np.asarray(out), tuple(ops), bw)
