"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps an ndarray and remembers how it was produced. Calling
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates gradients into every reachable tensor that requires them.
Gradients of unreachable tensors stay exactly zero.

Two process-wide switches control behavior: the default float dtype
(float32 for training, float64 for gradient checks) and the train/eval
flag consulted by dropout. Both have context-manager helpers so tests can
flip them locally.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import InvalidArgument

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_TRAINING = False

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise InvalidArgument(f"default dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_training(flag: bool) -> None:
    global _TRAINING
    _TRAINING = bool(flag)


def is_training() -> bool:
    return _TRAINING


@contextmanager
def train_mode():
    global _TRAINING
    prev = _TRAINING
    _TRAINING = True
    try:
        yield
    finally:
        _TRAINING = prev


@contextmanager
def eval_mode():
    global _TRAINING
    prev = _TRAINING
    _TRAINING = False
    try:
        yield
    finally:
        _TRAINING = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def inference_mode():
    """Eval semantics: no tape, dropout off."""
    with no_grad(), eval_mode():
        yield


class Tensor:
    """A dense array plus the tape entry that produced it."""

    __slots__ = ("data", "requires_grad", "_grad", "parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        if isinstance(data, Tensor):
            raise InvalidArgument("wrap ndarrays or scalars, not Tensors")
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self.parents: tuple = ()
        self._backward_fn = None
        self.op = op

    # -- bookkeeping -------------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g.astype(self.data.dtype, copy=False)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype, op="detach")

    def backward(self) -> None:
        """Accumulate dL/dx into every tensor reachable from this scalar."""
        if self.data.size != 1:
            raise InvalidArgument(f"backward() needs a scalar, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward_fn is None:
                node._accumulate(g)
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                elif parent._backward_fn is None:
                    parent._accumulate(pg)
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise InvalidArgument("tensor/tensor division is not a primitive; use explicit ops")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op})"


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order, iteratively (graphs can be deep)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, dtype=dtype)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, dtype=data.dtype, op=op)
    if track:
        out.parents = parents
        out._backward_fn = backward_fn
    return out


def _as_constant_array(x, like: Tensor) -> np.ndarray:
    arr = np.asarray(x, dtype=like.data.dtype)
    return arr


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise InvalidArgument(f"add shapes differ: {a.shape} vs {b.shape}; broadcast explicitly")
        out = a.data + b.data
        return _make(out, (a, b), lambda g: (g, g), "add")
    const = _as_constant_array(b, a)
    out = a.data + const
    if out.shape != a.shape:
        raise InvalidArgument("constant operand must not change the shape")
    return _make(out, (a,), lambda g: (g,), "add")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise InvalidArgument(f"mul shapes differ: {a.shape} vs {b.shape}; broadcast explicitly")
        out = a.data * b.data
        return _make(out, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    const = _as_constant_array(b, a)
    out = a.data * const
    if out.shape != a.shape:
        raise InvalidArgument("constant operand must not change the shape")
    return _make(out, (a,), lambda g: (g * const,), "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise InvalidArgument("matmul expects two Tensors")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise InvalidArgument(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat_last(parts: list) -> Tensor:
    if not parts:
        raise InvalidArgument("concat of zero tensors")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise InvalidArgument("concat operands must agree on leading dims")
    widths = [p.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)

    def backward(g):
        grads = []
        lo = 0
        for w in widths:
            grads.append(g[..., lo:lo + w])
            lo += w
        return tuple(grads)

    return _make(out, tuple(parts), backward, "concat")


def narrow(a: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    """Contiguous slice [lo:hi) along `axis`."""
    extent = a.shape[axis]
    if not (0 <= lo < hi <= extent):
        raise InvalidArgument(f"narrow [{lo}:{hi}] out of range for axis {axis} (size {extent})")
    index = [slice(None)] * a.ndim
    index[axis] = slice(lo, hi)
    index = tuple(index)
    out = a.data[index].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(out, (a,), backward, "narrow")


def slice_last(a: Tensor, lo: int, hi: int) -> Tensor:
    width = a.shape[-1]
    if not (0 <= lo < hi <= width):
        raise InvalidArgument(f"slice [{lo}:{hi}] out of range for width {width}")
    out = a.data[..., lo:hi].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., lo:hi] = g
        return (full,)

    return _make(out, (a,), backward, "slice")


# -- elementwise nonlinearities ---------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    # Numerically symmetric form; stays finite for large |x|.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (a.data > 0),), "relu")


def gelu(a: Tensor) -> Tensor:
    # Exact erf form; matches the derivative used in gradient checks.
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), backward, "gelu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


# -- reductions --------------------------------------------------------------


def sum_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return mul(sum_axis(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- softmax family -----------------------------------------------------------


def softmax_last(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward, "softmax")


def log_softmax_last(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def logsumexp_last(a: Tensor, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(a.data - m).sum(axis=-1, keepdims=True)) + m
    out = lse if keepdims else lse[..., 0]
    soft = np.exp(a.data - lse)

    def backward(g):
        g2 = g if keepdims else g[..., None]
        return (g2 * soft,)

    return _make(out, (a,), backward, "logsumexp")


# -- normalization ------------------------------------------------------------


def layer_norm_last(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance. Pre-affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _make(out, (a,), backward, "layer_norm")


def l2_normalize_last(a: Tensor, eps: float = 1e-12) -> Tensor:
    x = a.data
    inv = 1.0 / np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    out = x * inv

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (inv * (g - out * dot),)

    return _make(out, (a,), backward, "l2_normalize")


# -- indexing ----------------------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise InvalidArgument(
            f"token id out of range [0, {weight.shape[0]}): min={ids.min()}, max={ids.max()}")
    out = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _make(out, (weight,), backward, "embedding")


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[...] = a[..., idx[...]] where idx.shape == a.shape[:-1]."""
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise InvalidArgument(f"gather index shape {idx.shape} != {a.shape[:-1]}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return _make(out, (a,), backward, "gather")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True by `value` (a constant)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data)
    return _make(out, (a,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select by a constant boolean condition; exact, not blended."""
    if a.shape != b.shape:
        raise InvalidArgument(f"where operands differ: {a.shape} vs {b.shape}")
    cond = np.broadcast_to(np.asarray(cond, dtype=bool), a.shape)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        return (np.where(cond, g, 0.0), np.where(cond, 0.0, g))

    return _make(out, (a, b), backward, "where")


# -- stochastic ---------------------------------------------------------------


def dropout(a: Tensor, rate: float, stream: np.random.Generator) -> Tensor:
    """Inverted dropout. Identity (the same tensor) when not training or rate 0."""
    if not (0.0 <= rate < 1.0):
        raise InvalidArgument(f"dropout rate must be in [0, 1), got {rate}")
    if not _TRAINING or rate == 0.0:
        return a
    keep = (stream.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return mul(a, keep)
