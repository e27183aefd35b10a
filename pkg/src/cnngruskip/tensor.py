"""Dense float64 tensors with a reverse-mode gradient tape.

Every numeric operation used by the model layers lives here. A tensor
created from other tensors that require gradients records a :class:`Node`
holding its parents and a backward rule; :func:`backward` linearises the
graph into a :class:`Tape` and walks it in reverse.

Broadcasting is deliberately limited: binary elementwise ops accept equal
shapes or a Python scalar. The only other broadcast is :func:`bias_add`,
which adds a vector along the trailing axis.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple
    backward: Callable[[np.ndarray], tuple]
    output: Optional["Tensor"] = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        node = Node(op, tuple(parents), backward)
        node.output = out
        out._node = node
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- tape ---------------------------------------------------------------------
@dataclass
class Tape:
    """Operations reachable from a loss, in creation (topological) order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Node] = []
        seen: set[int] = set()
        if loss._node is None:
            return cls(order)
        stack: list[tuple[Node, bool]] = [(loss._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p._node is not None and id(p._node) not in seen:
                    stack.append((p._node, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, so call
    :func:`zero_grads` between independent backward passes.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out = node.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g if out.grad is None else out.grad + g
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                if p.grad is None:
                    p.grad = np.array(pg, dtype=np.float64, copy=True)
                else:
                    p.grad += pg
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if loss._node is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    return tape


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- elementwise ----------------------------------------------------------------
def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * x * g,), "square")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# -- linear algebra -------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims must match exactly (or ``b`` is 2-D)."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {ad.shape} and {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {ad.shape} and {bd.shape}")
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            a2 = ad.reshape(-1, ad.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the trailing axis of ``x``."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias_add: bias {bias.shape} does not match trailing axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)), "bias_add")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    y = matmul(x, weight)
    return y if bias is None else bias_add(y, bias)


# -- reductions and shape ------------------------------------------------------
def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a: Tensor, start_axis: int = 0) -> Tensor:
    """Row-major flatten of every axis from ``start_axis`` on."""
    return reshape(a, a.shape[:start_axis] + (-1,))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def slice_(a: Tensor, index) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] += g
        return (full,)

    return _make(np.array(a.data[index], dtype=np.float64), (a,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of nothing")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tensors, lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _check_same(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# -- fused layers ---------------------------------------------------------------
def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), bw, "softmax")


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with symmetric zero "same" padding.

    ``x`` is ``[C_in, L]`` or ``[B, C_in, L]``; ``kernels`` is
    ``[C_out, C_in, k]`` with odd ``k``.
    """
    c_out, c_in, k = kernels.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d needs an odd kernel size, got {k}")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or xd.shape[1] != c_in:
        raise ShapeError(f"conv1d: input {x.shape} does not have {c_in} channels")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias {bias.shape} does not match {c_out} output channels")
    B, _, L = xd.shape
    pad = (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(xp, k, axis=2)              # B, C, L, k
    cols = cols.transpose(0, 2, 1, 3).reshape(B, L, c_in * k)
    wmat = kernels.data.reshape(c_out, c_in * k)
    out = (cols @ wmat.T).transpose(0, 2, 1) + bias.data[None, :, None]
    if unbatched:
        out = out[0]

    def bw(g):
        gb = g[None] if unbatched else g
        gt = gb.transpose(0, 2, 1)                           # B, L, C_out
        dw = (gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(c_out, c_in, k)
        dcols = (gt @ wmat).reshape(B, L, c_in, k)
        dxp = np.zeros((B, c_in, L + 2 * pad))
        for kk in range(k):
            dxp[:, :, kk:kk + L] += dcols[:, :, :, kk].transpose(0, 2, 1)
        dx = dxp[:, :, pad:pad + L]
        if unbatched:
            dx = dx[0]
        return dx, dw, gb.sum(axis=(0, 2))

    return _make(np.ascontiguousarray(out), (x, kernels, bias), bw, "conv1d")


def pool_length(length: int, window: int, stride: int) -> int:
    if window < 1 or stride < 1:
        raise ValueError("pool window and stride must be >= 1")
    if length < window:
        raise ShapeError(f"maxpool1d: length {length} is shorter than window {window}")
    return (length - window) // stride + 1


def maxpool1d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max over sliding windows of the last axis; ties go to the lowest index."""
    L = x.shape[-1]
    n_out = pool_length(L, window, stride)
    win = sliding_window_view(x.data, window, axis=-1)[..., ::stride, :][..., :n_out, :]
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape)
        stop = stride * (n_out - 1) + 1
        for kk in range(window):
            dx[..., kk:kk + stop:stride] += g * (idx == kk)
        return (dx,)

    return _make(np.ascontiguousarray(out), (x,), bw, "maxpool1d")


def batchnorm(z: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, training: bool = True,
              running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
              momentum: float = 0.9) -> Tensor:
    """Per-feature batch normalisation; features sit on axis 1.

    ``z`` is ``[batch, features]`` or ``[batch, features, length]``; in the
    3-D case statistics pool over batch and length. Variance is biased
    (divides by n). Running statistics are updated in place in train mode
    as ``momentum * running + (1 - momentum) * batch``.
    """
    x = z.data
    if x.ndim not in (2, 3):
        raise ShapeError(f"batchnorm expects 2-D or 3-D input, got {x.shape}")
    F = x.shape[1]
    if gamma.shape != (F,) or beta.shape != (F,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({F},)")
    axes = (0,) if x.ndim == 2 else (0, 2)
    bshape = (1, F) if x.ndim == 2 else (1, F, 1)
    g_ = gamma.data.reshape(bshape)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu.reshape(F)
        if running_var is not None:
            running_var *= momentum
            running_var += (1.0 - momentum) * var.reshape(F)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm in eval mode needs running statistics")
        mu = running_mean.reshape(bshape)
        xc = x - mu
        var = running_var.reshape(bshape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_ + beta.data.reshape(bshape)
    n = x.size // F

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if training:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _make(out, (z, gamma, beta), bw, "batchnorm")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise each row over the last axis, then apply gain and bias."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layernorm needs a trailing dimension of at least 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gain.data
        dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), bw, "layernorm")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = as_tensor(target)
    _check_same(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gp = g * 2.0 * diff / n
        return gp, -gp

    return _make(np.asarray(np.mean(diff * diff)), (pred, target), bw, "mse_loss")


# -- numerical gradient helpers ---------------------------------------------------
def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``x``."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
