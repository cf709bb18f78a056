"""Minimal define-by-run reverse-mode autodiff over dense numpy arrays.

Every forward op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Graphs are
rebuilt on every forward pass; :func:`backward` walks them once in reverse
topological order.

Two precision modes exist: float32 (training) and float64 (gradient checks and
oracles).  The mode is global; see :func:`set_precision` / :func:`precision`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .rng import Rng

_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_MASK_FILL = -1e9


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def get_dtype() -> np.dtype:
    return _DTYPE


def set_precision(mode: str | int) -> None:
    global _DTYPE
    if mode in ("float32", 32, "32"):
        _DTYPE = np.dtype(np.float32)
    elif mode in ("float64", 64, "64"):
        _DTYPE = np.dtype(np.float64)
    else:
        raise ValueError(f"unknown precision mode {mode!r}")


@contextlib.contextmanager
def precision(mode: str | int):
    previous = _DTYPE
    set_precision(mode)
    try:
        yield
    finally:
        set_precision("float64" if previous == np.float64 else "float32")


@contextlib.contextmanager
def no_grad():
    """Forward passes inside this block record no graph."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "retains_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.retains_grad = False

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this intermediate after :func:`backward`."""
        self.retains_grad = True
        return self

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self):
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), fn, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), fn, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)
    return _result(a.data * f, (a,), lambda g: (g * f,), "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    inv_sqrt2 = x.data.dtype.type(1.0 / math.sqrt(2.0))
    cdf = 0.5 * (1.0 + erf(x.data * inv_sqrt2))
    out = x.data * cdf

    def fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) * x.data.dtype.type(1.0 / math.sqrt(2.0 * math.pi))
        return (g * (cdf + x.data * pdf),)

    return _result(out, (x,), fn, "gelu")


# shape ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    original = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape")


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(np.asarray(out), (x,), fn, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    return scale(tensor_sum(x), 1.0 / n)


def gather_rows(x: Tensor, index) -> Tensor:
    """Rows ``x[index]`` of a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (x,), fn, "gather_rows")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab}): min={ids.min()} max={ids.max()}")
    out = table.data[ids]

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(out, (table,), fn, "embedding_lookup")


# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# normalisation and probabilities


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def fn(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), fn, "layer_norm")


def _softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty last axis")
    y = _softmax_np(x.data)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), fn, "softmax")


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows."""
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    n_class = logits.shape[-1]
    rows = logits.data.reshape(-1, n_class)
    if rows.shape[0] != target.size:
        raise DimensionError(f"cross_entropy: {rows.shape[0]} rows but {target.size} targets")
    if target.size and (target.min() < 0 or target.max() >= n_class):
        raise IndexError(f"cross_entropy target out of range [0, {n_class})")
    shifted = rows - rows.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsumexp
    n = target.size
    picked = logp[np.arange(n), target]
    out = np.asarray(-picked.mean())

    def fn(g):
        probs = np.exp(logp)
        probs[np.arange(n), target] -= 1.0
        return ((probs * (g / n)).reshape(logits.shape),)

    return _result(out, (logits,), fn, "cross_entropy")


def masked_key_bias(valid: np.ndarray) -> np.ndarray:
    """Additive attention bias: 0 for valid keys, a large negative otherwise."""
    return np.where(valid, 0.0, _MASK_FILL).astype(_DTYPE)


# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf.

    Intermediates keep a gradient only if :meth:`Tensor.retain_grad` was called.
    Calling this twice on the same graph without zeroing doubles the gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node.parents or node.retains_grad:
            g_cast = np.asarray(g, dtype=node.data.dtype)
            node.grad = g_cast.copy() if node.grad is None else node.grad + g_cast
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# finite-difference checking


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
               n_coords: int = 200, rng: Rng | None = None,
               report: dict | None = None, refine_above: float | None = None,
               refine_eps: float = 5e-4) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` recomputes the scalar loss from the current values in ``params``.
    Up to ``n_coords`` coordinates per tensor are probed (all of them when the
    tensor is smaller).  The relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.

    With ``refine_above`` set, a coordinate whose three-point estimate misses
    by more than that is re-estimated with the five-point stencil at
    ``refine_eps`` (truncation O(h**4)), and the refined value is scored.  On
    gradients near 1e-7 no single three-point step is accurate enough:
    round-off wins at small steps and truncation at large ones.
    ``report[i]`` receives ``(coords probed, worst error, coords refined)``.
    """
    params = list(params)
    rng = rng or Rng(0)
    for p in params:
        p.grad = None
    backward(f())

    def loss_at(flat: np.ndarray, c: int, original, offset: float) -> float:
        flat[c] = original + offset
        return f().item()

    worst = 0.0
    for index, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        n = p.size
        coords = np.arange(n) if n <= n_coords else rng.fork("coords", index).permutation(n)[:n_coords]
        flat = p.data.reshape(-1)
        tensor_worst = 0.0
        refined = 0
        with no_grad():
            for c in coords:
                original = flat[c]
                a = float(analytic.reshape(-1)[c])
                numeric = (loss_at(flat, c, original, eps) - loss_at(flat, c, original, -eps)) / (2.0 * eps)
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if refine_above is not None and err > refine_above:
                    h = refine_eps
                    numeric = (-loss_at(flat, c, original, 2 * h) + 8 * loss_at(flat, c, original, h)
                               - 8 * loss_at(flat, c, original, -h) + loss_at(flat, c, original, -2 * h)) / (12.0 * h)
                    err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                    refined += 1
                flat[c] = original
                tensor_worst = max(tensor_worst, err)
        if report is not None:
            report[index] = (len(coords), tensor_worst, refined)
        worst = max(worst, tensor_worst)
    return worst
