"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a row-major numpy float64 array. Operations build a
computation graph on the fly; calling ``backward()`` on a scalar result
accumulates gradients into every reachable tensor created with
``requires_grad=True``. The analytic gradients are validated against
central finite differences (see :mod:`emofuse.gradcheck`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Incompatible operand shapes."""


@dataclass
class RngState:
    """Counter-based random stream.

    Identical ``(seed, counter)`` pairs yield identical sample streams
    across runs; every draw advances the counter by one.
    """

    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        gen = np.random.default_rng((self.seed, self.counter))
        self.counter += 1
        return gen


class Tensor:
    """A float64 array plus an optional gradient buffer.

    ``data`` is always a C-ordered float64 ndarray. ``grad`` stays ``None``
    until a backward pass reaches this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward_fn: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn = _backward_fn
        self.name = name

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
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Reverse-mode pass from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return multiply(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward_fn=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * c)

    return _result(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if b.ndim == 1:
            _accumulate(a, np.multiply.outer(g, b.data).reshape(a.shape))
            _accumulate(b, _unbroadcast((a.data * np.expand_dims(g, -1)).reshape(-1, b.shape[0]).sum(axis=0), b.shape))
            return
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return _result(out, (a, b), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape))

    return _result(out, (a,), backward)


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    out = np.swapaxes(a.data, axis1, axis2)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.swapaxes(g, axis1, axis2))

    return _result(np.ascontiguousarray(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g: np.ndarray) -> None:
        start = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            _accumulate(t, g[tuple(sl)])
            start += n

    return _result(out, tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    index = tuple(sl)
    out = a.data[index]

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        full[index] = g
        _accumulate(a, full)

    return _result(np.ascontiguousarray(out), (a,), backward)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    out = np.broadcast_to(a.data, shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))

    return _result(np.ascontiguousarray(out), (a,), backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> None:
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _result(out, (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ``out[..., :] = table[ids[...], :]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"token id out of range: ids span [{ids.min()}, {ids.max()}], table has {table.shape[0]} rows"
        )
    out = table.data[ids]

    def backward(g: np.ndarray) -> None:
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))

    return _result(out, (table,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; no gradient flows to them."""
    out = np.where(mask, value, a.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(np.where(mask, 0.0, g), a.shape))

    return _result(out, (a,), backward)


def grad_scale(a: Tensor, factor: float) -> Tensor:
    """Identity forward, scaled gradient backward.

    Fault-injection hook for the gradient-check suite; never used in the
    model itself.
    """
    out = a.data.copy()

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * factor)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# neural-network forward operations
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``y = x @ w + b`` over the trailing axis.

    ``x`` may carry any number of leading dimensions; ``w`` is
    ``(in, out)`` and ``b`` is ``(out,)``.
    """
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {w.shape}")
    out = x.data @ w.data + b.data

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(-1, w.shape[1])
        x2 = x.data.reshape(-1, w.shape[0])
        _accumulate(x, (g @ w.data.T).reshape(x.shape))
        _accumulate(w, x2.T @ g2)
        _accumulate(b, g2.sum(axis=0))

    return _result(out, (x, w, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction) along ``axis``.

    Rows are nonnegative and sum to one; masked entries set to ``-inf``
    upstream come out exactly zero.
    """
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (g - inner))

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation over the trailing axis, then affine.

    Uses the population (biased) variance; ``eps`` guards zero-variance
    rows.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g: np.ndarray) -> None:
        gxhat = g * gamma.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv_std * (gxhat - m1 - xhat * m2))
        _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        _accumulate(beta, g.reshape(-1, d).sum(axis=0))

    return _result(out, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: ``x * Phi(x)`` with the normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g: np.ndarray) -> None:
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accumulate(x, g * (cdf + x.data * pdf))

    return _result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_array(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * y * (1.0 - y))

    return _result(y, (x,), backward)


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def dropout(x: Tensor, p: float, training: bool, rng: RngState | None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by
    ``1/(1-p)`` during training; identity at evaluation time.

    ``p == 1`` in training zeroes everything.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode requires an RngState")
    if p == 1.0:
        mask = np.zeros(x.shape, dtype=np.float64)
    else:
        keep = rng.generator().random(x.shape) >= p
        mask = keep.astype(np.float64) / (1.0 - p)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _result(x.data * mask, (x,), backward)


def mean_stack(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean over a sequence of same-shape tensors.

    Computed as ``min + fsum(x - min)/n`` per element so that the result
    is bit-identical under any permutation of the inputs and exactly
    reproduces a repeated input. The gradient is the ordinary ``1/n``.
    """
    if not tensors:
        raise ValueError("mean_stack: empty sequence")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"mean_stack: shapes differ: {shape} vs {t.shape}")
    n = len(tensors)
    stacked = np.stack([t.data for t in tensors], axis=0).reshape(n, -1)
    anchor = stacked.min(axis=0)
    dev = stacked - anchor
    out = anchor + np.array([math.fsum(dev[:, j]) for j in range(dev.shape[1])]) / n
    out = out.reshape(shape)

    def backward(g: np.ndarray) -> None:
        share = g / n
        for t in tensors:
            _accumulate(t, share)

    return _result(out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood from raw logits, single-label.

    ``logits`` is ``(B, C)`` (or ``(C,)``); ``targets`` holds class
    indices. Stable via log-sum-exp.
    """
    z = logits.data if logits.ndim == 2 else logits.data[None, :]
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    batch, classes = z.shape
    if t.shape != (batch,):
        raise ShapeError(f"cross_entropy: targets shape {t.shape} does not match logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= classes):
        raise ValueError(f"cross_entropy: label out of range [0, {classes}): {t.min()}..{t.max()}")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = lse - z[np.arange(batch), t]
    out = np.array(losses.mean())

    def backward(g: np.ndarray) -> None:
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(batch), t] -= 1.0
        _accumulate(logits, (g * p / batch).reshape(logits.shape))

    return _result(out, (logits,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from raw logits, multi-label.

    ``targets`` is a {0,1} array with the same shape as ``logits``.
    Stable form ``max(z,0) - z*y + log1p(exp(-|z|))``.
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce: targets shape {y.shape} does not match logits {logits.shape}")
    if y.size and not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("bce: targets must be 0 or 1")
    z = logits.data
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.array(losses.mean())

    def backward(g: np.ndarray) -> None:
        _accumulate(logits, g * (_sigmoid_array(z) - y) / y.size)

    return _result(out, (logits,), backward)
