"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only what the small dense networks and the loss stack need is provided:
elementwise arithmetic with numpy broadcasting, 2-D matmul, exp/log/tanh,
reductions, last-axis softmax and log-sum-exp, concatenation, slicing and a
reparameterized Gaussian sample.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> backward(sum(x * x))
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_VAR_BOUNDS = (-12.0, 12.0)
# variance floor applied inside gaussian_sample (zero-variance limit)
MIN_VARIANCE = 1e-12


class AutodiffError(ValueError):
    """Base class for tensor engine failures."""


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(AutodiffError):
    def __init__(self, op: str, detail: str = "non-finite input"):
        self.op = op
        super().__init__(f"{op}: {detail}")


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[], None] | None = None
        self.op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(op)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = _node(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(out.grad, b.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = _node(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(-out.grad, b.shape))
        out._backward = _bw
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _node(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda: _accum(a, -out.grad)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = _node(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad * b.data, a.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.shape))
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = _node(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad / b.data, a.shape))
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))
        out._backward = _bw
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    out = _node(a.data * a.data, (a,), "square")
    if out.requires_grad:
        out._backward = lambda: _accum(a, 2.0 * a.data * out.grad)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("exp", a.data)
    out = _node(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.data * out.grad)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("log", a.data)
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log", "input must be strictly positive")
    out = _node(np.log(a.data), (a,), "log")
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad / a.data)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.tanh(a.data), (a,), "tanh")
    if out.requires_grad:
        out._backward = lambda: _accum(a, (1.0 - out.data * out.data) * out.grad)
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values; gradient passes only where the input was inside [lo, hi]."""
    a = as_tensor(a)
    out = _node(np.clip(a.data, lo, hi), (a,), "clamp")
    if out.requires_grad:
        def _bw():
            inside = (a.data >= lo) & (a.data <= hi)
            _accum(a, out.grad * inside)
        out._backward = _bw
    return out


# --- linear algebra and shape ------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = _node(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad @ b.data.T)
            _accum(b, a.data.T @ out.grad)
        out._backward = _bw
    return out


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` for a 2-D batch ``x``, a weight matrix and a bias row."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("linear", x.shape, w.shape, b.shape)
    out = _node(x.data @ w.data + b.data, (x, w, b), "linear")
    if out.requires_grad:
        def _bw():
            _accum(x, out.grad @ w.data.T)
            _accum(w, x.data.T @ out.grad)
            _accum(b, out.grad.sum(axis=0))
        out._backward = _bw
    return out


def mlp(x, weights: Sequence[Tensor], biases: Sequence[Tensor], frozen: bool = False) -> Tensor:
    """Dense stack with tanh between layers and a linear output, recorded as
    one node. ``frozen`` passes gradient to ``x`` only."""
    x = as_tensor(x)
    acts = [x.data]
    h = x.data
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        if h.ndim != 2 or h.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError("mlp", h.shape, w.shape, b.shape)
        h = h @ w.data + b.data
        if i < last:
            h = np.tanh(h)
            acts.append(h)
    params = () if frozen else tuple(weights) + tuple(biases)
    out = _node(h, (x,) + params, "mlp")
    if out.requires_grad:
        def _bw():
            g = out.grad
            for i in range(last, -1, -1):
                if i < last:
                    g = g * (1.0 - acts[i + 1] ** 2)
                if not frozen:
                    _accum(weights[i], acts[i].T @ g)
                    _accum(biases[i], g.sum(axis=0))
                if i > 0 or x.requires_grad:
                    g = g @ weights[i].data.T
            _accum(x, g)
        out._backward = _bw
    return out


def softmax_cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Batch mean of ``-sum_k targets[b, k] * log_softmax(logits)[b, k]``;
    ``targets`` rows are probability vectors (one-hot or uniform)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.data.ndim != 2 or targets.shape != logits.shape:
        raise ShapeError("softmax_cross_entropy", logits.shape, targets.shape)
    _check_finite("softmax_cross_entropy", logits.data)
    z = logits.data - np.max(logits.data, axis=1, keepdims=True)
    ez = np.exp(z)
    se = np.sum(ez, axis=1, keepdims=True)
    logp = z - np.log(se)
    B = logits.shape[0]
    out = _node(np.asarray(-np.sum(targets * logp) / B), (logits,), "softmax_cross_entropy")
    if out.requires_grad:
        def _bw():
            _accum(logits, out.grad * (ez / se - targets) / B)
        out._backward = _bw
    return out


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    out = _node(data, (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad.reshape(a.shape))
    return out


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    out = _node(data, tuple(ts), "concat")
    if out.requires_grad:
        bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

        def _bw():
            for t, g in zip(ts, np.split(out.grad, bounds, axis=axis)):
                _accum(t, g)
        out._backward = _bw
    return out


def slice_last(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError("slice_last", a.shape, (start, stop))
    out = _node(a.data[..., start:stop], (a,), "slice_last")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(a.data)
            g[..., start:stop] = out.grad
            _accum(a, g)
        out._backward = _bw
    return out


# --- reductions ----------------------------------------------------------------


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape))
        out._backward = _bw
    return out


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def log_sum_exp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log(sum(exp(a))) along ``axis``."""
    a = as_tensor(a)
    _check_finite("log_sum_exp", a.data)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = np.sum(shifted, axis=axis, keepdims=True)
    value = m + np.log(s)
    out = _node(value if keepdims else np.squeeze(value, axis=axis), (a,), "log_sum_exp")
    if out.requires_grad:
        def _bw():
            g = out.grad if keepdims else np.expand_dims(out.grad, axis)
            _accum(a, g * shifted / s)
        out._backward = _bw
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite("log_softmax", a.data)
    m = np.max(a.data, axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = _node(z - lse, (a,), "log_softmax")
    if out.requires_grad:
        def _bw():
            p = np.exp(out.data)
            g = out.grad
            _accum(a, g - p * np.sum(g, axis=axis, keepdims=True))
        out._backward = _bw
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite("softmax", a.data)
    z = np.exp(a.data - np.max(a.data, axis=axis, keepdims=True))
    p = z / np.sum(z, axis=axis, keepdims=True)
    out = _node(p, (a,), "softmax")
    if out.requires_grad:
        def _bw():
            g = out.grad
            _accum(a, p * (g - np.sum(g * p, axis=axis, keepdims=True)))
        out._backward = _bw
    return out


def gaussian_sample(mu, logvar, eps: np.ndarray | None = None,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Reparameterized draw ``mu + exp(logvar / 2) * eps``.

    ``eps`` is taken as given when supplied (so gradients can be checked with it
    held fixed); otherwise it is drawn from ``rng``. Variances below
    ``MIN_VARIANCE`` are floored.
    """
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError("gaussian_sample", mu.shape, logvar.shape)
    if eps is None:
        if rng is None:
            raise AutodiffError("gaussian_sample: need eps or rng")
        eps = rng.standard_normal(mu.shape)
    elif np.shape(eps) != mu.shape:
        raise ShapeError("gaussian_sample", mu.shape, np.shape(eps))
    std = exp(mul(clamp(logvar, math.log(MIN_VARIANCE), np.inf), 0.5))
    return add(mu, mul(std, eps))


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise AutodiffError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# --- tape and backward ----------------------------------------------------------


@dataclass
class ComputationTape:
    """Nodes reachable from ``output`` in topological order (parents first)."""

    nodes: list[Tensor]
    output: Tensor


def build_tape(output: Tensor) -> ComputationTape:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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
    return ComputationTape(order, output)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf.

    Leaf gradients add onto whatever is already stored; callers zero them.
    Intermediate nodes get fresh gradients on every call.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape)
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    for node in tape.nodes:
        if node._parents:
            node.grad = None
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``p <- p - lr * grad``; gradients are left for the caller."""
    for p in params:
        if p.grad is None:
            raise AutodiffError("sgd_step: parameter has no gradient")
        p.data = p.data - lr * p.grad


# --- finite differences ------------------------------------------------------------


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / scale)
