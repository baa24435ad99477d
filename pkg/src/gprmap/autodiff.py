"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every trainable piece of the package (detector losses, the point network,
the VLAD layer) is built from the primitives in this module.  A graph is
recorded implicitly while operations run: each result keeps references to
its parents plus a closure mapping the output gradient to parent gradients.
:func:`backward` walks that graph once in reverse topological order.

Only scalar-to-tensor broadcasting is supported; bias addition uses the
explicit :func:`add_bias` primitive.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "SgdConfig", "SGD", "AdamConfig", "Adam", "FDReport",
    "tensor", "param", "add", "sub", "mul", "div", "neg", "matmul", "relu",
    "sigmoid", "exp", "log", "softplus", "softmax", "log_softmax", "reduce_sum",
    "reduce_mean", "max_over_rows", "concat", "take", "square", "sqrt", "abs_",
    "maximum", "minimum", "reshape", "transpose", "tile_rows", "add_bias",
    "conv2d", "backward", "grad", "zero_grad", "sgd_step", "finite_diff_check",
    "save_params", "load_params",
]


class Tensor:
    """Dense float64 tensor that records the operation that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None, _op: str = "leaf"):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite value in tensor data (op={_op})")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def __getitem__(self, index):
        return _slice(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def param(data, name: str | None = None) -> Tensor:
    """Trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward_fn if needs else None, _op=op)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # undo scalar broadcasting
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_reduce_to(g * b.data, a.shape),
                                         _reduce_to(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = a.data / b.data

    def bw(g):
        return (_reduce_to(g / b.data, a.shape),
                _reduce_to(-g * a.data / (b.data * b.data), b.shape))
    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "maximum")
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    return _make(out, (a, b), lambda g: (_reduce_to(np.where(pick_a, g, 0.0), a.shape),
                                         _reduce_to(np.where(pick_a, 0.0, g), b.shape)), "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "minimum")
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _make(out, (a, b), lambda g: (_reduce_to(np.where(pick_a, g, 0.0), a.shape),
                                         _reduce_to(np.where(pick_a, 0.0, g), b.shape)), "minimum")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient 0 at the kink
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)
    return _make(out, (a,), bw, "sqrt")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


# ---------------------------------------------------------------- reductions

def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.shape).copy(),)
    return _make(out, (a,), bw, "sum")


def reduce_mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.full(a.shape, float(g) / n),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / n, a.shape).copy(),)
    return _make(out, (a,), bw, "mean")


def max_over_rows(a) -> Tensor:
    """Column-wise max of an N×D matrix, returned as 1×D.

    Ties resolve to the lowest row index, which alone receives gradient.
    """
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"max_over_rows expects a matrix, got shape {a.shape}")
    idx = np.argmax(a.data, axis=0)
    cols = np.arange(a.shape[1])
    out = a.data[idx, cols][None, :]

    def bw(g):
        ga = np.zeros(a.shape)
        ga[idx, cols] = g[0]
        return (ga,)
    return _make(out, (a,), bw, "max_over_rows")


def segment_max(a, segments, n_segments: int) -> Tensor:
    """Column-wise max over the rows of each segment: E×D values to n_segments×D.

    ``segments`` gives each row's segment id; every segment needs at least
    one row.  Ties resolve to the lowest row index.
    """
    a = _as_tensor(a)
    seg = np.asarray(segments, dtype=np.intp)
    if a.data.ndim != 2 or seg.shape != (a.shape[0],):
        raise ValueError(f"segment_max: {seg.shape} ids for values of shape {a.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= n_segments):
        raise ValueError("segment_max: segment id out of range")
    if np.any(np.bincount(seg, minlength=n_segments) == 0):
        raise ValueError("segment_max: empty segment")
    # sort rows by (segment, value descending, row) so the first row of each run is the winner
    cols = np.arange(a.shape[1])
    rows = np.arange(a.shape[0])
    order = np.lexsort((np.broadcast_to(rows[:, None], a.shape), -a.data,
                        np.broadcast_to(seg[:, None], a.shape)), axis=0)
    starts = np.searchsorted(seg[order[:, 0]], np.arange(n_segments))
    idx = order[starts]  # (n_segments, D) winning rows
    out = a.data[idx, cols]

    def bw(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, (idx, np.broadcast_to(cols, idx.shape)), g)
        return (ga,)
    return _make(out, (a,), bw, "segment_max")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------- structure

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def add_bias(x, b) -> Tensor:
    """N×D matrix plus a length-D (or 1×D) row vector."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim != 2 or b.size != x.shape[1]:
        raise ValueError(f"add_bias: bias of shape {b.shape} does not fit {x.shape}")
    out = x.data + b.data.reshape(1, -1)
    return _make(out, (x, b), lambda g: (g, g.sum(axis=0).reshape(b.shape)), "add_bias")


def tile_rows(a, n: int) -> Tensor:
    """Repeat a 1×D row n times."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] != 1:
        raise ValueError(f"tile_rows expects 1×D, got {a.shape}")
    out = np.repeat(a.data, n, axis=0)
    return _make(out, (a,), lambda g: (g.sum(axis=0, keepdims=True),), "tile_rows")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty input")
    ndim = ts[0].data.ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.data.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax):
            raise ValueError(f"concat: shapes {[t.shape for t in ts]} do not align on axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))
    return _make(out, tuple(ts), bw, "concat")


def _slice(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def bw(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, index, g)
        return (ga,)
    return _make(np.array(out, copy=True), (a,), bw, "slice")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        ga = np.zeros(a.shape)
        if axis == 0:
            np.add.at(ga, idx, g)
        else:
            moved = np.moveaxis(ga, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (ga,)
    return _make(out, (a,), bw, "take")


def reshape(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: tuple | None = None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    """Single-image 2-D cross-correlation, stride 1.

    x: C×H×W, w: O×C×kh×kw, b: length O.  Returns O×H'×W'.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4 or w.shape[1] != x.shape[0]:
        raise ValueError(f"conv2d: incompatible shapes x={x.shape} w={w.shape}")
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    Ho, Wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError("conv2d: kernel larger than padded input")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))  # C,Ho,Wo,kh,kw
    cols = win.transpose(1, 2, 0, 3, 4).reshape(Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = (cols @ wmat.T).T.reshape(O, Ho, Wo)
    parents = (x, w)
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data.reshape(O, 1, 1)
        parents = (x, w, b)

    def bw(g):
        g2 = g.reshape(O, Ho * Wo)
        gw = (g2 @ cols).reshape(w.shape)
        gcols = (wmat.T @ g2).reshape(C, kh, kw, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + Ho, j:j + Wo] += gcols[:, i, j]
        gx = gxp[:, padding:padding + H, padding:padding + W]
        grads = (gx, gw)
        if b is not None:
            grads += (g2.sum(axis=1),)
        return grads
    return _make(out, parents, bw, "conv2d")


# ---------------------------------------------------------------- graph / backward

@dataclass
class Graph:
    """Recorded operations reachable from an output, in topological order."""

    nodes: list[Tensor]
    leaves: list[Tensor]

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
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
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        leaves = [n for n in order if n.is_leaf and n.requires_grad]
        return cls(nodes=order, leaves=leaves)


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    graph = Graph.from_output(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros(p.shape)


def grad(output: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar wrt ``params``; unused parameters get zeros."""
    zero_grad(params)
    backward(output)
    return [p.grad.copy() for p in params]


# ---------------------------------------------------------------- optimizers

@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], config: SgdConfig,
             velocity: Sequence[np.ndarray] | None = None):
    """One SGD step with heavy-ball momentum.

    Returns ``(new_params, new_velocity)``; inputs are not modified.
    """
    if len(params) != len(grads):
        raise ValueError("sgd_step: params and grads differ in length")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"sgd_step: shape mismatch {p.shape}, {g.shape}, {v.shape}")
        v2 = config.momentum * v + g
        new_v.append(v2)
        new_p.append(p - config.learning_rate * v2)
    return new_p, new_v


class SGD:
    """Stateful wrapper around :func:`sgd_step` that rewrites ``param.data``."""

    def __init__(self, params: Sequence[Tensor], config: SgdConfig):
        self.params = list(params)
        self.config = config
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        new_p, self.velocity = sgd_step([p.data for p in self.params], grads, self.config, self.velocity)
        for p, d in zip(self.params, new_p):
            p.data = d

    def zero_grad(self) -> None:
        zero_grad(self.params)


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


class Adam:
    def __init__(self, params: Sequence[Tensor], config: AdamConfig):
        self.params = list(params)
        self.config = config
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g
            p.data = p.data - c.learning_rate * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + c.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)


# ---------------------------------------------------------------- gradient checking

@dataclass
class FDReport:
    errors: list[float]
    tolerance: float
    names: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      tolerance: float = 1e-4, probes: int | None = None, seed: int = 0,
                      floor: float = 1e-6) -> FDReport:
    """Compare autodiff gradients of ``f()`` against central differences.

    Without ``probes`` the error for each parameter tensor is
    ``|g_ad - g_fd| / max(|g_ad| + |g_fd|, 1e-12)`` using Euclidean norms over
    the whole tensor.  With ``probes = n`` that many (tensor, entry) pairs are
    drawn at random and each contributes ``|g_ad - g_fd| / max(|g_ad| + |g_fd|, floor)``.
    """
    analytic = grad(f(), params)

    def central(flat, i):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        return (fp - fm) / (2.0 * eps)

    if probes is not None:
        rng = np.random.default_rng(seed)
        sizes = np.array([p.data.size for p in params])
        picks = rng.choice(int(sizes.sum()), size=min(probes, int(sizes.sum())), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        errors, names = [], []
        for g in np.sort(picks):
            t = int(np.searchsorted(offsets, g, side="right") - 1)
            i = int(g - offsets[t])
            ga = float(analytic[t].reshape(-1)[i])
            gn = central(params[t].data.reshape(-1), i)
            errors.append(abs(ga - gn) / max(abs(ga) + abs(gn), floor))
            names.append(f"{params[t].name or f'param{t}'}[{i}]")
        return FDReport(errors=errors, tolerance=tolerance, names=names)

    errors = []
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gn = np.array([central(flat, i) for i in range(flat.size)])
        diff = np.linalg.norm(ga.reshape(-1) - gn)
        scale = np.linalg.norm(ga) + np.linalg.norm(gn)
        errors.append(0.0 if scale < 1e-12 else float(diff / scale))
    return FDReport(errors=errors, tolerance=tolerance,
                    names=[p.name or f"param{i}" for i, p in enumerate(params)])


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"GPRW"
_CKPT_VERSION = 1


def save_params(path, params: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays in the little-endian GPRW format."""
    from .fileio import atomic_write_bytes

    chunks = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(params))]
    for name, arr in params.items():
        a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(np.ascontiguousarray(a).tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_params(path) -> dict[str, np.ndarray]:
    from .fileio import FormatError, Reader

    r = Reader(Path(path).read_bytes(), what="GPRW checkpoint")
    r.expect_magic(_CKPT_MAGIC)
    version = r.u32()
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported GPRW version {version}", r.offset - 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.bytes(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        out[name] = r.array("<f8", int(np.prod(dims, dtype=np.int64))).reshape(dims)
    r.expect_end()
    return out
