"""Reverse-mode automatic differentiation over dense float64 arrays.

Everything downstream (distribution math, recurrent cells, losses) is built
from the closed primitive set defined here: matmul, add, mul, concat, slice,
tanh, sigmoid, exp, log, softmax, sum, mean and dropout-mask multiply.  Each
primitive records a backward closure on a tape; `backward` replays the tape in
reverse topological order.  Arrays are always float64 and row-major, and every
primitive checks its output for NaN/Inf so numeric failures surface at the op
that produced them.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NumericError(AutodiffError):
    pass


class GraphError(AutodiffError):
    pass


def as_array(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 ndarray (0-d stays 0-d)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 0 and not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a)
    return a


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{op}'")


class Tensor:
    """A node in the recorded computation.

    `data` holds the value, `grad` the accumulated adjoint.  Leaf tensors with
    requires_grad=False (inputs, noise, masks) carry no tape references, so
    evaluation-only passes stay cheap and collectable.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = True, _parents=(), _backward=None, _op: str = "leaf"):
        self.data = as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents if requires_grad else ()
        self._backward = _backward if requires_grad else None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.data.shape})"

    # operator sugar; constants are wrapped as non-differentiable leaves
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __sub__(self, other):
        return add(self, -_lift(other))

    def __rsub__(self, other):
        return add(_lift(other), -self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _result(data, parents, backward, op) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents, _backward=backward, _op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.data.shape} + {b.data.shape}: {e}") from None

    def backward(out):
        _accum(a, out.grad)
        _accum(b, out.grad)

    return _result(data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.data.shape} * {b.data.shape}: {e}") from None

    def backward(out):
        _accum(a, out.grad * b.data)
        _accum(b, out.grad * a.data)

    return _result(data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(out):
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    return _result(data, (a, b), backward, "matmul")


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty input list")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[p.data.shape for p in parts]}: {e}") from None
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis if axis >= 0 else out.grad.ndim + axis] = slice(lo, hi)
            _accum(p, out.grad[tuple(idx)])

    return _result(data, tuple(parts), backward, "concat")


def narrow(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Slice along one axis (the 'slice' primitive)."""
    ax = axis if axis >= 0 else a.data.ndim + axis
    if not (0 <= start <= stop <= a.data.shape[ax]):
        raise ShapeError(f"slice: [{start}:{stop}] outside axis of size {a.data.shape[ax]}")
    idx = [slice(None)] * a.data.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx]

    def backward(out):
        g = np.zeros_like(a.data)
        g[idx] = out.grad
        _accum(a, g)

    return _result(data, (a,), backward, "slice")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(out):
        _accum(a, out.grad * (1.0 - data * data))

    return _result(data, (a,), backward, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(out):
        _accum(a, out.grad * data * (1.0 - data))

    return _result(data, (a,), backward, "sigmoid")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(out):
        _accum(a, out.grad * data)

    return _result(data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def backward(out):
        _accum(a, out.grad / a.data)

    return _result(data, (a,), backward, "log")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(out):
        dot = (out.grad * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (out.grad - dot))

    return _result(data, (a,), backward, "softmax")


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _result(data, (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape) / n)

    return _result(data, (a,), backward, "mean")


def dropout_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by an externally supplied, already-scaled dropout mask."""
    mask = as_array(mask)
    try:
        data = a.data * mask
    except ValueError as e:
        raise ShapeError(f"dropout: {a.data.shape} * mask {mask.shape}: {e}") from None

    def backward(out):
        _accum(a, out.grad * mask)

    return _result(data, (a,), backward, "dropout")


# ---------------------------------------------------------------------------
# tape traversal


def _topo(out: Tensor):
    order = []
    seen = set()
    stack = [(out, iter(out._parents))]
    seen.add(id(out))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backprop(out: Tensor) -> None:
    """Run reverse accumulation from a scalar tensor."""
    if out.data.shape != ():
        raise GraphError(f"backward requires a scalar output, got shape {out.data.shape}")
    order = _topo(out)
    out.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


class Graph:
    """A differentiable computation over named parameters and named inputs.

    `build(params, inputs)` composes primitives and returns named output
    tensors; calling it under `forward` records the tape that `backward`
    replays.  Parameters persist across forward calls (their `data` may be
    updated in place by an optimizer); inputs are rebound on every call.
    """

    def __init__(self, params: dict, build):
        self.params = {
            name: (p if isinstance(p, Tensor) else Tensor(p)) for name, p in params.items()
        }
        self._build = build
        self._outputs = None

    def forward(self, inputs: dict | None = None) -> dict:
        bound = {name: constant(v) for name, v in (inputs or {}).items()}
        self._outputs = self._build(self.params, bound)
        return {name: t.data for name, t in self._outputs.items()}

    def backward(self, output: str) -> dict:
        if self._outputs is None:
            raise GraphError("backward called before forward")
        if output not in self._outputs:
            raise GraphError(f"unknown output '{output}'")
        for p in self.params.values():
            p.grad = None
        backprop(self._outputs[output])
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.params.items()
        }


def grad_check(
    graph: Graph,
    output: str,
    inputs: dict | None = None,
    epsilon: float = 1e-5,
    zero_floor: float = 1e-4,
) -> float:
    """Worst relative error of `backward` against central finite differences.

    The error for each element is |analytic - numeric| / max(|analytic|,
    |numeric|, zero_floor); the floor turns the comparison absolute for
    near-zero gradients, where central differences carry ~|f|*eps_mach/epsilon
    of irreducible roundoff noise.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for name, p in graph.params.items():
        if np.abs(p.data).max(initial=0.0) > 1e3:
            raise ValueError(f"parameter '{name}' magnitude exceeds 1e3")
    graph.forward(inputs)
    analytic = graph.backward(output)
    worst = 0.0
    for name, p in graph.params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = graph.forward(inputs)[output]
            flat[i] = orig - epsilon
            lo = graph.forward(inputs)[output]
            flat[i] = orig
            numeric = float((hi - lo) / (2.0 * epsilon))
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), zero_floor)
            worst = max(worst, err)
    graph.forward(inputs)
    return worst


def clip_gradients(grads: dict, threshold: float) -> dict:
    """Clamp every gradient element to [-threshold, +threshold]."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    return {name: np.clip(g, -threshold, threshold) for name, g in grads.items()}


# gradient cutoff used throughout training
DEFAULT_CLIP_THRESHOLD = 5.0
