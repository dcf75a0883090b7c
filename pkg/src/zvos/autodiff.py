"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations evaluate eagerly; when an input requires gradients the result
records its parents plus a closure that applies the chain rule. backward()
runs each closure exactly once in reverse topological order. Leaf gradients
accumulate across backward calls, interior gradients are reset per call.

A graph belongs to one thread during forward/backward; tensors whose
requires_grad is off (frozen models) may be shared read-only.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, DimensionError


class Tensor:
    """Dense float64 array with optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        # Leaves allocate their accumulator up front; interior nodes get a
        # fresh buffer inside backward().
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._backward = None
        self._prev: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._prev

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operators take a Tensor (strict shape match) or a python scalar.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _node(data: np.ndarray, *parents: Tensor) -> Tensor:
    """Wrap an op result, linking parents only when gradients can flow."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = _node(a.data + b.data, a, b)
    if out._prev:
        def _bw(g):
            if a.requires_grad:
                a.grad += g
            if b.requires_grad:
                b.grad += g
        out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = _node(a.data - b.data, a, b)
    if out._prev:
        def _bw(g):
            if a.requires_grad:
                a.grad += g
            if b.requires_grad:
                b.grad -= g
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = _node(a.data * b.data, a, b)
    if out._prev:
        def _bw(g):
            if a.requires_grad:
                a.grad += g * b.data
            if b.requires_grad:
                b.grad += g * a.data
        out._backward = _bw
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out = _node(a.data / b.data, a, b)
    if out._prev:
        def _bw(g):
            if a.requires_grad:
                a.grad += g / b.data
            if b.requires_grad:
                b.grad -= g * a.data / (b.data * b.data)
        out._backward = _bw
    return out


def scale(x: Tensor, s: float) -> Tensor:
    out = _node(x.data * s, x)
    if out._prev:
        def _bw(g):
            x.grad += g * s
        out._backward = _bw
    return out


def shift(x: Tensor, c: float) -> Tensor:
    out = _node(x.data + c, x)
    if out._prev:
        def _bw(g):
            x.grad += g
        out._backward = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    t = np.exp(-np.abs(d))  # never overflows
    s = np.where(d >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    out = _node(s, x)
    if out._prev:
        def _bw(g):
            x.grad += g * s * (1.0 - s)
        out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0.0), x)
    if out._prev:
        mask = x.data > 0  # derivative at exactly 0 is 0
        def _bw(g):
            x.grad += g * mask
        out._backward = _bw
    return out


def log(x: Tensor) -> Tensor:
    out = _node(np.log(x.data), x)
    if out._prev:
        def _bw(g):
            x.grad += g / x.data
        out._backward = _bw
    return out


def absolute(x: Tensor) -> Tensor:
    out = _node(np.abs(x.data), x)
    if out._prev:
        sign = np.sign(x.data)  # subgradient 0 at 0, matching relu's convention
        def _bw(g):
            x.grad += g * sign
        out._backward = _bw
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ConfigError(f"clamp: empty interval [{lo}, {hi}]")
    out = _node(np.clip(x.data, lo, hi), x)
    if out._prev:
        inside = (x.data >= lo) & (x.data <= hi)
        def _bw(g):
            x.grad += g * inside
        out._backward = _bw
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _node(np.asarray(x.data.sum()), x)
    if out._prev:
        def _bw(g):
            x.grad += g
        out._backward = _bw
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = _node(np.asarray(x.data.mean()), x)
    if out._prev:
        def _bw(g):
            x.grad += g / n
        out._backward = _bw
    return out


_POINTWISE = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "relu": relu}


def pointwise(family: str, *args: Tensor) -> Tensor:
    """Dispatch an elementwise op by family name."""
    try:
        fn = _POINTWISE[family]
    except KeyError:
        raise ConfigError(f"pointwise: unknown family {family!r}") from None
    return fn(*args)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf feeding loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    # Iterative postorder walk; children precede parents in topo.
    topo: list[Tensor] = []
    seen: set[int] = {id(loss)}
    stack: list[tuple[Tensor, object]] = [(loss, iter(loss._prev))]
    while stack:
        node, children = stack[-1]
        for child in children:
            if id(child) not in seen:
                seen.add(id(child))
                stack.append((child, iter(child._prev)))
                break
        else:
            topo.append(node)
            stack.pop()
    for node in topo:
        if node._prev:
            node.grad = np.zeros_like(node.data)
    loss.grad += 1.0
    # Closures receive the gradient instead of reading it off the result
    # tensor, so a node never references itself and whole graphs free by
    # reference counting the moment the loss goes out of scope.
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()
