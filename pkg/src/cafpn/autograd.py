"""Reverse-mode differentiation for the attention path.

Covers matmul, point-wise arithmetic, relu/sigmoid, softmax_rows,
l2_normalize_rows and 1x1 convolution, plus the structural ops (transpose,
slicing, concatenation, sums) the attention code needs. Forward values are
computed by the primitives in :mod:`cafpn.tensor`, so a differentiated call
and a plain call return identical numbers.

Plain arrays passed to these ops are treated as constants. An op only keeps
its backward closure when some input requires a gradient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .counter import OpCounter


class Var:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Var, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> Var:
        return transpose(self)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=self.value.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


def _node(out: np.ndarray, parents: tuple[Var, ...], backward) -> Var:
    v = Var(out)
    if any(p.requires_grad for p in parents):
        v.requires_grad = True
        v._parents = parents
        v._backward = backward
    return v


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b, counter: OpCounter | None = None) -> Var:
    a, b = lift(a), lift(b)
    out = T.matmul(a.value, b.value, counter)

    def backward(g):
        return g @ b.value.T, a.value.T @ g

    return _node(out, (a, b), backward)


def transpose(a) -> Var:
    a = lift(a)
    return _node(a.value.T, (a,), lambda g: (g.T,))


def add(a, b) -> Var:
    a, b = lift(a), lift(b)
    out = a.value + b.value

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward)


def mul(a, b) -> Var:
    a, b = lift(a), lift(b)
    out = a.value * b.value

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(out, (a, b), backward)


def divide(a, b) -> Var:
    a, b = lift(a), lift(b)
    out = a.value / b.value

    def backward(g):
        ga = g / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), backward)


def scale(a, alpha: float) -> Var:
    a = lift(a)
    return _node(a.value * alpha, (a,), lambda g: (g * alpha,))


def relu(a) -> Var:
    a = lift(a)
    out = T.elementwise(a.value, "relu")
    return _node(out, (a,), lambda g: (g * (a.value > 0),))


def sigmoid(a) -> Var:
    a = lift(a)
    out = T.sigmoid(a.value)
    return _node(out, (a,), lambda g: (g * out * (1 - out),))


def softmax_rows(a) -> Var:
    a = lift(a)
    p = T.softmax_rows(a.value)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (a,), backward)


def l2_normalize_rows(a, eps: float = 1e-12) -> Var:
    a = lift(a)
    x = a.value
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    out = T.l2_normalize_rows(x, eps)

    def backward(g):
        denom = norm + eps
        # d||x||/dx = x/||x||, taken as 0 on zero rows
        safe = np.where(norm > 0, norm, 1.0)
        radial = (g * x).sum(axis=1, keepdims=True) / (denom**2 * safe)
        return (g / denom - x * radial,)

    return _node(out, (a,), backward)


def sum(a, axis: int | None = None, keepdims: bool = False) -> Var:  # noqa: A001
    a = lift(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), backward)


def reshape(a, shape: tuple[int, ...]) -> Var:
    a = lift(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx) -> Var:
    a = lift(a)

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.value[idx], (a,), backward)


def concat(parts: Sequence, axis: int = 0) -> Var:
    vs = tuple(lift(p) for p in parts)
    out = np.concatenate([v.value for v in vs], axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vs])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _node(out, vs, backward)


def conv1x1(x, weight, bias=None, counter: OpCounter | None = None) -> Var:
    """1x1 convolution of a (B, C, H, W) input with a (O, C) or (O, C, 1, 1) weight."""
    x, weight = lift(x), lift(weight)
    w2 = weight.value.reshape(weight.shape[0], -1)
    if x.value.ndim != 4 or w2.shape[1] != x.shape[1]:
        raise T.ShapeError(f"1x1 conv weight {weight.shape} does not fit input {x.shape}")
    b_arr = np.zeros(w2.shape[0], dtype=np.result_type(x.value, w2)) if bias is None else value(bias)
    spec = T.ConvSpec(w2[:, :, None, None], b_arr)
    out = T.conv2d(x.value, spec, counter)
    parents = (x, weight) if bias is None else (x, weight, lift(bias))

    def backward(g):
        gx = np.einsum("oc,bohw->bchw", w2, g)
        gw = np.einsum("bohw,bchw->oc", g, x.value).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _node(out, parents, backward)


def grad_of(f: Callable[..., Var], *args: np.ndarray) -> list[np.ndarray]:
    """Gradients of the scalar ``f(*vars)`` with respect to each argument."""
    leaves = [Var(np.array(a, dtype=np.float64), requires_grad=True) for a in args]
    out = f(*leaves)
    out.backward()
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves]
