"""Minimal reverse-mode differentiation over numpy arrays.

Deliberately generic: every op records a closure, gathers scatter into a
full-size zero buffer on the way back, nothing is fused. It serves as the
slow reference the closed-form regularizer gradients are checked and timed
against.
"""

from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents  # tuples of (Var, vjp)
        self.grad = None

    def __add__(self, other):
        other = _lift(other)
        return Var(self.value + other.value, ((self, lambda g: g), (other, lambda g: g)))

    def __sub__(self, other):
        other = _lift(other)
        return Var(self.value - other.value, ((self, lambda g: g), (other, lambda g: -g)))

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Var(a * b, ((self, lambda g: g * b), (other, lambda g: g * a)))

    __radd__ = __add__
    __rmul__ = __mul__

    def __rsub__(self, other):
        return _lift(other) - self

    def backward(self) -> None:
        order = _topo(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, vjp in node.parents:
                g = _unbroadcast(vjp(node.grad), parent.value.shape)
                parent.grad = g if parent.grad is None else parent.grad + g


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topo(root: Var) -> list[Var]:
    seen, order, stack = set(), [], [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def gather(x: Var, idx) -> Var:
    idx = np.asarray(idx)
    size = x.value.shape

    def vjp(g):
        out = np.zeros(size)
        np.add.at(out, idx, g)
        return out

    return Var(x.value[idx], ((x, vjp),))


def square(x: Var) -> Var:
    return x * x


def sqrt(x: Var, floor: float = 0.0) -> Var:
    r = np.sqrt(x.value)
    return Var(r, ((x, lambda g: g * 0.5 / np.maximum(r, floor)),))


def total(x: Var) -> Var:
    return Var(x.value.sum(), ((x, lambda g: np.broadcast_to(g, x.value.shape)),))


def mean(x: Var) -> Var:
    n = x.value.size
    return Var(x.value.mean(), ((x, lambda g: np.broadcast_to(g / n, x.value.shape)),))
