"""Minimal reverse-mode autodiff over numpy arrays.

Supports exactly the ops the models here need: broadcasting arithmetic,
matmul (incl. batched), fancy indexing, reductions, exp/log/sqrt/tanh/relu.
Gradients are accumulated into `.grad` by `backward()` in reverse topological
order. Tensors without differentiable parents skip graph bookkeeping, so
inference-only forwards cost little more than plain numpy.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce `grad` back to `shape` by summing broadcast dimensions."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g) -> None:
        self.grad += _unbroadcast(np.asarray(g), self.data.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def __add__(self, other):
        other = as_tensor(other)

        def bw():
            if self.requires_grad:
                self._accum(out.grad)
            if other.requires_grad:
                other._accum(out.grad)

        out = Tensor._make(self.data + other.data, (self, other), bw)
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)

        def bw():
            if self.requires_grad:
                self._accum(out.grad)
            if other.requires_grad:
                other._accum(-out.grad)

        out = Tensor._make(self.data - other.data, (self, other), bw)
        return out

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)

        def bw():
            if self.requires_grad:
                self._accum(out.grad * other.data)
            if other.requires_grad:
                other._accum(out.grad * self.data)

        out = Tensor._make(self.data * other.data, (self, other), bw)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)

        def bw():
            if self.requires_grad:
                self._accum(out.grad / other.data)
            if other.requires_grad:
                other._accum(-out.grad * self.data / (other.data * other.data))

        out = Tensor._make(self.data / other.data, (self, other), bw)
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        def bw():
            self._accum(-out.grad)

        out = Tensor._make(-self.data, (self,), bw)
        return out

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")

        def bw():
            self._accum(out.grad * p * self.data ** (p - 1))

        out = Tensor._make(self.data**p, (self,), bw)
        return out

    def matmul(self, other):
        other = as_tensor(other)

        def bw():
            if self.requires_grad:
                self._accum(out.grad @ other.data.swapaxes(-1, -2))
            if other.requires_grad:
                other._accum(self.data.swapaxes(-1, -2) @ out.grad)

        out = Tensor._make(self.data @ other.data, (self, other), bw)
        return out

    __matmul__ = matmul

    def __getitem__(self, key):
        def bw():
            contrib = np.zeros_like(self.data)
            np.add.at(contrib, key, out.grad)
            self.grad += contrib

        out = Tensor._make(self.data[key], (self,), bw)
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape

        def bw():
            self.grad += out.grad.reshape(orig)

        out = Tensor._make(self.data.reshape(shape), (self,), bw)
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])

        def bw():
            self.grad += out.grad.transpose(np.argsort(axes))

        out = Tensor._make(self.data.transpose(axes), (self,), bw)
        return out

    def sum(self, axis=None, keepdims: bool = False):
        def bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.grad += np.broadcast_to(g, self.data.shape)

        out = Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def exp(self):
        def bw():
            self._accum(out.grad * out.data)

        out = Tensor._make(np.exp(self.data), (self,), bw)
        return out

    def log(self):
        def bw():
            self._accum(out.grad / self.data)

        out = Tensor._make(np.log(self.data), (self,), bw)
        return out

    def sqrt(self):
        def bw():
            self._accum(out.grad * 0.5 / out.data)

        out = Tensor._make(np.sqrt(self.data), (self,), bw)
        return out

    def tanh(self):
        def bw():
            self._accum(out.grad * (1.0 - out.data * out.data))

        out = Tensor._make(np.tanh(self.data), (self,), bw)
        return out

    def relu(self):
        def bw():
            self._accum(out.grad * (self.data > 0))

        out = Tensor._make(np.maximum(self.data, 0), (self,), bw)
        return out

    # -- backprop ------------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:  # iterative DFS: graphs can exceed the recursion limit
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row softmax; -inf entries yield exactly zero weight."""
    shift = np.max(x.data, axis=axis, keepdims=True)  # constant w.r.t. grad
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(x.data, axis=axis, keepdims=True)
    z = x - shift
    return z - z.exp().sum(axis=axis, keepdims=True).log()
