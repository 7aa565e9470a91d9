"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Covers exactly the operations the toy Transformer and the distillation
losses need: broadcast add/mul, batched matmul, reshape/transpose/slice,
gather, concat/stack, erf-GELU, row softmax, layernorm, reductions, and
cross-entropy. Backward passes run in a fixed topological order, so replays
with identical inputs are bitwise deterministic.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def backward(self) -> None:
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.value))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ----------------------------------------------------------- arithmetic

    def __add__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.value + other.value, parents=(self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.value.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.value.shape))
        out._backward = backward
        return out

    def __sub__(self, other):
        return self + (_as_tensor(other) * -1.0)

    def __mul__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.value * other.value, parents=(self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.value, self.value.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.value, other.value.shape))
        out._backward = backward
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self.value, other.value
        out = Tensor(a @ b, parents=(self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape))
        out._backward = backward
        return out

    # --------------------------------------------------------- shape moves

    def reshape(self, *shape):
        out = Tensor(self.value.reshape(*shape), parents=(self,))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.reshape(self.value.shape))
        out._backward = backward
        return out

    def transpose_last(self):
        out = Tensor(np.swapaxes(self.value, -1, -2), parents=(self,))

        def backward(g):
            if self.requires_grad:
                self._accumulate(np.swapaxes(g, -1, -2))
        out._backward = backward
        return out

    def slice_last(self, start: int, stop: int):
        out = Tensor(self.value[..., start:stop], parents=(self,))

        def backward(g):
            if self.requires_grad:
                full = np.zeros_like(self.value)
                full[..., start:stop] = g
                self._accumulate(full)
        out._backward = backward
        return out

    def mean(self, axis=None):
        out = Tensor(self.value.mean(axis=axis), parents=(self,))
        denom = self.value.size if axis is None else self.value.shape[axis]

        def backward(g):
            if self.requires_grad:
                if axis is None:
                    self._accumulate(np.full_like(self.value, g / denom))
                else:
                    self._accumulate(np.expand_dims(g, axis) / denom
                                     * np.ones_like(self.value))
        out._backward = backward
        return out

    def sum(self):
        out = Tensor(self.value.sum(), parents=(self,))

        def backward(g):
            if self.requires_grad:
                self._accumulate(np.full_like(self.value, g))
        out._backward = backward
        return out

    def detach(self) -> "Tensor":
        return Tensor(self.value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, rng=None) -> Tensor:
    # force C order so views of .value (reshape, ravel) behave predictably
    return Tensor(np.array(value, dtype=np.float64, order="C"), requires_grad=True)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """table[ids] for an integer index array; grads scatter-add back."""
    ids = np.asarray(ids)
    out = Tensor(table.value[ids], parents=(table,))

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.value)
            np.add.at(full, ids, g)
            table._accumulate(full)
    out._backward = backward
    return out


def concat_last(parts: list[Tensor]) -> Tensor:
    out = Tensor(np.concatenate([p.value for p in parts], axis=-1), parents=tuple(parts))
    sizes = [p.value.shape[-1] for p in parts]

    def backward(g):
        off = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                p._accumulate(g[..., off:off + size])
            off += size
    out._backward = backward
    return out


def stack(parts: list[Tensor], axis: int) -> Tensor:
    out = Tensor(np.stack([p.value for p in parts], axis=axis), parents=tuple(parts))

    def backward(g):
        slices = np.moveaxis(g, axis, 0)
        for p, s in zip(parts, slices):
            if p.requires_grad:
                p._accumulate(s)
    out._backward = backward
    return out


def gelu(x: Tensor) -> Tensor:
    """erf-based GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    v = x.value
    cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
    out = Tensor(v * cdf, parents=(x,))

    def backward(g):
        if x.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * v * v)
            x._accumulate(g * (cdf + v * pdf))
    out._backward = backward
    return out


def softmax_last(x: Tensor) -> Tensor:
    v = x.value
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, parents=(x,))

    def backward(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=-1, keepdims=True)
            x._accumulate(s * (g - dot))
    out._backward = backward
    return out


def log_softmax_last(x: Tensor) -> Tensor:
    v = x.value
    shifted = v - v.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(logp, parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g - np.exp(logp) * g.sum(axis=-1, keepdims=True))
    out._backward = backward
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gamma.value + beta.value, parents=(x, gamma, beta))
    n = v.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.value.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.value.shape))
        if x.requires_grad:
            gx = g * gamma.value
            term1 = gx
            term2 = gx.mean(axis=-1, keepdims=True)
            term3 = xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (term1 - term2 - term3))
    out._backward = backward
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    diff = a - b
    return (diff * diff).mean()


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy for integer labels; logits (batch, classes)."""
    labels = np.asarray(labels)
    v = logits.value
    shifted = v - v.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsumexp
    picked = logp[np.arange(len(labels)), labels]
    out = Tensor(-picked.mean(), parents=(logits,))

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logp)
            onehot = np.zeros_like(p)
            onehot[np.arange(len(labels)), labels] = 1.0
            logits._accumulate(g * (p - onehot) / len(labels))
    out._backward = backward
    return out
