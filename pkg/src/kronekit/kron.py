"""Kronecker algebra: explicit product, the reconstruction-free matvec
(A (x) B) x = V(B R(x) A^T), batched application, and FLOP cost models.

The matvec evaluates the two inner products in whichever association order is
cheaper; ties prefer applying B first. A^T is taken as an index view, the
transpose is never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


@dataclass(frozen=True, order=True)
class FactorShape:
    """Split of an (m1*m2) x (n1*n2) weight into A in m1 x n1, B in m2 x n2."""

    m1: int
    n1: int
    m2: int
    n2: int

    def __post_init__(self):
        if min(self.m1, self.n1, self.m2, self.n2) < 1:
            raise ShapeError(f"factor dimensions must be positive, got {self}")

    @property
    def rows(self) -> int:
        return self.m1 * self.m2

    @property
    def cols(self) -> int:
        return self.n1 * self.n2

    @property
    def param_count(self) -> int:
        return self.m1 * self.n1 + self.m2 * self.n2

    def to_json(self) -> dict:
        return {"m1": self.m1, "n1": self.n1, "m2": self.m2, "n2": self.n2}

    @classmethod
    def from_json(cls, d: dict) -> "FactorShape":
        return cls(int(d["m1"]), int(d["n1"]), int(d["m2"]), int(d["n2"]))


@dataclass(frozen=True)
class KronFactorPair:
    """Pair (A, B) standing in for the never-materialized W = A (x) B."""

    a: np.ndarray
    b: np.ndarray

    @property
    def shape(self) -> FactorShape:
        return FactorShape(self.a.shape[0], self.a.shape[1], self.b.shape[0], self.b.shape[1])

    @property
    def rows(self) -> int:
        return self.a.shape[0] * self.b.shape[0]

    @property
    def cols(self) -> int:
        return self.a.shape[1] * self.b.shape[1]

    @property
    def param_count(self) -> int:
        return self.a.size + self.b.size


@dataclass
class FlopCounter:
    """Per-call multiply/add accumulator; never shared between calls."""

    mults: int = 0
    adds: int = 0

    @property
    def total(self) -> int:
        return self.mults + self.adds


def kron_product(p: KronFactorPair) -> np.ndarray:
    """Explicit block matrix: block (i, j) equals A[i, j] * B."""
    return np.kron(p.a, p.b)


def kron_flops(shape: FactorShape) -> int:
    """FLOPs of the factorized matvec for one input vector (min over orders)."""
    m1, n1, m2, n2 = shape.m1, shape.n1, shape.m2, shape.n2
    b_first = (2 * n2 - 1) * m2 * n1 + (2 * n1 - 1) * m2 * m1
    a_first = (2 * n1 - 1) * n2 * m1 + (2 * n2 - 1) * m2 * m1
    return min(b_first, a_first)


def dense_matvec_flops(m: int, n: int) -> int:
    """Standard dense count for W in R^{m x n} times x in R^n."""
    if m < 1 or n < 1:
        raise ShapeError(f"dimensions must be positive, got {m}x{n}")
    return (2 * n - 1) * m


def choose_order(shape: FactorShape) -> str:
    """Cheaper association order; ties prefer applying B first."""
    m1, n1, m2, n2 = shape.m1, shape.n1, shape.m2, shape.n2
    b_first = (2 * n2 - 1) * m2 * n1 + (2 * n1 - 1) * m2 * m1
    a_first = (2 * n1 - 1) * n2 * m1 + (2 * n2 - 1) * m2 * m1
    return "b_first" if b_first <= a_first else "a_first"


def _counted_matmul(a: np.ndarray, b: np.ndarray, counter: FlopCounter) -> np.ndarray:
    """Scalar-loop product that counts every multiply and add it performs."""
    p, q = a.shape
    q2, r = b.shape
    out = np.empty((p, r))
    for i in range(p):
        for k in range(r):
            acc = a[i, 0] * b[0, k]
            counter.mults += 1
            for j in range(1, q):
                acc += a[i, j] * b[j, k]
                counter.mults += 1
                counter.adds += 1
            out[i, k] = acc
    return out


def kron_matvec(p: KronFactorPair, x: np.ndarray, counter: FlopCounter | None = None,
                order: str | None = None) -> np.ndarray:
    """Apply W = A (x) B to a vector without reconstructing W.

    ``order`` forces "b_first" or "a_first"; by default the cheaper one is
    used. With ``counter`` the two inner products run through an instrumented
    scalar loop so the reported count is what was actually executed.
    """
    shape = p.shape
    flat = np.asarray(x).reshape(-1)
    if flat.size != shape.cols:
        raise ShapeError(f"kron_matvec: input length {flat.size}, expected {shape.cols}")
    if order is None:
        order = choose_order(shape)
    r = flat.reshape(shape.n1, shape.n2).T  # R_{n2 x n1}(x), columns of size n2
    mm = (lambda u, v: _counted_matmul(u, v, counter)) if counter is not None else (lambda u, v: u @ v)
    if order == "b_first":
        y = mm(mm(p.b, r), p.a.T)
    elif order == "a_first":
        y = mm(p.b, mm(r, p.a.T))
    else:
        raise ValueError(f"unknown association order {order!r}")
    out = y.flatten(order="F")  # V(.) stacks columns
    if np.asarray(x).ndim == 2:
        return out.reshape(-1, 1)
    return out


def kron_matmul(p: KronFactorPair, x: np.ndarray) -> np.ndarray:
    """Column-wise extension of :func:`kron_matvec` to a matrix of inputs."""
    xm = np.asarray(x)
    if xm.ndim != 2:
        raise ShapeError(f"kron_matmul: expected a matrix, got ndim={xm.ndim}")
    shape = p.shape
    if xm.shape[0] != shape.cols:
        raise ShapeError(f"kron_matmul: input has {xm.shape[0]} rows, expected {shape.cols}")
    k = xm.shape[1]
    # column c reshaped row-major to n1 x n2; V(B R A^T) == (A (Rc^T) B^T) flattened
    xr = xm.T.reshape(k, shape.n1, shape.n2)
    if choose_order(shape) == "b_first":
        y3 = np.matmul(p.a, np.matmul(xr, p.b.T))
    else:
        y3 = np.matmul(np.matmul(p.a, xr), p.b.T)
    return y3.reshape(k, shape.rows).T
