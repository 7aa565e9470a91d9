"""Nearest-Kronecker-product approximation.

A dense W is rearranged so that Kronecker separability becomes rank-1
structure; the dominant singular triplet of the rearrangement (power
iteration, seeded start) then yields the Frobenius-optimal factor pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kron import FactorShape, KronFactorPair, kron_product
from .tensor import ShapeError


class PowerIterationError(RuntimeError):
    """Power iteration hit max_iter before meeting the tolerance."""

    def __init__(self, msg: str, last_sigma: float, last_u: np.ndarray, last_v: np.ndarray,
                 iterations: int):
        super().__init__(msg)
        self.last_sigma = last_sigma
        self.last_u = last_u
        self.last_v = last_v
        self.iterations = iterations


@dataclass(frozen=True)
class NkpResult:
    factors: KronFactorPair
    residual: float
    iterations: int
    sigma: float  # dominant singular value of the rearranged matrix


def rearrange(w: np.ndarray, shape: FactorShape) -> np.ndarray:
    """Permute W into an (m1 n1) x (m2 n2) matrix.

    Row (i*n1 + j) holds the m2 x n2 block at block position (i, j),
    flattened column-stacked. If W = A (x) B the result is exactly the outer
    product of A's entries with B's, hence rank 1. Entry permutation only, so
    the Frobenius norm is preserved.
    """
    m1, n1, m2, n2 = shape.m1, shape.n1, shape.m2, shape.n2
    if w.shape[0] != m1 * m2:
        raise ShapeError(f"rearrange: {w.shape[0]} rows, need m1*m2 = {m1}*{m2}")
    if w.shape[1] != n1 * n2:
        raise ShapeError(f"rearrange: {w.shape[1]} cols, need n1*n2 = {n1}*{n2}")
    w4 = w.reshape(m1, m2, n1, n2)
    # target index (i*n1 + j, q*m2 + p) <- w4[i, p, j, q]
    return w4.transpose(0, 2, 3, 1).reshape(m1 * n1, n2 * m2)


def dominant_singular_triplet(m: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000,
                              rng: np.random.Generator | None = None,
                              strict: bool = True) -> tuple[float, np.ndarray, np.ndarray, int]:
    """Dominant (sigma, u, v) of ``m`` by power iteration on M^T M.

    Converged when the singular-pair residual ||M^T u - sigma v|| drops below
    tol * ||M||_F. With strict=False the last iterate is returned instead of
    raising on non-convergence.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    fro = float(np.linalg.norm(m))
    if fro == 0.0:
        raise ValueError("dominant_singular_triplet: zero matrix")
    if rng is None:
        rng = np.random.default_rng(0)
    v = rng.standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    sigma, u = 0.0, np.zeros(m.shape[0])
    for it in range(1, max_iter + 1):
        w = m @ v
        sigma = float(np.linalg.norm(w))
        if sigma == 0.0:  # start vector landed in the null space; re-draw
            v = rng.standard_normal(m.shape[1])
            v /= np.linalg.norm(v)
            continue
        u = w / sigma
        z = m.T @ u
        resid = float(np.linalg.norm(z - sigma * v))
        v_next = z / np.linalg.norm(z)
        if resid <= tol * fro:
            return sigma, u, v_next, it
        v = v_next
    if strict:
        raise PowerIterationError(
            f"power iteration did not converge in {max_iter} iterations "
            f"(last residual {resid:.3e}, tol {tol * fro:.3e})",
            sigma, u, v, max_iter)
    return sigma, u, v, max_iter


def nearest_kronecker(w: np.ndarray, shape: FactorShape, tol: float = 1e-10,
                      rng: np.random.Generator | None = None,
                      max_iter: int = 10_000, strict: bool = True) -> NkpResult:
    """Frobenius-optimal (A, B) of the given split for a dense W.

    sigma is split evenly between the factors and the sign is fixed so A's
    largest-magnitude entry is nonnegative; the product A (x) B is invariant
    under this gauge.
    """
    m1, n1, m2, n2 = shape.m1, shape.n1, shape.m2, shape.n2
    if not np.any(w):
        zero = KronFactorPair(np.zeros((m1, n1)), np.zeros((m2, n2)))
        return NkpResult(zero, 0.0, 0, 0.0)
    r = rearrange(w, shape)
    sigma, u, v, iters = dominant_singular_triplet(r, tol=tol, max_iter=max_iter,
                                                  rng=rng, strict=strict)
    a = np.sqrt(sigma) * u.reshape(m1, n1)        # undoes the row (i*n1 + j) flattening
    b = np.sqrt(sigma) * v.reshape(n2, m2).T      # undoes the column-stacked block vec
    if a.flat[np.argmax(np.abs(a))] < 0:
        a, b = -a, -b
    pair = KronFactorPair(a, b)
    residual = float(np.linalg.norm(w - kron_product(pair)))
    return NkpResult(pair, residual, iters, sigma)
