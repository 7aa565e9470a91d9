import numpy as np
import pytest

from kronekit.kron import (FactorShape, FlopCounter, KronFactorPair, choose_order,
                           dense_matvec_flops, kron_flops, kron_matmul,
                           kron_matvec, kron_product)
from kronekit.tensor import ShapeError, make_rng

from oracles import kron_oracle


def random_pair(rng, hi=9) -> KronFactorPair:
    m1, n1, m2, n2 = rng.integers(1, hi, size=4)
    return KronFactorPair(rng.standard_normal((m1, n1)), rng.standard_normal((m2, n2)))


def test_factor_shape_properties_and_json():
    s = FactorShape(3, 4, 5, 6)
    assert (s.rows, s.cols, s.param_count) == (15, 24, 3 * 4 + 5 * 6)
    assert FactorShape.from_json(s.to_json()) == s
    with pytest.raises(ShapeError):
        FactorShape(0, 1, 1, 1)


def test_kron_product_matches_index_oracle():
    rng = make_rng(0)
    for _ in range(10):
        p = random_pair(rng, hi=6)
        assert np.array_equal(kron_product(p), kron_oracle(p.a, p.b))


def test_kron_product_bilinear():
    rng = make_rng(1)
    a1, a2 = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 5))
    lhs = kron_product(KronFactorPair(2.0 * a1 - 3.0 * a2, b))
    rhs = 2.0 * kron_product(KronFactorPair(a1, b)) - 3.0 * kron_product(KronFactorPair(a2, b))
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_kron_product_rank_multiplicative():
    rng = make_rng(2)
    a = rng.standard_normal((5, 2)) @ rng.standard_normal((2, 5))  # rank 2
    b = rng.standard_normal((4, 3)) @ rng.standard_normal((3, 4))  # rank 3
    assert np.linalg.matrix_rank(kron_product(KronFactorPair(a, b))) == 6


def test_kron_matvec_matches_reconstruction():
    rng = make_rng(3)
    for _ in range(50):
        p = random_pair(rng)
        x = rng.standard_normal(p.cols)
        want = kron_product(p) @ x
        for order in (None, "b_first", "a_first"):
            got = kron_matvec(p, x, order=order)
            assert np.allclose(got, want, atol=1e-11)


def test_kron_matvec_column_input():
    rng = make_rng(4)
    p = random_pair(rng)
    x = rng.standard_normal((p.cols, 1))
    got = kron_matvec(p, x)
    assert got.shape == (p.rows, 1)
    assert np.allclose(got, kron_product(p) @ x, atol=1e-11)


def test_kron_matvec_validation():
    p = KronFactorPair(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        kron_matvec(p, np.zeros(5))
    with pytest.raises(ValueError):
        kron_matvec(p, np.zeros(4), order="sideways")


def test_kron_flops_published_example():
    assert kron_flops(FactorShape(384, 384, 2, 2)) == 591_360


def test_kron_flops_is_min_over_orders():
    rng = make_rng(5)
    for _ in range(50):
        m1, n1, m2, n2 = (int(v) for v in rng.integers(1, 10, size=4))
        s = FactorShape(m1, n1, m2, n2)
        b_first = (2 * n2 - 1) * m2 * n1 + (2 * n1 - 1) * m2 * m1
        a_first = (2 * n1 - 1) * n2 * m1 + (2 * n2 - 1) * m2 * m1
        assert kron_flops(s) == min(b_first, a_first)


def test_kron_flops_beats_dense_for_balanced_splits():
    # nontrivial balanced splits are where the factorization pays off
    for s in (FactorShape(384, 384, 2, 2), FactorShape(16, 16, 2, 2),
              FactorShape(8, 8, 8, 8)):
        assert kron_flops(s) < dense_matvec_flops(s.rows, s.cols)


def test_choose_order_tie_prefers_b_first():
    # fully symmetric shapes make both association orders cost the same
    assert choose_order(FactorShape(3, 3, 3, 3)) == "b_first"


def test_counter_matches_flops_model():
    rng = make_rng(6)
    for _ in range(20):
        p = random_pair(rng, hi=7)
        s = p.shape
        x = rng.standard_normal(s.cols)
        counter = FlopCounter()
        kron_matvec(p, x, counter=counter)
        assert counter.total == kron_flops(s)


def test_counter_matches_forced_branch_formula():
    rng = make_rng(7)
    p = random_pair(rng, hi=7)
    s = p.shape
    x = rng.standard_normal(s.cols)
    b_first = (2 * s.n2 - 1) * s.m2 * s.n1 + (2 * s.n1 - 1) * s.m2 * s.m1
    a_first = (2 * s.n1 - 1) * s.n2 * s.m1 + (2 * s.n2 - 1) * s.m2 * s.m1
    for order, want in (("b_first", b_first), ("a_first", a_first)):
        counter = FlopCounter()
        kron_matvec(p, x, counter=counter, order=order)
        assert counter.total == want


def test_kron_matmul_matches_column_wise_matvec():
    rng = make_rng(8)
    for _ in range(20):
        p = random_pair(rng)
        x = rng.standard_normal((p.cols, int(rng.integers(1, 6))))
        got = kron_matmul(p, x)
        want = np.column_stack([kron_matvec(p, x[:, c]) for c in range(x.shape[1])])
        assert np.allclose(got, want, atol=1e-11)
        assert np.allclose(got, kron_product(p) @ x, atol=1e-11)


def test_kron_matmul_validation():
    p = KronFactorPair(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        kron_matmul(p, np.zeros(4))      # vector, not matrix
    with pytest.raises(ShapeError):
        kron_matmul(p, np.zeros((5, 2)))


def test_dense_matvec_flops():
    assert dense_matvec_flops(3, 4) == 7 * 3
    with pytest.raises(ShapeError):
        dense_matvec_flops(0, 4)
