import numpy as np
import pytest

from kronekit.tensor import (BadMagicError, NamedTensorStore, ShapeError,
                             TruncatedFileError, UnsupportedVersionError,
                             StoreError, make_rng, matmul, reshape_vec, vec)

from oracles import matmul_oracle


def test_make_rng_deterministic():
    a = make_rng(7).standard_normal(16)
    b = make_rng(7).standard_normal(16)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, make_rng(8).standard_normal(16))


def test_vec_hand_example():
    m = np.array([[1.0, 3.0], [2.0, 4.0]])
    assert np.array_equal(vec(m).ravel(), [1.0, 2.0, 3.0, 4.0])


def test_vec_index_definition():
    rng = make_rng(0)
    for _ in range(20):
        r, c = rng.integers(1, 7, size=2)
        m = rng.standard_normal((r, c))
        v = vec(m).ravel()
        for k in range(r * c):
            assert v[k] == m[k % r, k // r]


def test_vec_reshape_round_trip():
    rng = make_rng(1)
    for _ in range(20):
        r, c = rng.integers(1, 9, size=2)
        m = rng.standard_normal((r, c))
        assert np.array_equal(reshape_vec(vec(m), r, c), m)
        x = rng.standard_normal(r * c)
        assert np.array_equal(vec(reshape_vec(x, r, c)).ravel(), x)


def test_reshape_vec_size_mismatch():
    with pytest.raises(ShapeError):
        reshape_vec(np.zeros(5), 2, 3)


def test_matmul_against_loop_oracle():
    rng = make_rng(2)
    for _ in range(10):
        p, q, r = rng.integers(1, 8, size=3)
        a = rng.standard_normal((p, q))
        b = rng.standard_normal((q, r))
        assert np.allclose(matmul(a, b), matmul_oracle(a, b), atol=1e-12)


def test_matmul_dimension_check():
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))


# ------------------------------------------------------------------ KTS1 I/O

def test_store_round_trip_many_tensors(tmp_path):
    rng = make_rng(3)
    store = NamedTensorStore()
    names = [f"tensor.{i}.weight" for i in range(50)]
    for i, name in enumerate(names):
        r, c = rng.integers(1, 20, size=2)
        m = rng.standard_normal((r, c))
        store.add(name, m.astype(np.float32) if i % 3 == 0 else m)
    path = tmp_path / "round.kts"
    store.save(path)
    loaded = NamedTensorStore.load(path)
    assert loaded.names() == names  # insertion order survives
    for name in names:
        assert loaded[name].dtype == store[name].dtype
        assert np.array_equal(loaded[name], store[name])


def test_store_rejects_duplicates_and_bad_shapes():
    store = NamedTensorStore()
    store.add("w", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        store.add("w", np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        store.add("cube", np.zeros((2, 2, 2)))


def test_store_bad_magic(tmp_path):
    path = tmp_path / "bad.kts"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(BadMagicError):
        NamedTensorStore.load(path)


def test_store_unsupported_version(tmp_path):
    path = tmp_path / "v9.kts"
    path.write_bytes(b"KTS9" + b"\x00" * 16)
    with pytest.raises(UnsupportedVersionError):
        NamedTensorStore.load(path)


def test_store_truncated_payload(tmp_path):
    store = NamedTensorStore()
    store.add("w", make_rng(4).standard_normal((6, 6)))
    path = tmp_path / "full.kts"
    store.save(path)
    data = path.read_bytes()
    for cut in (len(data) - 8, 5, len(data) // 2):
        short = tmp_path / f"cut{cut}.kts"
        short.write_bytes(data[:cut])
        with pytest.raises(TruncatedFileError):
            NamedTensorStore.load(short)


def test_store_unknown_dtype_code(tmp_path):
    store = NamedTensorStore()
    store.add("w", np.zeros((1, 1)))
    path = tmp_path / "one.kts"
    store.save(path)
    data = bytearray(path.read_bytes())
    # dtype code byte sits right after the 4-byte header, count, name length, name
    data[4 + 2 + 2 + len("w")] = 200
    path.write_bytes(bytes(data))
    with pytest.raises(StoreError):
        NamedTensorStore.load(path)
