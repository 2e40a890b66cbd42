import math
from functools import reduce

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cube3d.errors import FormatError, ShapeError
from cube3d.tensor import (
    flip,
    load_vten,
    matmul,
    pad,
    peek_vten_shape,
    save_vten,
    tensor_new,
)

shapes = st.lists(st.integers(min_value=1, max_value=6), min_size=1, max_size=5)


def test_new_zero_fill():
    t = tensor_new((2, 2), 0.0)
    assert t.shape == (2, 2)
    assert (t == 0).all()


def test_new_singleton():
    assert tensor_new((1,), 7.5).tolist() == [7.5]


def test_new_cube_element_count():
    # independent product oracle
    dims = (16, 170, 170, 3)
    expected = reduce(lambda a, b: a * b, dims)
    t = tensor_new(dims, 1.0)
    assert t.size == expected == 1_387_200
    assert np.isfinite(t).all()


@pytest.mark.parametrize("bad", [(0,), (3, -1), (2, 0, 2)])
def test_new_rejects_bad_extents(bad):
    with pytest.raises(ShapeError):
        tensor_new(bad)


def test_new_rejects_bad_rank():
    with pytest.raises(ShapeError):
        tensor_new(())
    with pytest.raises(ShapeError):
        tensor_new((2,) * 6)


def test_flip_vector():
    assert flip(np.array([1.0, 2.0, 3.0]), 0).tolist() == [3.0, 2.0, 1.0]


def test_flip_matrix_against_index_remap():
    t = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    out = flip(t, 1)
    # brute-force index remap oracle
    expect = np.empty_like(t)
    for i in range(2):
        for j in range(3):
            expect[i, j] = t[i, 3 - 1 - j]
    assert (out == expect).all()


@given(shapes, st.data())
@settings(max_examples=60, deadline=None)
def test_flip_involution(dims, data):
    axis = data.draw(st.integers(min_value=0, max_value=len(dims) - 1))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    t = rng.standard_normal(dims).astype(np.float32)
    assert (flip(flip(t, axis), axis) == t).all()


def test_flip_axis_out_of_range():
    with pytest.raises(ShapeError):
        flip(np.zeros((2, 2)), 2)


def test_pad_vector():
    assert pad(np.array([5.0]), [(1, 1)], 0.0).tolist() == [0.0, 5.0, 0.0]


def test_pad_same_conv_arithmetic():
    t = np.zeros(170)
    assert pad(t, [(1, 1)], 0.0).shape == (172,)


@given(shapes, st.data())
@settings(max_examples=40, deadline=None)
def test_pad_crop_round_trip(dims, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    t = rng.standard_normal(dims).astype(np.float32)
    pairs = [
        (data.draw(st.integers(0, 3)), data.draw(st.integers(0, 3)))
        for _ in dims
    ]
    padded = pad(t, pairs, 0.0)
    sl = tuple(slice(b, b + d) for (b, _), d in zip(pairs, dims))
    assert (padded[sl] == t).all()


def test_pad_rejects_negative():
    with pytest.raises(ShapeError):
        pad(np.zeros(3), [(-1, 0)], 0.0)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 3))
    assert np.allclose(matmul(a, np.eye(3)), a)


def test_matmul_small_case():
    out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
    assert out.shape == (1, 1)
    assert out[0, 0] == 11.0


def _matmul_oracle(a, b):
    m, k = a.shape
    _, n = b.shape
    c = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            for p in range(k):
                c[i, j] += a[i, p] * b[p, j]
    return c


@pytest.mark.parametrize("seed", range(5))
def test_matmul_against_triple_loop(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 65, size=3)
    a = rng.standard_normal((m, k))
    b = rng.standard_normal((k, n))
    np.testing.assert_allclose(matmul(a, b), _matmul_oracle(a, b), rtol=1e-6)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        matmul(np.zeros(3), np.zeros((3, 2)))


def test_vten_round_trip_bit_exact(tmp_path, rng):
    t = rng.standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.vten"
    save_vten(path, t)
    back = load_vten(path)
    assert back.dtype == np.float32
    assert (back == t).all()
    assert back.tobytes() == t.tobytes()
    assert peek_vten_shape(path) == (3, 4, 5)


def test_vten_bad_magic(tmp_path):
    path = tmp_path / "bad.vten"
    path.write_bytes(b"XXXX" + bytes(10))
    with pytest.raises(FormatError):
        load_vten(path)


def test_vten_truncated_payload(tmp_path, rng):
    path = tmp_path / "t.vten"
    save_vten(path, rng.standard_normal((4, 4)).astype(np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(FormatError):
        load_vten(path)
