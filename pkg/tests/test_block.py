import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from matrel.block import (BlockId, Format, MatrixBlock, TensorBlock3, block_nnz,
                          convert_format, local_ewise, local_matmul, local_scalar,
                          local_transpose, validate_block)
from matrel.errors import DimMismatch, DivisionByZero


def dense(x):
    return MatrixBlock.dense(np.array(x, dtype=float))


def csr(x):
    return MatrixBlock.sparse(sp.csr_matrix(np.array(x, dtype=float)))


def pattern(b):
    r, c, v = b.entries()
    return {(int(i), int(j)): float(x) for i, j, x in zip(r, c, v)}


small = st.integers(1, 8).flatmap(
    lambda m: st.integers(1, 8).flatmap(
        lambda n: arrays(np.float64, (m, n),
                         elements=st.sampled_from([0.0, 0.0, 0.0, 1.0, -2.5, 3.0, 1e-3]))))


def all_formats(x):
    arr = np.array(x, dtype=float)
    return [MatrixBlock.dense(arr), MatrixBlock.sparse(sp.csr_matrix(arr), Format.CSR),
            MatrixBlock.sparse(sp.csr_matrix(arr), Format.CSC)]


# -- transpose -------------------------------------------------------------

def test_transpose_dense_hand_case():
    out = local_transpose(dense([[1, 2], [3, 4]]))
    assert np.array_equal(out.to_dense(), [[1, 3], [2, 4]])


def test_transpose_identity_is_identity():
    assert np.array_equal(local_transpose(dense(np.eye(3))).to_dense(), np.eye(3))


def test_transpose_csr_gives_csc_with_swapped_pattern():
    b = MatrixBlock.sparse(sp.csr_matrix(([5.0], ([0], [2])), shape=(3, 3)), Format.CSR,
                           BlockId(1, 4))
    t = local_transpose(b)
    assert t.fmt is Format.CSC
    assert pattern(t) == {(2, 0): 5.0}
    assert t.id == BlockId(4, 1)
    # the index arrays are reused, not re-sorted
    assert np.shares_memory(t.storage.indices, b.storage.indices)
    validate_block(t)


@given(small)
def test_transpose_twice_is_identity(x):
    for b in all_formats(x):
        tt = local_transpose(local_transpose(b))
        assert tt.fmt is b.fmt
        assert np.array_equal(tt.to_dense(), b.to_dense())
        validate_block(tt)


# -- element-wise --------------------------------------------------------------

def test_ewise_add_hand_case():
    out = local_ewise("+", dense([[0, 2], [0, 0]]), dense([[1, 0], [0, 0]]))
    assert np.array_equal(out.to_dense(), [[1, 2], [0, 0]])


def test_ewise_mul_disjoint_sparse_is_empty():
    a = MatrixBlock.sparse(sp.csr_matrix(([5.0], ([0], [0])), shape=(2, 2)))
    b = MatrixBlock.sparse(sp.csr_matrix(([7.0], ([1], [1])), shape=(2, 2)))
    out = local_ewise("*", a, b)
    assert out.nnz == 0 and out.fmt.is_sparse
    validate_block(out)


def test_ewise_div_hand_case():
    out = local_ewise("/", dense([[4, 0], [0, 9]]), dense([[2, 1], [1, 3]]))
    assert np.array_equal(out.to_dense(), [[2, 0], [0, 3]])


def test_ewise_div_by_zero_at_nonzero_numerator():
    with pytest.raises(DivisionByZero):
        local_ewise("/", dense([[1, 0]]), dense([[0, 1]]))
    with pytest.raises(DivisionByZero):
        local_ewise("/", csr([[1, 0]]), csr([[0, 1]]))


def test_ewise_div_zero_over_zero_is_zero():
    out = local_ewise("/", csr([[0, 2]]), csr([[0, 4]]))
    assert pattern(out) == {(0, 1): 0.5}


def test_ewise_shape_mismatch():
    with pytest.raises(DimMismatch):
        local_ewise("+", dense([[1, 2]]), dense([[1], [2]]))


@settings(max_examples=60)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_ewise_matches_numpy_for_all_format_pairs(m, n, seed):
    rng = np.random.default_rng(seed)
    x = np.where(rng.random((m, n)) < 0.5, rng.integers(-3, 4, (m, n)), 0).astype(float)
    y = np.where(rng.random((m, n)) < 0.5, rng.integers(1, 4, (m, n)), 0).astype(float)
    y_full = np.where(x != 0, np.where(y == 0, 1.0, y), y)  # safe denominator
    for a in all_formats(x):
        for b in all_formats(y_full):
            for op, want in (("+", x + y_full), ("*", x * y_full)):
                out = local_ewise(op, a, b)
                validate_block(out)
                assert np.array_equal(out.to_dense(), want)
            out = local_ewise("/", a, b)
            validate_block(out)
            want = np.zeros_like(x)
            nz = x != 0
            want[nz] = x[nz] / y_full[nz]
            assert np.array_equal(out.to_dense(), want)


# -- scalar -----------------------------------------------------------------

def test_scalar_mul_keeps_pattern_and_format():
    b = MatrixBlock.sparse(sp.csr_matrix(([3.0], ([0], [1])), shape=(2, 2)))
    out = local_scalar("*", b, 2)
    assert out.fmt is Format.CSR
    assert pattern(out) == {(0, 1): 6.0}


def test_scalar_add_densifies():
    out = local_scalar("+", csr([[0, 0], [0, 0]]), 1)
    assert out.fmt is Format.DENSE
    assert np.array_equal(out.to_dense(), np.ones((2, 2)))


@given(small)
def test_scalar_mul_by_zero_annihilates(x):
    for b in all_formats(x):
        out = local_scalar("*", b, 0)
        assert out.nnz == 0
        validate_block(out)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    out = local_matmul(dense(np.eye(2)), dense([[1, 2], [3, 4]]))
    assert np.array_equal(out.to_dense(), [[1, 2], [3, 4]])


def test_matmul_hand_case():
    out = local_matmul(dense([[1, 2], [3, 4]]), dense([[5, 6], [7, 8]]))
    assert np.array_equal(out.to_dense(), [[19, 22], [43, 50]])


def test_matmul_single_path_sparse():
    a = MatrixBlock.sparse(sp.csr_matrix(([2.0], ([0], [0])), shape=(2, 2)))
    b = MatrixBlock.sparse(sp.csr_matrix(([3.0], ([0], [1])), shape=(2, 2)))
    out = local_matmul(a, b)
    assert pattern(out) == {(0, 1): 6.0}
    assert out.fmt.is_sparse


def test_matmul_inner_mismatch():
    with pytest.raises(DimMismatch):
        local_matmul(dense([[1, 2]]), dense([[1, 2]]))


def test_matmul_sparse_densifies_when_fill_is_high():
    a = csr(np.ones((4, 4)))
    out = local_matmul(a, a)
    assert out.fmt is Format.DENSE


def _triple_loop(x, y):
    out = np.zeros((x.shape[0], y.shape[1]))
    for i in range(x.shape[0]):
        for j in range(y.shape[1]):
            s = 0.0
            for k in range(x.shape[1]):
                s += x[i, k] * y[k, j]
            out[i, j] = s
    return out


@pytest.mark.parametrize("seed", range(6))
def test_matmul_matches_triple_loop(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 65, size=3)
    dens = rng.choice([0.05, 0.3, 1.0])
    x = np.where(rng.random((m, k)) < dens, rng.normal(size=(m, k)), 0.0)
    y = np.where(rng.random((k, n)) < dens, rng.normal(size=(k, n)), 0.0)
    want = _triple_loop(x, y)
    for a in all_formats(x):
        for b in all_formats(y):
            out = local_matmul(a, b)
            validate_block(out)
            assert np.allclose(out.to_dense(), want, rtol=0, atol=1e-12)


# -- format conversion and nnz -------------------------------------------------

def test_dense_to_csr_drops_zeros():
    out = convert_format(dense([[0, 5], [0, 0]]), Format.CSR)
    assert out.nnz == 1
    assert list(out.storage.indptr) == [0, 1, 1]
    assert pattern(out) == {(0, 1): 5.0}


def test_all_zero_dense_to_sparse():
    out = convert_format(dense(np.zeros((3, 3))), Format.CSC)
    assert out.nnz == 0
    validate_block(out)


@given(small)
def test_format_round_trips(x):
    for b in all_formats(x):
        for target in Format:
            once = convert_format(b, target)
            back = convert_format(once, b.fmt)
            validate_block(once)
            validate_block(back)
            assert once.fmt is target
            assert pattern(back) == pattern(b)


@pytest.mark.parametrize("x, want", [
    (np.zeros((2, 2)), 0),
    (np.eye(3), 3),
    ([[1, 2], [0, 4]], 3),
])
def test_block_nnz(x, want):
    for b in all_formats(x):
        assert block_nnz(b) == want


def test_dense_storage_length():
    b = dense(np.arange(6).reshape(2, 3))
    assert b.storage.size == b.rows * b.cols


def test_sparse_constructor_canonicalizes_duplicates_and_zeros():
    raw = sp.coo_matrix(([1.0, 2.0, 0.0, -1.0], ([0, 0, 1, 1], [1, 1, 0, 1])), shape=(2, 2))
    b = MatrixBlock.sparse(raw)
    validate_block(b)
    assert pattern(b) == {(0, 1): 3.0, (1, 1): -1.0}


def test_tensor_block_fields():
    p = dense([[1.0]])
    t = TensorBlock3(5, 0, 1, p)
    assert t.d1 == 5 and t.payload.shape == (1, 1)
