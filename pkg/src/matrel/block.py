"""Square matrix blocks and the local kernels that run on them.

A block is the unit of storage, computation and movement.  Sparse blocks are
kept in canonical CSR or CSC form (sorted, duplicate-free indices and no
explicit zeros); dense blocks hold a 2-D float64 array.  Blocks are immutable
once built: every kernel returns a fresh block.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np
import scipy.sparse as sp

from .errors import DimMismatch, DivisionByZero

DEFAULT_BLOCK_SIZE = 1000
# sparse x sparse products whose estimated fill exceeds this come out dense
DENSIFY_FILL = 0.5

EWISE_OPS = ("+", "*", "/")
SCALAR_OPS = ("+", "*")


class Format(enum.Enum):
    DENSE = "dense"
    CSR = "csr"
    CSC = "csc"

    @property
    def is_sparse(self) -> bool:
        return self is not Format.DENSE


class BlockId(NamedTuple):
    row_blk: int
    col_blk: int

    def transposed(self) -> "BlockId":
        return BlockId(self.col_blk, self.row_blk)


Storage = Union[np.ndarray, sp.csr_matrix, sp.csc_matrix]


def _canonical(m, fmt: Format):
    if fmt is Format.CSR:
        m = sp.csr_matrix(m, dtype=np.float64)
    else:
        m = sp.csc_matrix(m, dtype=np.float64)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return m


@dataclass(frozen=True, eq=False)
class MatrixBlock:
    """One tile of a matrix: block id plus (format, rows, cols, storage)."""

    id: BlockId
    fmt: Format
    rows: int
    cols: int
    storage: Storage

    # -- construction -----------------------------------------------------
    @classmethod
    def dense(cls, values, id: BlockId = BlockId(0, 0)) -> "MatrixBlock":
        arr = np.array(values, dtype=np.float64, ndmin=2)
        arr[arr == 0] = 0.0  # no negative zeros
        return cls(BlockId(*id), Format.DENSE, arr.shape[0], arr.shape[1], arr)

    @classmethod
    def sparse(cls, values, fmt: Format = Format.CSR,
               id: BlockId = BlockId(0, 0), shape=None) -> "MatrixBlock":
        if not fmt.is_sparse:
            raise ValueError("sparse() needs CSR or CSC")
        if shape is not None and not sp.issparse(values):
            values = sp.csr_matrix(np.asarray(values, dtype=np.float64).reshape(shape))
        m = _canonical(values, fmt)
        return cls(BlockId(*id), fmt, m.shape[0], m.shape[1], m)

    @classmethod
    def from_entries(cls, rows: int, cols: int, r, c, v,
                     fmt: Format = Format.CSR,
                     id: BlockId = BlockId(0, 0)) -> "MatrixBlock":
        r = np.asarray(r, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        v = np.asarray(v, dtype=np.float64)
        if fmt is Format.DENSE:
            arr = np.zeros((rows, cols))
            np.add.at(arr, (r, c), v)
            return cls.dense(arr, id)
        return cls.sparse(sp.coo_matrix((v, (r, c)), shape=(rows, cols)), fmt, id)

    @classmethod
    def zeros(cls, rows: int, cols: int, fmt: Format = Format.CSR,
              id: BlockId = BlockId(0, 0)) -> "MatrixBlock":
        if fmt is Format.DENSE:
            return cls.dense(np.zeros((rows, cols)), id)
        return cls.sparse(sp.csr_matrix((rows, cols)), fmt, id)

    # -- views ------------------------------------------------------------
    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return block_nnz(self)

    @property
    def comm_size(self) -> int:
        """Entries shipped when this block moves: nnz if sparse, rows*cols if dense."""
        if self.fmt.is_sparse:
            return int(self.storage.nnz)
        return self.rows * self.cols

    @property
    def data(self) -> np.ndarray:
        return self.storage.data if self.fmt.is_sparse else self.storage.ravel()

    @property
    def indices(self):
        return self.storage.indices if self.fmt.is_sparse else None

    @property
    def indptr(self):
        return self.storage.indptr if self.fmt.is_sparse else None

    def with_id(self, id: BlockId) -> "MatrixBlock":
        return MatrixBlock(BlockId(*id), self.fmt, self.rows, self.cols, self.storage)

    def to_dense(self) -> np.ndarray:
        if self.fmt.is_sparse:
            return self.storage.toarray()
        return self.storage.copy()

    def to_scipy(self):
        """CSR/CSC matrix for sparse blocks, the ndarray itself for dense ones."""
        return self.storage

    def entries(self, include_zeros: bool = False):
        """(row, col, value) arrays of the stored entries.

        Sparse blocks return their nonzeros.  Dense blocks return nonzeros,
        or every position when ``include_zeros`` is set.
        """
        if self.fmt.is_sparse:
            coo = self.storage.tocoo()
            order = np.lexsort((coo.col, coo.row))
            return (coo.row[order].astype(np.int64), coo.col[order].astype(np.int64),
                    coo.data[order])
        if include_zeros:
            r, c = np.indices(self.storage.shape)
            return r.ravel(), c.ravel(), self.storage.ravel().copy()
        r, c = np.nonzero(self.storage)
        return r.astype(np.int64), c.astype(np.int64), self.storage[r, c]

    def same_as(self, other: "MatrixBlock") -> bool:
        """Exact equality of shape, nonzero pattern and values."""
        if self.shape != other.shape:
            return False
        return np.array_equal(self.to_dense(), other.to_dense())

    def __repr__(self):
        return (f"MatrixBlock(id={tuple(self.id)}, fmt={self.fmt.value}, "
                f"shape={self.shape}, nnz={self.nnz})")


def validate_block(b: MatrixBlock) -> None:
    """Raise AssertionError if ``b`` breaks a storage invariant."""
    assert b.rows >= 1 and b.cols >= 1, "empty block"
    if b.fmt is Format.DENSE:
        assert isinstance(b.storage, np.ndarray)
        assert b.storage.shape == (b.rows, b.cols)
        assert b.storage.dtype == np.float64
        assert b.storage.size == b.rows * b.cols
        return
    m = b.storage
    want = sp.csr_matrix if b.fmt is Format.CSR else sp.csc_matrix
    assert isinstance(m, want), f"{type(m)} stored under {b.fmt}"
    assert m.shape == (b.rows, b.cols)
    outer = b.rows if b.fmt is Format.CSR else b.cols
    inner = b.cols if b.fmt is Format.CSR else b.rows
    assert len(m.indptr) == outer + 1
    assert np.all(np.diff(m.indptr) >= 0)
    assert m.indptr[-1] == len(m.indices) == len(m.data)
    if len(m.indices):
        assert m.indices.min() >= 0 and m.indices.max() < inner, "index out of bounds"
    for k in range(outer):
        seg = m.indices[m.indptr[k]:m.indptr[k + 1]]
        assert np.all(np.diff(seg) > 0), "unsorted or duplicate indices"
    assert np.all(m.data != 0), "explicit zero stored"
    assert b.nnz <= b.rows * b.cols


# -- kernels ---------------------------------------------------------------

def block_nnz(b: MatrixBlock) -> int:
    if b.fmt.is_sparse:
        return int(b.storage.nnz)
    return int(np.count_nonzero(b.storage))


def local_transpose(b: MatrixBlock) -> MatrixBlock:
    if b.fmt is Format.DENSE:
        return MatrixBlock(b.id.transposed(), Format.DENSE, b.cols, b.rows,
                           np.ascontiguousarray(b.storage.T))
    # CSR of b is exactly CSC of b^T: reuse the arrays
    fmt = Format.CSC if b.fmt is Format.CSR else Format.CSR
    return MatrixBlock(b.id.transposed(), fmt, b.cols, b.rows, b.storage.T)


def convert_format(b: MatrixBlock, target: Format) -> MatrixBlock:
    if b.fmt is target:
        return b
    if target is Format.DENSE:
        return MatrixBlock.dense(b.storage.toarray(), b.id)
    return MatrixBlock.sparse(b.storage, target, b.id)


def _check_same_shape(a: MatrixBlock, b: MatrixBlock):
    if a.shape != b.shape:
        raise DimMismatch(f"block shapes {a.shape} and {b.shape} differ")


def local_ewise(op: str, a: MatrixBlock, b: MatrixBlock) -> MatrixBlock:
    """Entrywise a op b for op in '+', '*', '/'.

    Division follows the merge-function rule: positions where ``a`` is zero
    give 0, a nonzero over a zero raises DivisionByZero.
    """
    _check_same_shape(a, b)
    sa, sb = a.fmt.is_sparse, b.fmt.is_sparse
    if op == "+":
        if sa and sb:
            return MatrixBlock.sparse(a.storage + b.storage, a.fmt, a.id)
        return MatrixBlock.dense(a.to_dense() + b.to_dense(), a.id)
    if op == "*":
        if sa:
            return MatrixBlock.sparse(a.storage.multiply(b.storage), a.fmt, a.id)
        if sb:
            return MatrixBlock.sparse(b.storage.multiply(a.storage), b.fmt, a.id)
        return MatrixBlock.dense(a.storage * b.storage, a.id)
    if op == "/":
        if sa:
            r, c, v = a.entries()
            den = _gather(b, r, c)
            if np.any(den == 0):
                raise DivisionByZero("nonzero numerator over a zero denominator")
            return MatrixBlock.from_entries(a.rows, a.cols, r, c, v / den, a.fmt, a.id)
        num = a.storage
        den = b.to_dense()
        mask = num != 0
        if np.any(den[mask] == 0):
            raise DivisionByZero("nonzero numerator over a zero denominator")
        out = np.zeros_like(num)
        out[mask] = num[mask] / den[mask]
        return MatrixBlock.dense(out, a.id)
    raise ValueError(f"unknown element-wise op {op!r}")


def _gather(b: MatrixBlock, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Values of ``b`` at positions (r, c); absent sparse entries read as 0."""
    if b.fmt is Format.DENSE:
        return b.storage[r, c]
    if len(r) == 0:
        return np.zeros(0)
    m = b.storage.tocsr()
    m.sort_indices()
    rows = np.repeat(np.arange(m.shape[0], dtype=np.int64), np.diff(m.indptr))
    keys = rows * m.shape[1] + m.indices  # sorted for canonical CSR
    want = r * m.shape[1] + c
    pos = np.searchsorted(keys, want)
    pos_c = np.minimum(pos, max(len(keys) - 1, 0))
    hit = (pos < len(keys)) & (keys[pos_c] == want) if len(keys) else np.zeros(len(r), bool)
    out = np.zeros(len(r))
    out[hit] = m.data[pos_c[hit]]
    return out


def gather(b: MatrixBlock, r, c) -> np.ndarray:
    return _gather(b, np.asarray(r, dtype=np.int64), np.asarray(c, dtype=np.int64))


def local_scalar(op: str, a: MatrixBlock, beta: float) -> MatrixBlock:
    beta = float(beta)
    if op == "*":
        if a.fmt.is_sparse:
            return MatrixBlock.sparse(a.storage * beta, a.fmt, a.id)
        return MatrixBlock.dense(a.storage * beta, a.id)
    if op == "+":
        if beta == 0:
            return a
        return MatrixBlock.dense(a.to_dense() + beta, a.id)
    raise ValueError(f"unknown scalar op {op!r}")


def estimate_fill(nnz_a: float, nnz_b: float, rows: int, inner: int, cols: int) -> float:
    """Expected density of a (rows x inner) @ (inner x cols) product under
    uniformly scattered nonzeros."""
    denom = float(rows) * inner * cols
    if denom == 0:
        return 0.0
    return min(1.0, nnz_a * nnz_b / denom)


def local_matmul(a: MatrixBlock, b: MatrixBlock) -> MatrixBlock:
    if a.cols != b.rows:
        raise DimMismatch(f"cannot multiply {a.shape} by {b.shape}")
    out_id = BlockId(a.id.row_blk, b.id.col_blk)
    if a.fmt.is_sparse and b.fmt.is_sparse:
        fill = estimate_fill(a.nnz, b.nnz, a.rows, a.cols, b.cols)
        # row-by-row accumulation over the CSR forms of both operands
        prod = a.storage.tocsr() @ b.storage.tocsr()
        if fill > DENSIFY_FILL:
            return MatrixBlock.dense(prod.toarray(), out_id)
        return MatrixBlock.sparse(prod, Format.CSR, out_id)
    left = a.storage
    right = b.storage
    if a.fmt.is_sparse:
        res = left @ right
    elif b.fmt.is_sparse:
        res = (right.T @ left.T).T
    else:
        res = left @ right
    return MatrixBlock.dense(np.asarray(res), out_id)


def accumulate(blocks) -> MatrixBlock | None:
    """Sum a sequence of equally shaped blocks; None for an empty sequence."""
    blocks = list(blocks)
    if not blocks:
        return None
    if len(blocks) == 1:
        return blocks[0]
    first = blocks[0]
    if all(b.fmt.is_sparse for b in blocks):
        total = blocks[0].storage.tocsr()
        for b in blocks[1:]:
            total = total + b.storage
        return MatrixBlock.sparse(total, Format.CSR, first.id)
    acc = np.zeros(first.shape)
    for b in blocks:
        if b.fmt.is_sparse:
            acc += b.storage.toarray()
        else:
            acc += b.storage
    return MatrixBlock.dense(acc, first.id)


def local_apply(fn: str, a: MatrixBlock) -> MatrixBlock:
    """Entrywise unary function; only ``log`` is supported."""
    if fn != "log":
        raise ValueError(f"unknown function {fn!r}")
    vals = a.to_dense()
    if np.any(vals <= 0):
        raise DivisionByZero("log of a non-positive entry")
    return MatrixBlock.dense(np.log(vals), a.id)


# -- tensor blocks -----------------------------------------------------------

class TensorBlock3(NamedTuple):
    """Order-3 tensor tile: exact coordinate on D1, tile over (D2, D3)."""
    d1: int
    d2_blk: int
    d3_blk: int
    payload: MatrixBlock


class TensorBlock4(NamedTuple):
    """Order-4 tensor tile: exact coordinates on D1 and D2, tile over (D3, D4)."""
    d1: int
    d2: int
    d3_blk: int
    d4_blk: int
    payload: MatrixBlock
