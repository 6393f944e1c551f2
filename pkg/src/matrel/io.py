"""Reading and writing matrices, tensors and scalars."""
from __future__ import annotations

import os

import numpy as np
import scipy.sparse as sp

from .cost import Scheme
from .dist import DimProjection, DistMatrix, DistTensor
from .errors import IndexOutOfRange, ParseError

MM_HEADER = "%%MatrixMarket matrix coordinate real general"


def read_matrix_market(path: str) -> sp.csr_matrix:
    """Coordinate, real, general MatrixMarket file (1-indexed)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("%%MatrixMarket"):
        raise ParseError("missing %%MatrixMarket header", line=1)
    head = lines[0].split()
    if len(head) < 5 or [h.lower() for h in head[1:4]] != ["matrix", "coordinate", "real"] \
            or head[4].lower() != "general":
        raise ParseError(f"unsupported MatrixMarket header: {lines[0]}", line=1)
    size_line = None
    rows, cols, vals = [], [], []
    declared = 0
    for no, raw in enumerate(lines[1:], start=2):
        text = raw.strip()
        if not text or text.startswith("%"):
            continue
        parts = text.split()
        if size_line is None:
            if len(parts) != 3:
                raise ParseError(f"bad size line {text!r}", line=no)
            try:
                m, n, declared = (int(p) for p in parts)
            except ValueError:
                raise ParseError(f"bad size line {text!r}", line=no) from None
            size_line = no
            continue
        if len(parts) != 3:
            raise ParseError(f"expected 'row col value', got {text!r}", line=no)
        try:
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise ParseError(f"bad entry {text!r}", line=no) from None
        if not (1 <= i <= m and 1 <= j <= n):
            raise IndexOutOfRange(f"line {no}: entry ({i}, {j}) outside {m}x{n}")
        rows.append(i - 1)
        cols.append(j - 1)
        vals.append(v)
    if size_line is None:
        raise ParseError("missing size line", line=len(lines))
    if len(vals) != declared:
        raise ParseError(f"header declares {declared} entries, found {len(vals)}",
                         line=len(lines))
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, n))


def read_csv(path: str) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for no, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text:
                continue
            try:
                rows.append([float(x) for x in text.split(",")])
            except ValueError:
                raise ParseError(f"non-numeric field in {text!r}", line=no) from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(f"row has {len(rows[-1])} fields, expected {len(rows[0])}",
                                 line=no)
    if not rows:
        raise ParseError("empty CSV file", line=1)
    return np.array(rows)


def load_matrix(path: str, fmt: str, L: int, n_workers: int, seed: int = 0) -> DistMatrix:
    """Load as a DistMatrix with the initial random placement."""
    if fmt == "mm":
        data, sparse = read_matrix_market(path), True
    elif fmt == "csv":
        data, sparse = read_csv(path), False
    else:
        raise ValueError(f"unknown matrix format {fmt!r}")
    return DistMatrix.from_array(data, L, n_workers, sparse=sparse, scheme=Scheme.RANDOM,
                                 seed=seed)


def guess_format(path: str) -> str:
    return "csv" if path.lower().endswith(".csv") else "mm"


def _fmt(v: float) -> str:
    return repr(float(v))


def write_matrix_market(path: str, m) -> None:
    coo = sp.coo_matrix(m)
    coo.eliminate_zeros()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write(MM_HEADER + "\n")
        fh.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for k in order:
            fh.write(f"{coo.row[k] + 1} {coo.col[k] + 1} {_fmt(coo.data[k])}\n")


def write_csv(path: str, arr: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in np.atleast_2d(arr):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_tensor(path: str, t: DistTensor) -> None:
    """One line per nonzero: coordinates then value, tab-separated, sorted."""
    coords, vals = t.entries()
    order = np.lexsort(coords.T[::-1]) if len(vals) else np.zeros(0, np.int64)
    with open(path, "w") as fh:
        for k in order:
            fh.write("\t".join(str(int(c)) for c in coords[k]) + "\t" + _fmt(vals[k]) + "\n")


def read_tensor(path: str, order: int):
    coords, vals = [], []
    with open(path) as fh:
        for no, raw in enumerate(fh, start=1):
            parts = raw.rstrip("\n").split("\t")
            if len(parts) != order + 1:
                raise ParseError(f"expected {order + 1} fields", line=no)
            coords.append([int(p) for p in parts[:-1]])
            vals.append(float(parts[-1]))
    return np.array(coords, np.int64).reshape(-1, order), np.array(vals)


def save_value(path: str, value) -> str:
    """Write any result; returns the format used.  1x1 matrices go to a
    scalar file, sparse matrices to MatrixMarket, dense ones to CSV."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    if isinstance(value, DistTensor):
        write_tensor(path, value)
        return "tensor"
    if isinstance(value, DimProjection):
        with open(path, "w") as fh:
            for row in value.to_rows():
                fh.write("\t".join(map(str, row)) + "\n")
        return "rows"
    if value.shape == (1, 1):
        with open(path, "w") as fh:
            fh.write(_fmt(value.scalar()) + "\n")
        return "scalar"
    if path.lower().endswith(".csv") or (not path.lower().endswith(".mtx")
                                         and not value.is_sparse):
        write_csv(path, value.to_dense())
        return "csv"
    write_matrix_market(path, value.to_scipy())
    return "mm"
