"""Distributed matrices and tensors on a simulated cluster, plus the shuffle
ledger that accounts for every entry moved between workers."""
from __future__ import annotations

import math
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .block import (DEFAULT_BLOCK_SIZE, BlockId, Format, MatrixBlock, TensorBlock3,
                    TensorBlock4)
from .cost import ClusterConfig, Scheme
from .plan import Meta

DEFAULT_ENTRY_BUDGET = 100_000_000


# -- ledger --------------------------------------------------------------------

@dataclass
class Stage:
    kind: str
    predicted_moved: Optional[float] = None
    measured_moved: int = 0
    blocks_moved: int = 0
    ms: float = 0.0
    sent: list = field(default_factory=list)
    received: list = field(default_factory=list)
    detail: dict = field(default_factory=dict)

    def to_json(self):
        out = {"kind": self.kind, "predicted_moved": self.predicted_moved,
               "measured_moved": self.measured_moved, "blocks_moved": self.blocks_moved,
               "ms": round(self.ms, 3), "sent": list(self.sent),
               "received": list(self.received)}
        if self.detail:
            out["detail"] = self.detail
        return out


class ShuffleLedger:
    """Per-stage movement counters and run-wide operation counters."""

    def __init__(self, n_workers: int):
        self.n_workers = n_workers
        self.stages: list[Stage] = []
        self.ops: Counter = Counter()
        self.matmul_shapes: Counter = Counter()
        self.masked_products: list = []
        self._lock = threading.Lock()
        self._current: Optional[Stage] = None

    @contextmanager
    def stage(self, kind: str, predicted: Optional[float] = None, **detail):
        st = Stage(kind, predicted, sent=[0] * self.n_workers,
                   received=[0] * self.n_workers, detail=dict(detail))
        outer, self._current = self._current, st
        t0 = time.perf_counter()
        try:
            yield st
        finally:
            st.ms = (time.perf_counter() - t0) * 1000.0
            self._current = outer
            self.stages.append(st)

    def move(self, entries: int, src: int, dst: int):
        """Record one block (of ``entries`` entries) sent from src to dst."""
        if src == dst:
            return
        st = self._current
        if st is None:
            raise RuntimeError("data movement outside of a stage")
        st.measured_moved += int(entries)
        st.blocks_moved += 1
        st.sent[src] += int(entries)
        st.received[dst] += int(entries)

    def count(self, key: str, n: int = 1):
        with self._lock:
            self.ops[key] += n

    def matmul_event(self, out_shape, n: int = 1):
        with self._lock:
            self.ops["matmul_block_events"] += n
            self.matmul_shapes[f"{out_shape[0]}x{out_shape[1]}"] += n

    @property
    def total_moved(self) -> int:
        return sum(s.measured_moved for s in self.stages)

    def to_json(self):
        return {"stages": [s.to_json() for s in self.stages],
                "ops": {**{k: int(v) for k, v in sorted(self.ops.items())},
                        "matmul_events_by_shape": dict(sorted(self.matmul_shapes.items())),
                        "masked_product_entries": list(self.masked_products)},
                "total_moved": self.total_moved}


# -- cluster ---------------------------------------------------------------------

class Cluster:
    """Worker pool, configuration and ledger for one run."""

    def __init__(self, n_workers: int = 4, block_size: int = DEFAULT_BLOCK_SIZE,
                 parallel: bool = False, seed: int = 0,
                 entry_budget: int = DEFAULT_ENTRY_BUDGET, bloom: bool = True,
                 bloom_fpr: float = 0.01, broadcast_threshold: Optional[float] = None,
                 sparsity_fast_path: bool = True, masked_products: bool = True):
        if n_workers < 1:
            raise ValueError("need at least one worker")
        self.n = n_workers
        self.L = block_size
        self.parallel = parallel
        self.seed = seed
        self.entry_budget = entry_budget
        self.bloom = bloom
        self.bloom_fpr = bloom_fpr
        self.broadcast_threshold = broadcast_threshold
        self.sparsity_fast_path = sparsity_fast_path
        self.masked_products = masked_products
        self.ledger = ShuffleLedger(n_workers)
        self._pool = ThreadPoolExecutor(n_workers) if parallel and n_workers > 1 else None

    def config(self, eta_a: float = 1.0, eta_b: float = 1.0) -> ClusterConfig:
        return ClusterConfig(self.n, self.L, eta_a, eta_b, self.broadcast_threshold)

    def map_workers(self, fn: Callable[[int], object]) -> list:
        """Run fn(worker) for every worker; results in worker order."""
        if self._pool is None:
            return [fn(w) for w in range(self.n)]
        return list(self._pool.map(fn, range(self.n)))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def owners(scheme: Scheme, row_blk: int, col_blk: int, n: int) -> frozenset:
    if scheme is Scheme.ROW:
        return frozenset((row_blk % n,))
    if scheme is Scheme.COL:
        return frozenset((col_blk % n,))
    if scheme is Scheme.BCAST:
        return frozenset(range(n))
    raise ValueError("random placement has no owner rule")


# -- distributed matrix -------------------------------------------------------------

def grid(extent: int, L: int) -> int:
    return max(1, math.ceil(extent / L))


@dataclass
class DistMatrix:
    """A block-partitioned matrix.  Every block of the grid is present
    (all-zero blocks are empty sparse blocks); ``placement`` maps each block
    id to the set of workers holding a copy."""
    shape: tuple
    L: int
    n_workers: int
    blocks: dict
    placement: dict
    meta: dict = field(default_factory=dict)

    # -- construction ---------------------------------------------------
    @classmethod
    def from_array(cls, values, L: int, n_workers: int, sparse: Optional[bool] = None,
                   scheme=Scheme.ROW, seed: int = 0, fmt: Format = Format.CSR) -> "DistMatrix":
        """Tile a dense array or scipy sparse matrix into blocks."""
        if sp.issparse(values):
            mat = values.tocsr().astype(np.float64)
            sparse = True if sparse is None else sparse
        else:
            arr = np.asarray(values, dtype=np.float64)
            if arr.ndim != 2:
                arr = np.atleast_2d(arr)
            sparse = False if sparse is None else sparse
            mat = sp.csr_matrix(arr) if sparse else arr
        m, n = mat.shape
        blocks = {}
        for i in range(grid(m, L)):
            for j in range(grid(n, L)):
                tile = mat[i * L:(i + 1) * L, j * L:(j + 1) * L]
                bid = BlockId(i, j)
                if sparse:
                    blocks[bid] = MatrixBlock.sparse(tile, fmt, bid)
                else:
                    dense = tile.toarray() if sp.issparse(tile) else tile
                    blocks[bid] = MatrixBlock.dense(dense, bid)
        return cls.placed((m, n), L, n_workers, blocks, scheme, seed)

    @classmethod
    def placed(cls, shape, L, n_workers, blocks, scheme, seed: int = 0,
               meta=None) -> "DistMatrix":
        scheme = Scheme.parse(scheme)
        if scheme is Scheme.RANDOM:
            rng = np.random.default_rng(seed)
            ids = sorted(blocks)
            picks = rng.integers(0, n_workers, size=len(ids))
            placement = {b: frozenset((int(w),)) for b, w in zip(ids, picks)}
        else:
            placement = {b: owners(scheme, b.row_blk, b.col_blk, n_workers) for b in blocks}
        return cls(tuple(shape), L, n_workers, dict(blocks), placement, dict(meta or {}))

    # -- views --------------------------------------------------------------
    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    @property
    def grid(self) -> tuple:
        return (grid(self.rows, self.L), grid(self.cols, self.L))

    @property
    def order(self) -> int:
        return 2

    @property
    def scheme(self) -> Scheme:
        n = self.n_workers
        if all(len(ws) == n for ws in self.placement.values()) and n > 1:
            return Scheme.BCAST
        for s in (Scheme.ROW, Scheme.COL):
            if all(self.placement[b] == owners(s, b.row_blk, b.col_blk, n)
                   for b in self.blocks):
                return s
        if n == 1:
            return Scheme.ROW
        return Scheme.RANDOM

    @property
    def nnz(self) -> int:
        return sum(b.nnz for b in self.blocks.values())

    @property
    def comm_size(self) -> int:
        """|A|: nnz over sparse blocks plus rows*cols over dense ones."""
        return sum(b.comm_size for b in self.blocks.values())

    @property
    def is_sparse(self) -> bool:
        return all(b.fmt.is_sparse for b in self.blocks.values())

    def meta_info(self) -> Meta:
        return Meta(self.shape, float(self.nnz))

    def block(self, i: int, j: int) -> MatrixBlock:
        return self.blocks[BlockId(i, j)]

    def holder(self, bid) -> int:
        """Deterministic source worker for a block: its lowest holder."""
        return min(self.placement[bid])

    def resident(self, worker: int) -> list:
        return sorted(b for b, ws in self.placement.items() if worker in ws)

    def to_scipy(self) -> sp.csr_matrix:
        parts = [[self.block(i, j).storage if self.block(i, j).fmt.is_sparse
                  else sp.csr_matrix(self.block(i, j).storage)
                  for j in range(self.grid[1])] for i in range(self.grid[0])]
        return sp.bmat(parts, format="csr").astype(np.float64)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        L = self.L
        for bid, b in self.blocks.items():
            out[bid.row_blk * L:bid.row_blk * L + b.rows,
                bid.col_blk * L:bid.col_blk * L + b.cols] = b.to_dense()
        return out

    def with_blocks(self, blocks, placement, shape=None, meta=None) -> "DistMatrix":
        return DistMatrix(tuple(shape or self.shape), self.L, self.n_workers, blocks,
                          placement, dict(self.meta if meta is None else meta))

    def scalar(self) -> float:
        if self.shape != (1, 1):
            raise ValueError(f"not a 1x1 result: {self.shape}")
        return float(self.block(0, 0).to_dense()[0, 0])

    def __repr__(self):
        return (f"DistMatrix(shape={self.shape}, L={self.L}, N={self.n_workers}, "
                f"scheme={self.scheme.value}, nnz={self.nnz})")


def partition(a: DistMatrix, to, ledger: Optional[ShuffleLedger] = None,
              predicted: Optional[float] = None, label: str = "partition") -> DistMatrix:
    """Re-place ``a`` under scheme ``to``; every block copy that lands on a
    worker that did not hold it is counted as moved."""
    to = Scheme.parse(to)
    if to is Scheme.RANDOM:
        raise ValueError("cannot partition to a random placement")
    n = a.n_workers
    target = {b: owners(to, b.row_blk, b.col_blk, n) for b in a.blocks}
    if all(a.placement[b] == target[b] for b in a.blocks):
        return a
    if ledger is not None:
        with ledger.stage(label, predicted, to=to.value, frm=a.scheme.value):
            for b in sorted(a.blocks):
                src = a.holder(b)
                for w in sorted(target[b] - a.placement[b]):
                    ledger.move(a.blocks[b].comm_size, src, w)
    return a.with_blocks(a.blocks, target)


def replicate_to(a: DistMatrix, workers_for: dict, ledger: ShuffleLedger) -> dict:
    """Send extra block copies: ``workers_for`` maps block id to the workers
    that need it.  Returns the new placement (holders plus receivers)."""
    placement = dict(a.placement)
    for b in sorted(workers_for):
        need = frozenset(workers_for[b]) - placement[b]
        src = a.holder(b)
        for w in sorted(need):
            ledger.move(a.blocks[b].comm_size, src, w)
        placement[b] = placement[b] | need
    return placement


# -- distributed tensors --------------------------------------------------------------

class DistTensor:
    """Order-3 or order-4 join output.

    Entries are kept as logical coordinates ``coords`` (k x order int array,
    row-major sorted) with ``values``.  ``layout`` names the logical
    dimension stored at each physical position (D1, D2, ...); tensor blocks
    are keyed by the exact leading coordinates plus the tile indices of the
    last two physical dimensions.  ``placement`` maps each block key to its
    worker; block payloads are materialized on first access of ``blocks``.
    """

    def __init__(self, shape, coords, values, L, n_workers, layout, keys, key_of_entry,
                 placement, meta=None):
        self.shape = tuple(shape)
        self.coords = coords
        self.values = values
        self.L = L
        self.n_workers = n_workers
        self.layout = tuple(layout)
        self._keys = keys                  # (k, order) array of block keys
        self._key_of_entry = key_of_entry  # entry -> row of _keys
        self.placement = placement
        self.meta = dict(meta or {})
        self._blocks = None

    @property
    def order(self) -> int:
        return len(self.shape)

    @property
    def nnz(self) -> int:
        return int(len(self.values))

    @property
    def blocks(self) -> dict:
        if self._blocks is None:
            self._blocks = self._build_blocks()
        return self._blocks

    def _build_blocks(self) -> dict:
        order, L = self.order, self.L
        nexact = order - 2
        phys = self.coords[:, self.layout] if self.nnz else np.zeros((0, order), np.int64)
        pshape = tuple(self.shape[d] for d in self.layout)
        grouping = np.argsort(self._key_of_entry, kind="stable")
        bounds = np.searchsorted(self._key_of_entry[grouping], np.arange(len(self._keys) + 1))
        out = {}
        for u, row in enumerate(self._keys):
            sel = grouping[bounds[u]:bounds[u + 1]]
            key = tuple(int(k) for k in row)
            r0, c0 = key[-2] * L, key[-1] * L
            payload = MatrixBlock.from_entries(
                min(L, pshape[nexact] - r0), min(L, pshape[nexact + 1] - c0),
                phys[sel, nexact] - r0, phys[sel, nexact + 1] - c0, self.values[sel],
                Format.CSR, BlockId(key[-2], key[-1]))
            out[key] = (TensorBlock3(key[0], key[1], key[2], payload) if order == 3
                        else TensorBlock4(key[0], key[1], key[2], key[3], payload))
        return out

    def entry_workers(self) -> np.ndarray:
        """Worker holding each entry."""
        w = np.array([self.placement[tuple(int(k) for k in row)] for row in self._keys],
                     dtype=np.int64)
        return w[self._key_of_entry] if len(w) else np.zeros(0, np.int64)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        if len(self.values):
            out[tuple(self.coords.T)] = self.values
        return out

    def entries(self):
        return self.coords, self.values

    def __repr__(self):
        return f"DistTensor(shape={self.shape}, nnz={self.nnz}, layout={self.layout})"


def build_tensor(shape, coords, values, L: int, n_workers: int, layout=None,
                 workers=None, meta=None) -> DistTensor:
    """Assemble a tensor from logical coordinates.

    ``layout`` is a permutation of logical dimensions (0-based) giving the
    physical order (D1, D2, D3[, D4]).  ``workers`` gives, per entry, the
    worker that produced it; a tensor block lives where its first entry was
    produced (default: D1 mod N).
    """
    order = len(shape)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, order)
    values = np.asarray(values, dtype=np.float64)
    produced = workers is not None
    workers = (np.zeros(len(values), np.int64) if workers is None
               else np.asarray(workers, dtype=np.int64))
    keep = values != 0
    coords, values, workers = coords[keep], values[keep], workers[keep]
    if len(values):
        flat = np.ravel_multi_index(tuple(coords.T), tuple(shape))
        idx = np.argsort(flat, kind="stable")
        coords, values, workers = coords[idx], values[idx], workers[idx]
    layout = tuple(range(order)) if layout is None else tuple(layout)
    pshape = tuple(shape[d] for d in layout)
    nexact = order - 2
    phys = coords[:, layout]
    key_cols = np.column_stack([phys[:, :nexact], phys[:, nexact:] // L]) \
        if len(values) else np.zeros((0, order), np.int64)
    key_dims = pshape[:nexact] + tuple(grid(e, L) for e in pshape[nexact:])
    if len(values):
        kflat = np.ravel_multi_index(tuple(key_cols.T), key_dims)
        uniq, first, inv = np.unique(kflat, return_index=True, return_inverse=True)
        keys = np.column_stack(np.unravel_index(uniq, key_dims)).astype(np.int64)
        inv = inv.ravel()
    else:
        first = np.zeros(0, np.int64)
        keys = np.zeros((0, order), np.int64)
        inv = np.zeros(0, np.int64)
    owner = workers[first] if produced else keys[:, 0] % n_workers if len(keys) else first
    placement = {tuple(int(k) for k in row): int(w) for row, w in zip(keys, owner)}
    return DistTensor(tuple(shape), coords, values, L, n_workers, layout, keys, inv,
                      placement, meta)


@dataclass(frozen=True)
class DimProjection:
    """Result of a projection onto dimension attributes only."""
    attrs: tuple
    shape: tuple
    row_ids: np.ndarray
    col_ids: np.ndarray
    executed: bool

    def to_rows(self):
        """Tuples of the projected attributes, sorted."""
        if self.attrs == ("RID",):
            return [(int(i),) for i in self.row_ids]
        if self.attrs == ("CID",):
            return [(int(j),) for j in self.col_ids]
        out = []
        for i in self.row_ids:
            for j in self.col_ids:
                t = {"RID": int(i), "CID": int(j)}
                out.append(tuple(t[a] for a in self.attrs))
        return out
