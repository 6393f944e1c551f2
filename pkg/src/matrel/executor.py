"""Physical execution of logical plans on a simulated cluster.

Operators run per worker over resident blocks.  Whenever a worker needs a
block it does not hold, the copy is recorded in the cluster's shuffle ledger
inside a named stage, so the ledger's entries-moved figure is exact.
"""
from __future__ import annotations

from collections import defaultdict
from typing import Mapping, Optional

import numpy as np

from .block import (BlockId, Format, MatrixBlock, accumulate, local_apply, local_ewise,
                    local_matmul, local_scalar, local_transpose)
from .cost import Scheme, assign_schemes, conversion_cost
from .dist import (Cluster, DimProjection, DistMatrix, DistTensor, build_tensor, grid,
                   owners, partition, replicate_to)
from .errors import DivisionByZero, UnknownMatrix
from .join import JoinResult, _matrix_from_entries, exec_join
from .plan import (Aggregate, Const, Cross, EWise, Expr, Join, JoinGamma, Leaf, MatMul,
                   Project, Replicate, ScalarOp, Select, TensorAggregate, Transpose, Unary,
                   children, infer_meta, needs_execution, strip_meta)
from .predicate import analyze_select, evaluate as eval_pred

_MASKABLE = (MatMul, Unary, ScalarOp, EWise, Leaf, Transpose, Const)


class Executor:
    """Evaluates plans against named matrices.  Identical subtrees within one
    plan are evaluated once."""

    def __init__(self, env: Mapping[str, DistMatrix], cluster: Cluster):
        for name, m in env.items():
            if m.n_workers != cluster.n:
                raise ValueError(f"matrix {name} is laid out for {m.n_workers} workers, "
                                 f"the cluster has {cluster.n}")
        self.env = env
        self.cluster = cluster
        self.ledger = cluster.ledger
        self._cache: dict = {}
        self.join_estimates: list = []

    # -- entry point -------------------------------------------------------
    def run(self, plan: Expr):
        if plan.meta is None:
            plan = infer_meta(plan, self.env)
        self._cache = {}
        return self.eval(plan)

    def eval(self, e: Expr, downstream_dim: Optional[int] = None):
        try:
            key = strip_meta(e)
            hash(key)
        except TypeError:
            key = None
        if key is not None and key in self._cache:
            return self._cache[key]
        out = self._dispatch(e, downstream_dim)
        if key is not None:
            self._cache[key] = out
        return out

    def _dispatch(self, e, downstream_dim):
        if isinstance(e, Leaf):
            if e.name not in self.env:
                raise UnknownMatrix(e.name)
            return self.env[e.name]
        if isinstance(e, Const):
            return self._const(e)
        if isinstance(e, Transpose):
            return transpose(self.eval(e.child))
        if isinstance(e, ScalarOp):
            a = self.eval(e.child)
            return _map_blocks(a, lambda b: local_scalar(e.op, b, e.beta))
        if isinstance(e, Unary):
            a = self.eval(e.child)
            return _map_blocks(a, lambda b: local_apply(e.fn, b))
        if isinstance(e, EWise):
            if self._maskable(e):
                return self._masked_ewise(e)
            a = self.eval(e.left)
            b = a if e.left == e.right else self.eval(e.right)
            return self._ewise(e.op, a, b)
        if isinstance(e, MatMul):
            return self._matmul(self.eval(e.left), self.eval(e.right))
        if isinstance(e, Replicate):
            return self._replicate(self.eval(e.child), e.count, e.axis)
        if isinstance(e, Select):
            return self._select(e.pred, self.eval(e.child))
        if isinstance(e, Project):
            return self._project(e)
        if isinstance(e, Aggregate):
            return self._aggregate(e.fn, e.dim, self.eval(e.child))
        if isinstance(e, (Join, Cross)):
            gamma = e.gamma if isinstance(e, Join) else JoinGamma(())
            a, b = self.eval(e.left), self.eval(e.right)
            res: JoinResult = exec_join(gamma, e.merge, a, b, self.cluster, downstream_dim)
            self.join_estimates.append(res.estimate)
            return res.value
        if isinstance(e, TensorAggregate):
            t = self.eval(e.child, downstream_dim=e.dim - 1)
            return tensor_aggregate(e.fn, e.dim, t, self.cluster)
        raise TypeError(f"not a plan node: {e!r}")

    # -- leaves and local operators -----------------------------------------
    def _const(self, e: Const) -> DistMatrix:
        L, n = self.cluster.L, self.cluster.n
        blocks = {}
        for i in range(grid(e.rows, L)):
            for j in range(grid(e.cols, L)):
                r, c = min(L, e.rows - i * L), min(L, e.cols - j * L)
                bid = BlockId(i, j)
                blocks[bid] = (MatrixBlock.zeros(r, c, id=bid) if e.value == 0
                               else MatrixBlock.dense(np.full((r, c), e.value), bid))
        return DistMatrix.placed((e.rows, e.cols), L, n, blocks, Scheme.ROW)

    def _replicate(self, a: DistMatrix, count: int, axis: str) -> DistMatrix:
        """Tile a 1 x n (or m x 1) matrix; every output block is built where
        the source block lives."""
        L = a.L
        blocks, placement = {}, {}
        if axis == "rows":
            shape = (count, a.cols)
            for j in range(a.grid[1]):
                src = a.block(0, j)
                row = src.to_dense()
                for i in range(grid(count, L)):
                    r = min(L, count - i * L)
                    bid = BlockId(i, j)
                    tile = np.repeat(row, r, axis=0)
                    blocks[bid] = (MatrixBlock.sparse(tile, Format.CSR, bid)
                                   if src.fmt.is_sparse else MatrixBlock.dense(tile, bid))
                    placement[bid] = a.placement[BlockId(0, j)]
        else:
            shape = (a.rows, count)
            for i in range(a.grid[0]):
                src = a.block(i, 0)
                col = src.to_dense()
                for j in range(grid(count, L)):
                    c = min(L, count - j * L)
                    bid = BlockId(i, j)
                    tile = np.repeat(col, c, axis=1)
                    blocks[bid] = (MatrixBlock.sparse(tile, Format.CSR, bid)
                                   if src.fmt.is_sparse else MatrixBlock.dense(tile, bid))
                    placement[bid] = a.placement[BlockId(i, 0)]
        return a.with_blocks(blocks, placement, shape=shape, meta={})

    # -- element-wise -------------------------------------------------------------
    def _ewise(self, op: str, a: DistMatrix, b: DistMatrix) -> DistMatrix:
        if a.shape != b.shape:
            from .errors import DimMismatch
            raise DimMismatch(f"element-wise {op} on {a.shape} and {b.shape}")
        if a is b or a.placement == b.placement:
            return a.with_blocks({bid: local_ewise(op, a.blocks[bid], b.blocks[bid])
                                  for bid in a.blocks}, dict(a.placement), meta={})
        cfg = self.cluster.config()
        est = assign_schemes("overlay_direct", None, float(a.comm_size), float(b.comm_size),
                             (a.scheme, b.scheme), cfg)
        a = partition(a, est.scheme_a, self.ledger, est.conv_a, "convert:A")
        b = partition(b, est.scheme_b, self.ledger, est.conv_b, "convert:B")
        n = self.cluster.n
        with self.ledger.stage(f"ewise:{op}", est.join_cost, strategy=est.strategy):
            placement = {}
            for bid in sorted(a.blocks):
                pa, pb = a.placement[bid], b.placement[bid]
                if est.strategy == "route_b":
                    where = frozenset((a.holder(bid),))
                    self.ledger.move(b.blocks[bid].comm_size, b.holder(bid), a.holder(bid))
                elif est.strategy == "route_a":
                    where = frozenset((b.holder(bid),))
                    self.ledger.move(a.blocks[bid].comm_size, a.holder(bid), b.holder(bid))
                elif len(pa) == n and len(pb) == n:
                    where = pa
                elif len(pa) == n:
                    where = pb
                else:
                    where = pa
                placement[bid] = where
        blocks = _per_worker(self.cluster, placement,
                             lambda bid: local_ewise(op, a.blocks[bid], b.blocks[bid]))
        return a.with_blocks(blocks, placement, meta={})

    def _maskable(self, e: EWise) -> bool:
        if not self.cluster.masked_products or e.op not in ("*", "/"):
            return False
        left_meta = e.left.meta
        if left_meta is not None and not left_meta.sparse:
            return False
        if not _has_matmul(e.right) or not _only(e.right, _MASKABLE):
            return False
        a = self.eval(e.left)
        return a.is_sparse

    def _masked_ewise(self, e: EWise) -> DistMatrix:
        """A op g(W x H) evaluated only where A is nonzero."""
        a = self.eval(e.left)
        L = a.L
        pos = {}
        for bid in sorted(a.blocks):
            r, c, v = a.blocks[bid].entries()
            if len(v):
                pos[bid] = (r + bid.row_blk * L, c + bid.col_blk * L, v)
        rows = np.concatenate([p[0] for p in pos.values()]) if pos else np.zeros(0, np.int64)
        cols = np.concatenate([p[1] for p in pos.values()]) if pos else np.zeros(0, np.int64)
        with self.ledger.stage("masked", None, positions=int(len(rows))):
            vals = self._eval_at(e.right, rows, cols, a)
        out_vals = vals
        blocks = dict(a.blocks)
        start = 0
        for bid, (r, c, v) in pos.items():
            g = out_vals[start:start + len(v)]
            start += len(v)
            if e.op == "*":
                res = v * g
            else:
                if np.any(g == 0):
                    raise DivisionByZero("nonzero numerator over a zero denominator")
                res = v / g
            blk = a.blocks[bid]
            blocks[bid] = MatrixBlock.from_entries(blk.rows, blk.cols, r - bid.row_blk * L,
                                                   c - bid.col_blk * L, res, Format.CSR, bid)
        return a.with_blocks(blocks, dict(a.placement), meta={})

    def _eval_at(self, e: Expr, rows, cols, mask: DistMatrix) -> np.ndarray:
        if isinstance(e, MatMul):
            w = self.eval(e.left)
            h = self.eval(e.right)
            self._route_factors(w, h, mask)
            wd, hd = w.to_dense(), h.to_dense()
            out = np.einsum("ij,ij->i", wd[rows], hd[:, cols].T) if len(rows) else np.zeros(0)
            self.ledger.masked_products.append(int(len(rows)))
            self.ledger.count("masked_product_entries", int(len(rows)))
            return out
        if isinstance(e, Transpose):
            return self._eval_at(e.child, cols, rows, _transposed_mask(mask))
        if isinstance(e, Const):
            return np.full(len(rows), float(e.value))
        if isinstance(e, ScalarOp):
            v = self._eval_at(e.child, rows, cols, mask)
            return v * e.beta if e.op == "*" else v + e.beta
        if isinstance(e, Unary):
            v = self._eval_at(e.child, rows, cols, mask)
            if np.any(v <= 0):
                raise DivisionByZero("log of a non-positive entry")
            return np.log(v)
        if isinstance(e, EWise):
            x = self._eval_at(e.left, rows, cols, mask)
            y = self._eval_at(e.right, rows, cols, mask)
            if e.op == "+":
                return x + y
            if e.op == "*":
                return x * y
            nz = x != 0
            if np.any(y[nz] == 0):
                raise DivisionByZero("nonzero numerator over a zero denominator")
            out = np.zeros_like(x)
            out[nz] = x[nz] / y[nz]
            return out
        # any other subtree: materialize and read at the positions
        m = self.eval(e)
        return m.to_scipy()[rows, cols].A1 if len(rows) else np.zeros(0)

    def _route_factors(self, w: DistMatrix, h: DistMatrix, mask: DistMatrix):
        """Send W row-blocks and H column-blocks to the workers holding the
        mask blocks that need them."""
        need_w, need_h = defaultdict(set), defaultdict(set)
        for bid, blk in mask.blocks.items():
            if blk.nnz == 0:
                continue
            at = mask.holder(bid)
            for j in range(w.grid[1]):
                need_w[BlockId(bid.row_blk, j)].add(at)
            for i in range(h.grid[0]):
                need_h[BlockId(i, bid.col_blk)].add(at)
        replicate_to(w, need_w, self.ledger)
        replicate_to(h, need_h, self.ledger)

    # -- matrix multiply -----------------------------------------------------------
    def _matmul(self, a: DistMatrix, b: DistMatrix) -> DistMatrix:
        """Stationary-left: left row-blocks stay put (Row scheme), the right
        operand is replicated to every worker."""
        from .errors import DimMismatch
        if a.cols != b.rows:
            raise DimMismatch(f"cannot multiply {a.shape} by {b.shape}")
        n, ledger = self.cluster.n, self.ledger
        cfg = self.cluster.config()
        shape = (a.rows, b.cols)
        if a.scheme is Scheme.BCAST:
            b = partition(b, Scheme.COL, ledger,
                          conversion_cost(b.comm_size, b.scheme, Scheme.COL, cfg), "convert:B")
            site = lambda i, j: b.holder(BlockId(0, j))  # noqa: E731
        else:
            a = partition(a, Scheme.ROW, ledger,
                          conversion_cost(a.comm_size, a.scheme, Scheme.ROW, cfg), "convert:A")
            if b.scheme is not Scheme.BCAST:
                with ledger.stage("matmul:replicate", (n - 1) * float(b.comm_size)):
                    replicate_to(b, {bid: range(n) for bid in b.blocks}, ledger)
            site = lambda i, j: a.holder(BlockId(i, 0))  # noqa: E731
        gi, gk, gj = a.grid[0], a.grid[1], b.grid[1]
        placement = {BlockId(i, j): frozenset((site(i, j),))
                     for i in range(gi) for j in range(gj)}
        L = a.L
        products = {}

        def one(bid):
            i, j = bid
            parts = []
            for k in range(gk):
                x, y = a.blocks[BlockId(i, k)], b.blocks[BlockId(k, j)]
                if x.nnz == 0 or y.nnz == 0:
                    continue
                parts.append(local_matmul(x, y))
            products[bid] = len(parts)
            acc = accumulate(parts)
            if acc is None:
                return MatrixBlock.zeros(min(L, shape[0] - i * L), min(L, shape[1] - j * L),
                                         id=bid)
            return acc.with_id(bid)

        blocks = _per_worker(self.cluster, placement, one)
        ledger.matmul_event(shape, sum(products.values()))
        return DistMatrix(shape, L, n, blocks, placement)

    # -- selection and projection -----------------------------------------------------
    def _select(self, pred, a: DistMatrix) -> DistMatrix:
        sel = analyze_select(pred, a.shape)
        L = a.L
        if sel.residual is not None:
            def filt(blk):
                r, c, v = blk.entries()
                keep = eval_pred(sel.residual, r + blk.id.row_blk * L,
                                 c + blk.id.col_blk * L, v)
                if keep.all():
                    return blk
                fmt = blk.fmt if blk.fmt.is_sparse else Format.DENSE
                return MatrixBlock.from_entries(blk.rows, blk.cols, r[keep], c[keep], v[keep],
                                                fmt, blk.id)
            a = _map_blocks(a, filt)
        row_ids = np.arange(sel.row_lo, sel.row_hi + 1)
        if sel.diagonal:
            a = _diagonal(a)
            col_ids = np.arange(1)
        else:
            col_ids = np.arange(sel.col_lo, sel.col_hi + 1)
        a = retile(a, row_ids, col_ids, self.ledger, "select")
        if sel.drop_empty_rows or sel.drop_empty_cols:
            counts_r = np.zeros(a.rows, np.int64)
            counts_c = np.zeros(a.cols, np.int64)
            for bid, blk in a.blocks.items():
                r, c, _ = blk.entries()
                np.add.at(counts_r, r + bid.row_blk * L, 1)
                np.add.at(counts_c, c + bid.col_blk * L, 1)
            keep_r = np.nonzero(counts_r)[0] if sel.drop_empty_rows else np.arange(a.rows)
            keep_c = np.nonzero(counts_c)[0] if sel.drop_empty_cols else np.arange(a.cols)
            a = retile(a, keep_r, keep_c, self.ledger, "compact")
            a.meta["row_remap"] = row_ids[keep_r]
            a.meta["col_remap"] = col_ids[keep_c] if not sel.diagonal else keep_c
        return a

    def _project(self, e: Project):
        if "VAL" in e.attrs:
            out = self.eval(e.child)
            if isinstance(out, DistMatrix):
                out = out.with_blocks(out.blocks, out.placement,
                                      meta={**out.meta, "attrs": e.attrs})
            return out
        if needs_execution(e):
            c = self.eval(e.child)
            shape = c.shape
            executed = True
        else:
            shape = e.child.meta.shape
            executed = False
        return DimProjection(e.attrs, tuple(shape), np.arange(shape[0]),
                             np.arange(shape[1]), executed)

    # -- aggregation ------------------------------------------------------------------
    def _aggregate(self, fn: str, dim: str, a: DistMatrix) -> DistMatrix:
        if fn == "avg":
            s = self._aggregate("sum", dim, a)
            c = self._aggregate("nnz", dim, a)
            blocks = {}
            for bid in s.blocks:
                num, den = s.blocks[bid].to_dense(), c.blocks[bid].to_dense()
                out = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
                blocks[bid] = MatrixBlock.dense(out, bid)
            return s.with_blocks(blocks, dict(s.placement), meta={})
        return aggregate(fn, dim, a, self.cluster)


# -- helpers used by several operators ------------------------------------------------

def _has_matmul(e) -> bool:
    return isinstance(e, MatMul) or any(_has_matmul(k) for k in children(e))


def _only(e, kinds) -> bool:
    if isinstance(e, MatMul):
        return True  # operands are materialized
    return isinstance(e, kinds) and all(_only(k, kinds) for k in children(e))


def _transposed_mask(m: DistMatrix) -> DistMatrix:
    return transpose(m)


def _per_worker(cluster: Cluster, placement: dict, build) -> dict:
    """Build each output block on its (lowest) holder, workers in parallel."""
    todo = defaultdict(list)
    for bid in sorted(placement):
        todo[min(placement[bid])].append(bid)

    def work(w):
        return [(bid, build(bid)) for bid in todo.get(w, [])]

    out = {}
    for part in cluster.map_workers(work):
        out.update(part)
    return out


def _map_blocks(a: DistMatrix, fn) -> DistMatrix:
    return a.with_blocks({bid: fn(blk) for bid, blk in a.blocks.items()},
                         dict(a.placement), meta={})


def transpose(a: DistMatrix) -> DistMatrix:
    """Local: every block is transposed in place and its id swapped."""
    blocks = {bid.transposed(): local_transpose(blk) for bid, blk in a.blocks.items()}
    placement = {bid.transposed(): ws for bid, ws in a.placement.items()}
    return DistMatrix((a.cols, a.rows), a.L, a.n_workers, blocks, placement)


def _diagonal(a: DistMatrix) -> DistMatrix:
    """n x 1 column of the diagonal, block (I, 0) built where (I, I) lives."""
    blocks, placement = {}, {}
    for i in range(a.grid[0]):
        src = a.block(i, i)
        d = np.asarray(src.storage.diagonal()).ravel()
        bid = BlockId(i, 0)
        blocks[bid] = (MatrixBlock.sparse(d.reshape(-1, 1), Format.CSR, bid)
                       if src.fmt.is_sparse else MatrixBlock.dense(d.reshape(-1, 1), bid))
        placement[bid] = a.placement[BlockId(i, i)]
    return DistMatrix((a.rows, 1), a.L, a.n_workers, blocks, placement)


def retile(a: DistMatrix, row_ids, col_ids, ledger, label: str) -> DistMatrix:
    """Keep rows ``row_ids`` and columns ``col_ids`` (sorted, original
    coordinates) and re-tile.  Each output block is assembled on the worker
    holding the source block of its top-left entry; pieces from elsewhere
    are counted as moved."""
    row_ids = np.asarray(row_ids, np.int64)
    col_ids = np.asarray(col_ids, np.int64)
    if np.array_equal(row_ids, np.arange(a.rows)) and np.array_equal(col_ids, np.arange(a.cols)):
        return a
    L, n = a.L, a.n_workers
    m2, n2 = len(row_ids), len(col_ids)
    if m2 == 0 or n2 == 0:
        return DistMatrix((m2, n2), L, n, {}, {}, {})
    rowmap = np.full(a.rows, -1, np.int64)
    rowmap[row_ids] = np.arange(m2)
    colmap = np.full(a.cols, -1, np.int64)
    colmap[col_ids] = np.arange(n2)
    g2 = (grid(m2, L), grid(n2, L))
    owner = {}
    for i in range(g2[0]):
        for j in range(g2[1]):
            src = BlockId(row_ids[i * L] // L, col_ids[j * L] // L)
            owner[BlockId(i, j)] = a.holder(src)
    pieces = defaultdict(list)
    any_dense = defaultdict(bool)
    with ledger.stage(label, None):
        for sbid in sorted(a.blocks):
            blk = a.blocks[sbid]
            r0, c0 = sbid.row_blk * L, sbid.col_blk * L
            ro = rowmap[r0:r0 + blk.rows]
            co = colmap[c0:c0 + blk.cols]
            if not (ro >= 0).any() or not (co >= 0).any():
                continue
            r, c, v = blk.entries()
            orow, ocol = ro[r], co[c]
            keep = (orow >= 0) & (ocol >= 0)
            orow, ocol, v = orow[keep], ocol[keep], v[keep]
            for bi in np.unique(ro[ro >= 0] // L):
                for bj in np.unique(co[co >= 0] // L):
                    out = BlockId(int(bi), int(bj))
                    s = (orow // L == bi) & (ocol // L == bj)
                    if blk.fmt.is_sparse:
                        size = int(s.sum())
                    else:
                        size = int(((ro >= 0) & (ro // L == bi)).sum()
                                   * ((co >= 0) & (co // L == bj)).sum())
                        any_dense[out] = True
                    dst = owner[out]
                    if dst not in a.placement[sbid] and size:
                        ledger.move(size, a.holder(sbid), dst)
                    pieces[out].append((orow[s] - bi * L, ocol[s] - bj * L, v[s]))
    blocks, placement = {}, {}
    for bid, w in owner.items():
        rows, cols = min(L, m2 - bid.row_blk * L), min(L, n2 - bid.col_blk * L)
        ps = pieces.get(bid, [])
        r = np.concatenate([p[0] for p in ps]) if ps else np.zeros(0, np.int64)
        c = np.concatenate([p[1] for p in ps]) if ps else np.zeros(0, np.int64)
        v = np.concatenate([p[2] for p in ps]) if ps else np.zeros(0)
        fmt = Format.DENSE if any_dense[bid] else Format.CSR
        blocks[bid] = MatrixBlock.from_entries(rows, cols, r, c, v, fmt, bid)
        placement[bid] = frozenset((w,))
    return DistMatrix((m2, n2), L, n, blocks, placement)


_COMBINE = {"sum": np.add, "nnz": np.add, "max": np.maximum, "min": np.minimum}


def _reduce_block(fn: str, dim: str, blk: MatrixBlock) -> np.ndarray:
    s = blk.storage
    if dim == "d":
        vec = np.asarray(s.diagonal()).ravel()
        return np.array([_reduce_vec(fn, vec)])
    if dim == "a":
        if fn == "nnz":
            return np.array([float(blk.nnz)])
        if fn == "sum":
            return np.array([float(s.sum())])
        return np.array([float(s.max() if fn == "max" else s.min())])
    axis = 1 if dim == "r" else 0
    if fn == "nnz":
        if blk.fmt.is_sparse:
            return np.asarray((s != 0).sum(axis=axis), dtype=np.float64).ravel()
        return np.count_nonzero(s, axis=axis).astype(np.float64)
    if fn == "sum":
        return np.asarray(s.sum(axis=axis), dtype=np.float64).ravel()
    red = s.max(axis=axis) if fn == "max" else s.min(axis=axis)
    return np.asarray(red.toarray() if hasattr(red, "toarray") else red,
                      dtype=np.float64).ravel()


def _reduce_vec(fn, vec):
    if fn == "sum":
        return float(vec.sum())
    if fn == "nnz":
        return float(np.count_nonzero(vec))
    return float(vec.max() if fn == "max" else vec.min())


def aggregate(fn: str, dim: str, a: DistMatrix, cluster: Cluster) -> DistMatrix:
    """Worker-local partials over held blocks, merged in ascending worker
    order at the first contributing worker.  max/min count implicit zeros."""
    if dim == "d" and a.rows != a.cols:
        from .errors import NonSquareDiagonal
        raise NonSquareDiagonal(f"diagonal aggregate on a {a.rows}x{a.cols} matrix")
    L = a.L

    def seg(bid):
        return {"r": bid.row_blk, "c": bid.col_blk}.get(dim, 0)

    def work(w):
        parts = {}
        for bid in sorted(a.blocks):
            if a.holder(bid) != w or (dim == "d" and bid.row_blk != bid.col_blk):
                continue
            p = _reduce_block(fn, dim, a.blocks[bid])
            k = seg(bid)
            parts[k] = p if k not in parts else _COMBINE[fn](parts[k], p)
        return parts

    partials = cluster.map_workers(work)
    merged, site = {}, {}
    with cluster.ledger.stage(f"aggregate:{fn},{dim}", None):
        for w, parts in enumerate(partials):
            for k, p in parts.items():
                if k not in merged:
                    merged[k], site[k] = p, w
                else:
                    cluster.ledger.move(len(p), w, site[k])
                    merged[k] = _COMBINE[fn](merged[k], p)
    m, n = a.shape
    shape = {"r": (m, 1), "c": (1, n)}.get(dim, (1, 1))
    blocks, placement = {}, {}
    for k in range(grid(shape[0], L) if dim == "r" else grid(shape[1], L) if dim == "c" else 1):
        bid = BlockId(k, 0) if dim != "c" else BlockId(0, k)
        vec = merged.get(k)
        if vec is None:  # only diagonal blocks contribute for 'd'; grid is never empty
            vec = np.zeros(1)
        arr = vec.reshape(-1, 1) if dim != "c" else vec.reshape(1, -1)
        blocks[bid] = MatrixBlock.dense(arr, bid)
        placement[bid] = frozenset((site.get(k, 0),))
    return DistMatrix(shape, L, a.n_workers, blocks, placement)


def _tensor_parts(t: DistTensor):
    """Per-worker (logical coords, values) of a tensor's resident blocks."""
    coords, vals = t.entries()
    w = t.entry_workers()
    return [(coords[w == k], vals[w == k]) for k in range(t.n_workers)]


def _group(coords, vals, fn, counts=None):
    """Reduce values sharing a coordinate; returns (coords, vals, counts)."""
    if len(vals) == 0:
        return coords, vals, np.zeros(0, np.int64)
    uniq, inv = np.unique(coords, axis=0, return_inverse=True)
    inv = inv.ravel()
    cnt = np.ones(len(vals), np.int64) if counts is None else counts
    total = np.bincount(inv, weights=cnt, minlength=len(uniq)).astype(np.int64)
    if fn in ("sum", "nnz"):
        red = np.bincount(inv, weights=vals, minlength=len(uniq))
    else:
        red = np.full(len(uniq), -np.inf if fn == "max" else np.inf)
        (np.maximum if fn == "max" else np.minimum).at(red, inv, vals)
    return uniq, red, total


def tensor_aggregate(fn: str, dim: int, t: DistTensor, cluster: Cluster):
    """Aggregate 1-based dimension ``dim`` away.  An order-3 input gives a
    matrix, an order-4 input an order-3 tensor."""
    keep = [d for d in range(t.order) if d != dim - 1]
    shape = tuple(t.shape[d] for d in keep)
    extent = t.shape[dim - 1]
    n, L = cluster.n, cluster.L

    def work(w_parts):
        coords, vals = w_parts
        v = np.ones(len(vals)) if fn == "nnz" else vals
        return _group(coords[:, keep], v, fn)

    partials = [work(p) for p in _tensor_parts(t)]

    def owner_of(c):
        if len(shape) == 2:
            return (c[:, 0] // L) % n
        return c[:, 0] % n

    with cluster.ledger.stage(f"tensor_aggregate:{fn},d{dim}", None):
        for w, (c, v, _) in enumerate(partials):
            if len(v):
                dst = owner_of(c)
                for d in np.unique(dst):
                    cluster.ledger.move(int((dst == d).sum()), w, int(d))
    c = np.concatenate([p[0] for p in partials])
    v = np.concatenate([p[1] for p in partials])
    k = np.concatenate([p[2] for p in partials])
    c, v, k = _group(c.reshape(-1, len(shape)), v, fn if fn != "nnz" else "sum", k)
    if fn in ("max", "min") and len(v):
        sparse_fiber = k < extent
        v = np.where(sparse_fiber, (np.maximum if fn == "max" else np.minimum)(v, 0.0), v)
    workers = owner_of(c) if len(v) else np.zeros(0, np.int64)
    if len(shape) == 2:
        return _matrix_from_entries(shape, c, v, workers, cluster)
    return build_tensor(shape, c, v, L, n, None, workers, meta={"aggregated": dim})


def stats(ledger, trace=None, result=None, estimates=None) -> dict:
    """JSON-ready run report."""
    out = ledger.to_json()
    out["ops"].setdefault("matmul_block_events", 0)
    out["ops"].setdefault("merge_evals", 0)
    if trace is not None:
        out["rewrite_trace"] = trace.to_json() if hasattr(trace, "to_json") else list(trace)
    if estimates:
        out["joins"] = [e.to_json() for e in estimates]
    if result is not None:
        out["result"] = describe(result)
    return out


def describe(value) -> dict:
    if isinstance(value, DimProjection):
        return {"shape": list(value.shape), "attrs": list(value.attrs),
                "rows": len(value.to_rows())}
    return {"shape": list(value.shape), "nnz": int(value.nnz)}


def execute(plan: Expr, env: Mapping[str, DistMatrix], cluster: Cluster):
    """Evaluate ``plan`` (optimized or not) and return its value."""
    return Executor(env, cluster).run(plan)
