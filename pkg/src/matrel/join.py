"""Join execution over block-partitioned matrices.

Kernels work on one pair of co-located blocks at a time and return global
coordinates.  Every output entry belongs to exactly one block pair, so the
union over pairs is the join result regardless of where pairs run.

Semantics shared by all flavours:

* a position is evaluated when at least one side is nonzero; positions
  where both inputs are zero are never emitted, which requires f(0, 0) = 0
  unless a side is sparsity-inducing (otherwise UndefinedMerge);
* a side whose merge flag is YES is skipped where it is zero;
* value joins (V2V, and the value side of D2V) only match nonzero values,
  compared exactly; the dimension side of D2V matches integer-valued floats;
* output entries equal to 0 are dropped.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .block import BlockId, Format, MatrixBlock, local_transpose
from .bloom import bloom_build
from .cost import (CostEstimate, Scheme, assign_schemes, estimate_cell, join_strategies,
                   strategy_cost)
from .dist import Cluster, DistMatrix, build_tensor, grid, partition
from .errors import ResourceLimit, UndefinedMerge
from .merge import MergeFn, Tri
from .plan import DIM_ATTRS, JoinGamma, join_shape

Ev = Callable[[np.ndarray, np.ndarray], np.ndarray]


def choose_d1(order: int, downstream_dim: Optional[int] = None) -> int:
    """Logical dimension (0-based) stored exactly as D1 of an order-3 join
    output.  Default is the matched dimension (0); with a downstream tensor
    aggregate on dimension ``downstream_dim`` the smallest non-aggregated
    dimension is used."""
    if order != 3:
        raise ValueError("D1 choice applies to order-3 outputs")
    if downstream_dim is None:
        return 0
    return min(d for d in range(3) if d != downstream_dim)


def tensor_layout(order: int, d1: int = 0) -> tuple:
    if order == 4:
        return (0, 1, 2, 3)
    return (d1,) + tuple(d for d in range(3) if d != d1)


# -- block pieces ----------------------------------------------------------------

@dataclass(frozen=True)
class Piece:
    """A block in the orientation a kernel expects, with global offsets."""
    bid: BlockId          # id in the original matrix (for placement)
    blk: MatrixBlock      # possibly transposed
    r0: int
    c0: int

    def nz(self):
        r, c, v = self.blk.entries()
        return r + self.r0, c + self.c0, v

    def dense(self):
        return self.blk.to_dense()


def _piece(m: DistMatrix, bid: BlockId, transpose: bool) -> Piece:
    blk = m.blocks[bid]
    L = m.L
    if transpose:
        return Piece(bid, local_transpose(blk), bid.col_blk * L, bid.row_blk * L)
    return Piece(bid, blk, bid.row_blk * L, bid.col_blk * L)


def _arange_from(start, n):
    return np.arange(start, start + n, dtype=np.int64)


def _expand(counts: np.ndarray):
    """For repeat counts c, return (owner index, offset within group)."""
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(counts)), counts)
    starts = np.cumsum(counts) - counts
    offset = np.arange(total) - np.repeat(starts, counts)
    return owner, offset


def _row_join(ar, br):
    """All index pairs (p, q) with ar[p] == br[q]."""
    order_b = np.argsort(br, kind="stable")
    sb = br[order_b]
    lo = np.searchsorted(sb, ar, "left")
    hi = np.searchsorted(sb, ar, "right")
    p, off = _expand(hi - lo)
    q = order_b[lo[p] + off]
    return p, q


# -- pair kernels -------------------------------------------------------------------
# Each returns (coords, values, evaluations).

def _empty(order):
    return np.zeros((0, order), np.int64), np.zeros(0), 0


def d2d_pair(pa: Piece, pb: Piece, ev: Ev, ix: bool, iy: bool):
    """Rows of both pieces are the matched dimension: out (i, j, k)."""
    ar, ac, av = pa.nz()
    br, bc, bv = pb.nz()
    ja, kb = pa.blk.cols, pb.blk.cols
    parts = []
    if ix and iy:
        p, q = _row_join(ar, br)
        parts.append((ar[p], ac[p], bc[q], av[p], bv[q]))
    else:
        if not iy:  # every A nonzero against the whole B row
            bd = pb.dense()
            i = np.repeat(ar, kb)
            j = np.repeat(ac, kb)
            k = np.tile(_arange_from(pb.c0, kb), len(ar))
            parts.append((i, j, k, np.repeat(av, kb), bd[i - pb.r0, k - pb.c0]))
        if not ix:  # every B nonzero against the whole A row
            ad = pa.dense()
            i = np.repeat(br, ja)
            k = np.repeat(bc, ja)
            j = np.tile(_arange_from(pa.c0, ja), len(br))
            x = ad[i - pa.r0, j - pa.c0]
            keep = x == 0 if not iy else np.ones(len(x), bool)
            parts.append((i[keep], j[keep], k[keep], x[keep], np.repeat(bv, ja)[keep]))
    return _finish(parts, ev, 3)


def cross_pair(pa: Piece, pb: Piece, ev: Ev, ix: bool, iy: bool):
    """Out (i, j, k, l) = f(A_ij, B_kl)."""
    ar, ac, av = pa.nz()
    br, bc, bv = pb.nz()
    parts = []

    def allpos(p: Piece):
        d = p.dense()
        r, c = np.indices(d.shape)
        return r.ravel() + p.r0, c.ravel() + p.c0, d.ravel()

    if ix and iy:
        left = (ar, ac, av)
        right = (br, bc, bv)
        parts.append(_cartesian(left, right))
    else:
        if not iy:
            parts.append(_cartesian((ar, ac, av), allpos(pb)))
        if not ix:
            zr, zc, zv = allpos(pa)
            keep = zv == 0 if not iy else np.ones(len(zv), bool)
            parts.append(_cartesian((zr[keep], zc[keep], zv[keep]), (br, bc, bv)))
    return _finish(parts, ev, 4)


def _cartesian(left, right):
    (ar, ac, av), (br, bc, bv) = left, right
    na, nb = len(av), len(bv)
    p = np.repeat(np.arange(na), nb)
    q = np.tile(np.arange(nb), na)
    return ar[p], ac[p], br[q], bc[q], av[p], bv[q]


def overlay_pair(pa: Piece, pb: Piece, ev: Ev, ix: bool, iy: bool):
    """Pieces cover the same positions: out (i, j) = f(A_ij, B_ij)."""
    ad, bd = pa.dense(), pb.dense()
    if ix and iy:
        mask = (ad != 0) & (bd != 0)
    elif ix:
        mask = ad != 0
    elif iy:
        mask = bd != 0
    else:
        mask = (ad != 0) | (bd != 0)
    r, c = np.nonzero(mask)
    parts = [(r + pa.r0, c + pa.c0, ad[r, c], bd[r, c])]
    return _finish(parts, ev, 2)


def v2v_pair(pa: Piece, pb: Piece, ev: Ev, ix: bool, iy: bool):
    ar, ac, av = pa.nz()
    br, bc, bv = pb.nz()
    p, q = _row_join(av, bv)
    return _finish([(ar[p], ac[p], br[q], bc[q], av[p], bv[q])], ev, 4)


def d2v_pair(pd: Piece, ent, ev: Ev, ind_dim: bool):
    """``pd``'s rows are the matched dimension; ``ent`` = (k, l, v) value-side
    entries whose values v fall inside pd's row range.  Out rows are
    (dim row, dim col, value row, value col) in pd's orientation; ``ev`` is
    called as ev(dim values, value-side values)."""
    k, l, v = ent
    vi = v.astype(np.int64)
    if ind_dim:
        dr, dc, dv = pd.nz()
        p, q = _row_join(vi, dr)
        parts = [(vi[p], dc[q], k[p], l[p], dv[q], v[p])]
    else:
        dd = pd.dense()
        ncol = pd.blk.cols
        p = np.repeat(np.arange(len(v)), ncol)
        j = np.tile(_arange_from(pd.c0, ncol), len(v))
        parts = [(vi[p], j, k[p], l[p], dd[vi[p] - pd.r0, j - pd.c0], v[p])]
    return _finish(parts, ev, 4)


def _finish(parts, ev: Ev, order: int):
    if not parts:
        return _empty(order)
    cols = [np.concatenate([p[i] for p in parts]) for i in range(len(parts[0]))]
    *coord_cols, x, y = cols
    n = len(x)
    if n == 0:
        return _empty(order)
    vals = ev(x, y)
    coords = np.column_stack(coord_cols).astype(np.int64)
    keep = vals != 0
    return coords[keep], vals[keep], n


# -- distributed execution ------------------------------------------------------------

@dataclass
class JoinResult:
    value: object             # DistMatrix (overlays) or DistTensor
    estimate: CostEstimate
    kind: str


def _flags(f: MergeFn, cluster: Cluster):
    if not cluster.sparsity_fast_path:
        return False, False
    return f.inducing_x is Tri.YES, f.inducing_y is Tri.YES


def _check_zero(kind, f, ix, iy):
    if kind in ("v2v", "d2v") or ix or iy:
        return
    z = f.at_zero()
    if not z == 0:
        raise UndefinedMerge(
            f"merge function {f} has f(0, 0) = {z}; the join would have to fill every "
            "position where both inputs are zero")


def _row_counts(m: DistMatrix, axis: int) -> np.ndarray:
    out = np.zeros(m.shape[axis], np.int64)
    for bid, blk in m.blocks.items():
        r, c, _ = blk.entries()
        idx = (r + bid.row_blk * m.L) if axis == 0 else (c + bid.col_blk * m.L)
        np.add.at(out, idx, 1)
    return out


def _nonzero_values(m: DistMatrix) -> np.ndarray:
    vals = [blk.entries()[2] for blk in m.blocks.values()]
    return np.concatenate(vals) if vals else np.zeros(0)


def estimate_output(kind, gamma, a: DistMatrix, b: DistMatrix, ix, iy) -> int:
    """Upper bound on the number of merge evaluations of a join."""
    (m, n), (p, q) = a.shape, b.shape
    na, nb = a.nnz, b.nnz
    if kind == "cross":
        if ix and iy:
            return na * nb
        out = 0
        if not iy:
            out += na * p * q
        if not ix:
            out += m * n * nb
        return out
    if kind == "v2v":
        va, ca = np.unique(_nonzero_values(a), return_counts=True)
        vb, cb = np.unique(_nonzero_values(b), return_counts=True)
        common, ia, ib = np.intersect1d(va, vb, return_indices=True)
        return int(np.dot(ca[ia], cb[ib]))
    if kind.startswith("overlay"):
        return na + nb
    if kind == "d2d":
        (x, y), = gamma.atoms
        ra = _row_counts(a, DIM_ATTRS.index(x))
        rb = _row_counts(b, DIM_ATTRS.index(y))
        other_a = n if x == "RID" else m
        other_b = q if y == "RID" else p
        if ix and iy:
            return int(np.dot(ra, rb))
        out = 0
        if not iy:
            out += int(ra.sum()) * other_b
        if not ix:
            out += int(rb.sum()) * other_a
        return out
    (x, y), = gamma.atoms
    dim_side, val_side, dim_attr = (a, b, x) if x != "VAL" else (b, a, y)
    extent = dim_side.shape[DIM_ATTRS.index(dim_attr)]
    other = dim_side.shape[1 - DIM_ATTRS.index(dim_attr)]
    vals = _nonzero_values(val_side)
    matched = int(np.count_nonzero((vals >= 0) & (vals < extent) & (np.floor(vals) == vals)))
    return matched * other


class _Budget:
    def __init__(self, limit):
        self.limit = limit
        self.used = 0

    def add(self, n):
        self.used += n
        if self.used > self.limit:
            raise ResourceLimit(f"join output exceeds the entry budget of {self.limit}")


def exec_join(gamma: JoinGamma, f: MergeFn, a: DistMatrix, b: DistMatrix, cluster: Cluster,
              downstream_dim: Optional[int] = None, schemes=None,
              strategy: Optional[str] = None) -> JoinResult:
    """Run one join.  Target schemes come from the grid search unless
    ``schemes`` pins them; ``strategy`` pins the block-routing strategy
    (it must be one of the cell's candidates)."""
    kind = gamma.kind
    shape = join_shape(gamma, a.shape, b.shape)
    ix, iy = _flags(f, cluster)
    _check_zero(kind, f, ix, iy)
    bound = estimate_output(kind, gamma, a, b, ix, iy)
    if bound > cluster.entry_budget:
        raise ResourceLimit(
            f"{kind} join would evaluate up to {bound} entries, over the budget of "
            f"{cluster.entry_budget}")
    size_a, size_b = float(a.comm_size), float(b.comm_size)
    eta_a = eta_b = 1.0
    if kind == "d2v":
        eta_a, eta_b = _selectivity(gamma, a, b, cluster.seed)
    cfg = cluster.config(eta_a, eta_b)
    current = (a.scheme, b.scheme)
    if schemes is None:
        est = assign_schemes(kind, gamma, size_a, size_b, current, cfg)
    else:
        est = estimate_cell(kind, gamma, size_a, size_b, current, schemes, cfg)
    if strategy is not None:
        allowed = join_strategies(kind, gamma, est.scheme_a, est.scheme_b)
        if strategy not in allowed:
            raise ValueError(f"{strategy} is not a strategy for this cell: {allowed}")
        est = replace(est, strategy=strategy,
                      join_cost=strategy_cost(strategy, size_a, size_b, cfg))
    ledger = cluster.ledger
    a = partition(a, est.scheme_a, ledger, est.conv_a, "convert:A")
    b = partition(b, est.scheme_b, ledger, est.conv_b, "convert:B")
    budget = _Budget(cluster.entry_budget)
    with ledger.stage(f"join:{kind}", est.join_cost, strategy=est.strategy,
                      schemes=[est.scheme_a.value, est.scheme_b.value]):
        if kind == "d2v":
            per_worker = _run_d2v(gamma, f, a, b, est.strategy, cluster, ix, iy, budget)
        else:
            per_worker = _run_pairs(kind, gamma, f, a, b, est.strategy, cluster, ix, iy,
                                    budget)
    coords, vals, workers = [], [], []
    for w, (c, v) in enumerate(per_worker):
        coords.append(c)
        vals.append(v)
        workers.append(np.full(len(v), w, np.int64))
    order = len(shape)
    coords = np.concatenate(coords) if coords else np.zeros((0, order), np.int64)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    workers = np.concatenate(workers) if workers else np.zeros(0, np.int64)
    if order == 2:
        value = _matrix_from_entries(shape, coords, vals, workers, cluster)
    else:
        d1 = choose_d1(3, downstream_dim) if order == 3 else 0
        value = build_tensor(shape, coords, vals, cluster.L, cluster.n,
                             tensor_layout(order, d1), workers,
                             meta={"kind": kind, "gamma": str(gamma)})
    return JoinResult(value, est, kind)


def _selectivity(gamma, a, b, seed):
    from .cost import valid_index_fraction
    (x, y), = gamma.atoms
    if x != "VAL":
        dim_side, val_side, attr, which = a, b, x, "b"
    else:
        dim_side, val_side, attr, which = b, a, y, "a"
    extent = dim_side.shape[DIM_ATTRS.index(attr)]
    vals = _nonzero_values(val_side)
    size = val_side.comm_size
    eta = valid_index_fraction(vals, extent, seed) * len(vals) / size if size else 0.0
    eta = min(1.0, eta)
    return (1.0, eta) if which == "b" else (eta, 1.0)


def _matrix_from_entries(shape, coords, vals, workers, cluster) -> DistMatrix:
    L, n = cluster.L, cluster.n
    m, k = shape
    blocks, placement = {}, {}
    br = coords[:, 0] // L if len(vals) else np.zeros(0, np.int64)
    bc = coords[:, 1] // L if len(vals) else np.zeros(0, np.int64)
    for i in range(grid(m, L)):
        for j in range(grid(k, L)):
            sel = np.nonzero((br == i) & (bc == j))[0]
            rows, cols = min(L, m - i * L), min(L, k - j * L)
            bid = BlockId(i, j)
            blk = MatrixBlock.from_entries(rows, cols, coords[sel, 0] - i * L,
                                           coords[sel, 1] - j * L, vals[sel], Format.CSR, bid)
            if blk.nnz > 0.5 * rows * cols:
                blk = MatrixBlock.dense(blk.to_dense(), bid)
            blocks[bid] = blk
            placement[bid] = frozenset((int(workers[sel[0]]) if len(sel) else i % n,))
    return DistMatrix((m, k), L, n, blocks, placement)


def _ev_for(f: MergeFn, swap: bool = False) -> Ev:
    if swap:
        return lambda dim_vals, val_vals: f(val_vals, dim_vals)
    return lambda x, y: f(x, y)


def _run_pairs(kind, gamma, f, a, b, strategy, cluster, ix, iy, budget):
    """Cross, V2V, D2D and overlay joins: enumerate block pairs, route them
    per strategy, run kernels per worker."""
    n = cluster.n
    ledger = cluster.ledger
    ta = tb = False
    if kind == "d2d":
        (x, y), = gamma.atoms
        ta, tb = x == "CID", y == "CID"
        kernel = d2d_pair
    elif kind == "overlay_transpose":
        tb = True
        kernel = overlay_pair
    elif kind == "overlay_direct":
        kernel = overlay_pair
    elif kind == "v2v":
        kernel = v2v_pair
    else:
        kernel = cross_pair

    pairs = _block_pairs(kind, a, b, ta, tb, ix, iy)
    # bloom prefilter for value joins
    probes_without = len(pairs)
    if kind == "v2v" and cluster.bloom:
        pairs = _bloom_filter_pairs(pairs, a, b, f, cluster)
    if kind == "v2v":
        ledger.count("bloom_pairs_considered", probes_without)
        ledger.count("nested_loop_probes", len(pairs))

    where = _route(strategy, pairs, a, b, kind, gamma, n, ledger)
    tasks = [[] for _ in range(n)]
    for (ba, bb), w in zip(pairs, where):
        tasks[w].append((ba, bb))

    ev = _ev_for(f)

    def work(w):
        cs, vs, evals = [], [], 0
        for ba, bb in tasks[w]:
            c, v, e = kernel(_piece(a, ba, ta), _piece(b, bb, tb), ev, ix, iy)
            cs.append(c)
            vs.append(v)
            evals += e
        return cs, vs, evals

    results = cluster.map_workers(work)
    out = []
    order = 2 if kind.startswith("overlay") else (3 if kind == "d2d" else 4)
    for cs, vs, evals in results:
        ledger.count("merge_evals", evals)
        budget.add(sum(len(v) for v in vs))
        c = np.concatenate(cs) if cs else np.zeros((0, order), np.int64)
        v = np.concatenate(vs) if vs else np.zeros(0)
        out.append((c.reshape(-1, order), v))
    return out


def _block_pairs(kind, a, b, ta, tb, ix, iy):
    na = {bid: a.blocks[bid].nnz for bid in a.blocks}
    nb = {bid: b.blocks[bid].nnz for bid in b.blocks}

    def useful(ba, bb):
        ea, eb = na[ba] > 0, nb[bb] > 0
        if kind == "v2v" or (ix and iy):
            return ea and eb
        if ix:
            return ea
        if iy:
            return eb
        return ea or eb

    pairs = []
    if kind == "overlay_direct":
        for bid in sorted(a.blocks):
            if useful(bid, bid):
                pairs.append((bid, bid))
    elif kind == "overlay_transpose":
        for bid in sorted(a.blocks):
            if useful(bid, bid.transposed()):
                pairs.append((bid, bid.transposed()))
    elif kind == "d2d":
        by_b = {}
        for bid in sorted(b.blocks):
            by_b.setdefault(bid.col_blk if tb else bid.row_blk, []).append(bid)
        for bid in sorted(a.blocks):
            key = bid.col_blk if ta else bid.row_blk
            for bb in by_b.get(key, []):
                if useful(bid, bb):
                    pairs.append((bid, bb))
    else:
        bs = sorted(b.blocks)
        for ba in sorted(a.blocks):
            for bb in bs:
                if useful(ba, bb):
                    pairs.append((ba, bb))
    return pairs


def _bloom_filter_pairs(pairs, a, b, f, cluster):
    filters = {}
    distinct_a = {}
    keep = []
    for ba, bb in pairs:
        if bb not in filters:
            blk = b.blocks[bb]
            inc = (not blk.fmt.is_sparse) and f.inducing_y is not Tri.YES
            filters[bb] = bloom_build(blk.entries(include_zeros=inc)[2], cluster.bloom_fpr,
                                      include_zeros=inc)
        if ba not in distinct_a:
            distinct_a[ba] = np.unique(a.blocks[ba].entries()[2])
        if filters[bb].probe_many(distinct_a[ba]).any():
            keep.append((ba, bb))
    return keep


def _matched_index(bid: BlockId, attr: str) -> int:
    return bid.row_blk if attr == "RID" else bid.col_blk


def _route(strategy, pairs, a, b, kind, gamma, n, ledger) -> list:
    """Worker for each block pair; records the block copies the strategy
    needs."""
    if strategy == "local":
        sa, sb = a.scheme, b.scheme
        out = []
        for ba, bb in pairs:
            if sa is Scheme.BCAST and sb is Scheme.BCAST:
                out.append(ba.row_blk % n)
            elif sa is Scheme.BCAST:
                out.append(b.holder(bb))
            else:
                out.append(a.holder(ba))
        return out
    if strategy in ("replicate_a", "replicate_b"):
        src, other, pick = (a, b, 1) if strategy == "replicate_a" else (b, a, 0)
        everyone = frozenset(range(n))
        for bid in sorted(src.blocks):
            for w in sorted(everyone - src.placement[bid]):
                ledger.move(src.blocks[bid].comm_size, src.holder(bid), w)
        return [other.holder(p[pick]) for p in pairs]
    if strategy in ("route_a", "route_b"):
        mover, stay, mi = (b, a, 1) if strategy == "route_b" else (a, b, 0)
        dest = {}
        for p in pairs:
            d = stay.holder(p[1 - mi])
            prev = dest.setdefault(p[mi], d)
            if prev != d:
                raise RuntimeError("routed block has partners on two workers")
        for bid in sorted(dest):
            ledger.move(mover.blocks[bid].comm_size, mover.holder(bid), dest[bid])
        return [stay.holder(p[1 - mi]) for p in pairs]
    raise ValueError(f"strategy {strategy} does not apply to {kind}")


def _run_d2v(gamma, f, a, b, strategy, cluster, ix, iy, budget):
    (x, y), = gamma.atoms
    n, L = cluster.n, cluster.L
    ledger = cluster.ledger
    if x != "VAL":
        dim, val, attr, dim_is_a = a, b, x, True
    else:
        dim, val, attr, dim_is_a = b, a, y, False
    t = attr == "CID"
    extent = dim.shape[DIM_ATTRS.index(attr)]
    ind_dim = ix if dim_is_a else iy
    ev = _ev_for(f, swap=not dim_is_a)
    # matched entries per value-side block, grouped by target dim block row
    shipments = {}  # (val block, dim block row) -> (k, l, v)
    for vb in sorted(val.blocks):
        k, l, v = val.blocks[vb].entries()
        k = k + vb.row_blk * L
        l = l + vb.col_blk * L
        ok = (v >= 0) & (v < extent) & (np.floor(v) == v)
        if not ok.any():
            continue
        k, l, v = k[ok], l[ok], v[ok]
        target = (v // L).astype(np.int64)
        for tr in np.unique(target):
            s = target == tr
            shipments[(vb, int(tr))] = (k[s], l[s], v[s])
    dim_rows = {}
    for db in sorted(dim.blocks):
        dim_rows.setdefault(_matched_index(db, attr), []).append(db)

    tasks = [[] for _ in range(n)]  # (dim block, shipment key)
    dim_scheme = dim.scheme
    if strategy == "local" or strategy.startswith("replicate"):
        if strategy.startswith("replicate"):
            everyone = frozenset(range(n))
            for bid in sorted(dim.blocks):
                for w in sorted(everyone - dim.placement[bid]):
                    ledger.move(dim.blocks[bid].comm_size, dim.holder(bid), w)
        for key in sorted(shipments):
            vb, tr = key
            for db in dim_rows.get(tr, []):
                if dim_scheme is Scheme.BCAST or strategy.startswith("replicate"):
                    w = val.holder(vb)
                else:  # value side broadcast: run where the dim block lives
                    w = dim.holder(db)
                tasks[w].append((db, key))
    else:
        to_all = strategy.endswith("_all")
        for key in sorted(shipments):
            vb, tr = key
            cnt = len(shipments[key][2])
            src = val.holder(vb)
            dests = range(n) if to_all else [tr % n]
            for w in dests:
                ledger.move(cnt, src, w)
            for db in dim_rows.get(tr, []):
                tasks[dim.holder(db)].append((db, key))

    def work(w):
        cs, vs, evals = [], [], 0
        for db, key in tasks[w]:
            c, v, e = d2v_pair(_piece(dim, db, t), shipments[key], ev, ind_dim)
            if t:  # back to the dim side's original (row, col)
                c = c[:, [1, 0, 2, 3]]
            if not dim_is_a:
                c = c[:, [2, 3, 0, 1]]
            cs.append(c)
            vs.append(v)
            evals += e
        return cs, vs, evals

    out = []
    for cs, vs, evals in cluster.map_workers(work):
        ledger.count("merge_evals", evals)
        budget.add(sum(len(v) for v in vs))
        c = np.concatenate(cs) if cs else np.zeros((0, 4), np.int64)
        v = np.concatenate(vs) if vs else np.zeros(0)
        out.append((c.reshape(-1, 4), v))
    return out
