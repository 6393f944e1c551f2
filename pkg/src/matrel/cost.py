"""Communication cost model for joins and the partition-scheme grid search.

All costs are in matrix entries: ``|A|`` is ``m*n`` for a dense matrix and
``nnz(A)`` for a sparse one.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import IllegalScheme
from .plan import JoinGamma

JOIN_KINDS = ("cross", "v2v", "overlay_direct", "overlay_transpose", "d2d", "d2v")
# matrices with more entries than this are sampled when estimating selectivity
ETA_EXACT_LIMIT = 100_000
ETA_SAMPLE_FRACTION = 0.01


class Scheme(enum.Enum):
    ROW = "r"
    COL = "c"
    BCAST = "b"
    RANDOM = "xi"

    @classmethod
    def parse(cls, s) -> "Scheme":
        if isinstance(s, Scheme):
            return s
        for m in cls:
            if m.value == s or m.name.lower() == str(s).lower():
                return m
        if s in ("ξ", "random"):
            return cls.RANDOM
        raise IllegalScheme(f"unknown partition scheme {s!r}")

    def __str__(self):
        return self.value


TARGETS = (Scheme.ROW, Scheme.COL, Scheme.BCAST)
# grid-search order; used as the final tie-break
PAIR_ORDER = [
    (Scheme.ROW, Scheme.ROW), (Scheme.ROW, Scheme.COL), (Scheme.COL, Scheme.ROW),
    (Scheme.COL, Scheme.COL), (Scheme.ROW, Scheme.BCAST), (Scheme.COL, Scheme.BCAST),
    (Scheme.BCAST, Scheme.ROW), (Scheme.BCAST, Scheme.COL), (Scheme.BCAST, Scheme.BCAST),
]


@dataclass(frozen=True)
class ClusterConfig:
    n_workers: int = 4
    block_size: int = 1000
    eta_a: float = 1.0
    eta_b: float = 1.0
    broadcast_threshold: Optional[float] = None

    def __post_init__(self):
        if self.n_workers < 1:
            raise ValueError("need at least one worker")
        for eta in (self.eta_a, self.eta_b):
            if not 0.0 <= eta <= 1.0:
                raise ValueError("selectivities must lie in [0, 1]")

    @property
    def bcast_limit(self) -> float:
        if self.broadcast_threshold is not None:
            return self.broadcast_threshold
        return 2.0 * self.block_size ** 2


def matrix_size(x) -> float:
    """|A|: mn for dense, nnz for sparse.  Accepts a plan Meta, anything with
    a ``comm_size`` attribute, or an (rows, cols, nnz, sparse) tuple."""
    if hasattr(x, "comm_size"):
        return float(x.comm_size)
    if hasattr(x, "sparse") and hasattr(x, "nnz") and hasattr(x, "size"):
        return float(x.nnz if x.sparse else x.size)
    rows, cols, nnz, sparse = x
    return float(nnz if sparse else rows * cols)


# -- join costs ----------------------------------------------------------------

def _scheme_for(attr: str) -> Scheme:
    return Scheme.ROW if attr == "RID" else Scheme.COL


def _check_pair(sa: Scheme, sb: Scheme):
    for s in (sa, sb):
        if s not in TARGETS:
            raise IllegalScheme(f"join inputs must be r, c or b partitioned, got {s}")


def join_strategies(kind: str, gamma: Optional[JoinGamma], sa, sb) -> tuple[str, ...]:
    """Candidate block-routing strategies for one (gamma, s_A, s_B) cell.

    local: no movement; replicate_X: every block of X to every other worker;
    route_X: each block of X to the worker holding its join partner;
    ship_X: matching entries of X to the worker holding the matched row or
    column; ship_X_all: matching entries of X to every worker.
    """
    sa, sb = Scheme.parse(sa), Scheme.parse(sb)
    _check_pair(sa, sb)
    if kind not in JOIN_KINDS:
        raise ValueError(f"unknown join kind {kind!r}")
    if Scheme.BCAST in (sa, sb):
        return ("local",)
    if kind in ("cross", "v2v"):
        return ("replicate_a", "replicate_b")
    if kind == "overlay_direct":
        return ("local",) if sa == sb else ("route_a", "route_b")
    if kind == "overlay_transpose":
        return ("local",) if sa != sb else ("route_a", "route_b")
    (x, y), = gamma.atoms
    if kind == "d2d":
        al_a = sa == _scheme_for(x)
        al_b = sb == _scheme_for(y)
        if al_a and al_b:
            return ("local",)
        if al_a:
            return ("replicate_a", "route_b")
        if al_b:
            return ("route_a", "replicate_b")
        return ("replicate_a", "replicate_b")
    if x != "VAL":  # dimension of A against values of B
        return ("replicate_a", "ship_b" if sa == _scheme_for(x) else "ship_b_all")
    return ("ship_a" if sb == _scheme_for(y) else "ship_a_all", "replicate_b")


def strategy_cost(strategy: str, size_a: float, size_b: float, cfg: ClusterConfig) -> float:
    n = cfg.n_workers
    side, size, eta = ("a", size_a, cfg.eta_a) if strategy.endswith(("_a", "_a_all")) \
        else ("b", size_b, cfg.eta_b)
    if strategy == "local":
        return 0.0
    if strategy.startswith("replicate"):
        return (n - 1) * size
    if strategy.startswith("route"):
        return (n - 1) / n * size
    if strategy.endswith("_all"):
        return n * eta * size
    if strategy.startswith("ship"):
        return eta * size
    raise ValueError(f"unknown strategy {strategy!r}")


def best_strategy(kind, gamma, sa, sb, size_a, size_b, cfg) -> tuple[str, float]:
    """Cheapest strategy for the cell; ties go to the first listed."""
    best = None
    for s in join_strategies(kind, gamma, sa, sb):
        c = strategy_cost(s, size_a, size_b, cfg)
        if best is None or c < best[1]:
            best = (s, c)
    return best


def join_comm_cost(kind, gamma, sa, sb, size_a, size_b, cfg: ClusterConfig) -> float:
    return best_strategy(kind, gamma, sa, sb, size_a, size_b, cfg)[1]


def conversion_cost(size: float, frm, to, cfg: ClusterConfig) -> float:
    frm, to = Scheme.parse(frm), Scheme.parse(to)
    if to is Scheme.RANDOM:
        raise IllegalScheme("random placement is never a conversion target")
    n = cfg.n_workers
    if frm is to or frm is Scheme.BCAST:
        return 0.0
    if frm is Scheme.RANDOM:
        return n * size if to is Scheme.BCAST else float(size)
    if to is Scheme.BCAST:
        return (n - 1) * size
    return (n - 1) / n * size


# -- grid search -------------------------------------------------------------------

@dataclass(frozen=True)
class CostEstimate:
    scheme_a: Scheme
    scheme_b: Scheme
    strategy: str
    join_cost: float
    conv_a: float
    conv_b: float

    @property
    def total(self) -> float:
        return self.join_cost + self.conv_a + self.conv_b

    @property
    def predicted_entries_moved(self) -> float:
        return self.total

    def to_json(self):
        return {"schemes": [self.scheme_a.value, self.scheme_b.value],
                "strategy": self.strategy, "join": self.join_cost,
                "convert_a": self.conv_a, "convert_b": self.conv_b, "total": self.total}


def estimate_cell(kind, gamma, size_a, size_b, current, target, cfg) -> CostEstimate:
    ca, cb = (Scheme.parse(s) for s in current)
    ta, tb = (Scheme.parse(s) for s in target)
    strat, jc = best_strategy(kind, gamma, ta, tb, size_a, size_b, cfg)
    return CostEstimate(ta, tb, strat, jc, conversion_cost(size_a, ca, ta, cfg),
                        conversion_cost(size_b, cb, tb, cfg))


def assign_schemes(kind: str, gamma, size_a: float, size_b: float, current,
                   cfg: ClusterConfig) -> CostEstimate:
    """Grid search over the target pairs in {r, c, b}^2.

    Broadcast is only considered for a side whose size is within the
    broadcast threshold or which is already broadcast.  Ties prefer the lower
    conversion total, then the fixed pair order.
    """
    ca, cb = (Scheme.parse(s) for s in current)
    best, best_key = None, None
    for rank, (ta, tb) in enumerate(PAIR_ORDER):
        if ta is Scheme.BCAST and not (size_a <= cfg.bcast_limit or ca is Scheme.BCAST):
            continue
        if tb is Scheme.BCAST and not (size_b <= cfg.bcast_limit or cb is Scheme.BCAST):
            continue
        est = estimate_cell(kind, gamma, size_a, size_b, (ca, cb), (ta, tb), cfg)
        key = (est.total, est.conv_a + est.conv_b, rank)
        if best_key is None or key < best_key:
            best, best_key = est, key
    return best


# -- selectivity ---------------------------------------------------------------------

def valid_index_fraction(values: np.ndarray, extent: int, seed: int = 0) -> float:
    """Share of ``values`` that are integers in [0, extent).  Exact for up to
    ETA_EXACT_LIMIT values, a seeded 1% sample otherwise."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0
    if values.size > ETA_EXACT_LIMIT:
        rng = np.random.default_rng(seed)
        k = max(1, int(values.size * ETA_SAMPLE_FRACTION))
        values = rng.choice(values, size=k, replace=False)
    ok = (values >= 0) & (values < extent) & (np.floor(values) == values)
    return float(np.count_nonzero(ok)) / values.size
